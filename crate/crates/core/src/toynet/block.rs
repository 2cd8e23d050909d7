//! Block kinds: parameter layout, initialisation and forward recording.
//!
//! Every kind is residual and maps `[B, C, H, W]` to the same shape. Each one
//! ends in a zero-initialised 1x1 projection `proj`, so a freshly built block
//! is the identity map.
//!
//! | kind | body |
//! |------|------|
//! | base | norm, 1x1 expand to 2C, 3x3 depthwise, simple gate, channel attention, 1x1 proj |
//! | alt1 | 3x3 conv, relu, 1x1 proj |
//! | alt2 | 3x3 depthwise, 1x1 proj (depthwise-separable) |
//! | alt3 | base without channel attention |
//! | alt4 | base with attention replaced by a learned per-channel scale |
//! | alt5 | 1x1 proj only |
//! | alt6 | learned per-channel gate on the identity plus 1x1 proj |

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::config::BlockKind;
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Init {
    /// Uniform in `+-1/sqrt(fan_in)`.
    Fan(usize),
    Zeros,
    Ones,
}

/// Parameter names, shapes and initialisers of a block of `kind` with `c` channels.
pub(crate) fn layout(kind: BlockKind, c: usize) -> Vec<(&'static str, Vec<usize>, Init)> {
    let norm = [
        ("ln.gain", vec![c], Init::Ones),
        ("ln.offset", vec![c], Init::Zeros),
    ];
    let expand_gate = [
        ("expand.w", vec![2 * c, c, 1, 1], Init::Fan(c)),
        ("expand.b", vec![2 * c], Init::Zeros),
        ("dw.w", vec![2 * c, 1, 3, 3], Init::Fan(9)),
        ("dw.b", vec![2 * c], Init::Zeros),
    ];
    let proj = [
        ("proj.w", vec![c, c, 1, 1], Init::Zeros),
        ("proj.b", vec![c], Init::Zeros),
    ];
    let mut out: Vec<(&'static str, Vec<usize>, Init)> = Vec::new();
    match kind {
        BlockKind::Base => {
            out.extend(norm);
            out.extend(expand_gate);
            out.push(("sca.w", vec![c, c, 1, 1], Init::Fan(c)));
            out.push(("sca.b", vec![c], Init::Zeros));
        }
        BlockKind::Alt1 => {
            out.push(("conv.w", vec![c, c, 3, 3], Init::Fan(9 * c)));
            out.push(("conv.b", vec![c], Init::Zeros));
        }
        BlockKind::Alt2 => {
            out.push(("dw.w", vec![c, 1, 3, 3], Init::Fan(9)));
            out.push(("dw.b", vec![c], Init::Zeros));
        }
        BlockKind::Alt3 => {
            out.extend(norm);
            out.extend(expand_gate);
        }
        BlockKind::Alt4 => {
            out.extend(norm);
            out.extend(expand_gate);
            out.push(("scale", vec![c], Init::Ones));
        }
        BlockKind::Alt5 => {}
        BlockKind::Alt6 => out.push(("gate", vec![c], Init::Ones)),
    }
    out.extend(proj);
    out
}

pub(crate) fn init_tensor(shape: &[usize], init: Init, rng: &mut ChaCha8Rng) -> Tensor {
    match init {
        Init::Zeros => Tensor::zeros(shape),
        Init::Ones => Tensor::full(shape, 1.0),
        Init::Fan(fan_in) => {
            let bound = 1.0 / (fan_in as f64).sqrt();
            Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
        }
    }
}

/// A standalone block, e.g. a distilled surrogate.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub kind: BlockKind,
    pub channels: usize,
    pub params: BTreeMap<String, Tensor>,
}

impl Block {
    pub fn init(kind: BlockKind, channels: usize, rng: &mut ChaCha8Rng) -> Self {
        let params = layout(kind, channels)
            .into_iter()
            .map(|(name, shape, init)| (name.to_string(), init_tensor(&shape, init, rng)))
            .collect();
        Self {
            kind,
            channels,
            params,
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Records the block on `tape`. Returns the output and the parameter leaves.
    pub fn trace(&self, tape: &mut Tape, x: Var) -> Result<(Var, BTreeMap<String, Var>)> {
        let vars: BTreeMap<String, Var> = self
            .params
            .iter()
            .map(|(k, v)| (k.clone(), tape.leaf(v.clone())))
            .collect();
        let y = block_forward(tape, self.kind, x, &|name| lookup(&vars, name), false)?;
        Ok((y, vars))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let (y, _) = self.trace(&mut tape, xv)?;
        Ok(tape.value(y).clone())
    }
}

fn lookup(vars: &BTreeMap<String, Var>, name: &str) -> Result<Var> {
    vars.get(name)
        .copied()
        .ok_or_else(|| Error::InvalidConfig(format!("missing block parameter {name}")))
}

/// Records one block of `kind` applied to `x`. `param` resolves block-local
/// parameter names such as `"proj.w"`. With `bypass_norm` the layer norm is
/// treated as the identity.
pub(crate) fn block_forward(
    tape: &mut Tape,
    kind: BlockKind,
    x: Var,
    param: &dyn Fn(&str) -> Result<Var>,
    bypass_norm: bool,
) -> Result<Var> {
    let norm = |tape: &mut Tape, x: Var| -> Result<Var> {
        if bypass_norm {
            Ok(x)
        } else {
            tape.layer_norm_channels(x, param("ln.gain")?, param("ln.offset")?, NORM_EPS)
        }
    };
    let gated = |tape: &mut Tape, x: Var| -> Result<Var> {
        let h = norm(tape, x)?;
        let h = tape.conv2d(h, param("expand.w")?, param("expand.b")?, 1, 0)?;
        let h = tape.depthwise_conv2d(h, param("dw.w")?, param("dw.b")?, 1)?;
        tape.simple_gate(h)
    };
    let body = match kind {
        BlockKind::Base => {
            let h = gated(tape, x)?;
            let pooled = tape.global_avg_pool(h)?;
            let attn = tape.conv2d(pooled, param("sca.w")?, param("sca.b")?, 1, 0)?;
            tape.mul(h, attn)?
        }
        BlockKind::Alt1 => {
            let h = tape.conv2d(x, param("conv.w")?, param("conv.b")?, 1, 1)?;
            tape.relu(h)
        }
        BlockKind::Alt2 => tape.depthwise_conv2d(x, param("dw.w")?, param("dw.b")?, 1)?,
        BlockKind::Alt3 => gated(tape, x)?,
        BlockKind::Alt4 => {
            let h = gated(tape, x)?;
            tape.mul(h, param("scale")?)?
        }
        BlockKind::Alt5 => x,
        BlockKind::Alt6 => x,
    };
    let correction = tape.conv2d(body, param("proj.w")?, param("proj.b")?, 1, 0)?;
    let skip = match kind {
        BlockKind::Alt6 => tape.mul(x, param("gate")?)?,
        _ => x,
    };
    tape.add(skip, correction)
}
