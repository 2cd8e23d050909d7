use std::collections::{BTreeMap, BTreeSet};

use super::block::{block_forward, init_tensor, layout, Block, Init};
use super::config::{BlockKind, NetworkConfig, SlotRole};
use crate::error::{Error, Result};
use crate::seed::rng_for;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// A U-shaped restoration network with a global residual: `out = x + head(features)`.
///
/// All parameters live in one name-ordered map. Slot parameters are prefixed
/// with `"<slot_id>.<block index>."`.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    config: NetworkConfig,
    params: BTreeMap<String, Tensor>,
}

#[derive(Clone, Debug, Default)]
pub struct ForwardOptions {
    /// Treat every layer norm as the identity.
    pub bypass_norm: bool,
    /// Slots replaced by the identity map.
    pub skip_slots: BTreeSet<String>,
    /// Feed this tensor into the named slot instead of the upstream activation.
    pub input_override: Option<(String, Tensor)>,
}

#[derive(Clone, Copy, Debug)]
pub struct SlotTrace {
    pub input: Var,
    pub output: Var,
}

#[derive(Clone, Debug)]
pub struct Trace {
    pub output: Var,
    pub params: BTreeMap<String, Var>,
    /// Slot activations, in slot order.
    pub slots: Vec<(String, SlotTrace)>,
}

impl Trace {
    pub fn slot(&self, id: &str) -> Option<SlotTrace> {
        self.slots.iter().find(|(s, _)| s == id).map(|(_, t)| *t)
    }
}

pub(crate) fn slot_prefix(slot: &str) -> String {
    format!("{slot}.")
}

fn slot_block_params(slot: &str, index: usize, kind: BlockKind, channels: usize, seed: u64) -> Vec<(String, Tensor)> {
    let mut rng = rng_for(seed, &format!("{slot}.{index}.{kind}"));
    layout(kind, channels)
        .into_iter()
        .map(|(name, shape, init)| (format!("{slot}.{index}.{name}"), init_tensor(&shape, init, &mut rng)))
        .collect()
}

impl Network {
    /// Deterministically initialises every parameter from `seed`. Each module
    /// draws from its own stream, so changing one slot leaves the others intact.
    pub fn build(config: &NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = BTreeMap::new();
        let mut put = |name: String, shape: Vec<usize>, init: Init, label: &str| {
            let mut rng = rng_for(seed, label);
            params.insert(name, init_tensor(&shape, init, &mut rng));
        };
        let (w, cin) = (config.width, config.in_channels);
        put("stem.w".into(), vec![w, cin, 3, 3], Init::Fan(9 * cin), "stem.w");
        put("stem.b".into(), vec![w], Init::Zeros, "stem.b");
        for l in 0..config.levels() {
            let c = w << l;
            put(format!("down{l}.w"), vec![2 * c, c, 2, 2], Init::Fan(4 * c), &format!("down{l}.w"));
            put(format!("down{l}.b"), vec![2 * c], Init::Zeros, "");
            put(format!("up{l}.w"), vec![c, 2 * c, 1, 1], Init::Fan(2 * c), &format!("up{l}.w"));
            put(format!("up{l}.b"), vec![c], Init::Zeros, "");
        }
        put("head.w".into(), vec![cin, w, 3, 3], Init::Zeros, "");
        put("head.b".into(), vec![cin], Init::Zeros, "");

        for slot in &config.slots {
            let blocks = if slot.kind == BlockKind::Base { slot.depth } else { 1 };
            for i in 0..blocks {
                params.extend(slot_block_params(&slot.id, i, slot.kind, slot.channels, seed));
            }
        }
        Ok(Self {
            config: config.clone(),
            params,
        })
    }

    /// Reassembles a network from stored parameters, checking the layout.
    pub fn from_parts(config: NetworkConfig, params: BTreeMap<String, Tensor>) -> Result<Self> {
        let reference = Self::build(&config, 0)?;
        let same_layout = reference.params.len() == params.len()
            && reference
                .params
                .iter()
                .all(|(k, v)| params.get(k).is_some_and(|p| p.shape() == v.shape()));
        if !same_layout {
            return Err(Error::InvalidConfig(
                "stored parameters do not match the network config".into(),
            ));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn slot_param_names(&self, slot: &str) -> Vec<&str> {
        let prefix = slot_prefix(slot);
        self.params
            .keys()
            .filter(|k| k.starts_with(&prefix))
            .map(String::as_str)
            .collect()
    }

    pub fn slot_param_count(&self, slot: &str) -> usize {
        self.slot_param_names(slot).iter().map(|k| self.params[*k].len()).sum()
    }

    /// The blocks currently occupying `slot`.
    pub fn slot_blocks(&self, slot: &str) -> Result<Vec<Block>> {
        let spec = self
            .config
            .slot(slot)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown slot {slot}")))?;
        let count = if spec.kind == BlockKind::Base { spec.depth } else { 1 };
        (0..count)
            .map(|i| {
                let prefix = format!("{slot}.{i}.");
                let params = self
                    .params
                    .iter()
                    .filter_map(|(k, v)| k.strip_prefix(&prefix).map(|n| (n.to_string(), v.clone())))
                    .collect();
                Ok(Block {
                    kind: spec.kind,
                    channels: spec.channels,
                    params,
                })
            })
            .collect()
    }

    /// Replaces the contents of `slot` with a single block.
    pub fn set_slot_block(&mut self, slot: &str, block: &Block) -> Result<()> {
        let spec = self
            .config
            .slot_mut(slot)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown slot {slot}")))?;
        if spec.channels != block.channels {
            return Err(Error::shape(format!(
                "slot {slot} has {} channels, block has {}",
                spec.channels, block.channels
            )));
        }
        if spec.frozen && block.kind != BlockKind::Base {
            return Err(Error::InvalidConfig(format!("slot {slot} is frozen")));
        }
        if block.kind == BlockKind::Base && spec.depth != 1 {
            return Err(Error::InvalidConfig(format!(
                "slot {slot} stacks {} base blocks; a single block cannot restore it",
                spec.depth
            )));
        }
        spec.kind = block.kind;
        let prefix = slot_prefix(slot);
        self.params.retain(|k, _| !k.starts_with(&prefix));
        for (name, value) in &block.params {
            self.params.insert(format!("{slot}.0.{name}"), value.clone());
        }
        Ok(())
    }

    /// Applies `f` to every parameter, e.g. `abs` for data-free scoring.
    pub fn map_params(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            config: self.config.clone(),
            params: self.params.iter().map(|(k, v)| (k.clone(), v.map(&f))).collect(),
        }
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.params.values().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::shape(format!(
                "{} values for {} parameters",
                flat.len(),
                self.param_count()
            )));
        }
        let mut offset = 0;
        for t in self.params.values_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Flat-vector offsets of each parameter tensor, in name order.
    pub fn param_offsets(&self) -> Vec<(String, std::ops::Range<usize>)> {
        let mut offset = 0;
        self.params
            .iter()
            .map(|(k, t)| {
                let r = offset..offset + t.len();
                offset += t.len();
                (k.clone(), r)
            })
            .collect()
    }

    /// Records a forward pass of `x` on `tape`.
    pub fn trace(&self, tape: &mut Tape, x: &Tensor, opts: &ForwardOptions) -> Result<Trace> {
        let (_, c, h, w) = x.dims4()?;
        if c != self.config.in_channels {
            return Err(Error::shape(format!(
                "network expects {} input channels, got {c}",
                self.config.in_channels
            )));
        }
        let levels = self.config.levels();
        if h % (1 << levels) != 0 || w % (1 << levels) != 0 {
            return Err(Error::shape(format!(
                "input {h}x{w} is not divisible by {} for {levels} downsamples",
                1 << levels
            )));
        }
        let params: BTreeMap<String, Var> = self
            .params
            .iter()
            .map(|(k, v)| (k.clone(), tape.leaf(v.clone())))
            .collect();
        let p = |name: &str| -> Result<Var> {
            params
                .get(name)
                .copied()
                .ok_or_else(|| Error::InvalidConfig(format!("missing parameter {name}")))
        };

        let input = tape.leaf(x.clone());
        let mut hcur = tape.conv2d(input, p("stem.w")?, p("stem.b")?, 1, 1)?;
        let mut skips = Vec::with_capacity(levels);
        let mut slots = Vec::with_capacity(self.config.slots.len());
        for (i, spec) in self.config.slots.iter().enumerate() {
            let role = self.config.role(i);
            if let SlotRole::Decoder(l) = role {
                let up = tape.upsample2x(hcur)?;
                let up = tape.conv2d(up, p(&format!("up{l}.w"))?, p(&format!("up{l}.b"))?, 1, 0)?;
                let skip = skips.pop().expect("encoder pushed a skip");
                hcur = tape.add(up, skip)?;
            }
            if let Some((id, t)) = &opts.input_override {
                if *id == spec.id {
                    hcur = tape.leaf(t.clone());
                }
            }
            let slot_in = hcur;
            if !opts.skip_slots.contains(&spec.id) {
                let blocks = if spec.kind == BlockKind::Base { spec.depth } else { 1 };
                for b in 0..blocks {
                    let prefix = format!("{}.{b}.", spec.id);
                    hcur = block_forward(
                        tape,
                        spec.kind,
                        hcur,
                        &|name| p(&format!("{prefix}{name}")),
                        opts.bypass_norm,
                    )?;
                }
            }
            slots.push((
                spec.id.clone(),
                SlotTrace {
                    input: slot_in,
                    output: hcur,
                },
            ));
            if let SlotRole::Encoder(l) = role {
                skips.push(hcur);
                hcur = tape.conv2d(hcur, p(&format!("down{l}.w"))?, p(&format!("down{l}.b"))?, 2, 0)?;
            }
        }
        let correction = tape.conv2d(hcur, p("head.w")?, p("head.b")?, 1, 1)?;
        let output = tape.add(input, correction)?;
        Ok(Trace {
            output,
            params,
            slots,
        })
    }

    pub fn forward_with(&self, x: &Tensor, opts: &ForwardOptions) -> Result<Tensor> {
        let mut tape = Tape::new();
        let trace = self.trace(&mut tape, x, opts)?;
        Ok(tape.value(trace.output).clone())
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_with(x, &ForwardOptions::default())
    }

    /// Restoration-MSE gradient with respect to every parameter, keyed by name.
    pub fn loss_and_grads(&self, x: &Tensor, target: &Tensor) -> Result<(f64, BTreeMap<String, Tensor>)> {
        let mut tape = Tape::new();
        let trace = self.trace(&mut tape, x, &ForwardOptions::default())?;
        let t = tape.leaf(target.clone());
        let loss = tape.mse_loss(trace.output, t)?;
        let grads = tape.backward(loss)?;
        let named = trace.params.iter().map(|(k, v)| (k.clone(), grads.get(*v))).collect();
        Ok((tape.value(loss).item()?, named))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_input(seed: u64, shape: &[usize]) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn forward_preserves_shape_and_is_identity_at_init() {
        let net = Network::build(&NetworkConfig::desk(), 3).unwrap();
        let x = random_input(1, &[2, 1, 32, 32]);
        let y = net.forward(&x).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn same_seed_same_params() {
        let a = Network::build(&NetworkConfig::desk(), 42).unwrap();
        let b = Network::build(&NetworkConfig::desk(), 42).unwrap();
        assert_eq!(a, b);
        let c = Network::build(&NetworkConfig::desk(), 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn changing_a_kind_changes_only_that_slot() {
        let cfg = NetworkConfig::desk();
        let a = Network::build(&cfg, 5).unwrap();
        let mut cfg2 = cfg.clone();
        cfg2.slot_mut("enc1").unwrap().kind = BlockKind::Alt5;
        let b = Network::build(&cfg2, 5).unwrap();
        for slot in &cfg.slots {
            let (pa, pb) = (a.slot_param_count(&slot.id), b.slot_param_count(&slot.id));
            if slot.id == "enc1" {
                // base: 2c + 2c^2+2c + 18c+2c + c^2+c + c^2+c = 4c^2 + 26c at c=16 vs alt5: c^2 + c
                assert_eq!(pa, 4 * 16 * 16 + 26 * 16);
                assert_eq!(pb, 16 * 16 + 16);
            } else {
                assert_eq!(pa, pb);
            }
        }
        let shared: Vec<_> = a.params().keys().filter(|k| !k.starts_with("enc1.")).collect();
        for k in shared {
            assert_eq!(a.params()[k], b.params()[k]);
        }
    }

    #[test]
    fn override_and_skip() {
        let mut net = Network::build(&NetworkConfig::desk(), 9).unwrap();
        // perturb so the network is not the identity
        for (k, v) in net.params_mut().iter_mut() {
            if k.ends_with("proj.w") || k == "head.w" {
                *v = v.map(|_| 0.05);
            }
        }
        let x = random_input(2, &[1, 1, 32, 32]);
        let mut tape = Tape::new();
        let tr = net.trace(&mut tape, &x, &ForwardOptions::default()).unwrap();
        let captured = tape.value(tr.slot("mid").unwrap().input).clone();
        let full = tape.value(tr.output).clone();
        let opts = ForwardOptions {
            input_override: Some(("mid".into(), captured)),
            ..Default::default()
        };
        assert_eq!(net.forward_with(&x, &opts).unwrap(), full);

        let opts = ForwardOptions {
            skip_slots: ["mid".to_string()].into(),
            ..Default::default()
        };
        assert_ne!(net.forward_with(&x, &opts).unwrap(), full);
    }

    #[test]
    fn rejects_bad_input() {
        let net = Network::build(&NetworkConfig::desk(), 0).unwrap();
        assert!(net.forward(&Tensor::zeros(&[1, 2, 32, 32])).is_err());
        assert!(net.forward(&Tensor::zeros(&[1, 1, 30, 30])).is_err());
    }
}
