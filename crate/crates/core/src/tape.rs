//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every primitive in execution order, so node indices are
//! already a topological order and the backward sweep simply walks them in
//! reverse. Gradients are accumulated per node, which handles fan-out.
//!
//! Broadcasting is limited to a channel vector over a BCHW tensor: the second
//! operand of `add`/`mul` may be `[C]` (shared across the batch) or
//! `[B, C, 1, 1]` (per image). Everything else is a shape error.

use crate::error::{Error, Result};
use crate::kernels::{tap_backward_input, tap_dot, tap_forward, Geometry};
use crate::tensor::Tensor;

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseKind {
    Add,
    Mul,
    Scale,
    Relu,
}

/// Second operand of [`Tape::elementwise`].
#[derive(Clone, Copy, Debug)]
pub enum Operand {
    Var(Var),
    Scalar(f64),
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// `[C]` against BCHW.
    Channel { c: usize, hw: usize },
    /// `[B, C, 1, 1]` against BCHW.
    BatchChannel { hw: usize },
}

impl Broadcast {
    fn resolve(a: &[usize], b: &[usize]) -> Result<Self> {
        if a == b {
            return Ok(Broadcast::Same);
        }
        match (a, b) {
            (&[_, c, h, w], &[bc]) if bc == c => Ok(Broadcast::Channel { c, hw: h * w }),
            (&[ba, c, h, w], &[bb, bc, 1, 1]) if ba == bb && bc == c => {
                Ok(Broadcast::BatchChannel { hw: h * w })
            }
            _ => Err(Error::shape(format!(
                "cannot broadcast {b:?} over {a:?}; only channel vectors over BCHW are supported"
            ))),
        }
    }

    #[inline]
    fn index(self, i: usize) -> usize {
        match self {
            Broadcast::Same => i,
            Broadcast::Channel { c, hw } => (i / hw) % c,
            Broadcast::BatchChannel { hw } => i / hw,
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    },
    DepthwiseConv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        padding: usize,
    },
    LayerNormChannels {
        input: Var,
        gain: Var,
        offset: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SimpleGate {
        input: Var,
    },
    GlobalAvgPool {
        input: Var,
    },
    Add {
        a: Var,
        b: Var,
        bc: Broadcast,
    },
    Mul {
        a: Var,
        b: Var,
        bc: Broadcast,
    },
    Scale {
        a: Var,
        factor: f64,
    },
    Relu {
        a: Var,
    },
    Upsample2x {
        input: Var,
    },
    Sum {
        a: Var,
    },
    MseLoss {
        pred: Var,
        target: Var,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let value = conv2d_forward(self.value(input), self.value(kernel), self.value(bias), stride, padding)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            },
        ))
    }

    pub fn depthwise_conv2d(&mut self, input: Var, kernel: Var, bias: Var, padding: usize) -> Result<Var> {
        let value = depthwise_forward(self.value(input), self.value(kernel), self.value(bias), padding)?;
        Ok(self.push(
            value,
            Op::DepthwiseConv2d {
                input,
                kernel,
                bias,
                padding,
            },
        ))
    }

    pub fn layer_norm_channels(&mut self, input: Var, gain: Var, offset: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(Error::InvalidArgument(format!("layer norm eps must be positive, got {eps}")));
        }
        let x = self.value(input);
        let (b, c, h, w) = x.dims4()?;
        let (g, o) = (self.value(gain), self.value(offset));
        if g.shape() != [c] || o.shape() != [c] {
            return Err(Error::shape(format!(
                "layer norm affine params must be [{c}], got {:?} and {:?}",
                g.shape(),
                o.shape()
            )));
        }
        let hw = h * w;
        let xd = x.data();
        let mut normalized = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; b * hw];
        let mut out = vec![0.0; xd.len()];
        for bi in 0..b {
            let base = bi * c * hw;
            for p in 0..hw {
                let first = xd[base + p];
                // a constant channel vector normalises to exactly zero
                let constant = (1..c).all(|ci| xd[base + ci * hw + p] == first);
                let mean = if constant {
                    first
                } else {
                    (0..c).map(|ci| xd[base + ci * hw + p]).sum::<f64>() / c as f64
                };
                let var = (0..c)
                    .map(|ci| {
                        let d = xd[base + ci * hw + p] - mean;
                        d * d
                    })
                    .sum::<f64>()
                    / c as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std[bi * hw + p] = is;
                for ci in 0..c {
                    let idx = base + ci * hw + p;
                    let n = (xd[idx] - mean) * is;
                    normalized[idx] = n;
                    out[idx] = g.data()[ci] * n + o.data()[ci];
                }
            }
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.push(
            value,
            Op::LayerNormChannels {
                input,
                gain,
                offset,
                normalized,
                inv_std,
            },
        ))
    }

    pub fn simple_gate(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let (b, c2, h, w) = x.dims4()?;
        if c2 % 2 != 0 {
            return Err(Error::shape(format!("simple gate needs an even channel count, got {c2}")));
        }
        let c = c2 / 2;
        let plane = c * h * w;
        let xd = x.data();
        let mut out = Vec::with_capacity(b * plane);
        for bi in 0..b {
            let first = &xd[bi * 2 * plane..bi * 2 * plane + plane];
            let second = &xd[bi * 2 * plane + plane..(bi + 1) * 2 * plane];
            out.extend(first.iter().zip(second).map(|(p, q)| p * q));
        }
        let value = Tensor::new(vec![b, c, h, w], out)?;
        Ok(self.push(value, Op::SimpleGate { input }))
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let (b, c, h, w) = x.dims4()?;
        let hw = h * w;
        let out = x
            .data()
            .chunks_exact(hw)
            .map(|plane| plane.iter().sum::<f64>() / hw as f64)
            .collect();
        let value = Tensor::new(vec![b, c, 1, 1], out)?;
        Ok(self.push(value, Op::GlobalAvgPool { input }))
    }

    pub fn elementwise(&mut self, kind: ElementwiseKind, a: Var, b: Operand) -> Result<Var> {
        match (kind, b) {
            (ElementwiseKind::Add, Operand::Var(b)) => self.add(a, b),
            (ElementwiseKind::Mul, Operand::Var(b)) => self.mul(a, b),
            (ElementwiseKind::Scale, Operand::Scalar(f)) => Ok(self.scale(a, f)),
            (ElementwiseKind::Relu, Operand::None) => Ok(self.relu(a)),
            (kind, b) => Err(Error::InvalidArgument(format!(
                "operand {b:?} does not fit elementwise {kind:?}"
            ))),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let bc = Broadcast::resolve(self.value(a).shape(), self.value(b).shape())?;
        let value = binary(self.value(a), self.value(b), bc, |x, y| x + y);
        Ok(self.push(value, Op::Add { a, b, bc }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let bc = Broadcast::resolve(self.value(a).shape(), self.value(b).shape())?;
        let value = binary(self.value(a), self.value(b), bc, |x, y| x * y);
        Ok(self.push(value, Op::Mul { a, b, bc }))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|v| v * factor);
        self.push(value, Op::Scale { a, factor })
    }

    /// `max(x, 0)`; the derivative at exactly zero is taken as zero.
    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(value, Op::Relu { a })
    }

    /// Nearest-neighbour 2x spatial upsampling.
    pub fn upsample2x(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let (b, c, h, w) = x.dims4()?;
        let (h2, w2) = (2 * h, 2 * w);
        let xd = x.data();
        let mut out = vec![0.0; b * c * h2 * w2];
        for plane in 0..b * c {
            let src = &xd[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * h2 * w2..(plane + 1) * h2 * w2];
            for y in 0..h2 {
                for xx in 0..w2 {
                    dst[y * w2 + xx] = src[(y / 2) * w + xx / 2];
                }
            }
        }
        let value = Tensor::new(vec![b, c, h2, w2], out)?;
        Ok(self.push(value, Op::Upsample2x { input }))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).data().iter().sum());
        self.push(value, Op::Sum { a })
    }

    /// Mean of squared differences over all elements.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (p, t) = (self.value(pred), self.value(target));
        p.ensure_same_shape(t, "mse_loss")?;
        let value = Tensor::scalar(mse(p.data(), t.data()));
        Ok(self.push(value, Op::MseLoss { pred, target }))
    }

    /// Gradients of the scalar `loss` with respect to every recorded tensor.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            } => {
                let (dx, dk, db) = conv2d_backward(
                    self.value(*input),
                    self.value(*kernel),
                    &node.value,
                    g,
                    *stride,
                    *padding,
                );
                accumulate(grads, *input, dx);
                accumulate(grads, *kernel, dk);
                accumulate(grads, *bias, db);
            }
            Op::DepthwiseConv2d {
                input,
                kernel,
                bias,
                padding,
            } => {
                let (dx, dk, db) =
                    depthwise_backward(self.value(*input), self.value(*kernel), &node.value, g, *padding);
                accumulate(grads, *input, dx);
                accumulate(grads, *kernel, dk);
                accumulate(grads, *bias, db);
            }
            Op::LayerNormChannels {
                input,
                gain,
                offset,
                normalized,
                inv_std,
            } => {
                let (b, c, h, w) = node.value.dims4().expect("recorded as BCHW");
                let hw = h * w;
                let gain_v = self.value(*gain).data();
                let mut dx = vec![0.0; g.len()];
                let mut dgain = vec![0.0; c];
                let mut doff = vec![0.0; c];
                for bi in 0..b {
                    let base = bi * c * hw;
                    for p in 0..hw {
                        let mut sum_d = 0.0;
                        let mut sum_dn = 0.0;
                        for ci in 0..c {
                            let i = base + ci * hw + p;
                            let dn = g[i] * gain_v[ci];
                            sum_d += dn;
                            sum_dn += dn * normalized[i];
                            dgain[ci] += g[i] * normalized[i];
                            doff[ci] += g[i];
                        }
                        let is = inv_std[bi * hw + p];
                        let cf = c as f64;
                        for ci in 0..c {
                            let i = base + ci * hw + p;
                            let dn = g[i] * gain_v[ci];
                            dx[i] = is / cf * (cf * dn - sum_d - normalized[i] * sum_dn);
                        }
                    }
                }
                accumulate(grads, *input, dx);
                accumulate(grads, *gain, dgain);
                accumulate(grads, *offset, doff);
            }
            Op::SimpleGate { input } => {
                let x = self.value(*input);
                let (b, c2, h, w) = x.dims4().expect("recorded as BCHW");
                let plane = c2 / 2 * h * w;
                let xd = x.data();
                let mut dx = vec![0.0; xd.len()];
                for bi in 0..b {
                    for j in 0..plane {
                        let gi = g[bi * plane + j];
                        let p = bi * 2 * plane + j;
                        let q = p + plane;
                        dx[p] = gi * xd[q];
                        dx[q] = gi * xd[p];
                    }
                }
                accumulate(grads, *input, dx);
            }
            Op::GlobalAvgPool { input } => {
                let x = self.value(*input);
                let (_, _, h, w) = x.dims4().expect("recorded as BCHW");
                let hw = h * w;
                let dx = (0..x.len()).map(|i| g[i / hw] / hw as f64).collect();
                accumulate(grads, *input, dx);
            }
            Op::Add { a, b, bc } => {
                accumulate(grads, *a, g.to_vec());
                let mut db = vec![0.0; self.value(*b).len()];
                for (i, gi) in g.iter().enumerate() {
                    db[bc.index(i)] += gi;
                }
                accumulate(grads, *b, db);
            }
            Op::Mul { a, b, bc } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let mut da = vec![0.0; av.len()];
                let mut db = vec![0.0; bv.len()];
                for (i, gi) in g.iter().enumerate() {
                    let j = bc.index(i);
                    da[i] = gi * bv[j];
                    db[j] += gi * av[i];
                }
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::Scale { a, factor } => {
                accumulate(grads, *a, g.iter().map(|v| v * factor).collect());
            }
            Op::Relu { a } => {
                let av = self.value(*a).data();
                let da = g
                    .iter()
                    .zip(av)
                    .map(|(gi, &x)| if x > 0.0 { *gi } else { 0.0 })
                    .collect();
                accumulate(grads, *a, da);
            }
            Op::Upsample2x { input } => {
                let x = self.value(*input);
                let (b, c, h, w) = x.dims4().expect("recorded as BCHW");
                let (h2, w2) = (2 * h, 2 * w);
                let mut dx = vec![0.0; x.len()];
                for plane in 0..b * c {
                    let gs = &g[plane * h2 * w2..(plane + 1) * h2 * w2];
                    let ds = &mut dx[plane * h * w..(plane + 1) * h * w];
                    for y in 0..h2 {
                        for xx in 0..w2 {
                            ds[(y / 2) * w + xx / 2] += gs[y * w2 + xx];
                        }
                    }
                }
                accumulate(grads, *input, dx);
            }
            Op::Sum { a } => {
                accumulate(grads, *a, vec![g[0]; self.value(*a).len()]);
            }
            Op::MseLoss { pred, target } => {
                let (p, t) = (self.value(*pred).data(), self.value(*target).data());
                let scale = 2.0 * g[0] / p.len() as f64;
                let dp: Vec<f64> = p.iter().zip(t).map(|(a, b)| scale * (a - b)).collect();
                let dt = dp.iter().map(|v| -v).collect();
                accumulate(grads, *pred, dp);
                accumulate(grads, *target, dt);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, delta: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, d) in existing.iter_mut().zip(delta) {
                *e += d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

fn binary(a: &Tensor, b: &Tensor, bc: Broadcast, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let bd = b.data();
    let data = a
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| f(x, bd[bc.index(i)]))
        .collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape as lhs")
}

pub(crate) fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; tensors the loss does not depend on get exact zeros.
    pub fn get(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient matches value shape"),
            None => Tensor::zeros(&shape),
        }
    }

    /// Borrowed gradient data, `None` when the loss does not reach `v`.
    pub fn data(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

fn conv_dims(
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
) -> Result<((usize, usize, usize, usize), (usize, usize, usize, usize))> {
    let xd = input.dims4()?;
    let kd = kernel.dims4()?;
    if kd.2 != kd.3 {
        return Err(Error::shape(format!("kernel must be square, got {:?}", kernel.shape())));
    }
    if bias.shape() != [kd.0] {
        return Err(Error::shape(format!(
            "bias shape {:?} does not match {} output channels",
            bias.shape(),
            kd.0
        )));
    }
    Ok((xd, kd))
}

pub(crate) fn conv2d_forward(
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let ((b, ci, h, w), (co, ki, k, _)) = conv_dims(input, kernel, bias)?;
    if ki != ci {
        return Err(Error::shape(format!(
            "conv2d input has {ci} channels but kernel expects {ki}"
        )));
    }
    if stride == 0 {
        return Err(Error::shape("conv2d stride must be at least 1"));
    }
    let g = Geometry::new(h, w, k, stride, padding)
        .ok_or_else(|| Error::shape(format!("kernel {k} larger than padded input {h}x{w}")))?;
    let (ho, wo) = (g.ho, g.wo);
    let xd = input.data();
    let kd = kernel.data();
    let mut out = vec![0.0; b * co * ho * wo];
    for bi in 0..b {
        for o in 0..co {
            let plane = &mut out[(bi * co + o) * ho * wo..(bi * co + o + 1) * ho * wo];
            plane.fill(bias.data()[o]);
            for i in 0..ci {
                let src = &xd[(bi * ci + i) * h * w..(bi * ci + i + 1) * h * w];
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = kd[((o * ci + i) * k + ky) * k + kx];
                        tap_forward(&g, plane, src, wv, ky, kx);
                    }
                }
            }
        }
    }
    Tensor::new(vec![b, co, ho, wo], out)
}

fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    output: &Tensor,
    grad: &[f64],
    stride: usize,
    padding: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (b, ci, h, w) = input.dims4().expect("validated in forward");
    let (co, _, k, _) = kernel.dims4().expect("validated in forward");
    let (_, _, ho, wo) = output.dims4().expect("validated in forward");
    let g = Geometry::new(h, w, k, stride, padding).expect("validated in forward");
    let xd = input.data();
    let kd = kernel.data();
    let mut dx = vec![0.0; xd.len()];
    let mut dk = vec![0.0; kd.len()];
    let mut db = vec![0.0; co];
    for bi in 0..b {
        for o in 0..co {
            let gplane = &grad[(bi * co + o) * ho * wo..(bi * co + o + 1) * ho * wo];
            db[o] += gplane.iter().sum::<f64>();
            for i in 0..ci {
                let off = (bi * ci + i) * h * w;
                for ky in 0..k {
                    for kx in 0..k {
                        let kidx = ((o * ci + i) * k + ky) * k + kx;
                        dk[kidx] += tap_dot(&g, gplane, &xd[off..off + h * w], ky, kx);
                        tap_backward_input(&g, &mut dx[off..off + h * w], gplane, kd[kidx], ky, kx);
                    }
                }
            }
        }
    }
    (dx, dk, db)
}

pub(crate) fn depthwise_forward(input: &Tensor, kernel: &Tensor, bias: &Tensor, padding: usize) -> Result<Tensor> {
    let ((b, c, h, w), (kc, one, k, _)) = conv_dims(input, kernel, bias)?;
    if kc != c || one != 1 {
        return Err(Error::shape(format!(
            "depthwise kernel must be [{c}, 1, k, k], got {:?}",
            kernel.shape()
        )));
    }
    let g = Geometry::new(h, w, k, 1, padding)
        .ok_or_else(|| Error::shape(format!("kernel {k} larger than padded input {h}x{w}")))?;
    let (ho, wo) = (g.ho, g.wo);
    let xd = input.data();
    let kd = kernel.data();
    let mut out = vec![0.0; b * c * ho * wo];
    for bi in 0..b {
        for ch in 0..c {
            let plane = &mut out[(bi * c + ch) * ho * wo..(bi * c + ch + 1) * ho * wo];
            plane.fill(bias.data()[ch]);
            let src = &xd[(bi * c + ch) * h * w..(bi * c + ch + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    tap_forward(&g, plane, src, kd[(ch * k + ky) * k + kx], ky, kx);
                }
            }
        }
    }
    Tensor::new(vec![b, c, ho, wo], out)
}

fn depthwise_backward(
    input: &Tensor,
    kernel: &Tensor,
    output: &Tensor,
    grad: &[f64],
    padding: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (b, c, h, w) = input.dims4().expect("validated in forward");
    let (_, _, k, _) = kernel.dims4().expect("validated in forward");
    let (_, _, ho, wo) = output.dims4().expect("validated in forward");
    let g = Geometry::new(h, w, k, 1, padding).expect("validated in forward");
    let xd = input.data();
    let kd = kernel.data();
    let mut dx = vec![0.0; xd.len()];
    let mut dk = vec![0.0; kd.len()];
    let mut db = vec![0.0; c];
    for bi in 0..b {
        for ch in 0..c {
            let gplane = &grad[(bi * c + ch) * ho * wo..(bi * c + ch + 1) * ho * wo];
            db[ch] += gplane.iter().sum::<f64>();
            let off = (bi * c + ch) * h * w;
            for ky in 0..k {
                for kx in 0..k {
                    let kidx = (ch * k + ky) * k + kx;
                    dk[kidx] += tap_dot(&g, gplane, &xd[off..off + h * w], ky, kx);
                    tap_backward_input(&g, &mut dx[off..off + h * w], gplane, kd[kidx], ky, kx);
                }
            }
        }
    }
    (dx, dk, db)
}

/// Stateless forward helpers, handy when no gradients are needed.
pub mod ops {
    use super::*;

    pub fn conv2d(input: &Tensor, kernel: &Tensor, bias: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
        conv2d_forward(input, kernel, bias, stride, padding)
    }

    pub fn depthwise_conv2d(input: &Tensor, kernel: &Tensor, bias: &Tensor, padding: usize) -> Result<Tensor> {
        depthwise_forward(input, kernel, bias, padding)
    }

    pub fn layer_norm_channels(input: &Tensor, gain: &Tensor, offset: &Tensor, eps: f64) -> Result<Tensor> {
        unary_via_tape(input, |t, x| {
            let g = t.leaf(gain.clone());
            let o = t.leaf(offset.clone());
            t.layer_norm_channels(x, g, o, eps)
        })
    }

    pub fn simple_gate(input: &Tensor) -> Result<Tensor> {
        unary_via_tape(input, |t, x| t.simple_gate(x))
    }

    pub fn global_avg_pool(input: &Tensor) -> Result<Tensor> {
        unary_via_tape(input, |t, x| t.global_avg_pool(x))
    }

    pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
        pred.ensure_same_shape(target, "mse_loss")?;
        Ok(mse(pred.data(), target.data()))
    }

    fn unary_via_tape(input: &Tensor, f: impl FnOnce(&mut Tape, Var) -> Result<Var>) -> Result<Tensor> {
        let mut t = Tape::new();
        let x = t.leaf(input.clone());
        let y = f(&mut t, x)?;
        Ok(t.nodes.swap_remove(y.0).value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Direct six-loop convolution with explicit zero padding.
    fn naive_conv(x: &Tensor, k: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (b, ci, h, w) = x.dims4().unwrap();
        let (co, _, kh, kw) = k.dims4().unwrap();
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        let mut out = Tensor::zeros(&[b, co, ho, wo]);
        for bi in 0..b {
            for o in 0..co {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = bias.data()[o];
                        for i in 0..ci {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * stride + ky) as i64 - pad as i64;
                                    let ix = (ox * stride + kx) as i64 - pad as i64;
                                    if iy < 0 || ix < 0 || iy >= h as i64 || ix >= w as i64 {
                                        continue;
                                    }
                                    let xv = x.data()[((bi * ci + i) * h + iy as usize) * w + ix as usize];
                                    acc += xv * k.data()[((o * ci + i) * kh + ky) * kw + kx];
                                }
                            }
                        }
                        out.data_mut()[((bi * co + o) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
        assert_eq!(a.shape(), b.shape());
        a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn conv_of_ones_is_nine() {
        let x = Tensor::full(&[1, 1, 3, 3], 1.0);
        let k = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = ops::conv2d(&x, &k, &Tensor::zeros(&[1]), 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data()[0], 9.0);
    }

    #[test]
    fn identity_1x1_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[2, 1, 5, 5], &mut rng);
        let y = ops::conv2d(&x, &Tensor::full(&[1, 1, 1, 1], 1.0), &Tensor::zeros(&[1]), 1, 0).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(&[2, 3, 8, 8], &mut rng);
        let k = random(&[4, 3, 3, 3], &mut rng);
        let bias = random(&[4], &mut rng);
        for &(s, p) in &[(1, 0), (1, 1), (2, 1), (2, 0), (3, 2)] {
            let fast = ops::conv2d(&x, &k, &bias, s, p).unwrap();
            let slow = naive_conv(&x, &k, &bias, s, p);
            assert!(max_abs_diff(&fast, &slow) < 1e-12, "stride {s} pad {p}");
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = Tensor::zeros(&[1, 2, 4, 4]);
        let k = Tensor::zeros(&[1, 3, 3, 3]);
        let err = ops::conv2d(&x, &k, &Tensor::zeros(&[1]), 1, 1).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn depthwise_identity_and_ones() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[1, 2, 4, 4], &mut rng);
        let mut k = Tensor::zeros(&[2, 1, 3, 3]);
        k.data_mut()[4] = 1.0;
        k.data_mut()[13] = 1.0;
        assert!(max_abs_diff(&ops::depthwise_conv2d(&x, &k, &Tensor::zeros(&[2]), 1).unwrap(), &x) == 0.0);

        let ones = Tensor::full(&[1, 1, 5, 5], 1.0);
        let y = ops::depthwise_conv2d(&ones, &Tensor::full(&[1, 1, 3, 3], 1.0), &Tensor::zeros(&[1]), 1).unwrap();
        for yy in 1..4 {
            for xx in 1..4 {
                assert_eq!(y.data()[yy * 5 + xx], 9.0);
            }
        }
    }

    #[test]
    fn depthwise_matches_grouped_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(&[2, 3, 6, 7], &mut rng);
        let k = random(&[3, 1, 3, 3], &mut rng);
        let bias = random(&[3], &mut rng);
        let fast = ops::depthwise_conv2d(&x, &k, &bias, 1).unwrap();
        for ch in 0..3 {
            let xc = Tensor::from_fn(&[2, 1, 6, 7], |i| {
                let (bi, r) = (i / 42, i % 42);
                x.data()[(bi * 3 + ch) * 42 + r]
            });
            let kc = Tensor::new(vec![1, 1, 3, 3], k.data()[ch * 9..ch * 9 + 9].to_vec()).unwrap();
            let slow = naive_conv(&xc, &kc, &Tensor::scalar(bias.data()[ch]), 1, 1);
            for bi in 0..2 {
                for r in 0..42 {
                    let d = fast.data()[(bi * 3 + ch) * 42 + r] - slow.data()[bi * 42 + r];
                    assert!(d.abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn layer_norm_cases() {
        let x = Tensor::full(&[1, 3, 2, 2], 0.7);
        let y = ops::layer_norm_channels(&x, &Tensor::full(&[3], 1.0), &Tensor::zeros(&[3]), 1e-6).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&[2, 4, 3, 3], &mut rng);
        let y = ops::layer_norm_channels(&x, &Tensor::zeros(&[4]), &Tensor::full(&[4], 5.0), 1e-6).unwrap();
        assert!(y.data().iter().all(|&v| v == 5.0));

        let y = ops::layer_norm_channels(&x, &Tensor::full(&[4], 1.0), &Tensor::zeros(&[4]), 1e-12).unwrap();
        for bi in 0..2 {
            for p in 0..9 {
                let vals: Vec<f64> = (0..4).map(|c| y.data()[(bi * 4 + c) * 9 + p]).collect();
                let mean = vals.iter().sum::<f64>() / 4.0;
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
                assert!(mean.abs() < 1e-10);
                assert!((var - 1.0).abs() < 1e-6);
            }
        }
        assert!(Tape::new().layer_norm_channels(Var(0), Var(0), Var(0), 0.0).is_err());
    }

    #[test]
    fn simple_gate_cases() {
        let y = ops::simple_gate(&Tensor::full(&[1, 4, 2, 2], 1.0)).unwrap();
        assert_eq!(y, Tensor::full(&[1, 2, 2, 2], 1.0));

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut x = random(&[2, 4, 3, 3], &mut rng);
        let y = ops::simple_gate(&x).unwrap();
        for bi in 0..2 {
            for j in 0..18 {
                let want = x.data()[bi * 36 + j] * x.data()[bi * 36 + 18 + j];
                assert!((y.data()[bi * 18 + j] - want).abs() < 1e-15);
            }
        }
        for bi in 0..2 {
            x.data_mut()[bi * 36 + 18..bi * 36 + 36].fill(0.0);
        }
        assert!(ops::simple_gate(&x).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(ops::simple_gate(&Tensor::zeros(&[1, 3, 2, 2])).is_err());
    }

    #[test]
    fn global_avg_pool_cases() {
        let y = ops::global_avg_pool(&Tensor::full(&[1, 2, 3, 3], 4.5)).unwrap();
        assert_eq!(y.shape(), &[1, 2, 1, 1]);
        assert!(y.data().iter().all(|&v| v == 4.5));
        let ramp = Tensor::from_fn(&[1, 1, 4, 4], |i| i as f64);
        assert_eq!(ops::global_avg_pool(&ramp).unwrap().data()[0], 7.5);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&[2, 3, 5, 4], &mut rng);
        let y = ops::global_avg_pool(&x).unwrap();
        for (j, plane) in x.data().chunks(20).enumerate() {
            let want = plane.iter().sum::<f64>() / 20.0;
            assert!((y.data()[j] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn relu_and_add_identity() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        let r = t.elementwise(ElementwiseKind::Relu, a, Operand::None).unwrap();
        assert_eq!(t.value(r).data(), &[0.0, 0.0, 2.0]);
        let z = t.leaf(Tensor::zeros(&[3]));
        let s = t.elementwise(ElementwiseKind::Add, a, Operand::Var(z)).unwrap();
        assert_eq!(t.value(s), t.value(a));
        assert!(t.elementwise(ElementwiseKind::Scale, a, Operand::None).is_err());
    }

    #[test]
    fn relu_gradient_at_zero_is_zero() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        let r = t.relu(a);
        let s = t.sum(r);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(a).data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn mse_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random(&[2, 3, 4], &mut rng);
        assert_eq!(ops::mse_loss(&a, &a).unwrap(), 0.0);
        let b = a.map(|v| v + 1.0);
        assert!((ops::mse_loss(&b, &a).unwrap() - 1.0).abs() < 1e-15);
        let c = random(&[2, 3, 4], &mut rng);
        let diffs: Vec<f64> = a.data().iter().zip(c.data()).map(|(x, y)| x - y).collect();
        let two_pass = diffs.iter().map(|d| d * d).sum::<f64>() / diffs.len() as f64;
        assert!((ops::mse_loss(&a, &c).unwrap() - two_pass).abs() < 1e-14);
    }

    #[test]
    fn backward_square() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(3.0));
        let sq = t.mul(x, x).unwrap();
        let g = t.backward(sq).unwrap();
        assert_eq!(g.get(x).item().unwrap(), 6.0);
    }

    #[test]
    fn unused_tensor_gets_zero_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(3.0));
        let p = t.leaf(Tensor::full(&[2, 2], 1.5));
        let l = t.scale(x, 2.0);
        let g = t.backward(l).unwrap();
        assert!(g.data(p).is_none());
        assert_eq!(g.get(p), Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::zeros(&[2]));
        assert!(matches!(t.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn broadcast_only_channel_vectors() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::zeros(&[2, 3, 2, 2]));
        let c = t.leaf(Tensor::zeros(&[3]));
        let bc = t.leaf(Tensor::zeros(&[2, 3, 1, 1]));
        let bad = t.leaf(Tensor::zeros(&[2]));
        let bad2 = t.leaf(Tensor::zeros(&[1, 3, 1, 1]));
        assert!(t.add(a, c).is_ok());
        assert!(t.mul(a, bc).is_ok());
        assert!(t.add(a, bad).is_err());
        assert!(t.mul(a, bad2).is_err());
    }

    #[test]
    fn upsample_repeats_pixels() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(vec![1, 1, 1, 2], vec![1.0, 2.0]).unwrap());
        let y = t.upsample2x(x).unwrap();
        assert_eq!(t.value(y).data(), &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
    }
}
