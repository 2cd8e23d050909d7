//! Zero-cost block saliency proxies, rank aggregation and an ablation oracle.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcheck::hvp;
use crate::seed::rng_for;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::toynet::{evaluate_psnr, Dataset, ForwardOptions, Network};

pub const SALIENCY_BATCH: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Proxy {
    GradNorm,
    Snip,
    Grasp,
    Fisher,
    Plain,
    Synflow,
}

impl Proxy {
    pub const ALL: [Proxy; 6] = [
        Proxy::GradNorm,
        Proxy::Snip,
        Proxy::Grasp,
        Proxy::Fisher,
        Proxy::Plain,
        Proxy::Synflow,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Proxy::GradNorm => "grad_norm",
            Proxy::Snip => "snip",
            Proxy::Grasp => "grasp",
            Proxy::Fisher => "fisher",
            Proxy::Plain => "plain",
            Proxy::Synflow => "synflow",
        }
    }

    /// Signed proxies are ranked by magnitude.
    pub fn signed(self) -> bool {
        matches!(self, Proxy::Grasp | Proxy::Plain)
    }
}

impl fmt::Display for Proxy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlotScores {
    pub slot: String,
    pub grad_norm: f64,
    pub snip: f64,
    pub grasp: f64,
    pub fisher: f64,
    pub plain: f64,
    pub synflow: f64,
}

impl SlotScores {
    pub fn get(&self, proxy: Proxy) -> f64 {
        match proxy {
            Proxy::GradNorm => self.grad_norm,
            Proxy::Snip => self.snip,
            Proxy::Grasp => self.grasp,
            Proxy::Fisher => self.fisher,
            Proxy::Plain => self.plain,
            Proxy::Synflow => self.synflow,
        }
    }

    pub fn set(&mut self, proxy: Proxy, v: f64) {
        match proxy {
            Proxy::GradNorm => self.grad_norm = v,
            Proxy::Snip => self.snip = v,
            Proxy::Grasp => self.grasp = v,
            Proxy::Fisher => self.fisher = v,
            Proxy::Plain => self.plain = v,
            Proxy::Synflow => self.synflow = v,
        }
    }
}

/// Scores for every slot, in network slot order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyReport {
    pub slots: Vec<SlotScores>,
    /// Whether the synflow pass ran with norms bypassed.
    #[serde(default)]
    pub synflow_norm_bypassed: bool,
}

impl SaliencyReport {
    pub fn slot(&self, id: &str) -> Option<&SlotScores> {
        self.slots.iter().find(|s| s.slot == id)
    }

    pub fn column(&self, proxy: Proxy) -> Vec<f64> {
        self.slots.iter().map(|s| s.get(proxy)).collect()
    }

    /// CSV with one row per slot and a 1-based consensus rank.
    pub fn write_csv(&self, ranking: &Ranking, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "slot_id,grad_norm,snip,grasp,fisher,plain,synflow,consensus_rank")?;
        for s in &self.slots {
            let rank = ranking.consensus.iter().position(|c| *c == s.slot).map_or(0, |p| p + 1);
            writeln!(
                out,
                "{},{:e},{:e},{:e},{:e},{:e},{:e},{}",
                s.slot, s.grad_norm, s.snip, s.grasp, s.fisher, s.plain, s.synflow, rank
            )?;
        }
        Ok(())
    }
}

/// A fixed seeded batch of up to [`SALIENCY_BATCH`] training pairs.
pub fn saliency_batch(train: &Dataset, seed: u64) -> Result<Dataset> {
    let mut idx: Vec<usize> = (0..train.len()).collect();
    idx.shuffle(&mut rng_for(seed, "saliency-batch"));
    idx.truncate(SALIENCY_BATCH);
    train.subset(&idx)
}

struct GradPass {
    grads: BTreeMap<String, Tensor>,
    /// Per slot: (activation, gradient of the loss at the activation).
    acts: BTreeMap<String, (Tensor, Tensor)>,
}

fn grad_pass(net: &Network, batch: &Dataset) -> Result<GradPass> {
    let mut tape = Tape::new();
    let trace = net.trace(&mut tape, &batch.blurred, &ForwardOptions::default())?;
    let target = tape.leaf(batch.sharp.clone());
    let loss = tape.mse_loss(trace.output, target)?;
    let g = tape.backward(loss)?;
    let grads: BTreeMap<String, Tensor> = trace.params.iter().map(|(k, v)| (k.clone(), g.get(*v))).collect();
    for (name, t) in &grads {
        if let Some(i) = t.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("gradient of {name}"),
                index: i,
            });
        }
    }
    let acts = trace
        .slots
        .iter()
        .map(|(id, st)| (id.clone(), (tape.value(st.output).clone(), g.get(st.output))))
        .collect();
    Ok(GradPass { grads, acts })
}

fn per_slot(net: &Network, f: impl Fn(&[f64], &[f64]) -> f64, values: &BTreeMap<String, Tensor>) -> Vec<(String, f64)> {
    net.config()
        .slots
        .iter()
        .map(|spec| {
            let mut total = 0.0;
            for name in net.slot_param_names(&spec.id) {
                total += f(net.params()[name].data(), values[name].data());
            }
            (spec.id.clone(), total)
        })
        .collect()
}

fn grad_norm_from(net: &Network, pass: &GradPass) -> Vec<(String, f64)> {
    per_slot(net, |_, g| g.iter().map(|v| v * v).sum(), &pass.grads)
        .into_iter()
        .map(|(s, v)| (s, v.sqrt()))
        .collect()
}

fn snip_from(net: &Network, pass: &GradPass) -> Vec<(String, f64)> {
    per_slot(net, |t, g| t.iter().zip(g).map(|(a, b)| (a * b).abs()).sum(), &pass.grads)
}

fn plain_from(net: &Network, pass: &GradPass) -> Vec<(String, f64)> {
    per_slot(net, |t, g| t.iter().zip(g).map(|(a, b)| a * b).sum(), &pass.grads)
}

/// `Σ_c (Σ_hw a·∂L/∂a)²`, averaged over the batch.
pub fn fisher_from_activations(act: &Tensor, grad: &Tensor) -> Result<f64> {
    act.ensure_same_shape(grad, "fisher")?;
    let (b, c, h, w) = act.dims4()?;
    let hw = h * w;
    let mut total = 0.0;
    for plane in 0..b * c {
        let s: f64 = act.data()[plane * hw..(plane + 1) * hw]
            .iter()
            .zip(&grad.data()[plane * hw..(plane + 1) * hw])
            .map(|(a, g)| a * g)
            .sum();
        total += s * s;
    }
    Ok(total / b as f64)
}

fn fisher_from(net: &Network, pass: &GradPass) -> Result<Vec<(String, f64)>> {
    net.config()
        .slots
        .iter()
        .map(|spec| {
            let (a, g) = &pass.acts[&spec.id];
            Ok((spec.id.clone(), fisher_from_activations(a, g)?))
        })
        .collect()
}

fn flat_grad<'a>(net: &'a Network, batch: &Dataset) -> impl Fn(&[f64]) -> Result<Vec<f64>> + 'a {
    let batch = batch.clone();
    move |theta: &[f64]| {
        let mut probe = net.clone();
        probe.set_flat_params(theta)?;
        let (_, grads) = probe.loss_and_grads(&batch.blurred, &batch.sharp)?;
        Ok(grads.values().flat_map(|t| t.data().iter().copied()).collect())
    }
}

/// `-Σ θ·(H g)` over each named group of flat coordinates, with `H g` from a
/// finite-difference Hessian-vector product of `grad` at `theta`.
pub fn grasp_by_groups(
    grad: impl Fn(&[f64]) -> Result<Vec<f64>>,
    theta: &[f64],
    g: &[f64],
    groups: &[(String, Vec<std::ops::Range<usize>>)],
) -> Result<Vec<(String, f64)>> {
    let hg = hvp(grad, theta, g)?;
    Ok(groups
        .iter()
        .map(|(name, ranges)| {
            let total: f64 = ranges
                .iter()
                .map(|r| theta[r.clone()].iter().zip(&hg[r.clone()]).map(|(t, h)| t * h).sum::<f64>())
                .sum();
            (name.clone(), -total)
        })
        .collect())
}

fn grasp_from(net: &Network, batch: &Dataset, pass: &GradPass) -> Result<Vec<(String, f64)>> {
    let theta = net.flat_params();
    let g: Vec<f64> = pass.grads.values().flat_map(|t| t.data().iter().copied()).collect();
    let offsets: BTreeMap<String, std::ops::Range<usize>> = net.param_offsets().into_iter().collect();
    let groups: Vec<(String, Vec<std::ops::Range<usize>>)> = net
        .config()
        .slots
        .iter()
        .map(|spec| {
            let ranges = net.slot_param_names(&spec.id).into_iter().map(|n| offsets[n].clone()).collect();
            (spec.id.clone(), ranges)
        })
        .collect();
    grasp_by_groups(flat_grad(net, batch), &theta, &g, &groups)
}

pub fn score_grad_norm(net: &Network, batch: &Dataset) -> Result<Vec<(String, f64)>> {
    Ok(grad_norm_from(net, &grad_pass(net, batch)?))
}

pub fn score_snip(net: &Network, batch: &Dataset) -> Result<Vec<(String, f64)>> {
    Ok(snip_from(net, &grad_pass(net, batch)?))
}

pub fn score_plain(net: &Network, batch: &Dataset) -> Result<Vec<(String, f64)>> {
    Ok(plain_from(net, &grad_pass(net, batch)?))
}

pub fn score_fisher(net: &Network, batch: &Dataset) -> Result<Vec<(String, f64)>> {
    fisher_from(net, &grad_pass(net, batch)?)
}

pub fn score_grasp(net: &Network, batch: &Dataset) -> Result<Vec<(String, f64)>> {
    grasp_from(net, batch, &grad_pass(net, batch)?)
}

/// Data-free: `|θ|` network, all-ones input of `size`x`size`, `R = Σ output`,
/// per slot `Σ |θ·∂R/∂θ|`. With `bypass_norm` every layer norm is the identity
/// and each product is already non-negative.
pub fn score_synflow_with(net: &Network, size: usize, bypass_norm: bool) -> Result<Vec<(String, f64)>> {
    let abs = net.map_params(f64::abs);
    let x = Tensor::full(&[1, net.config().in_channels, size, size], 1.0);
    let mut tape = Tape::new();
    let opts = ForwardOptions {
        bypass_norm,
        ..Default::default()
    };
    let trace = abs.trace(&mut tape, &x, &opts)?;
    let r = tape.sum(trace.output);
    let g = tape.backward(r)?;
    let grads: BTreeMap<String, Tensor> = trace.params.iter().map(|(k, v)| (k.clone(), g.get(*v))).collect();
    let scores = per_slot(&abs, |t, g| t.iter().zip(g).map(|(a, b)| (a * b).abs()).sum(), &grads);
    for (slot, v) in &scores {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                context: format!("synflow score of {slot}"),
                index: 0,
            });
        }
    }
    Ok(scores)
}

/// Synflow with norms bypassed. Gated blocks are polynomial in their input,
/// so on trained networks the bypassed pass can overflow; the pass is then
/// repeated with norms active. The flag reports whether the bypass held.
pub fn score_synflow(net: &Network, size: usize) -> Result<(Vec<(String, f64)>, bool)> {
    match score_synflow_with(net, size, true) {
        Ok(s) => Ok((s, true)),
        Err(Error::NonFinite { .. }) => Ok((score_synflow_with(net, size, false)?, false)),
        Err(e) => Err(e),
    }
}

/// All six proxies on one batch. Synflow uses the batch's spatial size.
pub fn saliency_report(net: &Network, batch: &Dataset) -> Result<SaliencyReport> {
    let pass = grad_pass(net, batch)?;
    let (_, _, h, _) = batch.blurred.dims4()?;
    let columns = [
        (Proxy::GradNorm, grad_norm_from(net, &pass)),
        (Proxy::Snip, snip_from(net, &pass)),
        (Proxy::Grasp, grasp_from(net, batch, &pass)?),
        (Proxy::Fisher, fisher_from(net, &pass)?),
        (Proxy::Plain, plain_from(net, &pass)),
    ];
    let (synflow, synflow_norm_bypassed) = score_synflow(net, h)?;
    let mut slots: Vec<SlotScores> = net
        .config()
        .slots
        .iter()
        .map(|s| SlotScores {
            slot: s.id.clone(),
            grad_norm: 0.0,
            snip: 0.0,
            grasp: 0.0,
            fisher: 0.0,
            plain: 0.0,
            synflow: 0.0,
        })
        .collect();
    for (proxy, col) in columns.into_iter().chain([(Proxy::Synflow, synflow)]) {
        for (row, (_, v)) in slots.iter_mut().zip(col) {
            row.set(proxy, v);
        }
    }
    Ok(SaliencyReport {
        slots,
        synflow_norm_bypassed,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    /// Slots from most to least salient, per proxy.
    pub per_proxy: BTreeMap<Proxy, Vec<String>>,
    /// Borda points per slot, in report order.
    pub points: Vec<(String, usize)>,
    pub consensus: Vec<String>,
}

/// Indices sorted by descending key; equal keys keep input order.
fn order_desc(keys: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..keys.len()).collect();
    idx.sort_by(|&a, &b| keys[b].total_cmp(&keys[a]));
    idx
}

pub fn rank_blocks(report: &SaliencyReport) -> Ranking {
    let n = report.slots.len();
    let mut points = vec![0usize; n];
    let mut per_proxy = BTreeMap::new();
    for proxy in Proxy::ALL {
        let keys: Vec<f64> = report
            .column(proxy)
            .into_iter()
            .map(|v| if proxy.signed() { v.abs() } else { v })
            .collect();
        let order = order_desc(&keys);
        for (rank, &i) in order.iter().enumerate() {
            points[i] += n - 1 - rank;
        }
        per_proxy.insert(proxy, order.iter().map(|&i| report.slots[i].slot.clone()).collect());
    }
    let keys: Vec<f64> = points.iter().map(|&p| p as f64).collect();
    let consensus = order_desc(&keys).into_iter().map(|i| report.slots[i].slot.clone()).collect();
    Ranking {
        per_proxy,
        points: report.slots.iter().map(|s| s.slot.clone()).zip(points).collect(),
        consensus,
    }
}

pub fn select_frozen(ranking: &Ranking, k: usize) -> BTreeSet<String> {
    ranking.consensus.iter().take(k).cloned().collect()
}

/// Validation PSNR drop per slot when that slot is replaced by the identity.
pub fn ablation_sensitivity(net: &Network, val: &Dataset) -> Result<Vec<(String, f64)>> {
    let base = evaluate_psnr(net, val)?;
    net.config()
        .slots
        .iter()
        .map(|spec| {
            let opts = ForwardOptions {
                skip_slots: BTreeSet::from([spec.id.clone()]),
                ..Default::default()
            };
            let restored = net.forward_with(&val.blurred, &opts)?;
            let psnr = crate::toynet::mean_psnr(&restored, &val.sharp, 1.0)?;
            Ok((spec.id.clone(), base - psnr))
        })
        .collect()
}

/// Ranks starting at 1; tied values share their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation; 0 when either side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "spearman needs paired samples");
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va * vb).sqrt()
    }
}
