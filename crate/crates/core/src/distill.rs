//! Block-level feature distillation of surrogate blocks and stitching.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::seed::{derive_seed, rng_for};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::toynet::checkpoint::{load_checkpoint, save_checkpoint};
use crate::toynet::{Adam, Block, BlockKind, Dataset, ForwardOptions, Network, NetworkConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillSettings {
    pub steps: usize,
    pub lr: f64,
    /// Images per step.
    pub batch_size: usize,
    /// Share of the training images used for distillation.
    pub fraction: f64,
    pub seed: u64,
}

impl Default for DistillSettings {
    fn default() -> Self {
        Self {
            steps: 400,
            lr: 3e-3,
            batch_size: 4,
            fraction: 0.25,
            seed: 0,
        }
    }
}

/// Features entering and leaving one slot.
#[derive(Clone, Debug, PartialEq)]
pub struct SlotFeatures {
    pub input: Tensor,
    pub output: Tensor,
}

impl SlotFeatures {
    fn len(&self) -> usize {
        self.input.shape()[0]
    }

    fn select(&self, idx: &[usize]) -> Result<SlotFeatures> {
        Ok(SlotFeatures {
            input: self.input.select_batch(idx)?,
            output: self.output.select_batch(idx)?,
        })
    }

    /// MSE of the constant per-element mean predictor.
    pub fn output_variance(&self) -> f64 {
        let d = self.output.data();
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d.len() as f64
    }
}

const CAPTURE_CHUNK: usize = 16;

/// Features of every slot of `net` for a batch, captured in one forward pass
/// per chunk of images.
pub fn capture_all(net: &Network, batch: &Tensor) -> Result<BTreeMap<String, SlotFeatures>> {
    let n = batch.shape()[0];
    let mut parts: BTreeMap<String, (Vec<Tensor>, Vec<Tensor>)> = BTreeMap::new();
    for start in (0..n).step_by(CAPTURE_CHUNK) {
        let idx: Vec<usize> = (start..(start + CAPTURE_CHUNK).min(n)).collect();
        let mut tape = Tape::new();
        let trace = net.trace(&mut tape, &batch.select_batch(&idx)?, &ForwardOptions::default())?;
        for (id, st) in &trace.slots {
            let e = parts.entry(id.clone()).or_default();
            e.0.push(tape.value(st.input).clone());
            e.1.push(tape.value(st.output).clone());
        }
    }
    parts
        .into_iter()
        .map(|(id, (i, o))| {
            Ok((
                id,
                SlotFeatures {
                    input: Tensor::concat_batch(&i)?,
                    output: Tensor::concat_batch(&o)?,
                },
            ))
        })
        .collect()
}

pub fn capture_features(net: &Network, slot: &str, batch: &Tensor) -> Result<(Tensor, Tensor)> {
    let mut all = capture_all(net, batch)?;
    let f = all
        .remove(slot)
        .ok_or_else(|| Error::InvalidConfig(format!("unknown slot {slot}")))?;
    Ok((f.input, f.output))
}

/// A trained stand-in for one slot.
#[derive(Clone, Debug, PartialEq)]
pub struct Surrogate {
    pub block: Block,
    /// Feature MSE on the held-out features.
    pub final_mse: f64,
    /// Same measure at initialisation.
    pub initial_mse: f64,
    pub fraction: f64,
    pub steps: usize,
    pub seed: u64,
    /// Running minimum of the per-step training loss.
    pub curve: Vec<f64>,
}

fn feature_mse(block: &Block, f: &SlotFeatures) -> Result<f64> {
    let mut total = 0.0;
    let n = f.len();
    for start in (0..n).step_by(CAPTURE_CHUNK) {
        let idx: Vec<usize> = (start..(start + CAPTURE_CHUNK).min(n)).collect();
        let part = f.select(&idx)?;
        let y = block.forward(&part.input)?;
        total += crate::tape::mse(y.data(), part.output.data()) * idx.len() as f64;
    }
    Ok(total / n as f64)
}

/// Trains `block` to map `train.input` to `train.output` and scores it on `eval`.
fn fit_block(
    mut block: Block,
    train: &SlotFeatures,
    eval: &SlotFeatures,
    steps: usize,
    lr: f64,
    batch_size: usize,
    seed: u64,
) -> Result<(Block, f64, f64, Vec<f64>)> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let initial = feature_mse(&block, eval)?;
    let mut adam = Adam::new(lr);
    let mut rng = rng_for(seed, "distill-order");
    let mut order: Vec<usize> = Vec::new();
    let mut curve = Vec::with_capacity(steps);
    let mut best = f64::INFINITY;
    for step in 0..steps {
        if order.len() < batch_size.min(train.len()) {
            let mut fresh: Vec<usize> = (0..train.len()).collect();
            fresh.shuffle(&mut rng);
            order.extend(fresh);
        }
        let take = batch_size.min(train.len());
        let idx: Vec<usize> = order.drain(..take).collect();
        let mb = train.select(&idx)?;
        let mut tape = Tape::new();
        let x = tape.leaf(mb.input);
        let (y, vars) = block.trace(&mut tape, x)?;
        let t = tape.leaf(mb.output);
        let loss = tape.mse_loss(y, t)?;
        let g = tape.backward(loss)?;
        let lv = tape.value(loss).item()?;
        let grads: BTreeMap<String, Tensor> = vars.iter().map(|(k, v)| (k.clone(), g.get(*v))).collect();
        if !lv.is_finite() || grads.values().any(|t| !t.is_finite()) {
            return Err(Error::Divergence {
                stage: "distill",
                unit: "step",
                step: step + 1,
            });
        }
        adam.step(&mut block.params, &grads);
        best = best.min(lv);
        curve.push(best);
    }
    let last = feature_mse(&block, eval)?;
    Ok((block, initial, last, curve))
}

/// Where a surrogate starts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DistillInit {
    /// Seeded fresh block (identity map).
    Fresh,
    /// The teacher's own weights; only meaningful for a base kind on a
    /// single-block base slot, as a consistency check of the distillation path.
    Teacher,
}

/// Distills one `(slot, kind)` surrogate from `train` features, scoring on `eval`.
pub fn distill_block(
    base: &Network,
    slot: &str,
    kind: BlockKind,
    train: &SlotFeatures,
    eval: &SlotFeatures,
    settings: &DistillSettings,
    init: DistillInit,
) -> Result<Surrogate> {
    let spec = base
        .config()
        .slot(slot)
        .ok_or_else(|| Error::InvalidConfig(format!("unknown slot {slot}")))?;
    if spec.frozen {
        return Err(Error::Precondition(format!("slot {slot} is frozen")));
    }
    let seed = derive_seed(settings.seed, &format!("{slot}/{kind}"));
    let block = match init {
        DistillInit::Fresh => {
            if kind == BlockKind::Base {
                return Err(Error::Precondition("the base kind needs no surrogate".into()));
            }
            Block::init(kind, spec.channels, &mut rng_for(seed, "surrogate-init"))
        }
        DistillInit::Teacher => {
            let mut blocks = base.slot_blocks(slot)?;
            if kind != BlockKind::Base || spec.kind != BlockKind::Base || blocks.len() != 1 {
                return Err(Error::Precondition(format!(
                    "teacher init needs a single base block in {slot}"
                )));
            }
            blocks.remove(0)
        }
    };
    let (block, initial_mse, final_mse, curve) =
        fit_block(block, train, eval, settings.steps, settings.lr, settings.batch_size, seed)?;
    if !final_mse.is_finite() {
        return Err(Error::Divergence {
            stage: "distill",
            unit: "step",
            step: settings.steps,
        });
    }
    Ok(Surrogate {
        block,
        final_mse,
        initial_mse,
        fraction: settings.fraction,
        steps: settings.steps,
        seed,
        curve,
    })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SurrogateSet {
    pub entries: BTreeMap<(String, BlockKind), Surrogate>,
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexEntry {
    slot: String,
    kind: BlockKind,
    checkpoint: String,
    final_mse: f64,
    initial_mse: f64,
    fraction: f64,
    steps: usize,
    seed: u64,
    curve: Vec<f64>,
}

pub const SURROGATE_INDEX: &str = "index.json";

impl SurrogateSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, slot: &str, kind: BlockKind) -> Option<&Surrogate> {
        self.entries.get(&(slot.to_string(), kind))
    }

    pub fn stem(slot: &str, kind: BlockKind) -> String {
        format!("{slot}__{kind}")
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut index = Vec::with_capacity(self.entries.len());
        for ((slot, kind), s) in &self.entries {
            let stem = Self::stem(slot, *kind);
            let meta = serde_json::json!({ "kind": kind, "channels": s.block.channels });
            save_checkpoint(dir, &stem, &s.block.params, meta)?;
            index.push(IndexEntry {
                slot: slot.clone(),
                kind: *kind,
                checkpoint: stem,
                final_mse: s.final_mse,
                initial_mse: s.initial_mse,
                fraction: s.fraction,
                steps: s.steps,
                seed: s.seed,
                curve: s.curve.clone(),
            });
        }
        let path = dir.join(SURROGATE_INDEX);
        fs::write(&path, serde_json::to_string_pretty(&index)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(SURROGATE_INDEX);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let index: Vec<IndexEntry> = serde_json::from_str(&text).map_err(|e| Error::Corrupt {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        let mut entries = BTreeMap::new();
        for e in index {
            let (params, meta) = load_checkpoint(dir, &e.checkpoint)?;
            let channels = meta["channels"].as_u64().ok_or_else(|| Error::Corrupt {
                path: dir.join(format!("{}.json", e.checkpoint)),
                reason: "missing channel count".into(),
            })? as usize;
            let block = Block {
                kind: e.kind,
                channels,
                params,
            };
            entries.insert(
                (e.slot, e.kind),
                Surrogate {
                    block,
                    final_mse: e.final_mse,
                    initial_mse: e.initial_mse,
                    fraction: e.fraction,
                    steps: e.steps,
                    seed: e.seed,
                    curve: e.curve,
                },
            );
        }
        Ok(Self { entries })
    }
}

/// Distills every `(slot, kind)` pair. Training features come from a seeded
/// `fraction` of `train`; final MSE is measured on the `eval` images. Pairs
/// run on the worker pool; each pair's seed depends only on the master seed
/// and the pair, so the result does not depend on scheduling.
pub fn distill_all(
    base: &Network,
    train: &Dataset,
    eval: &Dataset,
    slots: &[String],
    kinds: &[BlockKind],
    settings: &DistillSettings,
) -> Result<SurrogateSet> {
    let subset = train.subsample(settings.fraction, derive_seed(settings.seed, "distill-subset"))?;
    let train_feats = capture_all(base, &subset.blurred)?;
    let eval_feats = capture_all(base, &eval.blurred)?;
    let mut pairs = Vec::new();
    for slot in slots {
        if !train_feats.contains_key(slot) {
            return Err(Error::InvalidConfig(format!("unknown slot {slot}")));
        }
        for &kind in kinds {
            pairs.push((slot.clone(), kind));
        }
    }
    let results = par::map(&pairs, |(slot, kind)| {
        distill_block(
            base,
            slot,
            *kind,
            &train_feats[slot],
            &eval_feats[slot],
            settings,
            DistillInit::Fresh,
        )
    });
    let mut entries = BTreeMap::new();
    for (pair, r) in pairs.into_iter().zip(results) {
        entries.insert(pair, r?);
    }
    Ok(SurrogateSet { entries })
}

/// Base weights everywhere except slots whose kind in `config` is not base,
/// which receive their surrogate.
pub fn stitch(base: &Network, set: &SurrogateSet, config: &NetworkConfig) -> Result<Network> {
    let ids = |c: &NetworkConfig| c.slots.iter().map(|s| s.id.clone()).collect::<Vec<_>>();
    if ids(config) != ids(base.config()) {
        return Err(Error::InvalidConfig("config slots differ from the base network".into()));
    }
    let mut net = base.clone();
    for spec in &config.slots {
        if spec.kind == base.config().slot(&spec.id).map_or(BlockKind::Base, |s| s.kind) {
            continue;
        }
        let s = set.get(&spec.id, spec.kind).ok_or_else(|| Error::MissingSurrogate {
            slot: spec.id.clone(),
            kind: spec.kind.to_string(),
        })?;
        net.set_slot_block(&spec.id, &s.block)?;
    }
    Ok(net)
}
