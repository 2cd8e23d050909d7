//! Adaptive-moment training for whole networks.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::data::Dataset;
use super::metrics::mean_psnr;
use super::network::Network;
use crate::error::{Error, Result};
use crate::seed::rng_for;
use crate::tensor::Tensor;

/// Adam with β = (0.9, 0.999) and a fixed learning rate.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Updates every parameter that has a gradient entry.
    pub fn step(&mut self, params: &mut BTreeMap<String, Tensor>, grads: &BTreeMap<String, Tensor>) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 3e-3,
            batch_size: 8,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean minibatch loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub val_psnr_before: f64,
    pub val_psnr: f64,
    /// PSNR of the unrestored blurred inputs on the validation split.
    pub blurred_psnr: f64,
}

/// Mean validation PSNR of the restored images.
pub fn evaluate_psnr(net: &Network, data: &Dataset) -> Result<f64> {
    Ok(mean_psnr(&restore(net, &data.blurred)?, &data.sharp, 1.0)?)
}

pub fn restore(net: &Network, blurred: &Tensor) -> Result<Tensor> {
    const CHUNK: usize = 16;
    let n = blurred.shape()[0];
    let parts = (0..n)
        .step_by(CHUNK)
        .map(|start| {
            let idx: Vec<usize> = (start..(start + CHUNK).min(n)).collect();
            net.forward(&blurred.select_batch(&idx)?)
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::concat_batch(&parts)
}

fn run(stage: &'static str, mut net: Network, train: &Dataset, val: &Dataset, s: &TrainSettings) -> Result<(Network, TrainReport)> {
    if s.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let val_psnr_before = evaluate_psnr(&net, val)?;
    let blurred_psnr = mean_psnr(&val.blurred, &val.sharp, 1.0)?;
    let mut adam = Adam::new(s.lr);
    let mut rng = rng_for(s.seed, stage);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epoch_losses = Vec::with_capacity(s.epochs);
    for epoch in 0..s.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(s.batch_size) {
            let batch = train.subset(chunk)?;
            let (loss, grads) = net.loss_and_grads(&batch.blurred, &batch.sharp)?;
            if !loss.is_finite() || grads.values().any(|g| !g.is_finite()) {
                return Err(Error::Divergence {
                    stage,
                    unit: "epoch",
                    step: epoch + 1,
                });
            }
            adam.step(net.params_mut(), &grads);
            total += loss;
            batches += 1;
        }
        epoch_losses.push(total / batches as f64);
    }
    let val_psnr = if s.epochs == 0 { val_psnr_before } else { evaluate_psnr(&net, val)? };
    Ok((
        net,
        TrainReport {
            epoch_losses,
            val_psnr_before,
            val_psnr,
            blurred_psnr,
        },
    ))
}

/// Trains the base network from its initialisation.
pub fn train_base(net: Network, train: &Dataset, val: &Dataset, settings: &TrainSettings) -> Result<(Network, TrainReport)> {
    run("train-base", net, train, val, settings)
}

/// End-to-end fine-tuning of a (possibly stitched) network; every slot is trainable.
pub fn finetune(net: Network, train: &Dataset, val: &Dataset, settings: &TrainSettings) -> Result<(Network, TrainReport)> {
    run("finetune", net, train, val, settings)
}
