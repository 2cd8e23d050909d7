//! Gaussian-process regression with an isotropic squared-exponential kernel.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hyperparameter grid searched by log marginal likelihood.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpGrid {
    pub lengthscales: Vec<f64>,
    pub amplitudes: Vec<f64>,
    pub noises: Vec<f64>,
}

impl Default for GpGrid {
    fn default() -> Self {
        // log-spaced from 0.03 to 0.12, under one interval width at n = 7;
        // longer scales blur neighbouring kinds into each other
        let lengthscales = (0..4).map(|i| 0.03 * 4f64.powf(i as f64 / 3.0)).collect();
        Self {
            lengthscales,
            amplitudes: vec![1.0],
            noises: vec![1e-6, 1e-4, 1e-2, 1e-1],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GpModel {
    pub x: Vec<Vec<f64>>,
    pub y_mean: f64,
    pub y_scale: f64,
    pub amplitude: f64,
    pub lengthscale: f64,
    pub noise: f64,
    pub log_marginal_likelihood: f64,
    /// Lower Cholesky factor of `K + noise I`, row-major.
    chol: Vec<f64>,
    /// `(K + noise I)^{-1} y` for standardised `y`.
    alpha: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// In-place lower Cholesky of an `n x n` row-major SPD matrix.
pub fn cholesky(a: &mut [f64], n: usize) -> Option<()> {
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if !(d > 0.0) || !d.is_finite() {
            return None;
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
        for k in j + 1..n {
            a[j * n + k] = 0.0;
        }
    }
    Some(())
}

/// Solves `L z = b`.
fn forward_sub(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut z = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * z[k];
        }
        z[i] = s / l[i * n + i];
    }
    z
}

/// Solves `L^T z = b`.
fn backward_sub(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut z = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in i + 1..n {
            s -= l[k * n + i] * z[k];
        }
        z[i] = s / l[i * n + i];
    }
    z
}

const JITTER_STEPS: [f64; 4] = [0.0, 1e-8, 1e-6, 1e-4];

struct Candidate {
    lml: f64,
    amplitude: f64,
    lengthscale: f64,
    noise: f64,
    chol: Vec<f64>,
    alpha: Vec<f64>,
}

fn try_fit(d2: &[f64], y: &[f64], amplitude: f64, lengthscale: f64, noise: f64) -> Option<Candidate> {
    let n = y.len();
    for jitter in JITTER_STEPS {
        let noise = noise + jitter;
        let mut k: Vec<f64> = d2
            .iter()
            .map(|&d| amplitude * (-0.5 * d / (lengthscale * lengthscale)).exp())
            .collect();
        for i in 0..n {
            k[i * n + i] += noise;
        }
        if cholesky(&mut k, n).is_none() {
            continue;
        }
        let alpha = backward_sub(&k, n, &forward_sub(&k, n, y));
        let fit: f64 = y.iter().zip(&alpha).map(|(a, b)| a * b).sum();
        let logdet: f64 = (0..n).map(|i| k[i * n + i].ln()).sum();
        let lml = -0.5 * fit - logdet - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
        return Some(Candidate {
            lml,
            amplitude,
            lengthscale,
            noise,
            chol: k,
            alpha,
        });
    }
    None
}

impl GpModel {
    /// Standardises `y` and picks the grid point with the highest log
    /// marginal likelihood; the first such point wins ties.
    pub fn fit(x: &[Vec<f64>], y: &[f64], grid: &GpGrid) -> Result<Self> {
        let n = x.len();
        if n < 2 || y.len() != n {
            return Err(Error::Precondition(format!(
                "a GP needs at least two paired observations, got {} inputs and {} targets",
                n,
                y.len()
            )));
        }
        let y_mean = y.iter().sum::<f64>() / n as f64;
        let var = y.iter().map(|v| (v - y_mean).powi(2)).sum::<f64>() / n as f64;
        let y_scale = if var > 0.0 { var.sqrt() } else { 1.0 };
        let ys: Vec<f64> = y.iter().map(|v| (v - y_mean) / y_scale).collect();
        let mut d2 = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                d2[i * n + j] = sq_dist(&x[i], &x[j]);
            }
        }
        let mut best: Option<Candidate> = None;
        for &lengthscale in &grid.lengthscales {
            for &amplitude in &grid.amplitudes {
                for &noise in &grid.noises {
                    if let Some(c) = try_fit(&d2, &ys, amplitude, lengthscale, noise) {
                        if best.as_ref().is_none_or(|b| c.lml > b.lml) {
                            best = Some(c);
                        }
                    }
                }
            }
        }
        let best = best.ok_or(Error::Factorization {
            jitter: JITTER_STEPS[JITTER_STEPS.len() - 1],
        })?;
        Ok(Self {
            x: x.to_vec(),
            y_mean,
            y_scale,
            amplitude: best.amplitude,
            lengthscale: best.lengthscale,
            noise: best.noise,
            log_marginal_likelihood: best.lml,
            chol: best.chol,
            alpha: best.alpha,
        })
    }

    /// Posterior `(mean, variance)` in standardised units. Variance includes
    /// the noise term and is clamped at zero.
    pub fn predict_standardized(&self, x: &[f64]) -> (f64, f64) {
        let n = self.x.len();
        let ell2 = self.lengthscale * self.lengthscale;
        let k: Vec<f64> = self
            .x
            .iter()
            .map(|xi| self.amplitude * (-0.5 * sq_dist(xi, x) / ell2).exp())
            .collect();
        let mean: f64 = k.iter().zip(&self.alpha).map(|(a, b)| a * b).sum();
        let v = forward_sub(&self.chol, n, &k);
        let var = self.amplitude + self.noise - v.iter().map(|a| a * a).sum::<f64>();
        (mean, var.max(0.0))
    }

    /// Posterior `(mean, variance)` in target units.
    pub fn predict(&self, x: &[f64]) -> (f64, f64) {
        let (m, v) = self.predict_standardized(x);
        (self.y_mean + self.y_scale * m, self.y_scale * self.y_scale * v)
    }
}
