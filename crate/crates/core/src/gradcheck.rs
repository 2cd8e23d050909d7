//! Finite-difference gradients and Hessian-vector products.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::seed::rng_for;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::toynet::{Block, BlockKind};

/// Central-difference gradient of `f` at `theta`.
pub fn finite_diff_grad(f: impl Fn(&[f64]) -> f64, theta: &[f64], h: f64) -> Vec<f64> {
    let mut probe = theta.to_vec();
    (0..theta.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Hessian-vector product by central differences of the gradient:
/// `(grad(theta + eps v) - grad(theta - eps v)) / (2 eps)` with
/// `eps = 1e-4 / max(1, |v|_inf)`.
pub fn hvp(grad: impl Fn(&[f64]) -> Result<Vec<f64>>, theta: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    if theta.len() != v.len() {
        return Err(Error::shape(format!(
            "hvp direction has {} entries for {} parameters",
            v.len(),
            theta.len()
        )));
    }
    if v.iter().all(|&x| x == 0.0) {
        return Ok(vec![0.0; v.len()]);
    }
    let vmax = v.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    let eps = 1e-4 / vmax.max(1.0);
    let plus: Vec<f64> = theta.iter().zip(v).map(|(t, d)| t + eps * d).collect();
    let minus: Vec<f64> = theta.iter().zip(v).map(|(t, d)| t - eps * d).collect();
    let gp = grad(&plus)?;
    let gm = grad(&minus)?;
    let out: Vec<f64> = gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * eps)).collect();
    if let Some(index) = out.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite {
            context: "hessian-vector product".into(),
            index,
        });
    }
    Ok(out)
}

/// Agreement test used for gradient checks: relative error below `rel`, or
/// absolute error below `abs` when both values are near zero.
pub fn grads_agree(analytic: f64, numeric: f64, rel: f64, abs: f64) -> bool {
    let diff = (analytic - numeric).abs();
    diff < abs || diff / analytic.abs().max(numeric.abs()) < rel
}

/// One probed parameter coordinate.
#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    pub kind: BlockKind,
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl Probe {
    pub fn rel_error(&self) -> f64 {
        let diff = (self.analytic - self.numeric).abs();
        if diff == 0.0 {
            0.0
        } else {
            diff / self.analytic.abs().max(self.numeric.abs())
        }
    }
}

/// Compares reverse-mode parameter gradients of a randomly parameterised
/// block of `kind` with central differences (step `h`) at `probes` random
/// coordinates. The loss is the MSE against a random target.
pub fn probe_block_gradients(kind: BlockKind, channels: usize, probes: usize, h: f64, seed: u64) -> Result<Vec<Probe>> {
    let mut rng = rng_for(seed, &format!("gradcheck.{kind}"));
    let mut block = Block::init(kind, channels, &mut rng);
    for t in block.params.values_mut() {
        for v in t.data_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
    }
    let x = Tensor::from_fn(&[2, channels, 5, 4], |_| rng.random_range(-1.0..1.0));
    let target = Tensor::from_fn(&[2, channels, 5, 4], |_| rng.random_range(-1.0..1.0));
    let loss_of = |b: &Block| -> Result<f64> { crate::tape::ops::mse_loss(&b.forward(&x)?, &target) };

    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let (y, vars) = block.trace(&mut tape, xv)?;
    let tv = tape.leaf(target.clone());
    let loss = tape.mse_loss(y, tv)?;
    let grads = tape.backward(loss)?;

    let coords: Vec<(String, usize)> = block
        .params
        .iter()
        .flat_map(|(name, t)| (0..t.len()).map(move |i| (name.clone(), i)))
        .collect();
    let mut picks: Vec<usize> = (0..coords.len()).collect();
    picks.shuffle(&mut rng);
    picks.truncate(probes);
    picks.sort_unstable();
    let mut out = Vec::with_capacity(picks.len());
    for p in picks {
        let (name, i) = &coords[p];
        let analytic = grads.get(vars[name]).data()[*i];
        let mut probe = block.clone();
        let orig = block.params[name].data()[*i];
        probe.params.get_mut(name).expect("param").data_mut()[*i] = orig + h;
        let up = loss_of(&probe)?;
        probe.params.get_mut(name).expect("param").data_mut()[*i] = orig - h;
        let down = loss_of(&probe)?;
        out.push(Probe {
            kind,
            param: name.clone(),
            index: *i,
            analytic,
            numeric: (up - down) / (2.0 * h),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let g = finite_diff_grad(|t| t[0] * t[0], &[3.0], 1e-5);
        assert!((g[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn linear_slope() {
        let g = finite_diff_grad(|t| 2.5 * t[0] - 4.0 * t[1] + 1.0, &[0.3, -7.0], 1e-3);
        assert!((g[0] - 2.5).abs() < 1e-9);
        assert!((g[1] + 4.0).abs() < 1e-9);
    }

    #[test]
    fn hvp_quadratic() {
        // 0.5 theta^T A theta, gradient A theta
        let a = [[2.0, 0.5, 0.0], [0.5, 1.0, -0.3], [0.0, -0.3, 4.0]];
        let grad = |t: &[f64]| -> Result<Vec<f64>> {
            Ok((0..3).map(|i| (0..3).map(|j| a[i][j] * t[j]).sum()).collect())
        };
        let theta = [0.4, -1.2, 0.9];
        let v = [1.0, 2.0, -0.5];
        let hv = hvp(grad, &theta, &v).unwrap();
        for i in 0..3 {
            let want: f64 = (0..3).map(|j| a[i][j] * v[j]).sum();
            assert!((hv[i] - want).abs() < 1e-6);
        }
        assert_eq!(hvp(grad, &theta, &[0.0; 3]).unwrap(), vec![0.0; 3]);
        assert!(hvp(grad, &theta, &[1.0]).is_err());
    }

    #[test]
    fn hvp_reports_non_finite_index() {
        let grad = |t: &[f64]| -> Result<Vec<f64>> { Ok(vec![t[0], if t[1] > 0.0 { f64::INFINITY } else { 0.0 }]) };
        match hvp(grad, &[0.0, 0.0], &[1.0, 1.0]) {
            Err(Error::NonFinite { index, .. }) => assert_eq!(index, 1),
            other => panic!("unexpected {other:?}"),
        }
    }
}
