//! Real-valued encodings of discrete block choices.

use rand::seq::SliceRandom;
use rand::Rng;

/// Equal-interval partition of each coordinate into `n` options.
pub fn decode(x: &[f64], n: usize) -> Vec<usize> {
    x.iter()
        .map(|&v| {
            let i = (v * n as f64).floor();
            if i.is_nan() || i < 0.0 {
                0
            } else {
                (i as usize).min(n - 1)
            }
        })
        .collect()
}

/// Interval midpoints.
pub fn encode(idx: &[usize], n: usize) -> Vec<f64> {
    idx.iter().map(|&i| (i as f64 + 0.5) / n as f64).collect()
}

/// `count` points in `[0,1)^m`, one per stratum in every dimension.
pub fn latin_hypercube<R: Rng>(count: usize, m: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut pts = vec![vec![0.0; m]; count];
    for d in 0..m {
        let mut strata: Vec<usize> = (0..count).collect();
        strata.shuffle(rng);
        for (p, s) in pts.iter_mut().zip(strata) {
            let u: f64 = rng.random();
            p[d] = (s as f64 + u) / count as f64;
        }
    }
    pts
}

/// `n^m`, saturating.
pub fn space_size(n: usize, m: usize) -> u128 {
    (0..m).fold(1u128, |acc, _| acc.saturating_mul(n as u128))
}

/// The `i`-th configuration in lexicographic order.
pub fn nth_config(mut i: u128, n: usize, m: usize) -> Vec<usize> {
    let mut out = vec![0; m];
    for d in (0..m).rev() {
        out[d] = (i % n as u128) as usize;
        i /= n as u128;
    }
    out
}
