//! Exact expected hypervolume improvement in two dimensions for independent
//! Gaussian objectives.

use statrs::function::erf::erfc;

use super::pareto::staircase;

fn std_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

fn std_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// `E[(b - Y)^+]` for `Y ~ N(mu, sigma^2)`.
pub fn expected_shortfall(b: f64, mu: f64, sigma: f64) -> f64 {
    if b == f64::NEG_INFINITY {
        return 0.0;
    }
    if sigma <= 0.0 {
        return (b - mu).max(0.0);
    }
    let z = (b - mu) / sigma;
    ((b - mu) * std_cdf(z) + sigma * std_pdf(z)).max(0.0)
}

/// `E[HV(front ∪ {Y}) - HV(front)]` with `Y_j ~ N(mu_j, sigma_j^2)` independent.
///
/// The region not dominated by the front splits into vertical strips
/// `[a_i, a_{i+1})` with ceilings `b_i`; improvement is a sum over strips of
/// a width term in `Y_1` times a height term in `Y_2`.
pub fn ehvi(mu: [f64; 2], sigma: [f64; 2], front: &[[f64; 2]], r: [f64; 2]) -> f64 {
    let stairs = staircase(front, r);
    let k = stairs.len();
    let mut total = 0.0;
    for i in 0..=k {
        let lo = if i == 0 { f64::NEG_INFINITY } else { stairs[i - 1][0] };
        let hi = if i == k { r[0] } else { stairs[i][0] };
        let ceiling = if i == 0 { r[1] } else { stairs[i - 1][1] };
        let width = expected_shortfall(hi, mu[0], sigma[0]) - expected_shortfall(lo, mu[0], sigma[0]);
        let height = expected_shortfall(ceiling, mu[1], sigma[1]);
        total += width.max(0.0) * height;
    }
    total.max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::search::pareto::hypervolume_2d;

    #[test]
    fn deterministic_limit() {
        let front = [[0.2, 0.8], [0.5, 0.4], [0.9, 0.1]];
        let r = [1.0, 1.0];
        let mean = [0.3, 0.3];
        let mut with = front.to_vec();
        with.push(mean);
        let want = hypervolume_2d(&with, r) - hypervolume_2d(&front, r);
        assert!((ehvi(mean, [0.0, 0.0], &front, r) - want).abs() < 1e-15);
        assert_eq!(ehvi([0.6, 0.5], [0.0, 0.0], &front, r), 0.0);
    }

    #[test]
    fn empty_front_is_product_of_shortfalls() {
        let v = ehvi([0.5, 0.5], [0.1, 0.2], &[], [1.0, 1.0]);
        let want = expected_shortfall(1.0, 0.5, 0.1) * expected_shortfall(1.0, 0.5, 0.2);
        assert!((v - want).abs() < 1e-15);
    }

    #[test]
    fn shortfall_matches_quadrature() {
        let (b, mu, s) = (0.3, 0.1, 0.5);
        let n = 200_000;
        let lo = mu - 12.0 * s;
        let dx = (b - lo) / n as f64;
        let q: f64 = (0..n)
            .map(|i| {
                let y = lo + (i as f64 + 0.5) * dx;
                (b - y) * std_pdf((y - mu) / s) / s * dx
            })
            .sum();
        assert!((expected_shortfall(b, mu, s) - q).abs() < 1e-9);
    }
}
