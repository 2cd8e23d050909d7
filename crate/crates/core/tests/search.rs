use std::collections::HashSet;

use blocksurgeon::profile::PenaltyScale;
use blocksurgeon::search::ehvi::expected_shortfall;
use blocksurgeon::search::mobo::candidate_pool;
use blocksurgeon::search::select::knee_distances;
use blocksurgeon::search::*;
use blocksurgeon::seed::rng_for;
use blocksurgeon::{Error, Result};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Additive toy objective: per-slot loss and latency tables.
struct Additive {
    loss: Vec<Vec<f64>>,
    lat: Vec<Vec<f64>>,
}

impl Additive {
    fn random(m: usize, n: usize, seed: u64) -> Self {
        let mut rng = rng_for(seed, "additive");
        let mut loss = Vec::new();
        let mut lat = Vec::new();
        for _ in 0..m {
            let mut l = vec![0.0];
            let mut t = vec![20.0];
            for _ in 1..n {
                l.push(rng.random_range(0.0..1.0));
                t.push(rng.random_range(2.0..19.0));
            }
            loss.push(l);
            lat.push(t);
        }
        Self { loss, lat }
    }
}

impl Objective for Additive {
    fn dims(&self) -> usize {
        self.loss.len()
    }
    fn options(&self) -> usize {
        self.loss[0].len()
    }
    fn evaluate(&self, kinds: &[usize]) -> Result<(f64, f64)> {
        let f1 = kinds.iter().enumerate().map(|(d, &k)| self.loss[d][k]).sum();
        let l = kinds.iter().enumerate().map(|(d, &k)| self.lat[d][k]).sum();
        Ok((f1, l))
    }
    fn latency_bounds(&self) -> Result<(f64, f64)> {
        let min = self.lat.iter().map(|r| r.iter().copied().fold(f64::INFINITY, f64::min)).sum();
        let base = self.lat.iter().map(|r| r[0]).sum();
        Ok((min, base))
    }
    fn alpha_floor(&self) -> f64 {
        0.1
    }
}

fn obs(f1: f64, f2: f64, order: usize) -> Observation {
    Observation {
        iteration: 0,
        encoding: vec![],
        kinds: vec![order],
        f1,
        f2,
        latency_ms: f2,
        order,
    }
}

fn random_front(rng: &mut ChaCha8Rng, k: usize) -> Vec<[f64; 2]> {
    let mut a = ParetoArchive::new();
    while a.len() < k {
        let x: f64 = rng.random_range(0.0..0.9);
        a.insert(obs(x, rng.random_range(0.0..0.9), 0));
    }
    a.front()
}

#[test]
fn decode_examples() {
    assert_eq!(decode(&[0.1, 0.9], 3), vec![0, 2]);
    assert_eq!(decode(&[1.0], 7), vec![6]);
    assert_eq!(decode(&[1.0 / 3.0], 3), vec![1]);
    assert!((encode(&[0], 7)[0] - 0.5 / 7.0).abs() < 1e-15);
    for i in 0..49 {
        let idx = nth_config(i, 7, 2);
        assert_eq!(decode(&encode(&idx, 7), 7), idx);
    }
}

#[test]
fn dominance_examples() {
    assert!(dominates([1.0, 2.0], [2.0, 3.0]));
    assert!(!dominates([1.0, 3.0], [2.0, 2.0]) && !dominates([2.0, 2.0], [1.0, 3.0]));
    assert!(!dominates([1.0, 2.0], [1.0, 2.0]));
}

#[test]
fn archive_examples() {
    let mut a = ParetoArchive::new();
    a.insert(obs(1.0, 1.0, 0));
    a.insert(obs(0.5, 2.0, 1));
    let before = a.clone();
    a = pareto_update(a, obs(1.5, 1.5, 2));
    assert_eq!(a, before);
    a = pareto_update(a, obs(1.0, 1.0, 3));
    assert_eq!(a.members.iter().map(|m| m.order).collect::<Vec<_>>(), vec![0, 1]);
    a = pareto_update(a, obs(0.1, 0.1, 4));
    assert_eq!(a.len(), 1);
}

#[test]
fn hypervolume_fixtures() {
    assert_eq!(hypervolume_2d(&[[0.0, 0.0]], [1.0, 1.0]), 1.0);
    assert_eq!(hypervolume_2d(&[[0.0, 0.5], [0.5, 0.0]], [1.0, 1.0]), 0.75);
}

#[test]
fn hypervolume_matches_monte_carlo() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..10 {
        let front = random_front(&mut rng, 6);
        let exact = hypervolume_2d(&front, [1.0, 1.0]);
        let draws = 200_000;
        let mut hit = 0;
        for _ in 0..draws {
            let (x, y): (f64, f64) = (rng.random(), rng.random());
            if front.iter().any(|p| p[0] <= x && p[1] <= y) {
                hit += 1;
            }
        }
        let mc = hit as f64 / draws as f64;
        assert!((exact - mc).abs() <= 0.02 * exact, "{exact} vs {mc}");
    }
}

#[test]
fn ehvi_limits() {
    let front = [[0.2, 0.6], [0.5, 0.3]];
    let r = [1.0, 1.0];
    assert_eq!(ehvi([0.6, 0.7], [0.0, 0.0], &front, r), 0.0);
    let mut with = front.to_vec();
    with.push([0.3, 0.4]);
    let want = hypervolume_2d(&with, r) - hypervolume_2d(&front, r);
    assert!((ehvi([0.3, 0.4], [0.0, 0.0], &front, r) - want).abs() < 1e-12);
    assert!((expected_shortfall(1.0, 0.5, 0.0) - 0.5).abs() < 1e-15);
}

#[test]
fn ehvi_matches_monte_carlo() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let std = Normal::new(0.0, 1.0).unwrap();
    for case in 0..8 {
        let front = random_front(&mut rng, 1 + case % 5);
        let r = [1.0, 1.0];
        let mu = [rng.random_range(0.0..0.8), rng.random_range(0.0..0.8)];
        let sigma = [rng.random_range(0.01..0.4), rng.random_range(0.01..0.4)];
        let exact = ehvi(mu, sigma, &front, r);
        let base = hypervolume_2d(&front, r);
        let draws = 200_000;
        let mut total = 0.0;
        let mut pts = front.clone();
        pts.push([0.0, 0.0]);
        for _ in 0..draws {
            let y = [mu[0] + sigma[0] * std.sample(&mut rng), mu[1] + sigma[1] * std.sample(&mut rng)];
            *pts.last_mut().unwrap() = y;
            total += hypervolume_2d(&pts, r) - base;
        }
        let mc = total / draws as f64;
        assert!((exact - mc).abs() <= (0.03 * exact).max(1e-5), "case {case}: {exact} vs {mc}");
    }
}

fn se(a: &[f64], b: &[f64], s2: f64, ell: f64) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    s2 * (-0.5 * d2 / (ell * ell)).exp()
}

#[test]
fn gp_matches_dense_solver() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x: Vec<Vec<f64>> = (0..15).map(|_| (0..3).map(|_| rng.random()).collect()).collect();
    let y: Vec<f64> = x.iter().map(|p| (3.0 * p[0]).sin() + p[1] * p[2] + 0.3).collect();
    let gp = GpModel::fit(&x, &y, &GpGrid::default()).unwrap();
    let n = x.len();
    let (s2, ell, noise) = (gp.amplitude, gp.lengthscale, gp.noise);
    let k = DMatrix::from_fn(n, n, |i, j| se(&x[i], &x[j], s2, ell) + if i == j { noise } else { 0.0 });
    let ys = DVector::from_iterator(n, y.iter().map(|v| (v - gp.y_mean) / gp.y_scale));
    let lu = k.clone().lu();
    let alpha = lu.solve(&ys).unwrap();
    for _ in 0..5 {
        let t: Vec<f64> = (0..3).map(|_| rng.random()).collect();
        let ks = DVector::from_iterator(n, x.iter().map(|xi| se(xi, &t, s2, ell)));
        let mean = ks.dot(&alpha);
        let var = s2 + noise - ks.dot(&lu.solve(&ks).unwrap());
        let (m, v) = gp.predict_standardized(&t);
        assert!((m - mean).abs() < 1e-8, "{m} vs {mean}");
        assert!((v - var.max(0.0)).abs() < 1e-8, "{v} vs {var}");
    }
}

#[test]
fn gp_interpolates_and_reverts() {
    let x: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64 / 5.0]).collect();
    let y: Vec<f64> = x.iter().map(|p| (4.0 * p[0]).cos()).collect();
    let grid = GpGrid {
        noises: vec![1e-6],
        ..Default::default()
    };
    let gp = GpModel::fit(&x, &y, &grid).unwrap();
    let ys: Vec<f64> = y.iter().map(|v| (v - gp.y_mean) / gp.y_scale).collect();
    for (xi, yi) in x.iter().zip(&ys) {
        assert!((gp.predict_standardized(xi).0 - yi).abs() < 1e-3);
    }
    let far = [10.0 * gp.lengthscale + 1.0 + 50.0];
    let (m, v) = gp.predict_standardized(&far);
    assert!(m.abs() < 1e-9);
    assert!((v - (gp.amplitude + gp.noise)).abs() < 1e-9);
    let near = gp.predict_standardized(&x[2]).1;
    let away = gp.predict_standardized(&[1.0 + 10.0 * gp.lengthscale]).1;
    assert!(near <= away);
    assert!(matches!(GpModel::fit(&x[..1], &y[..1], &grid), Err(Error::Precondition(_))));
}

#[test]
fn knee_examples() {
    let mut a = ParetoArchive::new();
    for (i, (f1, f2)) in [(0.0, 1.0), (0.1, 0.1), (1.0, 0.0)].into_iter().enumerate() {
        a.insert(obs(f1, f2, i));
    }
    let k = knee_select(&a).unwrap();
    assert_eq!((k.f1, k.f2), (0.1, 0.1));
    let mut line = ParetoArchive::new();
    for (i, t) in [0.0, 0.25, 0.5, 1.0].into_iter().enumerate() {
        line.insert(obs(t, 1.0 - t, i));
    }
    assert_eq!(knee_select(&line).unwrap().f2, 0.0);
    assert!(knee_select(&ParetoArchive::new()).is_err());
}

#[test]
fn least_latency_examples() {
    let mut a = ParetoArchive::new();
    a.insert(Observation {
        latency_ms: 10.0,
        ..obs(0.5, 0.2, 0)
    });
    a.insert(Observation {
        latency_ms: 20.0,
        ..obs(0.1, 0.4, 1)
    });
    assert_eq!(least_latency_select(&a).unwrap().latency_ms, 10.0);
    let mut one = ParetoArchive::new();
    one.insert(obs(0.3, 0.3, 0));
    assert_eq!(least_latency_select(&one).unwrap().order, 0);
}

#[test]
fn propose_cases() {
    let gp = GpModel::fit(&[vec![0.1], vec![0.9]], &[0.0, 1.0], &GpGrid::default()).unwrap();
    let mut rng = rng_for(0, "t");
    let err = propose((&gp, &gp), &ParetoArchive::new(), [2.0, 2.0], &HashSet::new(), 2, 1, 4, &mut rng);
    assert!(matches!(err, Err(Error::Precondition(_))));
    let mut a = ParetoArchive::new();
    a.insert(Observation {
        kinds: vec![0],
        ..obs(0.0, 1.0, 0)
    });
    let evaluated: HashSet<Vec<usize>> = [vec![0]].into();
    let got = propose((&gp, &gp), &a, [2.0, 2.0], &evaluated, 2, 1, 1, &mut rng).unwrap();
    assert_eq!(got, vec![1]);
    let all: HashSet<Vec<usize>> = [vec![0], vec![1]].into();
    assert!(matches!(
        propose((&gp, &gp), &a, [2.0, 2.0], &all, 2, 1, 1, &mut rng),
        Err(Error::Exhausted)
    ));
}

#[test]
fn pool_excludes_evaluated_and_covers_neighbours() {
    let mut a = ParetoArchive::new();
    a.insert(Observation {
        kinds: vec![1, 2],
        ..obs(0.2, 0.2, 0)
    });
    let evaluated: HashSet<Vec<usize>> = [vec![1, 2], vec![0, 2]].into();
    let pool = candidate_pool(&a, &evaluated, 3, 2, 0, &mut rng_for(1, "p"));
    let set: HashSet<Vec<usize>> = pool.iter().cloned().collect();
    assert_eq!(set.len(), pool.len());
    assert_eq!(set, [vec![2, 2], vec![1, 0], vec![1, 1]].into());
}

fn scale_for(obj: &dyn Objective) -> PenaltyScale {
    let (l_min, l_base) = obj.latency_bounds().unwrap();
    PenaltyScale {
        alpha: 1.0,
        l_min,
        l_base,
    }
}

#[test]
fn brute_force_examples() {
    let tiny = Additive::random(1, 2, 0);
    let (_, all) = brute_force_pareto(&tiny, &scale_for(&tiny)).unwrap();
    assert_eq!(all.len(), 2);

    let obj = Additive::random(2, 3, 4);
    let (arch, all) = brute_force_pareto(&obj, &scale_for(&obj)).unwrap();
    assert_eq!(all.len(), 9);
    let hand: Vec<&Observation> = all
        .iter()
        .filter(|o| !all.iter().any(|p| dominates(p.objectives(), o.objectives())))
        .collect();
    let mut got: Vec<Vec<usize>> = arch.members.iter().map(|m| m.kinds.clone()).collect();
    let mut want: Vec<Vec<usize>> = hand.iter().map(|m| m.kinds.clone()).collect();
    got.sort();
    want.sort();
    assert_eq!(got, want);
}

#[test]
fn eight_slot_space_is_refused() {
    let big = Additive::random(8, 7, 0);
    match brute_force_pareto(&big, &scale_for(&big)) {
        Err(Error::SpaceTooLarge { count, .. }) => assert_eq!(count, 5_764_801),
        other => panic!("{:?}", other.map(|r| r.0.len())),
    }
    assert!(matches!(TableObjective::tabulate(&big), Err(Error::SpaceTooLarge { count: 5_764_801, .. })));
}

#[test]
fn budget_equal_to_init_keeps_the_design_front() {
    let obj = Additive::random(3, 4, 1);
    let s = MoboSettings {
        budget: 8,
        ..Default::default()
    };
    let res = mobo_run(&obj, &s).unwrap();
    assert!(res.log.iter().all(|o| o.iteration == 0));
    let mut filter = ParetoArchive::new();
    for o in &res.log {
        filter.insert(o.clone());
    }
    assert_eq!(res.archive, filter);
}

#[test]
fn run_invariants_and_reproducibility() {
    let obj = Additive::random(3, 5, 2);
    let s = MoboSettings {
        budget: 40,
        seed: 9,
        ..Default::default()
    };
    let res = mobo_run(&obj, &s).unwrap();
    assert_eq!(res.log.len(), 40);
    let unique: HashSet<&Vec<usize>> = res.log.iter().map(|o| &o.kinds).collect();
    assert_eq!(unique.len(), 40);
    assert!(res.hv_history.windows(2).all(|w| w[1] >= w[0]));
    let init = s.init_size_for(3);
    for o in &res.log[..init] {
        assert!(o.f1 < res.reference[0] && o.f2 < res.reference[1]);
    }
    let single = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap()
        .install(|| mobo_run(&obj, &s).unwrap());
    assert_eq!(single, res);
}

#[test]
fn exhaustion_stops_the_loop() {
    let obj = Additive::random(2, 3, 3);
    let res = mobo_run(
        &obj,
        &MoboSettings {
            budget: 50,
            ..Default::default()
        },
    )
    .unwrap();
    assert!(res.exhausted);
    assert_eq!(res.log.len(), 9);
}

#[test]
fn run_log_csv() {
    let obj = Additive::random(2, 3, 5);
    let res = mobo_run(
        &obj,
        &MoboSettings {
            budget: 9,
            ..Default::default()
        },
    )
    .unwrap();
    let names: Vec<String> = ["base", "alt1", "alt2"].iter().map(|s| s.to_string()).collect();
    let mut out = Vec::new();
    write_run_log(&res.log, &res.archive, &names, &mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "iteration,slot_kinds,f1_db,f2,latency_ms,pareto_member");
    assert_eq!(lines.len(), 10);
    let members = lines[1..].iter().filter(|l| l.ends_with(",true")).count();
    assert_eq!(members, res.archive.len());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn archive_is_order_independent(points in proptest::collection::vec((0u8..10, 0u8..10), 1..25), seed in 0u64..1000) {
        let pts: Vec<(f64, f64)> = points.iter().map(|&(a, b)| (a as f64, b as f64)).collect();
        let mut forward = ParetoArchive::new();
        for (i, &(a, b)) in pts.iter().enumerate() {
            forward.insert(obs(a, b, i));
        }
        let mut shuffled: Vec<usize> = (0..pts.len()).collect();
        rand::seq::SliceRandom::shuffle(&mut shuffled[..], &mut ChaCha8Rng::seed_from_u64(seed));
        let mut other = ParetoArchive::new();
        for &i in &shuffled {
            other.insert(obs(pts[i].0, pts[i].1, i));
        }
        let key = |a: &ParetoArchive| {
            let mut f: Vec<(u64, u64)> = a.front().iter().map(|p| (p[0] as u64, p[1] as u64)).collect();
            f.sort();
            f
        };
        let mut brute: Vec<(u64, u64)> = pts
            .iter()
            .filter(|p| !pts.iter().any(|q| dominates([q.0, q.1], [p.0, p.1])))
            .map(|p| (p.0 as u64, p.1 as u64))
            .collect();
        brute.sort();
        brute.dedup();
        prop_assert_eq!(key(&forward), key(&other));
        prop_assert_eq!(key(&forward), brute);
        let f = forward.front();
        for a in &f {
            for b in &f {
                prop_assert!(!dominates(*a, *b));
            }
        }
    }

    #[test]
    fn knee_matches_direct_scan(raw in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0), 3..15)) {
        let mut a = ParetoArchive::new();
        for (i, &(x, y)) in raw.iter().enumerate() {
            a.insert(obs(x, y, i));
        }
        prop_assume!(a.len() >= 3);
        let m = &a.members;
        let (lo1, hi1) = m.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), o| (l.min(o.f1), h.max(o.f1)));
        let (lo2, hi2) = m.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), o| (l.min(o.f2), h.max(o.f2)));
        let nx = |o: &Observation| ((o.f1 - lo1) / (hi1 - lo1), (o.f2 - lo2) / (hi2 - lo2));
        // extremes of a non-dominated set: best f1 has the worst f2 and vice versa
        let a0 = (0.0, 1.0);
        let b0 = (1.0, 0.0);
        let dist = |o: &Observation| {
            let (px, py) = nx(o);
            ((px - a0.0) * (b0.1 - a0.1) - (py - a0.1) * (b0.0 - a0.0)).abs() / 2f64.sqrt()
        };
        let d = knee_distances(&a);
        for (o, di) in m.iter().zip(&d) {
            prop_assert!((dist(o) - di).abs() < 1e-12);
        }
        let best = m.iter().map(dist).fold(f64::NEG_INFINITY, f64::max);
        let k = knee_select(&a).unwrap();
        prop_assert!((dist(&k) - best).abs() < 1e-9);
    }

    #[test]
    fn least_latency_matches_scan(raw in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0, 1.0f64..50.0), 1..12)) {
        let mut a = ParetoArchive::new();
        for (i, &(x, y, l)) in raw.iter().enumerate() {
            a.insert(Observation { latency_ms: l, ..obs(x, y, i) });
        }
        let got = least_latency_select(&a).unwrap();
        let min = a.members.iter().map(|m| m.latency_ms).fold(f64::INFINITY, f64::min);
        prop_assert_eq!(got.latency_ms, min);
    }

    #[test]
    fn ehvi_is_non_negative(mu in (0.0f64..1.2, 0.0f64..1.2), sigma in (0.0f64..0.5, 0.0f64..0.5), seed in 0u64..100) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let front = random_front(&mut rng, 4);
        prop_assert!(ehvi([mu.0, mu.1], [sigma.0, sigma.1], &front, [1.0, 1.0]) >= 0.0);
    }

    #[test]
    fn decode_is_total(x in proptest::collection::vec(0.0f64..=1.0, 1..6), n in 1usize..9) {
        let idx = decode(&x, n);
        prop_assert!(idx.iter().all(|&i| i < n));
        prop_assert_eq!(decode(&encode(&idx, n), n), idx);
    }
}
