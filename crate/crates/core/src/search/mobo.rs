//! The multi-objective Bayesian optimisation loop and the exhaustive oracle.

use std::collections::HashSet;
use std::io::Write;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ehvi::ehvi;
use super::encoding::{decode, encode, latin_hypercube, nth_config, space_size};
use super::gp::{GpGrid, GpModel};
use super::objective::{penalty_scale, Objective, BRUTE_FORCE_LIMIT};
use super::pareto::{hypervolume_2d, Observation, ParetoArchive};
use crate::error::{Error, Result};
use crate::par;
use crate::profile::PenaltyScale;
use crate::seed::rng_for;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoboSettings {
    /// Total evaluations, initial design included.
    pub budget: usize,
    /// Defaults to `max(2m, 8)`.
    pub init_size: Option<usize>,
    /// Uniform candidates per proposal, on top of archive neighbours.
    pub pool_size: usize,
    pub seed: u64,
    pub grid: GpGrid,
}

impl Default for MoboSettings {
    fn default() -> Self {
        Self {
            budget: 120,
            init_size: None,
            pool_size: 512,
            seed: 0,
            grid: GpGrid::default(),
        }
    }
}

impl MoboSettings {
    pub fn init_size_for(&self, m: usize) -> usize {
        self.init_size.unwrap_or((2 * m).max(8))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoboResult {
    pub archive: ParetoArchive,
    /// Every evaluation, in order.
    pub log: Vec<Observation>,
    pub reference: [f64; 2],
    pub scale: PenaltyScale,
    /// Archive hypervolume after the initial design and after each step.
    pub hv_history: Vec<f64>,
    pub exhausted: bool,
    pub settings: MoboSettings,
}

/// `max * 1.1 + 0.1` per objective, kept strictly above the maximum.
pub fn reference_point(obs: &[Observation]) -> [f64; 2] {
    let mut r = [f64::NEG_INFINITY; 2];
    for o in obs {
        r[0] = r[0].max(o.f1);
        r[1] = r[1].max(o.f2);
    }
    r.map(|v| (v * 1.1 + 0.1).max(v + 0.1))
}

/// Candidate configurations for one proposal, deduplicated, excluding
/// `evaluated`: `pool` uniform draws, then every single-slot change of each
/// archive member.
pub fn candidate_pool(
    archive: &ParetoArchive,
    evaluated: &HashSet<Vec<usize>>,
    n: usize,
    m: usize,
    pool: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<usize>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    let mut push = |k: Vec<usize>, out: &mut Vec<Vec<usize>>| {
        if !evaluated.contains(&k) && seen.insert(k.clone()) {
            out.push(k);
        }
    };
    for _ in 0..pool {
        let x: Vec<f64> = (0..m).map(|_| rng.random::<f64>()).collect();
        push(decode(&x, n), &mut out);
    }
    for member in &archive.members {
        for d in 0..m {
            for j in 0..n {
                if j != member.kinds[d] {
                    let mut k = member.kinds.clone();
                    k[d] = j;
                    push(k, &mut out);
                }
            }
        }
    }
    out
}

fn first_unevaluated(evaluated: &HashSet<Vec<usize>>, n: usize, m: usize) -> Option<Vec<usize>> {
    let total = space_size(n, m);
    if total > 10 * BRUTE_FORCE_LIMIT {
        return None;
    }
    (0..total).map(|i| nth_config(i, n, m)).find(|k| !evaluated.contains(k))
}

/// Highest expected hypervolume improvement over the candidate pool; ties go
/// to the lower predicted penalty, then to pool order.
#[allow(clippy::too_many_arguments)]
pub fn propose(
    models: (&GpModel, &GpModel),
    archive: &ParetoArchive,
    r: [f64; 2],
    evaluated: &HashSet<Vec<usize>>,
    n: usize,
    m: usize,
    pool: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    if archive.is_empty() {
        return Err(Error::Precondition("proposals need a non-empty archive".into()));
    }
    if evaluated.len() as u128 >= space_size(n, m) {
        return Err(Error::Exhausted);
    }
    let mut cands = candidate_pool(archive, evaluated, n, m, pool, rng);
    if cands.is_empty() {
        cands.extend(first_unevaluated(evaluated, n, m));
    }
    if cands.is_empty() {
        return Err(Error::Exhausted);
    }
    let front = archive.front();
    let scores = par::map(&cands, |k| {
        let x = encode(k, n);
        let (m1, v1) = models.0.predict(&x);
        let (m2, v2) = models.1.predict(&x);
        (ehvi([m1, m2], [v1.sqrt(), v2.sqrt()], &front, r), m2)
    });
    let mut best = 0;
    for (i, &(e, m2)) in scores.iter().enumerate().skip(1) {
        let (be, bm2) = scores[best];
        if e > be || (e == be && m2 < bm2) {
            best = i;
        }
    }
    Ok(cands.swap_remove(best))
}

fn observe(kinds: Vec<usize>, n: usize, f1: f64, latency: f64, scale: &PenaltyScale, iteration: usize, order: usize) -> Observation {
    Observation {
        iteration,
        encoding: encode(&kinds, n),
        kinds,
        f1,
        f2: scale.penalty(latency),
        latency_ms: latency,
        order,
    }
}

pub fn mobo_run(obj: &dyn Objective, settings: &MoboSettings) -> Result<MoboResult> {
    let (n, m) = (obj.options(), obj.dims());
    if n == 0 || m == 0 {
        return Err(Error::InvalidArgument("empty search space".into()));
    }
    if settings.budget == 0 {
        return Err(Error::InvalidArgument("budget must be positive".into()));
    }
    let total = space_size(n, m);
    let mut rng = rng_for(settings.seed, "mobo");
    let init = settings.init_size_for(m).min(settings.budget);

    let mut evaluated = HashSet::new();
    let mut design = Vec::new();
    for x in latin_hypercube(init, m, &mut rng) {
        let k = decode(&x, n);
        if evaluated.insert(k.clone()) {
            design.push(k);
        }
    }
    let raw = par::map(&design, |k| obj.evaluate(k))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let losses: Vec<f64> = raw.iter().map(|r| r.0).collect();
    let scale = penalty_scale(obj, &losses)?;
    let mut log: Vec<Observation> = design
        .into_iter()
        .zip(&raw)
        .enumerate()
        .map(|(i, (k, &(f1, lat)))| observe(k, n, f1, lat, &scale, 0, i))
        .collect();
    let reference = reference_point(&log);
    let mut archive = ParetoArchive::new();
    for o in &log {
        archive.insert(o.clone());
    }
    let mut hv_history = vec![hypervolume_2d(&archive.front(), reference)];
    let mut exhausted = false;
    let mut step = 0;
    while log.len() < settings.budget {
        if evaluated.len() as u128 >= total {
            exhausted = true;
            break;
        }
        step += 1;
        let next = if log.len() < 2 {
            first_unevaluated(&evaluated, n, m).ok_or(Error::Exhausted)?
        } else {
            let xs: Vec<Vec<f64>> = log.iter().map(|o| o.encoding.clone()).collect();
            let f1: Vec<f64> = log.iter().map(|o| o.f1).collect();
            let f2: Vec<f64> = log.iter().map(|o| o.f2).collect();
            let gp1 = GpModel::fit(&xs, &f1, &settings.grid)?;
            let gp2 = GpModel::fit(&xs, &f2, &settings.grid)?;
            match propose((&gp1, &gp2), &archive, reference, &evaluated, n, m, settings.pool_size, &mut rng) {
                Ok(k) => k,
                Err(Error::Exhausted) => {
                    exhausted = true;
                    break;
                }
                Err(e) => return Err(e),
            }
        };
        let (f1, lat) = obj.evaluate(&next)?;
        evaluated.insert(next.clone());
        let o = observe(next, n, f1, lat, &scale, step, log.len());
        archive.insert(o.clone());
        log.push(o);
        hv_history.push(hypervolume_2d(&archive.front(), reference));
    }
    Ok(MoboResult {
        archive,
        log,
        reference,
        scale,
        hv_history,
        exhausted,
        settings: settings.clone(),
    })
}

/// Evaluates every configuration and returns the exact non-dominated set
/// together with all observations in lexicographic order.
pub fn brute_force_pareto(obj: &dyn Objective, scale: &PenaltyScale) -> Result<(ParetoArchive, Vec<Observation>)> {
    let (n, m) = (obj.options(), obj.dims());
    let count = space_size(n, m);
    if count > BRUTE_FORCE_LIMIT {
        return Err(Error::SpaceTooLarge {
            count,
            limit: BRUTE_FORCE_LIMIT,
        });
    }
    let raw = par::map_range(count as usize, |i| {
        let k = nth_config(i as u128, n, m);
        obj.evaluate(&k).map(|v| (k, v))
    });
    let mut all = Vec::with_capacity(raw.len());
    for (i, r) in raw.into_iter().enumerate() {
        let (k, (f1, lat)) = r?;
        all.push(observe(k, n, f1, lat, scale, 0, i));
    }
    let mut archive = ParetoArchive::new();
    for o in &all {
        archive.insert(o.clone());
    }
    Ok((archive, all))
}

/// Run log as CSV. `names` maps option indices to labels.
pub fn write_run_log(log: &[Observation], archive: &ParetoArchive, names: &[String], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "iteration,slot_kinds,f1_db,f2,latency_ms,pareto_member")?;
    for o in log {
        let kinds: Vec<&str> = o
            .kinds
            .iter()
            .map(|&k| names.get(k).map_or("?", String::as_str))
            .collect();
        let member = archive.members.iter().any(|a| a.order == o.order);
        writeln!(
            out,
            "{},{},{:.6},{:.6},{:.4},{}",
            o.iteration,
            kinds.join(";"),
            o.f1,
            o.f2,
            o.latency_ms,
            member
        )?;
    }
    Ok(())
}
