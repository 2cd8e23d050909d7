//! Dominance, the non-dominated archive and 2-D hypervolume.

use serde::{Deserialize, Serialize};

/// One evaluated configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    /// 0 for the initial design, then the optimisation step that proposed it.
    pub iteration: usize,
    pub encoding: Vec<f64>,
    /// Option index per searchable slot; 0 is the base block.
    pub kinds: Vec<usize>,
    /// Accuracy loss in dB.
    pub f1: f64,
    /// Latency penalty.
    pub f2: f64,
    pub latency_ms: f64,
    /// Position in the evaluation sequence.
    pub order: usize,
}

impl Observation {
    pub fn objectives(&self) -> [f64; 2] {
        [self.f1, self.f2]
    }
}

/// Minimisation: `a` no worse everywhere and strictly better somewhere.
pub fn dominates(a: [f64; 2], b: [f64; 2]) -> bool {
    a[0] <= b[0] && a[1] <= b[1] && (a[0] < b[0] || a[1] < b[1])
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParetoArchive {
    pub members: Vec<Observation>,
}

impl ParetoArchive {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts `obs` unless it is dominated or repeats a member's objectives.
    /// Returns whether it was inserted.
    pub fn insert(&mut self, obs: Observation) -> bool {
        let p = obs.objectives();
        if self
            .members
            .iter()
            .any(|m| dominates(m.objectives(), p) || m.objectives() == p)
        {
            return false;
        }
        self.members.retain(|m| !dominates(p, m.objectives()));
        self.members.push(obs);
        true
    }

    pub fn front(&self) -> Vec<[f64; 2]> {
        self.members.iter().map(Observation::objectives).collect()
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn contains_kinds(&self, kinds: &[usize]) -> bool {
        self.members.iter().any(|m| m.kinds == kinds)
    }
}

pub fn pareto_update(mut archive: ParetoArchive, obs: Observation) -> ParetoArchive {
    archive.insert(obs);
    archive
}

/// Area dominated by `front` and bounded by `r`. Points that do not strictly
/// dominate `r` contribute nothing.
pub fn hypervolume_2d(front: &[[f64; 2]], r: [f64; 2]) -> f64 {
    let mut pts: Vec<[f64; 2]> = front.iter().copied().filter(|p| p[0] < r[0] && p[1] < r[1]).collect();
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    let mut area = 0.0;
    let mut ceiling = r[1];
    for p in pts {
        if p[1] < ceiling {
            area += (r[0] - p[0]) * (ceiling - p[1]);
            ceiling = p[1];
        }
    }
    area
}

/// Sorted by `f1`, the non-dominated points strictly inside `r`.
pub(crate) fn staircase(front: &[[f64; 2]], r: [f64; 2]) -> Vec<[f64; 2]> {
    let mut pts: Vec<[f64; 2]> = front.iter().copied().filter(|p| p[0] < r[0] && p[1] < r[1]).collect();
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    let mut out: Vec<[f64; 2]> = Vec::with_capacity(pts.len());
    for p in pts {
        if out.last().is_none_or(|l| p[1] < l[1]) {
            out.push(p);
        }
    }
    out
}
