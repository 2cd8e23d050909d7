//! Picking one member of a Pareto archive.

use super::pareto::{Observation, ParetoArchive};
use crate::error::{Error, Result};

fn lowest_f2(members: &[Observation]) -> &Observation {
    members
        .iter()
        .min_by(|a, b| a.f2.total_cmp(&b.f2).then(a.f1.total_cmp(&b.f1)))
        .expect("non-empty")
}

/// Distance to the chord between the extreme points, after min-max
/// normalisation, for every member in archive order.
pub fn knee_distances(archive: &ParetoArchive) -> Vec<f64> {
    let m = &archive.members;
    let range = |f: fn(&Observation) -> f64| {
        let lo = m.iter().map(f).fold(f64::INFINITY, f64::min);
        let hi = m.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
        (lo, if hi > lo { hi - lo } else { 1.0 })
    };
    let (lo1, s1) = range(|o| o.f1);
    let (lo2, s2) = range(|o| o.f2);
    let norm = |o: &Observation| ((o.f1 - lo1) / s1, (o.f2 - lo2) / s2);
    let by = |key: fn(&Observation) -> (f64, f64)| {
        m.iter()
            .min_by(|a, b| {
                let (ka, kb) = (key(a), key(b));
                ka.0.total_cmp(&kb.0).then(ka.1.total_cmp(&kb.1))
            })
            .map(norm)
            .unwrap_or((0.0, 0.0))
    };
    let a = by(|o| (o.f1, o.f2));
    let b = by(|o| (o.f2, o.f1));
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len = (dx * dx + dy * dy).sqrt();
    m.iter()
        .map(|o| {
            if len == 0.0 {
                return 0.0;
            }
            let (px, py) = norm(o);
            ((px - a.0) * dy - (py - a.1) * dx).abs() / len
        })
        .collect()
}

const KNEE_TIE: f64 = 1e-12;

/// The member farthest from the chord joining the extremes; archives of at
/// most two members, and ties, resolve to the lowest penalty.
pub fn knee_select(archive: &ParetoArchive) -> Result<Observation> {
    let m = &archive.members;
    if m.is_empty() {
        return Err(Error::Precondition("knee selection on an empty archive".into()));
    }
    if m.len() <= 2 {
        return Ok(lowest_f2(m).clone());
    }
    let d = knee_distances(archive);
    let best = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let tied: Vec<Observation> = m
        .iter()
        .zip(&d)
        .filter(|(_, &di)| di >= best - KNEE_TIE)
        .map(|(o, _)| o.clone())
        .collect();
    Ok(lowest_f2(&tied).clone())
}

/// The member with the lowest raw latency; ties go to the lower accuracy loss.
pub fn least_latency_select(archive: &ParetoArchive) -> Result<Observation> {
    archive
        .members
        .iter()
        .min_by(|a, b| a.latency_ms.total_cmp(&b.latency_ms).then(a.f1.total_cmp(&b.f1)))
        .cloned()
        .ok_or_else(|| Error::Precondition("latency selection on an empty archive".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn archive(points: &[(f64, f64, f64)]) -> ParetoArchive {
        ParetoArchive {
            members: points
                .iter()
                .enumerate()
                .map(|(i, &(f1, f2, lat))| Observation {
                    iteration: 0,
                    encoding: vec![],
                    kinds: vec![i],
                    f1,
                    f2,
                    latency_ms: lat,
                    order: i,
                })
                .collect(),
        }
    }

    #[test]
    fn elbow() {
        let a = archive(&[(0.0, 1.0, 1.0), (0.1, 0.1, 0.1), (1.0, 0.0, 0.0)]);
        let k = knee_select(&a).unwrap();
        assert_eq!((k.f1, k.f2), (0.1, 0.1));
    }

    #[test]
    fn collinear_picks_lowest_penalty() {
        let a = archive(&[(0.0, 1.0, 1.0), (0.5, 0.5, 0.5), (1.0, 0.0, 0.0)]);
        assert_eq!(knee_select(&a).unwrap().f2, 0.0);
        let two = archive(&[(0.0, 1.0, 1.0), (1.0, 0.0, 0.0)]);
        assert_eq!(knee_select(&two).unwrap().f2, 0.0);
        assert!(knee_select(&ParetoArchive::new()).is_err());
    }

    #[test]
    fn least_latency() {
        let a = archive(&[(0.5, 0.0, 10.0), (0.1, 0.0, 20.0)]);
        assert_eq!(least_latency_select(&a).unwrap().latency_ms, 10.0);
        let single = archive(&[(0.3, 0.2, 7.0)]);
        assert_eq!(least_latency_select(&single).unwrap().f1, 0.3);
    }
}
