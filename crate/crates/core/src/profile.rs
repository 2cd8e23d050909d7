//! Device latency profiles, additive latency estimation and the latency penalty.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, ProfileError, Result};
use crate::seed::rng_for;
use crate::toynet::{BlockKind, NetworkConfig, SlotRole};

fn is_zero(v: &f64) -> bool {
    *v == 0.0
}

/// Per-slot, per-kind block latency in milliseconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyProfile {
    pub device: String,
    pub slots: BTreeMap<String, BTreeMap<BlockKind, f64>>,
    /// Fixed cost outside the searchable blocks.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub overhead_ms: f64,
}

impl LatencyProfile {
    pub fn from_json(text: &str) -> Result<Self> {
        let profile: Self = serde_json::from_str(text).map_err(|e| ProfileError::Malformed(e.to_string()))?;
        profile.check_values()?;
        Ok(profile)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("profile serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    fn check_values(&self) -> Result<(), ProfileError> {
        if !(self.overhead_ms >= 0.0 && self.overhead_ms.is_finite()) {
            return Err(ProfileError::Malformed(format!("overhead {} must be finite and non-negative", self.overhead_ms)));
        }
        if self.slots.is_empty() {
            return Err(ProfileError::Malformed("profile has no slots".into()));
        }
        for (slot, kinds) in &self.slots {
            for (kind, &value) in kinds {
                if !(value > 0.0 && value.is_finite()) {
                    return Err(ProfileError::NonPositive {
                        slot: slot.clone(),
                        kind: kind.to_string(),
                        value,
                    });
                }
            }
            if !kinds.contains_key(&BlockKind::Base) {
                return Err(ProfileError::MissingEntry {
                    slot: slot.clone(),
                    kind: BlockKind::Base.to_string(),
                });
            }
        }
        Ok(())
    }

    pub fn latency(&self, slot: &str, kind: BlockKind) -> Result<f64, ProfileError> {
        self.slots
            .get(slot)
            .and_then(|k| k.get(&kind))
            .copied()
            .ok_or_else(|| ProfileError::MissingEntry {
                slot: slot.to_string(),
                kind: kind.to_string(),
            })
    }

    /// The profile restricted to `config`: every searchable slot must carry
    /// every kind in `kinds`, and frozen slots keep only their base entry.
    pub fn for_config(&self, config: &NetworkConfig, kinds: &[BlockKind]) -> Result<Self> {
        let mut slots = BTreeMap::new();
        for spec in &config.slots {
            let mut entries = BTreeMap::new();
            let wanted: Vec<BlockKind> = if spec.frozen {
                vec![BlockKind::Base]
            } else {
                std::iter::once(BlockKind::Base).chain(kinds.iter().copied()).collect()
            };
            for kind in wanted {
                entries.insert(kind, self.latency(&spec.id, kind)?);
            }
            slots.insert(spec.id.clone(), entries);
        }
        let out = Self {
            device: self.device.clone(),
            slots,
            overhead_ms: self.overhead_ms,
        };
        out.check_values()?;
        Ok(out)
    }
}

pub fn load_profile(path: &Path) -> Result<LatencyProfile> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    LatencyProfile::from_json(&text)
}

/// Sum of block latencies for the kinds chosen in `config`, plus overhead.
pub fn global_latency(profile: &LatencyProfile, config: &NetworkConfig) -> Result<f64> {
    let mut total = profile.overhead_ms;
    for spec in &config.slots {
        total += profile.latency(&spec.id, spec.kind)?;
    }
    Ok(total)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Prim {
    Conv { cin_mul: usize, cout_mul: usize, k: usize },
    Depthwise { c_mul: usize },
    Norm,
    Eltwise { c_mul: usize },
    Pool,
    /// 1x1 conv on a pooled 1x1 map.
    PooledConv,
}

fn primitives(kind: BlockKind) -> Vec<Prim> {
    use Prim::*;
    let proj = [Conv { cin_mul: 1, cout_mul: 1, k: 1 }, Eltwise { c_mul: 1 }];
    let gated = [
        Norm,
        Conv { cin_mul: 1, cout_mul: 2, k: 1 },
        Depthwise { c_mul: 2 },
        Eltwise { c_mul: 1 },
    ];
    let mut ops = Vec::new();
    match kind {
        BlockKind::Base => {
            ops.extend(gated);
            ops.extend([Pool, PooledConv, Eltwise { c_mul: 1 }]);
        }
        BlockKind::Alt1 => ops.extend([Conv { cin_mul: 1, cout_mul: 1, k: 3 }, Eltwise { c_mul: 1 }]),
        BlockKind::Alt2 => ops.push(Depthwise { c_mul: 1 }),
        BlockKind::Alt3 => ops.extend(gated),
        BlockKind::Alt4 => {
            ops.extend(gated);
            ops.push(Eltwise { c_mul: 1 });
        }
        BlockKind::Alt5 => {}
        BlockKind::Alt6 => ops.push(Eltwise { c_mul: 1 }),
    }
    ops.extend(proj);
    ops
}

/// Latency in ms of one primitive on `c` channels over `hw` pixels. Each op
/// pays a launch cost plus a work term; reductions and normalisation are
/// priced as the memory-bound operations they are on accelerators.
fn primitive_cost(p: Prim, c: usize, hw: usize) -> f64 {
    let kilo = |v: usize| v as f64 / 1e3;
    match p {
        Prim::Conv { cin_mul, cout_mul, k } => 0.5 + 0.008 * kilo(cin_mul * c * cout_mul * c * k * k * hw),
        Prim::Depthwise { c_mul } => 0.5 + 0.03 * kilo(9 * c_mul * c * hw),
        Prim::Norm => 1.0 + 0.5 * kilo(c * hw),
        Prim::Eltwise { c_mul } => 0.3 + 0.05 * kilo(c_mul * c * hw),
        Prim::Pool => 2.0 + 0.1 * kilo(c * hw),
        Prim::PooledConv => 0.5 + 0.008 * kilo(c * c),
    }
}

/// Noise-free latency of one block of `kind` with `c` channels at `hw` pixels.
pub fn modeled_block_cost(kind: BlockKind, c: usize, hw: usize) -> f64 {
    primitives(kind).into_iter().map(|p| primitive_cost(p, c, hw)).sum()
}

/// Simulated device profile for `config` on `image_size` inputs: an additive
/// per-primitive cost model perturbed by seeded relative noise in `[-noise, noise]`.
pub fn simulate_profile(config: &NetworkConfig, image_size: usize, seed: u64, noise: f64) -> Result<LatencyProfile> {
    config.validate()?;
    if !(0.0..1.0).contains(&noise) {
        return Err(Error::InvalidArgument(format!("noise must be in [0, 1), got {noise}")));
    }
    let mut slots = BTreeMap::new();
    for (i, spec) in config.slots.iter().enumerate() {
        let level = match config.role(i) {
            SlotRole::Encoder(l) | SlotRole::Decoder(l) => l,
            SlotRole::Middle => config.levels(),
        };
        let side = (image_size >> level).max(1);
        let hw = side * side;
        let mut rng = rng_for(seed, &format!("latency.{}", spec.id));
        let mut entries = BTreeMap::new();
        for kind in BlockKind::ALL {
            let u: f64 = rng.random_range(-1.0..1.0);
            if spec.frozen && kind != BlockKind::Base {
                continue;
            }
            let reps = if kind == BlockKind::Base { spec.depth } else { 1 };
            let cost = reps as f64 * modeled_block_cost(kind, spec.channels, hw) * (1.0 + noise * u);
            entries.insert(kind, cost);
        }
        slots.insert(spec.id.clone(), entries);
    }
    Ok(LatencyProfile {
        device: format!("simulated-{seed}"),
        slots,
        overhead_ms: 0.0,
    })
}

/// Affine latency-to-penalty map: `alpha * (L - L_min) / (L_base - L_min)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PenaltyScale {
    pub alpha: f64,
    pub l_min: f64,
    pub l_base: f64,
}

pub const DEFAULT_ALPHA_FLOOR: f64 = 0.1;

impl PenaltyScale {
    /// `alpha` is the range of the observed accuracy losses, floored at `floor`.
    pub fn new(profile: &LatencyProfile, config: &NetworkConfig, losses: &[f64], floor: f64) -> Result<Self> {
        let mut l_min = profile.overhead_ms;
        for spec in &config.slots {
            let entries = profile.slots.get(&spec.id).ok_or_else(|| ProfileError::MissingEntry {
                slot: spec.id.clone(),
                kind: BlockKind::Base.to_string(),
            })?;
            let min = if spec.frozen {
                profile.latency(&spec.id, BlockKind::Base)?
            } else {
                entries.values().copied().fold(f64::INFINITY, f64::min)
            };
            l_min += min;
        }
        let mut base_cfg = config.clone();
        base_cfg.slots.iter_mut().for_each(|s| s.kind = BlockKind::Base);
        let l_base = global_latency(profile, &base_cfg)?;
        let (lo, hi) = losses
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let range = if losses.is_empty() { 0.0 } else { hi - lo };
        Ok(Self {
            alpha: range.max(floor),
            l_min,
            l_base,
        })
    }

    pub fn penalty(&self, latency_ms: f64) -> f64 {
        let span = self.l_base - self.l_min;
        // all slots pinned to one option: nothing to trade, keep the map monotone
        let span = if span > 0.0 { span } else { 1.0 };
        self.alpha * (latency_ms - self.l_min) / span
    }
}

pub fn make_penalty_scale(profile: &LatencyProfile, config: &NetworkConfig, initial_losses: &[f64]) -> Result<PenaltyScale> {
    PenaltyScale::new(profile, config, initial_losses, DEFAULT_ALPHA_FLOOR)
}

pub fn penalty(scale: &PenaltyScale, latency_ms: f64) -> f64 {
    scale.penalty(latency_ms)
}

pub fn speedup(base_ms: f64, optimized_ms: f64) -> f64 {
    base_ms / optimized_ms
}

/// Per-block latencies of the seven options measured on the phone NPU
/// (base block first), applied uniformly across slots.
pub const NPU_BLOCK_LATENCIES_MS: [f64; 7] = [53.0, 15.0, 13.0, 19.0, 11.0, 9.0, 28.0];

/// Device fixture with the measured per-block latencies on every slot of the
/// nine-slot topology.
pub const NPU_BLOCKS_FIXTURE: &str = include_str!("../fixtures/gs24_blocks.json");

/// Same relative costs with per-slot base entries summing to the measured
/// 177 ms whole-network latency.
pub const CALIBRATED_177_FIXTURE: &str = include_str!("../fixtures/gs24_calibrated_177.json");

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn additivity_on_three_slots() {
        let cfg = NetworkConfig::u_shape(1, 4, 1);
        let profile = LatencyProfile {
            device: "t".into(),
            slots: [("enc0", 10.0), ("mid", 20.0), ("dec0", 5.0)]
                .into_iter()
                .map(|(s, v)| (s.to_string(), BTreeMap::from([(BlockKind::Base, v)])))
                .collect(),
            overhead_ms: 0.0,
        };
        assert_eq!(global_latency(&profile, &cfg).unwrap(), 35.0);
    }

    #[test]
    fn rejects_zero_and_missing() {
        let zero = r#"{"device":"d","slots":{"enc0":{"base":0.0}}}"#;
        assert!(matches!(
            LatencyProfile::from_json(zero),
            Err(Error::Profile(ProfileError::NonPositive { .. }))
        ));
        let missing = r#"{"device":"d","slots":{"enc0":{"alt1":3.0}}}"#;
        assert!(matches!(
            LatencyProfile::from_json(missing),
            Err(Error::Profile(ProfileError::MissingEntry { .. }))
        ));
        assert!(matches!(
            LatencyProfile::from_json("{\"device\":"),
            Err(Error::Profile(ProfileError::Malformed(_)))
        ));
        let cfg = NetworkConfig::desk();
        let partial = simulate_profile(&NetworkConfig::u_shape(1, 8, 1), 32, 0, 0.0).unwrap();
        assert!(partial.for_config(&cfg, &BlockKind::ALTERNATIVES).is_err());
    }

    #[test]
    fn penalty_endpoints_and_floor() {
        let cfg = NetworkConfig::desk();
        let profile = simulate_profile(&cfg, 32, 1, 0.1).unwrap();
        let s = make_penalty_scale(&profile, &cfg, &[0.3, 0.3]).unwrap();
        assert_eq!(s.alpha, 0.1);
        assert_eq!(s.penalty(s.l_min), 0.0);
        assert!((s.penalty(s.l_base) - s.alpha).abs() < 1e-12);
        let s2 = make_penalty_scale(&profile, &cfg, &[0.0, 1.2, 2.0]).unwrap();
        assert_eq!(s2.alpha, 2.0);
        assert!(s2.penalty(10.0) < s2.penalty(10.5));
    }

    #[test]
    fn simulator_is_deterministic_and_additive() {
        let cfg = NetworkConfig::desk();
        let a = simulate_profile(&cfg, 32, 3, 0.1).unwrap();
        assert_eq!(a, simulate_profile(&cfg, 32, 3, 0.1).unwrap());
        assert_ne!(a, simulate_profile(&cfg, 32, 4, 0.1).unwrap());
        let flat = simulate_profile(&cfg, 32, 3, 0.0).unwrap();
        // base is the costliest option in every slot
        for kinds in flat.slots.values() {
            let base = kinds[&BlockKind::Base];
            assert!(kinds.values().all(|&v| v <= base));
        }
    }

    #[test]
    fn superset_kinds_cost_more() {
        // op multisets: alt5 < alt6, alt5 < alt2, alt3 < alt4 < base
        for &(c, hw) in &[(8, 1024), (16, 256), (32, 64)] {
            let cost = |k| modeled_block_cost(k, c, hw);
            assert!(cost(BlockKind::Alt5) < cost(BlockKind::Alt6));
            assert!(cost(BlockKind::Alt5) < cost(BlockKind::Alt2));
            assert!(cost(BlockKind::Alt3) < cost(BlockKind::Alt4));
            assert!(cost(BlockKind::Alt4) < cost(BlockKind::Base));
        }
    }

    #[test]
    fn identical_slots_identical_latencies_without_noise() {
        let mut cfg = NetworkConfig::u_shape(1, 8, 1);
        // same channel count and resolution for enc0 and dec0
        cfg.validate().unwrap();
        let p = simulate_profile(&cfg, 16, 9, 0.0).unwrap();
        assert_eq!(p.slots["enc0"], p.slots["dec0"]);
        cfg.slots[0].frozen = true;
        let p = simulate_profile(&cfg, 16, 9, 0.0).unwrap();
        assert_eq!(p.slots["enc0"].len(), 1);
    }

    #[test]
    fn speedups() {
        assert!((speedup(177.0, 147.0) - 1.204).abs() < 1e-3);
        assert!((speedup(177.0, 140.0) - 1.264).abs() < 1e-3);
        assert_eq!(speedup(50.0, 50.0), 1.0);
    }
}
