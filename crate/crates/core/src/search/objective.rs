//! What the search evaluates: accuracy loss and latency of a block assignment.

use crate::distill::{stitch, SurrogateSet};
use crate::error::{Error, Result};
use crate::par;
use crate::profile::{global_latency, LatencyProfile, PenaltyScale, DEFAULT_ALPHA_FLOOR};
use crate::toynet::{evaluate_psnr, BlockKind, Dataset, Network, NetworkConfig};

use super::encoding::{nth_config, space_size};

/// Above this many configurations exhaustive evaluation is refused.
pub const BRUTE_FORCE_LIMIT: u128 = 100_000;

pub trait Objective: Sync {
    /// Searchable slot count `m`.
    fn dims(&self) -> usize;
    /// Options per slot `n`; option 0 is the base block.
    fn options(&self) -> usize;
    /// `(accuracy loss in dB, latency in ms)`.
    fn evaluate(&self, kinds: &[usize]) -> Result<(f64, f64)>;
    /// `(L_min, L_base)`.
    fn latency_bounds(&self) -> Result<(f64, f64)>;
    fn alpha_floor(&self) -> f64 {
        DEFAULT_ALPHA_FLOOR
    }
}

/// Penalty scale fitted to the accuracy losses of an initial design.
pub fn penalty_scale(obj: &dyn Objective, initial_losses: &[f64]) -> Result<PenaltyScale> {
    let (l_min, l_base) = obj.latency_bounds()?;
    let (lo, hi) = initial_losses
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = if initial_losses.is_empty() { 0.0 } else { hi - lo };
    Ok(PenaltyScale {
        alpha: range.max(obj.alpha_floor()),
        l_min,
        l_base,
    })
}

/// Stitches surrogates into the base network and measures PSNR on a fixed
/// evaluation split.
pub struct StitchedObjective<'a> {
    base: &'a Network,
    surrogates: &'a SurrogateSet,
    profile: LatencyProfile,
    eval: &'a Dataset,
    slots: Vec<String>,
    choices: Vec<BlockKind>,
    base_psnr: f64,
    alpha_floor: f64,
}

impl<'a> StitchedObjective<'a> {
    /// `alternatives` are the non-base kinds offered in every searchable slot.
    pub fn new(
        base: &'a Network,
        surrogates: &'a SurrogateSet,
        profile: &LatencyProfile,
        eval: &'a Dataset,
        alternatives: &[BlockKind],
    ) -> Result<Self> {
        if alternatives.contains(&BlockKind::Base) {
            return Err(Error::InvalidArgument("the base kind is always option 0".into()));
        }
        let profile = profile.for_config(base.config(), alternatives)?;
        let slots: Vec<String> = base.config().searchable().iter().map(|s| s.id.clone()).collect();
        for slot in &slots {
            for &kind in alternatives {
                if surrogates.get(slot, kind).is_none() {
                    return Err(Error::MissingSurrogate {
                        slot: slot.clone(),
                        kind: kind.to_string(),
                    });
                }
            }
        }
        let choices = std::iter::once(BlockKind::Base).chain(alternatives.iter().copied()).collect();
        Ok(Self {
            base,
            surrogates,
            profile,
            eval,
            slots,
            choices,
            base_psnr: evaluate_psnr(base, eval)?,
            alpha_floor: DEFAULT_ALPHA_FLOOR,
        })
    }

    pub fn with_alpha_floor(mut self, floor: f64) -> Self {
        self.alpha_floor = floor;
        self
    }

    pub fn base_psnr(&self) -> f64 {
        self.base_psnr
    }

    pub fn slots(&self) -> &[String] {
        &self.slots
    }

    pub fn choices(&self) -> &[BlockKind] {
        &self.choices
    }

    pub fn profile(&self) -> &LatencyProfile {
        &self.profile
    }

    pub fn config_for(&self, kinds: &[usize]) -> Result<NetworkConfig> {
        if kinds.len() != self.slots.len() {
            return Err(Error::InvalidArgument(format!(
                "{} choices for {} searchable slots",
                kinds.len(),
                self.slots.len()
            )));
        }
        let mut config = self.base.config().clone();
        for (slot, &k) in self.slots.iter().zip(kinds) {
            let kind = *self
                .choices
                .get(k)
                .ok_or_else(|| Error::InvalidArgument(format!("option {k} out of range")))?;
            config.slot_mut(slot).expect("searchable slot exists").kind = kind;
        }
        Ok(config)
    }

    pub fn stitched(&self, kinds: &[usize]) -> Result<Network> {
        stitch(self.base, self.surrogates, &self.config_for(kinds)?)
    }
}

impl Objective for StitchedObjective<'_> {
    fn dims(&self) -> usize {
        self.slots.len()
    }

    fn options(&self) -> usize {
        self.choices.len()
    }

    fn evaluate(&self, kinds: &[usize]) -> Result<(f64, f64)> {
        let config = self.config_for(kinds)?;
        let net = stitch(self.base, self.surrogates, &config)?;
        let psnr = evaluate_psnr(&net, self.eval)?;
        Ok((self.base_psnr - psnr, global_latency(&self.profile, &config)?))
    }

    fn latency_bounds(&self) -> Result<(f64, f64)> {
        let s = PenaltyScale::new(&self.profile, self.base.config(), &[], 0.0)?;
        Ok((s.l_min, s.l_base))
    }

    fn alpha_floor(&self) -> f64 {
        self.alpha_floor
    }
}

/// Every configuration's objectives, precomputed in lexicographic order.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TableObjective {
    pub dims: usize,
    pub options: usize,
    pub values: Vec<(f64, f64)>,
    pub l_min: f64,
    pub l_base: f64,
    pub alpha_floor: f64,
}

impl TableObjective {
    pub fn tabulate(obj: &dyn Objective) -> Result<Self> {
        let (n, m) = (obj.options(), obj.dims());
        let count = space_size(n, m);
        if count > BRUTE_FORCE_LIMIT {
            return Err(Error::SpaceTooLarge {
                count,
                limit: BRUTE_FORCE_LIMIT,
            });
        }
        let values = par::map_range(count as usize, |i| obj.evaluate(&nth_config(i as u128, n, m)))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let (l_min, l_base) = obj.latency_bounds()?;
        Ok(Self {
            dims: m,
            options: n,
            values,
            l_min,
            l_base,
            alpha_floor: obj.alpha_floor(),
        })
    }

    pub fn index(&self, kinds: &[usize]) -> usize {
        kinds.iter().fold(0, |acc, &k| acc * self.options + k)
    }
}

impl Objective for TableObjective {
    fn dims(&self) -> usize {
        self.dims
    }

    fn options(&self) -> usize {
        self.options
    }

    fn evaluate(&self, kinds: &[usize]) -> Result<(f64, f64)> {
        if kinds.len() != self.dims || kinds.iter().any(|&k| k >= self.options) {
            return Err(Error::InvalidArgument(format!("{kinds:?} is outside the table")));
        }
        Ok(self.values[self.index(kinds)])
    }

    fn latency_bounds(&self) -> Result<(f64, f64)> {
        Ok((self.l_min, self.l_base))
    }

    fn alpha_floor(&self) -> f64 {
        self.alpha_floor
    }
}
