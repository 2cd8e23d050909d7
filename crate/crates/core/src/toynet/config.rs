use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The base NAF-like block and its six hardware-friendly alternatives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Base,
    Alt1,
    Alt2,
    Alt3,
    Alt4,
    Alt5,
    Alt6,
}

impl BlockKind {
    pub const ALL: [BlockKind; 7] = [
        BlockKind::Base,
        BlockKind::Alt1,
        BlockKind::Alt2,
        BlockKind::Alt3,
        BlockKind::Alt4,
        BlockKind::Alt5,
        BlockKind::Alt6,
    ];

    pub const ALTERNATIVES: [BlockKind; 6] = [
        BlockKind::Alt1,
        BlockKind::Alt2,
        BlockKind::Alt3,
        BlockKind::Alt4,
        BlockKind::Alt5,
        BlockKind::Alt6,
    ];

    /// Position in [`BlockKind::ALL`]; 0 is the base block.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            BlockKind::Base => "base",
            BlockKind::Alt1 => "alt1",
            BlockKind::Alt2 => "alt2",
            BlockKind::Alt3 => "alt3",
            BlockKind::Alt4 => "alt4",
            BlockKind::Alt5 => "alt5",
            BlockKind::Alt6 => "alt6",
        }
    }
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BlockKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown block kind {s:?}")))
    }
}

fn is_one(v: &usize) -> bool {
    *v == 1
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotSpec {
    pub id: String,
    pub channels: usize,
    pub frozen: bool,
    pub kind: BlockKind,
    /// Number of stacked base blocks in this slot. A non-base kind replaces
    /// the whole stack with a single block.
    #[serde(default = "one", skip_serializing_if = "is_one")]
    pub depth: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SlotRole {
    /// Encoder at the given resolution level (0 = full resolution).
    Encoder(usize),
    Middle,
    Decoder(usize),
}

/// U-shaped network description: `enc0..encL-1`, `mid`, `decL-1..dec0`.
///
/// Every encoder is followed by a 2x downsample that doubles the channel
/// count; every decoder is preceded by a 2x upsample that halves it and adds
/// the skip from the matching encoder.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub slots: Vec<SlotSpec>,
    pub width: usize,
    pub in_channels: usize,
}

impl NetworkConfig {
    /// Builds a symmetric config with `levels` encoders and decoders.
    pub fn u_shape(levels: usize, width: usize, in_channels: usize) -> Self {
        let mut slots = Vec::with_capacity(2 * levels + 1);
        let spec = |id: String, channels| SlotSpec {
            id,
            channels,
            frozen: false,
            kind: BlockKind::Base,
            depth: 1,
        };
        for l in 0..levels {
            slots.push(spec(format!("enc{l}"), width << l));
        }
        slots.push(spec("mid".into(), width << levels));
        for l in (0..levels).rev() {
            slots.push(spec(format!("dec{l}"), width << l));
        }
        Self {
            slots,
            width,
            in_channels,
        }
    }

    /// Two encoders, one middle block, two decoders at width 8.
    pub fn desk() -> Self {
        Self::u_shape(2, 8, 1)
    }

    /// Four encoders, one middle block, four decoders; the deepest encoder
    /// stacks 28 base blocks.
    pub fn paper_shape() -> Self {
        let mut cfg = Self::u_shape(4, 4, 1);
        cfg.slot_mut("enc3").expect("enc3 exists").depth = 28;
        cfg
    }

    pub fn levels(&self) -> usize {
        self.slots.len() / 2
    }

    pub fn role(&self, index: usize) -> SlotRole {
        let levels = self.levels();
        match index.cmp(&levels) {
            std::cmp::Ordering::Less => SlotRole::Encoder(index),
            std::cmp::Ordering::Equal => SlotRole::Middle,
            std::cmp::Ordering::Greater => SlotRole::Decoder(2 * levels - index),
        }
    }

    pub fn slot(&self, id: &str) -> Option<&SlotSpec> {
        self.slots.iter().find(|s| s.id == id)
    }

    pub fn slot_mut(&mut self, id: &str) -> Option<&mut SlotSpec> {
        self.slots.iter_mut().find(|s| s.id == id)
    }

    pub fn slot_index(&self, id: &str) -> Option<usize> {
        self.slots.iter().position(|s| s.id == id)
    }

    pub fn searchable(&self) -> Vec<&SlotSpec> {
        self.slots.iter().filter(|s| !s.frozen).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.width == 0 || self.in_channels == 0 {
            return bad("width and in_channels must be positive".into());
        }
        if self.slots.len() % 2 == 0 {
            return bad(format!(
                "expected encoders + mid + decoders (odd slot count), got {}",
                self.slots.len()
            ));
        }
        let levels = self.levels();
        for (i, slot) in self.slots.iter().enumerate() {
            let (expect_id, level) = match self.role(i) {
                SlotRole::Encoder(l) => (format!("enc{l}"), l),
                SlotRole::Middle => ("mid".to_string(), levels),
                SlotRole::Decoder(l) => (format!("dec{l}"), l),
            };
            if slot.id != expect_id {
                return bad(format!("slot {i} must be {expect_id}, found {}", slot.id));
            }
            let expect_ch = self.width << level;
            if slot.channels != expect_ch {
                return bad(format!(
                    "slot {} must have {expect_ch} channels, found {}",
                    slot.id, slot.channels
                ));
            }
            if slot.depth == 0 {
                return bad(format!("slot {} has zero depth", slot.id));
            }
            if slot.frozen && slot.kind != BlockKind::Base {
                return bad(format!("frozen slot {} must stay base", slot.id));
            }
        }
        Ok(())
    }

    /// Freezes the named slots, leaving the others searchable.
    pub fn with_frozen(mut self, frozen: &[String]) -> Result<Self> {
        for id in frozen {
            let slot = self
                .slot_mut(id)
                .ok_or_else(|| Error::InvalidConfig(format!("unknown slot {id}")))?;
            slot.frozen = true;
            slot.kind = BlockKind::Base;
        }
        Ok(self)
    }

    /// Kind indices of the searchable slots, in slot order.
    pub fn encode_kinds(&self) -> Vec<usize> {
        self.slots
            .iter()
            .filter(|s| !s.frozen)
            .map(|s| s.kind.index())
            .collect()
    }

    /// Applies kind indices to the searchable slots, in slot order.
    pub fn with_kinds(&self, kinds: &[usize]) -> Result<Self> {
        let mut out = self.clone();
        let searchable: Vec<usize> = (0..out.slots.len()).filter(|&i| !out.slots[i].frozen).collect();
        if searchable.len() != kinds.len() {
            return Err(Error::InvalidConfig(format!(
                "{} kind indices for {} searchable slots",
                kinds.len(),
                searchable.len()
            )));
        }
        for (&slot, &k) in searchable.iter().zip(kinds) {
            out.slots[slot].kind = BlockKind::from_index(k)
                .ok_or_else(|| Error::InvalidConfig(format!("kind index {k} out of range")))?;
        }
        Ok(out)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }
}
