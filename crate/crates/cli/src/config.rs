use std::path::PathBuf;

use blocksurgeon::distill::DistillSettings;
use blocksurgeon::profile::DEFAULT_ALPHA_FLOOR;
use blocksurgeon::toynet::{BlockKind, DatasetSpec, NetworkConfig, TrainSettings};
use clap::ValueEnum;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Desk,
    PaperShape,
}

impl Preset {
    pub fn network(self) -> NetworkConfig {
        match self {
            Preset::Desk => NetworkConfig::desk(),
            Preset::PaperShape => NetworkConfig::paper_shape(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Select {
    Knee,
    LeastLatency,
}

/// Where the latency table comes from: the built-in device simulator or a
/// JSON profile on disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProfileSource {
    Simulate { noise: f64 },
    File { path: PathBuf },
}

impl ProfileSource {
    pub fn parse(s: &str) -> Self {
        if s == "simulate" {
            ProfileSource::Simulate { noise: 0.1 }
        } else {
            ProfileSource::File { path: s.into() }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub budget: usize,
    pub pool_size: usize,
    pub alpha_floor: f64,
    pub select: Select,
}

/// Everything a run depends on. Stage seeds are all derived from `seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Implied by where `run.json` lives, so not part of the hashed file.
    #[serde(skip)]
    pub workspace: PathBuf,
    pub preset: Preset,
    pub seed: u64,
    pub network: NetworkConfig,
    pub dataset: DatasetSpec,
    /// Pairs used for training; the rest are the fixed validation split.
    pub train_pairs: usize,
    pub train: TrainSettings,
    /// Slots frozen by the saliency stage.
    pub frozen_count: usize,
    pub profile: ProfileSource,
    pub distill: DistillSettings,
    /// Alternatives offered in every searchable slot.
    pub kinds: Vec<BlockKind>,
    pub search: SearchConfig,
    pub finetune: TrainSettings,
}

impl RunConfig {
    pub fn for_preset(preset: Preset, workspace: PathBuf) -> Self {
        let dataset = match preset {
            Preset::Desk => DatasetSpec::default(),
            Preset::PaperShape => DatasetSpec {
                count: 64,
                size: 16,
                ..Default::default()
            },
        };
        let (epochs, ft_epochs, steps) = match preset {
            Preset::Desk => (30, 30, 400),
            Preset::PaperShape => (4, 4, 150),
        };
        let mut cfg = Self {
            workspace,
            preset,
            seed: 0,
            network: preset.network(),
            train_pairs: dataset.count * 3 / 4,
            dataset,
            train: TrainSettings {
                epochs,
                ..Default::default()
            },
            frozen_count: 1,
            profile: ProfileSource::Simulate { noise: 0.1 },
            distill: DistillSettings {
                steps,
                ..Default::default()
            },
            kinds: BlockKind::ALTERNATIVES.to_vec(),
            search: SearchConfig {
                budget: 120,
                pool_size: 512,
                alpha_floor: DEFAULT_ALPHA_FLOOR,
                select: Select::Knee,
            },
            finetune: TrainSettings {
                epochs: ft_epochs,
                ..Default::default()
            },
        };
        cfg.set_seed(0);
        cfg
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.dataset.seed = seed;
        self.train.seed = seed;
        self.distill.seed = seed;
        self.finetune.seed = seed;
    }
}

pub fn parse_kinds(list: &str) -> Result<Vec<BlockKind>, String> {
    let mut out = Vec::new();
    for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let kind: BlockKind = item.parse().map_err(|e: blocksurgeon::Error| e.to_string())?;
        if kind == BlockKind::Base {
            return Err("the base block is always available; list alternatives only".into());
        }
        if !out.contains(&kind) {
            out.push(kind);
        }
    }
    if out.is_empty() {
        return Err("--kinds needs at least one alternative".into());
    }
    out.sort();
    Ok(out)
}
