//! `blocksurgeon`: runs the block-surgery pipeline one stage at a time inside
//! a workspace directory.

mod config;
mod stages;
mod svg;
mod workspace;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{parse_kinds, Preset, ProfileSource, RunConfig, Select};
use workspace::{Failure, Outcome, Stage, Workspace};

#[derive(Parser)]
#[command(name = "blocksurgeon", version, about = "Latency-aware block substitution for a toy deblurring network")]
struct Cli {
    #[command(flatten)]
    opts: RunOpts,

    #[command(subcommand)]
    command: Command,
}

/// Run settings. The first command in a workspace records them in
/// `run.json`; later commands may repeat them but not change them.
#[derive(Args)]
struct RunOpts {
    #[arg(long, global = true, default_value = "blocksurgeon-run")]
    workspace: PathBuf,

    #[arg(long, global = true, value_enum)]
    preset: Option<Preset>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Total search evaluations, initial design included.
    #[arg(long, global = true)]
    budget: Option<usize>,

    /// Share of training images used for distillation.
    #[arg(long, global = true)]
    fraction: Option<f64>,

    #[arg(long, global = true, value_enum)]
    select: Option<Select>,

    /// `simulate` or a path to a latency profile JSON.
    #[arg(long, global = true)]
    profile: Option<String>,

    /// Comma-separated alternatives to offer, e.g. `alt1,alt3,alt5`.
    #[arg(long, global = true)]
    kinds: Option<String>,

    /// Start from a complete run config file instead of a preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic blur dataset
    GenData,
    /// Train the base network
    TrainBase,
    /// Record per-slot block latencies
    Profile,
    /// Score slots with the zero-cost proxies and freeze the most salient
    Saliency,
    /// Distil a surrogate for every (slot, alternative) pair
    Distill,
    /// Multi-objective search over block substitutions
    Search,
    /// Fine-tune the selected configuration end to end
    Finetune,
    /// Write summary.json, runlog.csv and pareto.svg
    Report,
    /// Run every stage whose outputs are missing or stale
    Pipeline,
}

fn resolve_config(opts: &RunOpts, ws: &Workspace) -> Outcome<RunConfig> {
    let stored = ws.read_config()?;
    let mut cfg = match (&opts.config, &stored) {
        (Some(path), _) => workspace::read_json::<RunConfig>(path).map_err(|e| match e {
            Failure::Missing(m) => Failure::Usage(format!("config file not found: {m}")),
            other => other,
        })?,
        (None, Some(s)) => s.clone(),
        (None, None) => RunConfig::for_preset(opts.preset.unwrap_or(Preset::Desk), opts.workspace.clone()),
    };
    cfg.workspace = opts.workspace.clone();
    if let Some(p) = opts.preset {
        if p != cfg.preset {
            let seed = cfg.seed;
            cfg = RunConfig::for_preset(p, opts.workspace.clone());
            cfg.set_seed(seed);
        }
    }
    if let Some(seed) = opts.seed {
        cfg.set_seed(seed);
    }
    if let Some(b) = opts.budget {
        if b == 0 {
            return Err(Failure::Usage("--budget must be positive".into()));
        }
        cfg.search.budget = b;
    }
    if let Some(f) = opts.fraction {
        if !(f > 0.0 && f <= 1.0) {
            return Err(Failure::Usage(format!("--fraction must be in (0, 1], got {f}")));
        }
        cfg.distill.fraction = f;
    }
    if let Some(s) = opts.select {
        cfg.search.select = s;
    }
    if let Some(p) = &opts.profile {
        cfg.profile = ProfileSource::parse(p);
    }
    if let Some(k) = &opts.kinds {
        cfg.kinds = parse_kinds(k).map_err(Failure::Usage)?;
    }
    match stored {
        Some(s) if s != cfg => {
            let a = serde_json::to_value(&s).unwrap_or_default();
            let b = serde_json::to_value(&cfg).unwrap_or_default();
            let fields: Vec<&String> = b
                .as_object()
                .map(|o| o.keys().filter(|k| a.get(*k) != b.get(*k)).collect())
                .unwrap_or_default();
            Err(Failure::Usage(format!(
                "settings differ from {} in {:?}; use a fresh workspace",
                ws.config_path().display(),
                fields
            )))
        }
        Some(_) => Ok(cfg),
        None => {
            ws.write_config(&cfg)?;
            Ok(cfg)
        }
    }
}

fn execute(cli: &Cli) -> Outcome {
    let ws = Workspace::new(&cli.opts.workspace);
    let cfg = resolve_config(&cli.opts, &ws)?;
    let ctx = stages::Ctx {
        ws: &ws,
        cfg: &cfg,
        config_hash: ws.config_hash()?,
    };
    let stage = match cli.command {
        Command::GenData => Stage::Data,
        Command::TrainBase => Stage::Base,
        Command::Profile => Stage::Profile,
        Command::Saliency => Stage::Saliency,
        Command::Distill => Stage::Distill,
        Command::Search => Stage::Search,
        Command::Finetune => Stage::Finetune,
        Command::Report => Stage::Report,
        Command::Pipeline => {
            for stage in Stage::ALL {
                if ws.is_current(stage, &ctx.config_hash) {
                    eprintln!("{}: up to date", stage.command());
                } else {
                    stages::run(stage, &ctx)?;
                }
            }
            return Ok(());
        }
    };
    stages::run(stage, &ctx)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    blocksurgeon::par::init_workers_from_env();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.exit_code() as u8)
        }
    }
}
