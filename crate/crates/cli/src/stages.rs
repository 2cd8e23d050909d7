use std::collections::{BTreeMap, BTreeSet};
use std::fs;

use blocksurgeon::distill::{distill_all, stitch, SurrogateSet};
use blocksurgeon::profile::{global_latency, load_profile, simulate_profile, speedup, LatencyProfile};
use blocksurgeon::saliency::{rank_blocks, saliency_batch, saliency_report, select_frozen, Ranking, SaliencyReport};
use blocksurgeon::search::{
    hypervolume_2d, knee_select, least_latency_select, mobo_run, write_run_log, MoboResult, MoboSettings, Observation,
    StitchedObjective,
};
use blocksurgeon::toynet::{finetune, train_base, Dataset, Network, NetworkConfig, TrainReport};
use serde::{Deserialize, Serialize};

use crate::config::{ProfileSource, RunConfig, Select};
use crate::svg;
use crate::workspace::{read_json, write_bytes, write_json, Failure, Outcome, Stage, Workspace};

const NETWORK: &str = "network";
const PAIRS: &str = "pairs";
const SURROGATES: &str = "surrogates";

pub struct Ctx<'a> {
    pub ws: &'a Workspace,
    pub cfg: &'a RunConfig,
    pub config_hash: String,
}

#[derive(Serialize, Deserialize)]
struct SaliencyOut {
    report: SaliencyReport,
    ranking: Ranking,
    frozen: BTreeSet<String>,
}

#[derive(Serialize, Deserialize)]
struct Selected {
    rule: Select,
    /// Chosen kind per searchable slot.
    kinds: BTreeMap<String, String>,
    observation: Observation,
    config: NetworkConfig,
}

#[derive(Serialize, Deserialize)]
pub struct Summary {
    pub preset: String,
    pub seed: u64,
    pub base_psnr_db: f64,
    pub final_psnr_db: f64,
    pub psnr_loss_db: f64,
    /// Loss predicted by the stitched surrogates before fine-tuning.
    pub search_psnr_loss_db: f64,
    pub selection_rule: Select,
    pub chosen_config: BTreeMap<String, String>,
    pub frozen_slots: Vec<String>,
    pub base_latency_ms: f64,
    pub latency_ms: f64,
    pub speedup: f64,
    pub evaluations: usize,
    pub pareto_size: usize,
    pub hypervolume: f64,
    pub reference_point: [f64; 2],
}

impl Ctx<'_> {
    fn begin(&self, stage: Stage) -> Outcome<(BTreeMap<String, String>, std::path::PathBuf)> {
        let inputs = self.ws.require_inputs(stage, &self.config_hash)?;
        let dir = self.ws.fresh_dir(stage)?;
        Ok((inputs, dir))
    }

    fn finish(&self, stage: Stage, inputs: BTreeMap<String, String>) -> Outcome {
        self.ws.seal(stage, self.cfg.seed, &self.config_hash, inputs)?;
        Ok(())
    }

    fn data(&self) -> Outcome<(Dataset, Dataset)> {
        let (data, _) = Dataset::load(&self.ws.stage_dir(Stage::Data).join(PAIRS))?;
        Ok(data.split(self.cfg.train_pairs)?)
    }

    fn base(&self) -> Outcome<Network> {
        Ok(Network::load(&self.ws.stage_dir(Stage::Base), NETWORK)?)
    }

    /// The base network with the saliency stage's frozen slots applied.
    fn frozen_base(&self) -> Outcome<(Network, BTreeSet<String>)> {
        let net = self.base()?;
        let out: SaliencyOut = read_json(&self.ws.stage_dir(Stage::Saliency).join("saliency.json"))?;
        let frozen: Vec<String> = out.frozen.iter().cloned().collect();
        let cfg = net.config().clone().with_frozen(&frozen)?;
        Ok((Network::from_parts(cfg, net.params().clone())?, out.frozen))
    }

    fn profile(&self) -> Outcome<LatencyProfile> {
        Ok(load_profile(&self.ws.stage_dir(Stage::Profile).join("profile.json"))?)
    }
}

pub fn gen_data(ctx: &Ctx) -> Outcome {
    let (inputs, dir) = ctx.begin(Stage::Data)?;
    let spec = &ctx.cfg.dataset;
    if ctx.cfg.train_pairs == 0 || ctx.cfg.train_pairs >= spec.count {
        return Err(Failure::Usage(format!(
            "train_pairs must be in 1..{}, got {}",
            spec.count, ctx.cfg.train_pairs
        )));
    }
    let data = blocksurgeon::toynet::generate_dataset(spec)?;
    data.save(&dir.join(PAIRS), spec)?;
    ctx.finish(Stage::Data, inputs)?;
    eprintln!("gen-data: {} pairs of {}x{}", data.len(), spec.size, spec.size);
    Ok(())
}

pub fn train(ctx: &Ctx) -> Outcome {
    let (inputs, dir) = ctx.begin(Stage::Base)?;
    let (train, val) = ctx.data()?;
    let net = Network::build(&ctx.cfg.network, ctx.cfg.seed)?;
    let (net, report) = train_base(net, &train, &val, &ctx.cfg.train)?;
    net.save(&dir, NETWORK)?;
    write_json(&dir.join("train.json"), &report)?;
    ctx.finish(Stage::Base, inputs)?;
    eprintln!(
        "train-base: validation PSNR {:.3} dB (blurred inputs {:.3} dB)",
        report.val_psnr, report.blurred_psnr
    );
    Ok(())
}

pub fn profile(ctx: &Ctx) -> Outcome {
    let (inputs, dir) = ctx.begin(Stage::Profile)?;
    let net = ctx.base()?;
    let profile = match &ctx.cfg.profile {
        ProfileSource::Simulate { noise } => simulate_profile(net.config(), ctx.cfg.dataset.size, ctx.cfg.seed, *noise)?,
        ProfileSource::File { path } => {
            let p = load_profile(path).map_err(|e| match Failure::from(e) {
                Failure::Other(m) => Failure::Corrupt(format!("{}: {m}", path.display())),
                f => f,
            })?;
            p.for_config(net.config(), &ctx.cfg.kinds)
                .map_err(|e| Failure::Corrupt(format!("{}: {e}", path.display())))?;
            p
        }
    };
    profile.save(&dir.join("profile.json"))?;
    ctx.finish(Stage::Profile, inputs)?;
    eprintln!(
        "profile: {}, all-base latency {:.2} ms",
        profile.device,
        global_latency(&profile, net.config())?
    );
    Ok(())
}

pub fn saliency(ctx: &Ctx) -> Outcome {
    let (inputs, dir) = ctx.begin(Stage::Saliency)?;
    let (train, _) = ctx.data()?;
    let net = ctx.base()?;
    let batch = saliency_batch(&train, ctx.cfg.seed)?;
    let report = saliency_report(&net, &batch)?;
    let ranking = rank_blocks(&report);
    let frozen = select_frozen(&ranking, ctx.cfg.frozen_count);
    let mut csv = Vec::new();
    report
        .write_csv(&ranking, &mut csv)
        .map_err(|e| Failure::Other(e.to_string()))?;
    write_bytes(&dir.join("saliency.csv"), &csv)?;
    write_json(
        &dir.join("saliency.json"),
        &SaliencyOut {
            report,
            ranking,
            frozen: frozen.clone(),
        },
    )?;
    ctx.finish(Stage::Saliency, inputs)?;
    eprintln!("saliency: frozen {:?}", frozen);
    Ok(())
}

pub fn distill(ctx: &Ctx) -> Outcome {
    let (inputs, dir) = ctx.begin(Stage::Distill)?;
    let (train, val) = ctx.data()?;
    let (net, _) = ctx.frozen_base()?;
    let slots: Vec<String> = net.config().searchable().iter().map(|s| s.id.clone()).collect();
    let set = distill_all(&net, &train, &val, &slots, &ctx.cfg.kinds, &ctx.cfg.distill)?;
    set.save(&dir.join(SURROGATES))?;
    let mut csv = String::from("slot_id,kind,initial_mse,final_mse\n");
    for ((slot, kind), s) in &set.entries {
        csv.push_str(&format!("{slot},{kind},{:e},{:e}\n", s.initial_mse, s.final_mse));
    }
    write_bytes(&dir.join("distill.csv"), csv.as_bytes())?;
    ctx.finish(Stage::Distill, inputs)?;
    eprintln!("distill: {} surrogates over {} slots", set.len(), slots.len());
    Ok(())
}

pub fn search(ctx: &Ctx) -> Outcome {
    let (inputs, dir) = ctx.begin(Stage::Search)?;
    let (_, val) = ctx.data()?;
    let (net, _) = ctx.frozen_base()?;
    let set = SurrogateSet::load(&ctx.ws.stage_dir(Stage::Distill).join(SURROGATES))?;
    let profile = ctx.profile()?;
    let s = &ctx.cfg.search;
    let obj = StitchedObjective::new(&net, &set, &profile, &val, &ctx.cfg.kinds)?.with_alpha_floor(s.alpha_floor);
    let settings = MoboSettings {
        budget: s.budget,
        pool_size: s.pool_size,
        seed: ctx.cfg.seed,
        ..Default::default()
    };
    let result = mobo_run(&obj, &settings)?;
    let chosen = match s.select {
        Select::Knee => knee_select(&result.archive)?,
        Select::LeastLatency => least_latency_select(&result.archive)?,
    };
    let kinds = obj
        .slots()
        .iter()
        .zip(&chosen.kinds)
        .map(|(slot, &k)| (slot.clone(), obj.choices()[k].to_string()))
        .collect();
    let names: Vec<String> = obj.choices().iter().map(|k| k.to_string()).collect();
    let mut csv = Vec::new();
    write_run_log(&result.log, &result.archive, &names, &mut csv).map_err(|e| Failure::Other(e.to_string()))?;
    write_bytes(&dir.join("runlog.csv"), &csv)?;
    write_json(&dir.join("result.json"), &result)?;
    write_json(
        &dir.join("selected.json"),
        &Selected {
            rule: s.select,
            kinds,
            config: obj.config_for(&chosen.kinds)?,
            observation: chosen.clone(),
        },
    )?;
    ctx.finish(Stage::Search, inputs)?;
    eprintln!(
        "search: {} evaluations, {} on the front; selected f1 {:.3} dB at {:.2} ms",
        result.log.len(),
        result.archive.len(),
        chosen.f1,
        chosen.latency_ms
    );
    Ok(())
}

pub fn finetune_stage(ctx: &Ctx) -> Outcome {
    let (inputs, dir) = ctx.begin(Stage::Finetune)?;
    let (train, val) = ctx.data()?;
    let (net, _) = ctx.frozen_base()?;
    let set = SurrogateSet::load(&ctx.ws.stage_dir(Stage::Distill).join(SURROGATES))?;
    let selected: Selected = read_json(&ctx.ws.stage_dir(Stage::Search).join("selected.json"))?;
    let stitched = stitch(&net, &set, &selected.config)?;
    let (tuned, report) = finetune(stitched, &train, &val, &ctx.cfg.finetune)?;
    tuned.save(&dir, NETWORK)?;
    write_json(&dir.join("train.json"), &report)?;
    ctx.finish(Stage::Finetune, inputs)?;
    eprintln!(
        "finetune: validation PSNR {:.3} -> {:.3} dB",
        report.val_psnr_before, report.val_psnr
    );
    Ok(())
}

pub fn report(ctx: &Ctx) -> Outcome<Summary> {
    ctx.ws.verify_chain(Stage::Finetune, &ctx.config_hash)?;
    let (inputs, dir) = ctx.begin(Stage::Report)?;
    let base_report: TrainReport = read_json(&ctx.ws.stage_dir(Stage::Base).join("train.json"))?;
    let ft_report: TrainReport = read_json(&ctx.ws.stage_dir(Stage::Finetune).join("train.json"))?;
    let result: MoboResult = read_json(&ctx.ws.stage_dir(Stage::Search).join("result.json"))?;
    let selected: Selected = read_json(&ctx.ws.stage_dir(Stage::Search).join("selected.json"))?;
    let profile = ctx.profile()?;
    let tuned = Network::load(&ctx.ws.stage_dir(Stage::Finetune), NETWORK)?;
    let base_latency = global_latency(&profile, &ctx.cfg.network)?;
    let latency = global_latency(&profile, tuned.config())?;
    let frozen = tuned
        .config()
        .slots
        .iter()
        .filter(|s| s.frozen)
        .map(|s| s.id.clone())
        .collect();
    let summary = Summary {
        preset: serde_json::to_value(ctx.cfg.preset)
            .ok()
            .and_then(|v| v.as_str().map(String::from))
            .unwrap_or_default(),
        seed: ctx.cfg.seed,
        base_psnr_db: base_report.val_psnr,
        final_psnr_db: ft_report.val_psnr,
        psnr_loss_db: base_report.val_psnr - ft_report.val_psnr,
        search_psnr_loss_db: selected.observation.f1,
        selection_rule: selected.rule,
        chosen_config: selected.kinds,
        frozen_slots: frozen,
        base_latency_ms: base_latency,
        latency_ms: latency,
        speedup: speedup(base_latency, latency),
        evaluations: result.log.len(),
        pareto_size: result.archive.len(),
        hypervolume: hypervolume_2d(&result.archive.front(), result.reference),
        reference_point: result.reference,
    };
    write_json(&dir.join("summary.json"), &summary)?;
    let runlog = ctx.ws.stage_dir(Stage::Search).join("runlog.csv");
    let csv = fs::read(&runlog).map_err(|e| crate::workspace::io_err(&runlog, e))?;
    write_bytes(&dir.join("runlog.csv"), &csv)?;
    let title = format!(
        "{} observations, speedup {:.3}x at {:.2} dB loss",
        result.log.len(),
        summary.speedup,
        summary.psnr_loss_db
    );
    let plot = svg::scatter(
        &result.log,
        &result.archive.members,
        &selected.observation,
        &result.scale,
        base_latency,
        &title,
    );
    write_bytes(&dir.join("pareto.svg"), plot.as_bytes())?;
    ctx.finish(Stage::Report, inputs)?;
    eprintln!(
        "report: {:.2} -> {:.2} ms (speedup {:.3}), PSNR {:.3} -> {:.3} dB",
        base_latency, latency, summary.speedup, summary.base_psnr_db, summary.final_psnr_db
    );
    Ok(summary)
}

pub fn run(stage: Stage, ctx: &Ctx) -> Outcome {
    match stage {
        Stage::Data => gen_data(ctx),
        Stage::Base => train(ctx),
        Stage::Profile => profile(ctx),
        Stage::Saliency => saliency(ctx),
        Stage::Distill => distill(ctx),
        Stage::Search => search(ctx),
        Stage::Finetune => finetune_stage(ctx),
        Stage::Report => report(ctx).map(|_| ()),
    }
}
