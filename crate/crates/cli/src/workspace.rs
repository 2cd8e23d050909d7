//! Workspace layout, stage manifests and the hash chain linking them.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

pub const RUN_CONFIG: &str = "run.json";
pub const MANIFEST: &str = "manifest.json";

/// A stage failure, carrying the process exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Missing(String),
    Corrupt(String),
    Other(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Other(_) => 1,
            Failure::Usage(_) => 2,
            Failure::Missing(_) => 3,
            Failure::Corrupt(_) => 4,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "usage: {m}"),
            Failure::Missing(m) => write!(f, "missing artifact: {m}"),
            Failure::Corrupt(m) => write!(f, "corrupt workspace: {m}"),
            Failure::Other(m) => write!(f, "{m}"),
        }
    }
}

impl From<blocksurgeon::Error> for Failure {
    fn from(e: blocksurgeon::Error) -> Self {
        use blocksurgeon::Error as E;
        match &e {
            E::Corrupt { .. } | E::Json(_) => Failure::Corrupt(e.to_string()),
            E::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => Failure::Missing(e.to_string()),
            _ => Failure::Other(e.to_string()),
        }
    }
}

pub type Outcome<T = ()> = Result<T, Failure>;

pub fn io_err(path: &Path, e: std::io::Error) -> Failure {
    if e.kind() == std::io::ErrorKind::NotFound {
        Failure::Missing(path.display().to_string())
    } else {
        Failure::Other(format!("{}: {e}", path.display()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Data,
    Base,
    Profile,
    Saliency,
    Distill,
    Search,
    Finetune,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Data,
        Stage::Base,
        Stage::Profile,
        Stage::Saliency,
        Stage::Distill,
        Stage::Search,
        Stage::Finetune,
        Stage::Report,
    ];

    pub fn dir(self) -> &'static str {
        match self {
            Stage::Data => "data",
            Stage::Base => "base",
            Stage::Profile => "profile",
            Stage::Saliency => "saliency",
            Stage::Distill => "distill",
            Stage::Search => "search",
            Stage::Finetune => "finetune",
            Stage::Report => "report",
        }
    }

    pub fn command(self) -> &'static str {
        match self {
            Stage::Data => "gen-data",
            Stage::Base => "train-base",
            Stage::Profile => "profile",
            Stage::Saliency => "saliency",
            Stage::Distill => "distill",
            Stage::Search => "search",
            Stage::Finetune => "finetune",
            Stage::Report => "report",
        }
    }

    /// What the stage produces, for error messages.
    pub fn artifact(self) -> &'static str {
        match self {
            Stage::Data => "dataset",
            Stage::Base => "base network checkpoint",
            Stage::Profile => "latency profile",
            Stage::Saliency => "saliency report",
            Stage::Distill => "SurrogateSet",
            Stage::Search => "search result",
            Stage::Finetune => "fine-tuned network",
            Stage::Report => "report",
        }
    }

    /// Direct predecessors, checked in this order.
    pub fn inputs(self) -> &'static [Stage] {
        match self {
            Stage::Data => &[],
            Stage::Base => &[Stage::Data],
            Stage::Profile => &[Stage::Base],
            Stage::Saliency => &[Stage::Base, Stage::Data],
            Stage::Distill => &[Stage::Saliency, Stage::Base, Stage::Data],
            Stage::Search => &[Stage::Distill, Stage::Profile, Stage::Saliency, Stage::Base, Stage::Data],
            Stage::Finetune => &[Stage::Search, Stage::Distill, Stage::Base, Stage::Data],
            Stage::Report => &[Stage::Finetune, Stage::Search, Stage::Profile, Stage::Base],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub version: String,
    pub seed: u64,
    pub config_sha256: String,
    /// Hash of each predecessor's manifest file.
    pub inputs: BTreeMap<String, String>,
    /// Hash over the config hash and every input hash.
    pub inputs_sha256: String,
    /// Hash of every file the stage wrote, by path relative to the stage directory.
    pub artifacts: BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn hash_file(path: &Path) -> Outcome<String> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    Ok(sha256_hex(&bytes))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Outcome {
    let mut entries: Vec<_> = fs::read_dir(dir)
        .map_err(|e| io_err(dir, e))?
        .collect::<Result<_, _>>()
        .map_err(|e| io_err(dir, e))?;
    entries.sort_by_key(|e| e.file_name());
    for entry in entries {
        let path = entry.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else if path != root.join(MANIFEST) {
            out.push(path);
        }
    }
    Ok(())
}

fn rel_key(root: &Path, path: &Path) -> String {
    let rel = path.strip_prefix(root).unwrap_or(path);
    rel.components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

pub struct Workspace {
    pub root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.root.join(stage.dir())
    }

    pub fn config_path(&self) -> PathBuf {
        self.root.join(RUN_CONFIG)
    }

    pub fn read_config(&self) -> Outcome<Option<RunConfig>> {
        let path = self.config_path();
        match fs::read_to_string(&path) {
            Ok(text) => {
                let mut cfg: RunConfig =
                    serde_json::from_str(&text).map_err(|e| Failure::Corrupt(format!("{}: {e}", path.display())))?;
                cfg.workspace = self.root.clone();
                Ok(Some(cfg))
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(io_err(&path, e)),
        }
    }

    pub fn write_config(&self, cfg: &RunConfig) -> Outcome {
        fs::create_dir_all(&self.root).map_err(|e| io_err(&self.root, e))?;
        write_json(&self.config_path(), cfg)
    }

    pub fn config_hash(&self) -> Outcome<String> {
        hash_file(&self.config_path())
    }

    /// Clears and recreates a stage directory.
    pub fn fresh_dir(&self, stage: Stage) -> Outcome<PathBuf> {
        let dir = self.stage_dir(stage);
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        }
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        Ok(dir)
    }

    fn manifest_path(&self, stage: Stage) -> PathBuf {
        self.stage_dir(stage).join(MANIFEST)
    }

    pub fn read_manifest(&self, stage: Stage) -> Outcome<(Manifest, String)> {
        let path = self.manifest_path(stage);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(Failure::Missing(format!(
                    "{} ({}); run `blocksurgeon {}` first",
                    stage.artifact(),
                    path.display(),
                    stage.command()
                )))
            }
            Err(e) => return Err(io_err(&path, e)),
        };
        let m: Manifest = serde_json::from_slice(&bytes)
            .map_err(|e| Failure::Corrupt(format!("{}: {e}", path.display())))?;
        if m.stage != stage.dir() {
            return Err(Failure::Corrupt(format!("{} names stage {:?}", path.display(), m.stage)));
        }
        Ok((m, sha256_hex(&bytes)))
    }

    /// Checks one completed stage: manifest readable, written under the
    /// current run config, and every artifact unchanged.
    pub fn verify_stage(&self, stage: Stage, config_hash: &str) -> Outcome<(Manifest, String)> {
        let (m, hash) = self.read_manifest(stage)?;
        if m.config_sha256 != config_hash {
            return Err(Failure::Usage(format!(
                "{} was produced under a different {RUN_CONFIG}; use a fresh workspace",
                stage.dir()
            )));
        }
        let dir = self.stage_dir(stage);
        let mut files = Vec::new();
        collect_files(&dir, &dir, &mut files)?;
        let present: Vec<String> = files.iter().map(|p| rel_key(&dir, p)).collect();
        for (name, want) in &m.artifacts {
            let got = hash_file(&dir.join(name)).map_err(|_| Failure::Corrupt(format!("{}/{name} is missing", stage.dir())))?;
            if &got != want {
                return Err(Failure::Corrupt(format!("{}/{name} does not match its manifest", stage.dir())));
            }
        }
        if let Some(extra) = present.iter().find(|p| !m.artifacts.contains_key(*p)) {
            return Err(Failure::Corrupt(format!("{}/{extra} is not listed in the manifest", stage.dir())));
        }
        Ok((m, hash))
    }

    /// Verifies a stage's direct inputs and returns their manifest hashes.
    pub fn require_inputs(&self, stage: Stage, config_hash: &str) -> Outcome<BTreeMap<String, String>> {
        let mut out = BTreeMap::new();
        for &dep in stage.inputs() {
            let (_, hash) = self.verify_stage(dep, config_hash)?;
            out.insert(dep.dir().to_string(), hash);
        }
        Ok(out)
    }

    /// Walks every stage reachable from `stage` and checks that each recorded
    /// input hash still matches the predecessor's manifest on disk.
    pub fn verify_chain(&self, stage: Stage, config_hash: &str) -> Outcome {
        let mut todo = vec![stage];
        let mut seen = Vec::new();
        while let Some(s) = todo.pop() {
            if seen.contains(&s) {
                continue;
            }
            seen.push(s);
            let (m, _) = self.verify_stage(s, config_hash)?;
            let want: Vec<&str> = s.inputs().iter().map(|d| d.dir()).collect();
            let recorded: Vec<&str> = m.inputs.keys().map(String::as_str).collect();
            let mut want_sorted = want.clone();
            want_sorted.sort();
            if recorded != want_sorted {
                return Err(Failure::Corrupt(format!("{} manifest lists inputs {recorded:?}", s.dir())));
            }
            for &dep in s.inputs() {
                let (_, hash) = self.read_manifest(dep)?;
                if m.inputs[dep.dir()] != hash {
                    return Err(Failure::Corrupt(format!(
                        "broken hash chain: {} was built from a different {}",
                        s.dir(),
                        dep.dir()
                    )));
                }
                todo.push(dep);
            }
        }
        Ok(())
    }

    /// Hashes everything in the stage directory and writes its manifest.
    pub fn seal(&self, stage: Stage, seed: u64, config_hash: &str, inputs: BTreeMap<String, String>) -> Outcome<String> {
        let dir = self.stage_dir(stage);
        let mut files = Vec::new();
        collect_files(&dir, &dir, &mut files)?;
        let mut artifacts = BTreeMap::new();
        for f in files {
            artifacts.insert(rel_key(&dir, &f), hash_file(&f)?);
        }
        let mut joined = config_hash.to_string();
        for (k, v) in &inputs {
            joined.push_str(&format!("\n{k}:{v}"));
        }
        let manifest = Manifest {
            stage: stage.dir().into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed,
            config_sha256: config_hash.into(),
            inputs,
            inputs_sha256: sha256_hex(joined.as_bytes()),
            artifacts,
        };
        let path = self.manifest_path(stage);
        write_json(&path, &manifest)?;
        hash_file(&path)
    }

    /// Whether the stage's manifest is intact and was built from the current
    /// predecessors.
    pub fn is_current(&self, stage: Stage, config_hash: &str) -> bool {
        let Ok((m, _)) = self.verify_stage(stage, config_hash) else {
            return false;
        };
        stage.inputs().iter().all(|&dep| match self.read_manifest(dep) {
            Ok((_, h)) => m.inputs.get(dep.dir()) == Some(&h),
            Err(_) => false,
        })
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Outcome {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Failure::Other(e.to_string()))?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Outcome {
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Outcome<T> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| Failure::Corrupt(format!("{}: {e}", path.display())))
}
