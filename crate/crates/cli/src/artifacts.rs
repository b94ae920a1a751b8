//! File names in a run directory and typed loaders for them.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use placerec::annindex::EmbeddingDB;
use placerec::geogrid::LabelMap;
use placerec::model::{read_checkpoint, ModelParams};
use placerec::pipeline::RunConfig;
use placerec::synthdata::{CloudContainer, Dataset, DatasetManifest};

pub const MANIFEST: &str = "manifest.json";
pub const CLOUDS: &str = "clouds.pcc";
pub const STATS: &str = "stats.csv";
pub const CHECKPOINT: &str = "model.lnck";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const DATABASE: &str = "db.emdb";
pub const LABELS: &str = "labels.txt";
pub const REPORT: &str = "report.json";
pub const SWEEP: &str = "sweep.csv";

/// Bad arguments or configuration; maps to exit code 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Resolved configuration written by `stage`.
pub fn config_path(dir: &Path, stage: &str) -> PathBuf {
    dir.join(format!("config.{stage}.json"))
}

/// Reads an artifact produced by `producer`, failing with a hint to run it.
pub fn read_artifact(dir: &Path, name: &str, producer: &str) -> Result<Vec<u8>> {
    let path = dir.join(name);
    if !path.is_file() {
        return Err(UsageError(format!(
            "{} not found; run `placerec {producer} --out {}` first",
            path.display(),
            dir.display()
        ))
        .into());
    }
    fs::read(&path).with_context(|| format!("reading {}", path.display()))
}

fn utf8(bytes: Vec<u8>, name: &str) -> Result<String> {
    String::from_utf8(bytes).map_err(|_| UsageError(format!("{name} is not valid UTF-8")).into())
}

pub fn load_config_file(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
    RunConfig::from_json(&text).with_context(|| format!("config {}", path.display()))
}

/// `--config` when given, else the configuration the previous stage resolved.
pub fn load_config(explicit: Option<&Path>, dir: &Path, previous: &str) -> Result<RunConfig> {
    match explicit {
        Some(p) => load_config_file(p),
        None => {
            let name = format!("config.{previous}.json");
            let text = utf8(read_artifact(dir, &name, previous)?, &name)?;
            RunConfig::from_json(&text)
                .with_context(|| format!("config {}", dir.join(&name).display()))
        }
    }
}

pub fn write_config(dir: &Path, stage: &str, cfg: &RunConfig) -> Result<()> {
    write(
        &config_path(dir, stage),
        serde_json::to_string_pretty(cfg)?.as_bytes(),
    )
}

pub fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest =
        DatasetManifest::from_json(&utf8(read_artifact(dir, MANIFEST, "gen")?, MANIFEST)?)
            .context(MANIFEST)?;
    let clouds = CloudContainer::from_bytes(&read_artifact(dir, CLOUDS, "gen")?).context(CLOUDS)?;
    manifest.validate().context(MANIFEST)?;
    Ok(Dataset { manifest, clouds })
}

pub fn load_checkpoint(dir: &Path) -> Result<ModelParams> {
    read_checkpoint(&read_artifact(dir, CHECKPOINT, "train")?).context(CHECKPOINT)
}

pub fn load_database(dir: &Path) -> Result<EmbeddingDB> {
    EmbeddingDB::from_bytes(&read_artifact(dir, DATABASE, "index")?).context(DATABASE)
}

pub fn load_labels(dir: &Path) -> Result<(LabelMap, f64)> {
    LabelMap::from_text(&utf8(read_artifact(dir, LABELS, "index")?, LABELS)?).context(LABELS)
}
