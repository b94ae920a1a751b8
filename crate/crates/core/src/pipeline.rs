//! End-to-end experiment: generate, split, train, index and evaluate.

use serde::{Deserialize, Serialize};

use crate::annindex::{build_db, EmbeddingDB, Metric};
use crate::error::{Error, Result};
use crate::evalkit::{evaluate, random_baseline, EvalConfig, RandomBaseline, RecallReport};
use crate::geogrid::LabelMap;
use crate::model::{ModelConfig, ModelParams};
use crate::synthdata::{
    generate_split, holdout_split, Dataset, FilterReport, SynthConfig, DEFAULT_MATCH_RADIUS,
    DEFAULT_TRAIN_PERCENT,
};
use crate::trainer::{database_label_map, train, EpochLog, TrainConfig};

/// Model settings that do not depend on the data; the class count comes from
/// the label map at training time.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSettings {
    pub widths: Vec<usize>,
    pub embedding_size: usize,
    pub normalize_embedding: bool,
    pub seed: u64,
}

impl Default for ModelSettings {
    fn default() -> Self {
        let base = ModelConfig::new(2);
        Self {
            widths: base.widths,
            embedding_size: base.embedding_size,
            normalize_embedding: base.normalize_embedding,
            seed: base.seed,
        }
    }
}

impl ModelSettings {
    pub fn with_classes(&self, num_classes: usize) -> ModelConfig {
        ModelConfig {
            widths: self.widths.clone(),
            embedding_size: self.embedding_size,
            num_classes,
            normalize_embedding: self.normalize_embedding,
            seed: self.seed,
        }
    }
}

/// Every knob of a run; written beside its outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub train_percent: f64,
    /// Radius used to filter queries at dataset build time.
    pub filter_radius: f64,
    pub holdout_map: Option<u32>,
    pub model: ModelSettings,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub metric: Metric,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            synth: SynthConfig::default(),
            train_percent: DEFAULT_TRAIN_PERCENT,
            filter_radius: DEFAULT_MATCH_RADIUS,
            holdout_map: None,
            model: ModelSettings::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            metric: Metric::Euclidean,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        self.model.with_classes(2).validate()?;
        if let Some(m) = self.holdout_map {
            if m >= self.synth.maps {
                return Err(Error::InvalidInput(format!(
                    "holdout map {m} out of range for {} maps",
                    self.synth.maps
                )));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Generated dataset with its standard split applied.
pub fn prepare_dataset(cfg: &RunConfig) -> Result<(Dataset, FilterReport)> {
    generate_split(&cfg.synth, cfg.train_percent, cfg.filter_radius)
}

/// The data a model trains on and the data it is evaluated against. They
/// coincide except in hold-one-map-out mode.
#[derive(Debug, Clone)]
pub struct Views {
    pub train: Dataset,
    pub eval: Dataset,
}

pub fn views(dataset: &Dataset, cfg: &RunConfig) -> Result<Views> {
    match cfg.holdout_map {
        None => Ok(Views {
            train: dataset.clone(),
            eval: dataset.clone(),
        }),
        Some(m) => {
            let (train_m, eval_m) =
                holdout_split(&dataset.manifest, m, cfg.train_percent, cfg.filter_radius)?;
            Ok(Views {
                train: Dataset {
                    manifest: train_m,
                    clouds: dataset.clouds.clone(),
                },
                eval: Dataset {
                    manifest: eval_m,
                    clouds: dataset.clouds.clone(),
                },
            })
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub params: ModelParams,
    pub log: Vec<EpochLog>,
    pub train_labels: LabelMap,
    pub eval_labels: LabelMap,
    pub db: EmbeddingDB,
    pub report: RecallReport,
    pub baseline: RandomBaseline,
}

/// Indexes and evaluates trained parameters on `eval`.
pub fn index_and_evaluate(
    params: &ModelParams,
    eval: &Dataset,
    metric: Metric,
    eval_cfg: &EvalConfig,
) -> Result<(LabelMap, EmbeddingDB, RecallReport, RandomBaseline)> {
    let labels = database_label_map(eval)?;
    let db = build_db(params, eval, &labels, metric)?;
    let report = evaluate(params, eval, &db, &labels, eval_cfg)?;
    let baseline = random_baseline(&db, &labels, eval, eval_cfg)?;
    Ok((labels, db, report, baseline))
}

/// Runs the whole experiment in memory.
pub fn run(cfg: &RunConfig, dataset: &Dataset) -> Result<RunOutput> {
    cfg.validate()?;
    let v = views(dataset, cfg)?;
    let train_labels = database_label_map(&v.train)?;
    let model_cfg = cfg.model.with_classes(train_labels.num_classes() as usize);
    let out = train(&v.train, &train_labels, &model_cfg, &cfg.train, |_, _| {
        Ok(())
    })?;
    let (eval_labels, db, report, baseline) =
        index_and_evaluate(&out.params, &v.eval, cfg.metric, &cfg.eval)?;
    Ok(RunOutput {
        params: out.params,
        log: out.log,
        train_labels,
        eval_labels,
        db,
        report,
        baseline,
    })
}
