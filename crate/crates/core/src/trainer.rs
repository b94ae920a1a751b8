//! Mini-batch training with the masked cross-entropy objective.
//!
//! Per-sample forward/backward passes within a batch run on the rayon pool in
//! fixed-size chunks; chunk sums are then added in chunk order, so the result
//! does not depend on the number of worker threads.

use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geogrid::{masked_labels, LabelMap};
use crate::model::{init_params, sample_gradient, ModelConfig, ModelParams};
use crate::seeding::{rng_for, stream};
use crate::synthdata::{decimate, Dataset, Role};

/// Samples per reduction chunk.
const CHUNK: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: u32,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Keep `1/k` of each cloud's points per step.
    pub decimation: u32,
    pub seed: u64,
    /// Checkpoint every this many epochs; 0 keeps only the final one.
    pub checkpoint_every: u32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decimation: 20,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidInput("batch size must be at least 1".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::InvalidInput(format!(
                "learning rate must be non-negative, got {}",
                self.lr
            )));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(Error::InvalidInput("Adam betas must lie in [0, 1)".into()));
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return Err(Error::InvalidInput("Adam epsilon must be positive".into()));
        }
        if self.decimation == 0 {
            return Err(Error::InvalidInput(
                "decimation factor must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Adam moment estimates mirroring the parameter shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: ModelParams,
    pub v: ModelParams,
}

impl OptimizerState {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut OptimizerState,
    cfg: &TrainConfig,
) {
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let tensors = params
        .tensors_mut()
        .zip(grads.tensors())
        .zip(state.m.tensors_mut().zip(state.v.tensors_mut()));
    for ((p, g), (m, v)) in tensors {
        let it = p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut()));
        for ((p, &g), (m, v)) in it {
            let g = g as f64;
            let m1 = b1 * *m as f64 + (1.0 - b1) * g;
            let v1 = b2 * *v as f64 + (1.0 - b2) * g * g;
            *m = m1 as f32;
            *v = v1 as f32;
            let update = cfg.lr * (m1 / c1) / ((v1 / c2).sqrt() + cfg.eps);
            *p = (*p as f64 - update) as f32;
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: u32,
    pub mean_loss: f64,
    pub epoch_seconds: f64,
    pub lr: f64,
    pub k: u32,
    pub param_count: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub params: ModelParams,
    pub log: Vec<EpochLog>,
}

struct Example {
    sample_id: u64,
    offset: u64,
    target: u32,
    mask: Vec<u32>,
}

fn examples(dataset: &Dataset, label_map: &LabelMap) -> Result<Vec<Example>> {
    let grid = &dataset.manifest.grid;
    dataset
        .manifest
        .with_role(Role::Database)
        .map(|s| {
            let cell = s.cell(grid)?;
            let target = label_map.label_of(cell)?;
            let mask = masked_labels(label_map, cell, grid)?;
            // Checked once here and again by the loss on every step.
            assert!(!mask.contains(&target), "target label {target} masked");
            dataset.cloud(s)?;
            Ok(Example {
                sample_id: s.sample_id,
                offset: s.cloud_offset,
                target,
                mask,
            })
        })
        .collect()
}

fn batch_gradient(
    dataset: &Dataset,
    params: &ModelParams,
    batch: &[&Example],
    cfg: &TrainConfig,
    epoch: u32,
) -> Result<(f64, ModelParams)> {
    let chunk_sums: Vec<Result<(f64, ModelParams)>> = batch
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut loss = 0.0;
            let mut acc = params.zeros_like();
            for ex in chunk {
                let cloud = dataset.clouds.get(ex.offset)?;
                let mut rng = rng_for(&[cfg.seed, stream::DECIMATE, epoch as u64, ex.sample_id]);
                let points = decimate(cloud, cfg.decimation, &mut rng)?;
                let sg = sample_gradient(params, points.as_tensor(), ex.target, &ex.mask)?;
                if !sg.loss.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "loss {} at epoch {epoch}, sample {}",
                        sg.loss, ex.sample_id
                    )));
                }
                loss += sg.loss;
                acc.add_assign(&sg.grads);
            }
            Ok((loss, acc))
        })
        .collect();
    let mut total_loss = 0.0;
    let mut total = params.zeros_like();
    for r in chunk_sums {
        let (l, g) = r?;
        total_loss += l;
        total.add_assign(&g);
    }
    let inv = 1.0 / batch.len() as f64;
    total.scale(inv as f32);
    if !total.all_finite() {
        return Err(Error::NonFinite(format!("gradient at epoch {epoch}")));
    }
    Ok((total_loss * inv, total))
}

/// Trains from a fresh initialization. `on_epoch` runs after every epoch
/// with the log record and the current parameters.
pub fn train<F>(
    dataset: &Dataset,
    label_map: &LabelMap,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    on_epoch: F,
) -> Result<TrainOutput>
where
    F: FnMut(&EpochLog, &ModelParams) -> Result<()>,
{
    train_from(dataset, label_map, init_params(model_cfg)?, cfg, on_epoch)
}

pub fn train_from<F>(
    dataset: &Dataset,
    label_map: &LabelMap,
    mut params: ModelParams,
    cfg: &TrainConfig,
    mut on_epoch: F,
) -> Result<TrainOutput>
where
    F: FnMut(&EpochLog, &ModelParams) -> Result<()>,
{
    cfg.validate()?;
    params.config.validate()?;
    if params.config.num_classes != label_map.num_classes() as usize {
        return Err(Error::InvalidInput(format!(
            "model has {} classes but the label map has {}",
            params.config.num_classes,
            label_map.num_classes()
        )));
    }
    let examples = examples(dataset, label_map)?;
    if examples.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let param_count = params.parameter_count();
    let mut state = OptimizerState::new(&params);
    let mut log = Vec::with_capacity(cfg.epochs as usize);

    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let mut order: Vec<&Example> = examples.iter().collect();
        order.shuffle(&mut rng_for(&[cfg.seed, stream::SHUFFLE, epoch as u64]));
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let (loss, grads) = batch_gradient(dataset, &params, batch, cfg, epoch)?;
            adam_step(&mut params, &grads, &mut state, cfg);
            loss_sum += loss;
            batches += 1;
        }
        let record = EpochLog {
            epoch,
            mean_loss: loss_sum / batches as f64,
            epoch_seconds: start.elapsed().as_secs_f64(),
            lr: cfg.lr,
            k: cfg.decimation,
            param_count,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} ({:.1} s)",
            record.mean_loss,
            record.epoch_seconds
        );
        on_epoch(&record, &params)?;
        log.push(record);
    }
    Ok(TrainOutput { params, log })
}

/// Label map over the cells of all database samples.
pub fn database_label_map(dataset: &Dataset) -> Result<LabelMap> {
    let grid = &dataset.manifest.grid;
    let cells = dataset
        .manifest
        .with_role(Role::Database)
        .map(|s| s.cell(grid))
        .collect::<Result<Vec<_>>>()?;
    crate::geogrid::build_label_map(cells)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::write_checkpoint;
    use crate::synthdata::{generate_split, SynthConfig};

    fn dataset() -> Dataset {
        let cfg = SynthConfig {
            maps: 2,
            scenes_per_map: 3,
            samples_per_scene: 12,
            points_per_scan: 40,
            ..SynthConfig::default()
        };
        generate_split(&cfg, 70.0, 18.0).unwrap().0
    }

    fn small_model(c: usize) -> ModelConfig {
        ModelConfig {
            widths: vec![3, 16, 16],
            embedding_size: 8,
            num_classes: c,
            normalize_embedding: true,
            seed: 1,
        }
    }

    fn quick(epochs: u32) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 5,
            decimation: 2,
            lr: 1e-2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let ds = dataset();
        let lm = database_label_map(&ds).unwrap();
        let mc = small_model(lm.num_classes() as usize);
        let out = train(
            &ds,
            &lm,
            &mc,
            &TrainConfig {
                lr: 0.0,
                ..quick(2)
            },
            |_, _| Ok(()),
        )
        .unwrap();
        assert_eq!(out.params, init_params(&mc).unwrap());
        assert_eq!(out.log.len(), 2);
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let ds = dataset();
        let lm = database_label_map(&ds).unwrap();
        let mc = small_model(lm.num_classes() as usize);
        let mut seen = 0;
        let a = train(&ds, &lm, &mc, &quick(6), |_, _| {
            seen += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!(seen, 6);
        let b = train(&ds, &lm, &mc, &quick(6), |_, _| Ok(())).unwrap();
        assert_eq!(
            write_checkpoint(&a.params).unwrap(),
            write_checkpoint(&b.params).unwrap()
        );
        let losses: Vec<f64> = a.log.iter().map(|l| l.mean_loss).collect();
        assert_eq!(
            losses,
            b.log.iter().map(|l| l.mean_loss).collect::<Vec<_>>()
        );
        assert!(losses[5] < losses[0], "{losses:?}");
        assert_eq!(a.log[0].param_count, a.params.parameter_count());
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let ds = dataset();
        let lm = database_label_map(&ds).unwrap();
        let mc = small_model(lm.num_classes() as usize);
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| {
                    train(&ds, &lm, &mc, &quick(2), |_, _| Ok(()))
                        .unwrap()
                        .params
                })
        };
        assert_eq!(run(1), run(3));
    }

    #[test]
    fn adam_examples() {
        let mut cfg_model = small_model(4);
        cfg_model.widths = vec![3, 2];
        cfg_model.embedding_size = 2;
        let p0 = init_params(&cfg_model).unwrap();
        let cfg = TrainConfig::default();

        let mut p = p0.clone();
        let mut st = OptimizerState::new(&p);
        adam_step(&mut p, &p0.zeros_like(), &mut st, &cfg);
        assert_eq!(p, p0);

        let mut g = p0.zeros_like();
        for t in g.tensors_mut() {
            for (i, v) in t.data_mut().iter_mut().enumerate() {
                *v = if i % 2 == 0 { 0.37 } else { -2.5 };
            }
        }
        let mut p = p0.clone();
        let mut st = OptimizerState::new(&p);
        adam_step(&mut p, &g, &mut st, &cfg);
        for ((a, b), gt) in p.tensors().zip(p0.tensors()).zip(g.tensors()) {
            for ((x, y), gv) in a.data().iter().zip(b.data()).zip(gt.data()) {
                let delta = (*x - *y) as f64;
                assert!(delta.abs() <= cfg.lr * (1.0 + 1e-3));
                assert_eq!(delta.signum(), -(*gv as f64).signum());
            }
        }
        // Identical gradients give identical updates across tensors.
        let d0 = p.decoder.bias.data()[0] - p0.decoder.bias.data()[0];
        let d1 = p.embedding.bias.data()[0] - p0.embedding.bias.data()[0];
        assert_eq!(d0, d1);
    }

    #[test]
    fn rejects_bad_inputs() {
        let ds = dataset();
        let lm = database_label_map(&ds).unwrap();
        let mc = small_model(lm.num_classes() as usize);
        assert!(train(
            &ds,
            &lm,
            &mc,
            &TrainConfig {
                batch_size: 0,
                ..quick(1)
            },
            |_, _| Ok(())
        )
        .is_err());
        assert!(train(
            &ds,
            &lm,
            &small_model(lm.num_classes() as usize + 1),
            &quick(1),
            |_, _| Ok(())
        )
        .is_err());
        let mut empty = ds.clone();
        empty
            .manifest
            .samples
            .retain(|s| s.role != Some(Role::Database));
        assert!(train(&empty, &lm, &mc, &quick(1), |_, _| Ok(())).is_err());
    }
}
