//! One function per subcommand. Each returns the one-line JSON summary.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use placerec::annindex::{build_db, HnswConfig, Metric};
use placerec::evalkit::{evaluate, random_baseline, recall_key, MarWeighting, RECALL_1PCT};
use placerec::model::write_checkpoint;
use placerec::pipeline::{self, prepare_dataset, views, RunConfig};
use placerec::synthdata::{table_stats, Role};
use placerec::trainer::{database_label_map, train as fit};
use serde_json::{json, Value};

use crate::artifacts::{self as art, UsageError};
use crate::{Common, EvalOpts, TrainOpts};

/// 1 for bad input or configuration, 2 for anything that failed while running.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<placerec::Error>() {
            return if e.is_validation() { 1 } else { 2 };
        }
    }
    2
}

fn validated(cfg: RunConfig) -> Result<RunConfig> {
    cfg.validate().context("configuration")?;
    Ok(cfg)
}

fn apply_train(cfg: &mut RunConfig, opts: &TrainOpts, seed: Option<u64>) {
    if let Some(e) = opts.epochs {
        cfg.train.epochs = e;
    }
    if let Some(b) = opts.batch {
        cfg.train.batch_size = b;
    }
    if let Some(d) = opts.emb_size {
        cfg.model.embedding_size = d;
    }
    if let Some(k) = opts.decimation {
        cfg.train.decimation = k;
    }
    if let Some(n) = opts.normalize {
        cfg.model.normalize_embedding = n;
    }
    if let Some(s) = seed {
        cfg.train.seed = s;
        cfg.model.seed = s;
    }
}

fn apply_eval(cfg: &mut RunConfig, opts: &EvalOpts, seed: Option<u64>) {
    if let Some(r) = opts.radius {
        cfg.eval.radius = r;
    }
    if let Some(ks) = &opts.k_list {
        cfg.eval.k_list = ks.clone();
    }
    if opts.query_weighted {
        cfg.eval.weighting = MarWeighting::Queries;
    }
    if opts.approximate && cfg.eval.approximate.is_none() {
        cfg.eval.approximate = Some(HnswConfig::default());
    }
    if let (Some(s), Some(h)) = (seed, cfg.eval.approximate.as_mut()) {
        h.seed = s;
    }
}

pub fn gen(common: &Common) -> Result<Value> {
    let mut cfg = match &common.config {
        Some(p) => art::load_config_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.synth.seed = s;
    }
    let cfg = validated(cfg)?;
    let (ds, filter) = prepare_dataset(&cfg)?;
    let dir = &common.out;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    art::write(&dir.join(art::MANIFEST), ds.manifest.to_json()?.as_bytes())?;
    art::write(&dir.join(art::CLOUDS), &ds.clouds.to_bytes())?;
    let stats = table_stats(&ds.manifest)?;
    let mut w = csv::Writer::from_path(dir.join(art::STATS))?;
    for row in &stats {
        w.serialize(row)?;
    }
    w.flush()?;
    art::write_config(dir, "gen", &cfg)?;
    Ok(json!({
        "command": "gen",
        "maps": ds.manifest.maps,
        "samples": ds.manifest.samples.len(),
        "database": ds.manifest.with_role(Role::Database).count(),
        "queries_kept": filter.kept(),
        "queries_removed": filter.removed(),
        "out": dir,
    }))
}

pub fn train(common: &Common, opts: &TrainOpts, holdout_map: Option<u32>) -> Result<Value> {
    let dir = &common.out;
    let mut cfg = art::load_config(common.config.as_deref(), dir, "gen")?;
    apply_train(&mut cfg, opts, common.seed);
    if holdout_map.is_some() {
        cfg.holdout_map = holdout_map;
    }
    let cfg = validated(cfg)?;
    let ds = art::load_dataset(dir)?;
    let v = views(&ds, &cfg)?;
    let labels = database_label_map(&v.train)?;
    let model_cfg = cfg.model.with_classes(labels.num_classes() as usize);

    let log_path = dir.join(art::TRAIN_LOG);
    let mut log = BufWriter::new(
        File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?,
    );
    let ckpt = dir.join(art::CHECKPOINT);
    let every = cfg.train.checkpoint_every;
    let mut io_err: Option<anyhow::Error> = None;
    let start = Instant::now();
    let out = fit(&v.train, &labels, &model_cfg, &cfg.train, |rec, params| {
        log::info!(
            "epoch {} loss {:.4} ({:.1}s)",
            rec.epoch,
            rec.mean_loss,
            rec.epoch_seconds
        );
        let mut step = || -> Result<()> {
            writeln!(log, "{}", serde_json::to_string(rec)?)?;
            log.flush()?;
            if every > 0 && rec.epoch % every == 0 {
                art::write(&ckpt, &write_checkpoint(params)?)?;
            }
            Ok(())
        };
        if let Err(e) = step() {
            io_err = Some(e);
            return Err(placerec::Error::Io(std::io::Error::other(
                "could not record epoch",
            )));
        }
        Ok(())
    });
    if let Some(e) = io_err {
        return Err(e);
    }
    let out = out?;
    art::write(&ckpt, &write_checkpoint(&out.params)?)?;
    art::write_config(dir, "train", &cfg)?;
    Ok(json!({
        "command": "train",
        "epochs": out.log.len(),
        "final_loss": out.log.last().map(|r| r.mean_loss),
        "classes": labels.num_classes(),
        "param_count": out.params.parameter_count(),
        "seconds": start.elapsed().as_secs_f64(),
        "checkpoint": ckpt,
    }))
}

pub fn index(common: &Common, metric: Option<&str>) -> Result<Value> {
    let dir = &common.out;
    let mut cfg = art::load_config(common.config.as_deref(), dir, "train")?;
    if let Some(m) = metric {
        cfg.metric = m
            .parse::<Metric>()
            .map_err(|e| UsageError(format!("--metric: {e}")))?;
    }
    let cfg = validated(cfg)?;
    let params = art::load_checkpoint(dir)?;
    let ds = art::load_dataset(dir)?;
    let eval_ds = views(&ds, &cfg)?.eval;
    let labels = database_label_map(&eval_ds)?;
    let db = build_db(&params, &eval_ds, &labels, cfg.metric)?;
    art::write(&dir.join(art::DATABASE), &db.to_bytes()?)?;
    art::write(
        &dir.join(art::LABELS),
        labels.to_text(eval_ds.manifest.grid.h).as_bytes(),
    )?;
    art::write_config(dir, "index", &cfg)?;
    Ok(json!({
        "command": "index",
        "entries": db.len(),
        "dim": db.dim(),
        "classes": labels.num_classes(),
        "metric": cfg.metric,
        "normalized": db.normalized(),
    }))
}

pub fn eval(common: &Common, opts: &EvalOpts, report: Option<PathBuf>) -> Result<Value> {
    let dir = &common.out;
    let mut cfg = art::load_config(common.config.as_deref(), dir, "index")?;
    apply_eval(&mut cfg, opts, common.seed);
    let cfg = validated(cfg)?;
    let params = art::load_checkpoint(dir)?;
    let db = art::load_database(dir)?;
    let (labels, h) = art::load_labels(dir)?;
    let ds = art::load_dataset(dir)?;
    let eval_ds = views(&ds, &cfg)?.eval;
    if h != eval_ds.manifest.grid.h {
        return Err(UsageError(format!(
            "{} was written for grid size {h} but the dataset uses {}; rerun `placerec index`",
            art::LABELS,
            eval_ds.manifest.grid.h
        ))
        .into());
    }
    if db.dim() != params.config.embedding_size {
        return Err(UsageError(format!(
            "{} holds {}-d embeddings but the checkpoint produces {}-d; rerun `placerec index`",
            art::DATABASE,
            db.dim(),
            params.config.embedding_size
        ))
        .into());
    }
    let rep = evaluate(&params, &eval_ds, &db, &labels, &cfg.eval)?;
    let baseline = random_baseline(&db, &labels, &eval_ds, &cfg.eval)?;
    let path = report.unwrap_or_else(|| dir.join(art::REPORT));
    art::write(&path, rep.to_json()?.as_bytes())?;
    art::write_config(dir, "eval", &cfg)?;
    Ok(json!({
        "command": "eval",
        "MAR@1": rep.mar_at_1,
        "MAR@1pct": rep.mar_at_1pct,
        "top1pct_k": rep.config.top1pct_k,
        "radius": rep.config.radius,
        "queries": rep.per_map.values().map(|m| m.kept).sum::<usize>(),
        "random_baseline": baseline.mar,
        "report": path,
    }))
}

/// Values swept by `sweep`; every combination trains one model.
pub struct Grid {
    pub emb_sizes: Vec<usize>,
    pub decimations: Vec<u32>,
    pub norms: Vec<bool>,
}

pub fn sweep(
    common: &Common,
    opts: &TrainOpts,
    eval_opts: &EvalOpts,
    grid: &Grid,
    holdout_map: Option<u32>,
) -> Result<Value> {
    if grid.emb_sizes.is_empty() || grid.decimations.is_empty() || grid.norms.is_empty() {
        return Err(UsageError("sweep needs at least one value per axis".into()).into());
    }
    let dir = &common.out;
    let mut base = art::load_config(common.config.as_deref(), dir, "gen")?;
    apply_train(&mut base, opts, common.seed);
    apply_eval(&mut base, eval_opts, common.seed);
    if holdout_map.is_some() {
        base.holdout_map = holdout_map;
    }
    let base = validated(base)?;
    let ds = art::load_dataset(dir)?;

    let mut rows = Vec::new();
    for &d in &grid.emb_sizes {
        for &k in &grid.decimations {
            for &norm in &grid.norms {
                let mut cfg = base.clone();
                cfg.model.embedding_size = d;
                cfg.train.decimation = k;
                cfg.model.normalize_embedding = norm;
                let cfg = validated(cfg)?;
                log::info!("sweep: D={d} k={k} norm={norm}");
                let out = pipeline::run(&cfg, &ds)?;
                rows.push((d, k, norm, out));
            }
        }
    }

    let maps: Vec<u32> = rows[0].3.report.per_map.keys().copied().collect();
    let path = dir.join(art::SWEEP);
    write_sweep(&path, &maps, &rows)?;
    art::write_config(dir, "sweep", &base)?;
    Ok(json!({
        "command": "sweep",
        "rows": rows.len(),
        "best_MAR@1": rows.iter().map(|r| r.3.report.mar_at_1).fold(f64::NAN, f64::max),
        "csv": path,
    }))
}

fn write_sweep(
    path: &Path,
    maps: &[u32],
    rows: &[(usize, u32, bool, pipeline::RunOutput)],
) -> Result<()> {
    let r1 = recall_key(1);
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec![
        "emb_size".to_string(),
        "decimation".into(),
        "normalize".into(),
    ];
    for m in maps {
        header.push(format!("map{m}_{r1}"));
        header.push(format!("map{m}_{RECALL_1PCT}"));
    }
    header.extend(["MAR@1", "MAR@1pct", "epoch_time_s", "param_count"].map(String::from));
    w.write_record(&header)?;
    for (d, k, norm, out) in rows {
        let mut rec = vec![d.to_string(), k.to_string(), norm.to_string()];
        for m in maps {
            let per = out.report.per_map.get(m);
            for key in [r1.as_str(), RECALL_1PCT] {
                rec.push(
                    per.and_then(|p| p.recall.get(key))
                        .map(|v| format!("{v:.4}"))
                        .unwrap_or_default(),
                );
            }
        }
        let epoch_time =
            out.log.iter().map(|l| l.epoch_seconds).sum::<f64>() / out.log.len().max(1) as f64;
        rec.push(format!("{:.4}", out.report.mar_at_1));
        rec.push(format!("{:.4}", out.report.mar_at_1pct));
        rec.push(format!("{epoch_time:.3}"));
        rec.push(out.params.parameter_count().to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
