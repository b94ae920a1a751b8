//! Radius-matched retrieval recall.
//!
//! A retrieved database entry is correct when the center of its grid cell lies
//! within the match radius of the query's true position. Recall@K is the
//! fraction of kept queries with at least one correct entry among the K
//! nearest; per-map values are averaged into MAR.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annindex::{EmbeddingDB, HnswConfig, HnswIndex, Metric};
use crate::error::{Error, Result};
use crate::geogrid::{cell_center, GridConfig, LabelMap};
use crate::model::ModelParams;
use crate::synthdata::{Dataset, Role, Split, DEFAULT_MATCH_RADIUS};

/// Stricter radius used to check sensitivity to the match threshold.
pub const STRICT_MATCH_RADIUS: f64 = 2.0;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MarWeighting {
    /// Plain mean of per-map recalls.
    #[default]
    Maps,
    /// Mean over all kept queries.
    Queries,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub radius: f64,
    /// Extra K values; 1 and the top-1% K are always evaluated.
    pub k_list: Vec<usize>,
    /// Replaces the K derived from the class count.
    pub top1pct_override: Option<usize>,
    pub weighting: MarWeighting,
    pub split: Split,
    /// Query an approximate graph instead of scanning.
    pub approximate: Option<HnswConfig>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            radius: DEFAULT_MATCH_RADIUS,
            k_list: Vec::new(),
            top1pct_override: None,
            weighting: MarWeighting::Maps,
            split: Split::Val,
            approximate: None,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.radius.is_finite() && self.radius > 0.0) {
            return Err(Error::InvalidInput(format!(
                "match radius must be positive, got {}",
                self.radius
            )));
        }
        if self.k_list.contains(&0) || self.top1pct_override == Some(0) {
            return Err(Error::InvalidInput("K values must be at least 1".into()));
        }
        if self.split == Split::Train {
            return Err(Error::InvalidInput(
                "evaluation split must be val or test".into(),
            ));
        }
        Ok(())
    }

    /// Sorted, deduplicated K values for a class count.
    pub fn ks(&self, num_classes: usize) -> Vec<usize> {
        let mut ks = self.k_list.clone();
        ks.push(1);
        ks.push(self.top1pct(num_classes));
        ks.sort_unstable();
        ks.dedup();
        ks
    }

    pub fn top1pct(&self, num_classes: usize) -> usize {
        self.top1pct_override
            .unwrap_or_else(|| top1pct_k(num_classes))
    }
}

/// One percent of the class count, truncated, and at least 1.
pub fn top1pct_k(num_classes: usize) -> usize {
    (num_classes / 100).max(1)
}

/// Whether a database label's cell center lies within `radius` (closed) of
/// the query position.
pub fn is_match(
    label_map: &LabelMap,
    grid: &GridConfig,
    label: u32,
    x: f64,
    y: f64,
    radius: f64,
) -> Result<bool> {
    let (cx, cy) = cell_center(label_map.cell_of(label)?, grid);
    Ok((cx - x).hypot(cy - y) <= radius)
}

/// A query ready for retrieval.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryPoint {
    pub sample_id: u64,
    pub map_id: u32,
    pub x: f64,
    pub y: f64,
    pub embedding: Vec<f32>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MapRecall {
    /// `recall@<K>` for each evaluated K, plus `recall@1pct`.
    #[serde(flatten)]
    pub recall: BTreeMap<String, f64>,
    pub kept: usize,
    pub excluded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportConfig {
    pub radius: f64,
    pub ks: Vec<usize>,
    pub top1pct_k: usize,
    pub num_classes: usize,
    pub metric: Metric,
    pub normalized: bool,
    pub weighting: MarWeighting,
    pub split: Split,
    pub approximate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub config: ReportConfig,
    pub per_map: BTreeMap<u32, MapRecall>,
    #[serde(rename = "MAR@1")]
    pub mar_at_1: f64,
    #[serde(rename = "MAR@1pct")]
    pub mar_at_1pct: f64,
    /// MAR for every evaluated K.
    #[serde(rename = "MAR")]
    pub mar: BTreeMap<String, f64>,
    /// Maps dropped for lack of kept queries.
    #[serde(default)]
    pub notices: Vec<String>,
}

impl RecallReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Per-map recall at K, in map order.
    pub fn recalls(&self, key: &str) -> Vec<f64> {
        self.per_map
            .values()
            .filter_map(|m| m.recall.get(key).copied())
            .collect()
    }
}

pub fn recall_key(k: usize) -> String {
    format!("recall@{k}")
}

pub const RECALL_1PCT: &str = "recall@1pct";

/// Averages `(recall, kept queries)` pairs.
pub fn mean_average_recall(per_map: &[(f64, usize)], weighting: MarWeighting) -> Result<f64> {
    if per_map.is_empty() {
        return Err(Error::Empty("per-map recalls"));
    }
    Ok(match weighting {
        MarWeighting::Maps => per_map.iter().map(|p| p.0).sum::<f64>() / per_map.len() as f64,
        MarWeighting::Queries => {
            let n: usize = per_map.iter().map(|p| p.1).sum();
            if n == 0 {
                return Err(Error::Empty("kept queries"));
            }
            per_map.iter().map(|p| p.0 * p.1 as f64).sum::<f64>() / n as f64
        }
    })
}

/// Scores already-embedded queries against `db`. `excluded` gives the number
/// of filtered-out queries per map for the report.
pub fn evaluate_queries(
    db: &EmbeddingDB,
    label_map: &LabelMap,
    grid: &GridConfig,
    queries: &[QueryPoint],
    excluded: &BTreeMap<u32, usize>,
    cfg: &EvalConfig,
) -> Result<RecallReport> {
    cfg.validate()?;
    let c = label_map.num_classes() as usize;
    let ks = cfg.ks(c);
    let k_max = *ks.last().expect("non-empty");
    let top1pct = cfg.top1pct(c);
    let index = cfg
        .approximate
        .clone()
        .map(|h| HnswIndex::build(db, h))
        .transpose()?;

    // For each query, the rank of the first correct entry (if any).
    let first_hit: Vec<Option<usize>> = queries
        .par_iter()
        .map(|q| {
            let found = match &index {
                Some(ix) => ix.query(db, &q.embedding, k_max, q.map_id)?,
                None => db.query(&q.embedding, k_max, q.map_id)?,
            };
            for (rank, n) in found.iter().enumerate() {
                let label = db.entries()[n.index].label;
                if is_match(label_map, grid, label, q.x, q.y, cfg.radius)? {
                    return Ok(Some(rank));
                }
            }
            Ok(None)
        })
        .collect::<Result<_>>()?;

    let mut groups: BTreeMap<u32, Vec<Option<usize>>> = BTreeMap::new();
    for (q, hit) in queries.iter().zip(first_hit) {
        groups.entry(q.map_id).or_default().push(hit);
    }
    let mut per_map = BTreeMap::new();
    let mut notices = Vec::new();
    for map_id in excluded.keys() {
        if !groups.contains_key(map_id) {
            let msg = format!("map {map_id} has no kept queries and is omitted");
            log::warn!("{msg}");
            notices.push(msg);
        }
    }
    for (map_id, hits) in &groups {
        let mut recall = BTreeMap::new();
        for &k in &ks {
            let ok = hits
                .iter()
                .filter(|h| matches!(h, Some(r) if *r < k))
                .count();
            recall.insert(recall_key(k), ok as f64 / hits.len() as f64);
        }
        recall.insert(RECALL_1PCT.to_string(), recall[&recall_key(top1pct)]);
        per_map.insert(
            *map_id,
            MapRecall {
                recall,
                kept: hits.len(),
                excluded: excluded.get(map_id).copied().unwrap_or(0),
            },
        );
    }
    if per_map.is_empty() {
        return Err(Error::Empty("kept queries"));
    }
    let mar_for = |key: &str| {
        let pairs: Vec<(f64, usize)> = per_map
            .values()
            .map(|m: &MapRecall| (m.recall[key], m.kept))
            .collect();
        mean_average_recall(&pairs, cfg.weighting)
    };
    let mut mar = BTreeMap::new();
    for &k in &ks {
        mar.insert(recall_key(k), mar_for(&recall_key(k))?);
    }
    mar.insert(RECALL_1PCT.to_string(), mar_for(RECALL_1PCT)?);
    Ok(RecallReport {
        config: ReportConfig {
            radius: cfg.radius,
            ks,
            top1pct_k: top1pct,
            num_classes: c,
            metric: db.metric(),
            normalized: db.normalized(),
            weighting: cfg.weighting,
            split: cfg.split,
            approximate: index.is_some(),
        },
        mar_at_1: mar[&recall_key(1)],
        mar_at_1pct: mar[RECALL_1PCT],
        per_map,
        mar,
        notices,
    })
}

/// Kept queries of `split` and excluded counts per map.
fn split_queries(
    dataset: &Dataset,
    split: Split,
) -> (Vec<&crate::synthdata::SampleRecord>, BTreeMap<u32, usize>) {
    let mut excluded: BTreeMap<u32, usize> = BTreeMap::new();
    let mut kept = Vec::new();
    for s in dataset
        .manifest
        .samples
        .iter()
        .filter(|s| s.split == Some(split))
    {
        let slot = excluded.entry(s.map_id).or_default();
        match s.role {
            Some(Role::Query) => kept.push(s),
            Some(Role::Excluded) => *slot += 1,
            _ => {}
        }
    }
    (kept, excluded)
}

/// Embeds the kept queries of `cfg.split` with full clouds and scores them.
pub fn evaluate(
    params: &ModelParams,
    dataset: &Dataset,
    db: &EmbeddingDB,
    label_map: &LabelMap,
    cfg: &EvalConfig,
) -> Result<RecallReport> {
    cfg.validate()?;
    let (kept, excluded) = split_queries(dataset, cfg.split);
    if kept.is_empty() {
        return Err(Error::Empty("kept queries"));
    }
    let queries: Vec<QueryPoint> = kept
        .par_iter()
        .map(|s| {
            Ok(QueryPoint {
                sample_id: s.sample_id,
                map_id: s.map_id,
                x: s.x,
                y: s.y,
                embedding: params.embed(dataset.cloud(s)?.as_tensor())?,
            })
        })
        .collect::<Result<_>>()?;
    evaluate_queries(
        db,
        label_map,
        &dataset.manifest.grid,
        &queries,
        &excluded,
        cfg,
    )
}

/// Expected Recall@1 of a retriever that picks a uniformly random same-map
/// database entry: per query, the fraction of same-map entries that match.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomBaseline {
    pub per_map: BTreeMap<u32, f64>,
    pub mar: f64,
}

pub fn random_baseline(
    db: &EmbeddingDB,
    label_map: &LabelMap,
    dataset: &Dataset,
    cfg: &EvalConfig,
) -> Result<RandomBaseline> {
    cfg.validate()?;
    let grid = &dataset.manifest.grid;
    let (kept, _) = split_queries(dataset, cfg.split);
    let mut sums: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
    for q in kept {
        let entries = db.map_entries(q.map_id)?;
        let mut hits = 0usize;
        for &i in entries {
            if is_match(label_map, grid, db.entries()[i].label, q.x, q.y, cfg.radius)? {
                hits += 1;
            }
        }
        let slot = sums.entry(q.map_id).or_default();
        slot.0 += hits as f64 / entries.len() as f64;
        slot.1 += 1;
    }
    let per_map: BTreeMap<u32, f64> = sums.iter().map(|(&m, &(s, n))| (m, s / n as f64)).collect();
    let pairs: Vec<(f64, usize)> = sums.values().map(|&(s, n)| (s / n as f64, n)).collect();
    let mar = mean_average_recall(&pairs, cfg.weighting)?;
    Ok(RandomBaseline { per_map, mar })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annindex::DbEntry;
    use crate::geogrid::{build_label_map, CellKey};

    #[test]
    fn top1pct_examples() {
        assert_eq!(top1pct_k(17061), 170);
        assert_eq!(top1pct_k(50), 1);
        assert_eq!(top1pct_k(400), 4);
        assert_eq!(top1pct_k(1), 1);
        assert_eq!(top1pct_k(199), 1);
    }

    #[test]
    fn match_examples() {
        let lm = build_label_map([CellKey {
            kx: 0,
            ky: 0,
            map_id: 0,
        }])
        .unwrap();
        let g = GridConfig::default();
        assert!(is_match(&lm, &g, 0, 10.5, 0.5, 18.0).unwrap());
        assert!(!is_match(&lm, &g, 0, 10.5, 0.5, 2.0).unwrap());
        assert!(is_match(&lm, &g, 0, 0.5, 18.5, 18.0).unwrap());
        assert!(is_match(&lm, &g, 1, 0.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn mar_examples() {
        assert_eq!(
            mean_average_recall(&[(0.4, 10), (0.6, 30)], MarWeighting::Maps).unwrap(),
            0.5
        );
        assert_eq!(
            mean_average_recall(&[(0.7, 3)], MarWeighting::Maps).unwrap(),
            0.7
        );
        let w = mean_average_recall(&[(0.4, 10), (0.6, 30)], MarWeighting::Queries).unwrap();
        assert!((w - 0.55).abs() < 1e-12);
        let eq = [(0.2, 5), (0.9, 5), (0.4, 5)];
        let a = mean_average_recall(&eq, MarWeighting::Maps).unwrap();
        let b = mean_average_recall(&eq, MarWeighting::Queries).unwrap();
        assert!((a - b).abs() < 1e-12);
        assert!(mean_average_recall(&[], MarWeighting::Maps).is_err());
    }

    /// Five entries on a line with h = 1. Embeddings are 1-D so distances can
    /// be read off directly.
    ///
    /// entry  id  map  cell      center   emb
    ///   A    10   0   (0,0)     (0.5,.5) 0.0
    ///   B    11   0   (5,0)     (5.5,.5) 1.0
    ///   C    12   0   (20,0)    (20.5,.5) 2.0
    ///   D    13   0   (40,0)    (40.5,.5) 3.0
    ///   E    14   1   (0,0)     (0.5,.5) 0.0
    ///
    /// q1 (map 0, pos (40,0), emb 2.9): ranks D,C,B,A -> D matches at rank 0.
    /// q2 (map 0, pos (0,0), emb 2.2): ranks C,D,B,A -> C is 20.5 m away,
    ///     D 40.5, B 5.5 (rank 2). R@1 miss, R@2 miss, R@3 hit.
    /// q3 (map 1, pos (30,0), emb 0.0): only E, 29.5 m away -> miss.
    fn fixture() -> (EmbeddingDB, LabelMap, Vec<QueryPoint>) {
        let rows = [
            (10, 0, 0, 0.0),
            (11, 0, 5, 1.0),
            (12, 0, 20, 2.0),
            (13, 0, 40, 3.0),
            (14, 1, 0, 0.0),
        ];
        let cells: Vec<CellKey> = rows
            .iter()
            .map(|&(_, m, kx, _)| CellKey {
                kx,
                ky: 0,
                map_id: m,
            })
            .collect();
        let lm = build_label_map(cells.iter().copied()).unwrap();
        let entries = rows
            .iter()
            .zip(&cells)
            .map(|(&(id, m, kx, _), &c)| DbEntry {
                sample_id: id,
                map_id: m,
                x: kx as f32,
                y: 0.0,
                label: lm.label_of(c).unwrap(),
            })
            .collect();
        let emb = rows.iter().map(|r| r.3 as f32).collect();
        let db = EmbeddingDB::from_parts(entries, emb, 1, Metric::Euclidean, false).unwrap();
        let q = |id, map_id, x: f64, e: f32| QueryPoint {
            sample_id: id,
            map_id,
            x,
            y: 0.0,
            embedding: vec![e],
        };
        let queries = vec![
            q(100, 0, 40.0, 2.9),
            q(101, 0, 0.0, 2.2),
            q(102, 1, 30.0, 0.0),
        ];
        (db, lm, queries)
    }

    #[test]
    fn hand_built_fixture() {
        let (db, lm, queries) = fixture();
        let cfg = EvalConfig {
            k_list: vec![2, 3],
            ..EvalConfig::default()
        };
        let excluded = BTreeMap::from([(0, 1), (1, 0)]);
        let r =
            evaluate_queries(&db, &lm, &GridConfig::default(), &queries, &excluded, &cfg).unwrap();
        let m0 = &r.per_map[&0];
        assert_eq!(m0.recall["recall@1"], 0.5);
        assert_eq!(m0.recall["recall@2"], 0.5);
        assert_eq!(m0.recall["recall@3"], 1.0);
        assert_eq!((m0.kept, m0.excluded), (2, 1));
        assert_eq!(r.per_map[&1].recall["recall@3"], 0.0);
        assert_eq!(r.mar_at_1, 0.25);
        assert_eq!(r.mar["recall@3"], 0.5);
        assert_eq!(r.config.top1pct_k, 1);
        assert_eq!(r.mar_at_1pct, r.mar_at_1);

        let weighted = evaluate_queries(
            &db,
            &lm,
            &GridConfig::default(),
            &queries,
            &excluded,
            &EvalConfig {
                weighting: MarWeighting::Queries,
                ..cfg.clone()
            },
        )
        .unwrap();
        assert!((weighted.mar["recall@3"] - 2.0 / 3.0).abs() < 1e-12);

        // Radius 2 m: only q1 (0.5 m from D's center) still matches.
        let strict = EvalConfig {
            radius: STRICT_MATCH_RADIUS,
            ..cfg
        };
        let s = evaluate_queries(
            &db,
            &lm,
            &GridConfig::default(),
            &queries,
            &excluded,
            &strict,
        )
        .unwrap();
        assert_eq!(s.per_map[&0].recall["recall@3"], 0.5);
        for (a, b) in s.mar.values().zip(r.mar.values()) {
            assert!(a <= b);
        }
    }

    #[test]
    fn json_layout() {
        let (db, lm, queries) = fixture();
        let r = evaluate_queries(
            &db,
            &lm,
            &GridConfig::default(),
            &queries,
            &BTreeMap::new(),
            &EvalConfig::default(),
        )
        .unwrap();
        let v: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert!(v["per_map"]["0"]["recall@1"].is_number());
        assert!(v["per_map"]["0"]["kept"].is_number());
        assert!(v["MAR@1"].is_number() && v["MAR@1pct"].is_number());
        assert_eq!(serde_json::from_value::<RecallReport>(v).unwrap(), r);
    }

    #[test]
    fn whole_map_and_huge_radius_gives_full_recall() {
        let (db, lm, queries) = fixture();
        let cfg = EvalConfig {
            radius: 1e6,
            k_list: vec![4],
            ..EvalConfig::default()
        };
        let r = evaluate_queries(
            &db,
            &lm,
            &GridConfig::default(),
            &queries,
            &BTreeMap::new(),
            &cfg,
        )
        .unwrap();
        assert!(r.per_map.values().all(|m| m.recall["recall@4"] == 1.0));
    }

    #[test]
    fn config_checks() {
        assert!(EvalConfig {
            radius: 0.0,
            ..EvalConfig::default()
        }
        .validate()
        .is_err());
        assert!(EvalConfig {
            k_list: vec![0],
            ..EvalConfig::default()
        }
        .validate()
        .is_err());
        assert_eq!(
            EvalConfig {
                k_list: vec![5, 1],
                ..EvalConfig::default()
            }
            .ks(400),
            vec![1, 4, 5]
        );
        assert_eq!(
            EvalConfig {
                top1pct_override: Some(7),
                ..EvalConfig::default()
            }
            .ks(400),
            vec![1, 7]
        );
    }
}
