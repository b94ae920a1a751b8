//! Embedding database and nearest-neighbor retrieval restricted to one map.
//!
//! [`EmbeddingDB::query`] is an exact linear scan ordered by
//! `(distance, sample_id)`. [`HnswIndex`] is an approximate alternative that
//! builds one navigable small-world graph per map.

mod hnsw;
mod snapshot;

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geogrid::LabelMap;
use crate::model::ModelParams;
use crate::synthdata::{Dataset, Role};

pub use hnsw::{HnswConfig, HnswIndex};
pub use snapshot::DB_MAGIC;

/// Unit-norm tolerance for databases built from a normalizing model.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Euclidean,
    /// `1 − cos(a, b)`.
    Cosine,
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(Self::Euclidean),
            "cosine" => Ok(Self::Cosine),
            other => Err(Error::InvalidInput(format!("unknown metric {other:?}"))),
        }
    }
}

fn norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt()
}

/// Distance under `metric`, accumulated in f64.
pub fn distance(metric: Metric, a: &[f32], b: &[f32]) -> f64 {
    match metric {
        Metric::Euclidean => a
            .iter()
            .zip(b)
            .map(|(&x, &y)| {
                let d = x as f64 - y as f64;
                d * d
            })
            .sum::<f64>()
            .sqrt(),
        Metric::Cosine => {
            let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
            1.0 - dot / (norm(a) * norm(b))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DbEntry {
    pub sample_id: u64,
    pub map_id: u32,
    pub x: f32,
    pub y: f32,
    pub label: u32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub sample_id: u64,
    /// Position in [`EmbeddingDB::entries`].
    pub index: usize,
    pub distance: f64,
}

fn rank(a: &Neighbor, b: &Neighbor) -> std::cmp::Ordering {
    a.distance
        .total_cmp(&b.distance)
        .then(a.sample_id.cmp(&b.sample_id))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDB {
    metric: Metric,
    normalized: bool,
    dim: usize,
    entries: Vec<DbEntry>,
    embeddings: Vec<f32>,
    by_map: BTreeMap<u32, Vec<usize>>,
}

impl EmbeddingDB {
    /// `embeddings` holds `entries.len()` rows of length `dim`, row-major.
    pub fn from_parts(
        entries: Vec<DbEntry>,
        embeddings: Vec<f32>,
        dim: usize,
        metric: Metric,
        normalized: bool,
    ) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Empty("embedding database"));
        }
        if dim == 0 || embeddings.len() != entries.len() * dim {
            return Err(Error::ShapeMismatch {
                op: "embedding database",
                detail: format!(
                    "{} entries of dim {dim} vs {} values",
                    entries.len(),
                    embeddings.len()
                ),
            });
        }
        if embeddings.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("database embedding".into()));
        }
        let mut by_map: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        let mut ids = std::collections::HashSet::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            if !ids.insert(e.sample_id) {
                return Err(Error::InvalidInput(format!(
                    "duplicate sample id {} in database",
                    e.sample_id
                )));
            }
            by_map.entry(e.map_id).or_default().push(i);
        }
        let db = Self {
            metric,
            normalized,
            dim,
            entries,
            embeddings,
            by_map,
        };
        for i in 0..db.len() {
            let n = norm(db.embedding(i));
            if normalized && (n - 1.0).abs() > UNIT_NORM_TOLERANCE {
                return Err(Error::InvalidInput(format!(
                    "entry {i} has norm {n}, expected 1"
                )));
            }
            if metric == Metric::Cosine && n <= crate::numcore::NORM_EPSILON {
                return Err(Error::NearZeroNorm(n));
            }
        }
        Ok(db)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn normalized(&self) -> bool {
        self.normalized
    }

    pub fn entries(&self) -> &[DbEntry] {
        &self.entries
    }

    pub fn embedding(&self, i: usize) -> &[f32] {
        &self.embeddings[i * self.dim..(i + 1) * self.dim]
    }

    pub fn map_ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.by_map.keys().copied()
    }

    /// Entry indices on `map_id`, in database order.
    pub fn map_entries(&self, map_id: u32) -> Result<&[usize]> {
        self.by_map
            .get(&map_id)
            .map(Vec::as_slice)
            .ok_or(Error::NoEntriesForMap(map_id))
    }

    /// Same database with a different metric.
    pub fn with_metric(&self, metric: Metric) -> Result<Self> {
        Self::from_parts(
            self.entries.clone(),
            self.embeddings.clone(),
            self.dim,
            metric,
            self.normalized,
        )
    }

    fn check_query(&self, embedding: &[f32], k: usize) -> Result<()> {
        if k == 0 {
            return Err(Error::InvalidInput("K must be at least 1".into()));
        }
        if embedding.len() != self.dim {
            return Err(Error::ShapeMismatch {
                op: "query",
                detail: format!("query dim {} vs database dim {}", embedding.len(), self.dim),
            });
        }
        if self.metric == Metric::Cosine && norm(embedding) <= crate::numcore::NORM_EPSILON {
            return Err(Error::NearZeroNorm(norm(embedding)));
        }
        Ok(())
    }

    fn neighbor(&self, i: usize, embedding: &[f32]) -> Neighbor {
        Neighbor {
            sample_id: self.entries[i].sample_id,
            index: i,
            distance: distance(self.metric, embedding, self.embedding(i)),
        }
    }

    /// Exact `k` nearest entries on `map_id`, ascending by distance then
    /// sample id.
    pub fn query(&self, embedding: &[f32], k: usize, map_id: u32) -> Result<Vec<Neighbor>> {
        self.check_query(embedding, k)?;
        let mut all: Vec<Neighbor> = self
            .map_entries(map_id)?
            .iter()
            .map(|&i| self.neighbor(i, embedding))
            .collect();
        if k < all.len() {
            all.select_nth_unstable_by(k - 1, rank);
            all.truncate(k);
        }
        all.sort_unstable_by(rank);
        Ok(all)
    }
}

/// Embeds every database sample with its full cloud.
pub fn build_db(
    params: &ModelParams,
    dataset: &Dataset,
    label_map: &LabelMap,
    metric: Metric,
) -> Result<EmbeddingDB> {
    let grid = &dataset.manifest.grid;
    let samples: Vec<_> = dataset.manifest.with_role(Role::Database).collect();
    if samples.is_empty() {
        return Err(Error::Empty("database samples"));
    }
    let rows: Vec<(DbEntry, Vec<f32>)> = samples
        .par_iter()
        .map(|s| {
            let label = label_map.label_of(s.cell(grid)?)?;
            let emb = params.embed(dataset.cloud(s)?.as_tensor())?;
            let entry = DbEntry {
                sample_id: s.sample_id,
                map_id: s.map_id,
                x: s.x as f32,
                y: s.y as f32,
                label,
            };
            Ok((entry, emb))
        })
        .collect::<Result<_>>()?;
    let dim = params.config.embedding_size;
    let mut entries = Vec::with_capacity(rows.len());
    let mut embeddings = Vec::with_capacity(rows.len() * dim);
    for (e, v) in rows {
        entries.push(e);
        embeddings.extend(v);
    }
    EmbeddingDB::from_parts(
        entries,
        embeddings,
        dim,
        metric,
        params.config.normalize_embedding,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_db(
        n: usize,
        dim: usize,
        maps: u32,
        seed: u64,
        normalized: bool,
    ) -> EmbeddingDB {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries = (0..n)
            .map(|i| DbEntry {
                sample_id: (n - i) as u64 * 3,
                map_id: rng.random_range(0..maps),
                x: 0.0,
                y: 0.0,
                label: i as u32,
            })
            .collect();
        let mut emb: Vec<f32> = (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        if normalized {
            for row in emb.chunks_mut(dim) {
                let nrm = norm(row);
                row.iter_mut().for_each(|v| *v = (*v as f64 / nrm) as f32);
            }
        }
        EmbeddingDB::from_parts(entries, emb, dim, Metric::Euclidean, normalized).unwrap()
    }

    #[test]
    fn self_query_and_map_filter() {
        let db = random_db(200, 8, 3, 1, false);
        for i in [0, 17, 199] {
            let e = db.entries()[i];
            let r = db.query(db.embedding(i), 1, e.map_id).unwrap();
            assert_eq!(r[0].sample_id, e.sample_id);
            assert_eq!(r[0].distance, 0.0);
            let r = db.query(db.embedding(i), 50, e.map_id).unwrap();
            assert!(r.iter().all(|n| db.entries()[n.index].map_id == e.map_id));
            assert!(r.windows(2).all(|w| w[0].distance <= w[1].distance));
        }
        assert!(matches!(
            db.query(db.embedding(0), 1, 9),
            Err(Error::NoEntriesForMap(9))
        ));
        assert!(db.query(db.embedding(0), 0, 0).is_err());
        assert!(db.query(&[0.0; 3], 1, 0).is_err());
    }

    #[test]
    fn ties_break_by_sample_id() {
        let entries: Vec<DbEntry> = [9u64, 4, 7, 1]
            .iter()
            .map(|&id| DbEntry {
                sample_id: id,
                map_id: 0,
                x: 0.0,
                y: 0.0,
                label: 0,
            })
            .collect();
        let emb = vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0];
        let db = EmbeddingDB::from_parts(entries, emb, 2, Metric::Euclidean, false).unwrap();
        let ids: Vec<u64> = db
            .query(&[1.0, 0.0], 4, 0)
            .unwrap()
            .iter()
            .map(|n| n.sample_id)
            .collect();
        assert_eq!(ids, vec![1, 4, 9, 7]);
        let ids: Vec<u64> = db
            .query(&[1.0, 0.0], 2, 0)
            .unwrap()
            .iter()
            .map(|n| n.sample_id)
            .collect();
        assert_eq!(ids, vec![1, 4]);
    }

    #[test]
    fn cosine_and_euclidean_rank_alike_on_unit_vectors() {
        let db = random_db(300, 16, 2, 5, true);
        let cos = db.with_metric(Metric::Cosine).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let mut q: Vec<f32> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
            let n = norm(&q);
            q.iter_mut().for_each(|v| *v = (*v as f64 / n) as f32);
            let a: Vec<u64> = db
                .query(&q, 10, 1)
                .unwrap()
                .iter()
                .map(|r| r.sample_id)
                .collect();
            let b: Vec<u64> = cos
                .query(&q, 10, 1)
                .unwrap()
                .iter()
                .map(|r| r.sample_id)
                .collect();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn construction_checks() {
        let e = DbEntry {
            sample_id: 1,
            map_id: 0,
            x: 0.0,
            y: 0.0,
            label: 0,
        };
        assert!(EmbeddingDB::from_parts(vec![], vec![], 2, Metric::Euclidean, false).is_err());
        assert!(EmbeddingDB::from_parts(vec![e], vec![1.0], 2, Metric::Euclidean, false).is_err());
        assert!(
            EmbeddingDB::from_parts(vec![e, e], vec![1.0; 4], 2, Metric::Euclidean, false).is_err()
        );
        assert!(
            EmbeddingDB::from_parts(vec![e], vec![3.0, 4.0], 2, Metric::Euclidean, true).is_err()
        );
        assert!(
            EmbeddingDB::from_parts(vec![e], vec![0.0, 0.0], 2, Metric::Cosine, false).is_err()
        );
        assert!(EmbeddingDB::from_parts(vec![e], vec![0.6, 0.8], 2, Metric::Cosine, true).is_ok());
    }
}
