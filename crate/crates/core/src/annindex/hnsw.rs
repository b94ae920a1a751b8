//! Hierarchical navigable small-world graphs, one per map.
//!
//! Construction inserts entries in database order with levels drawn from a
//! seeded stream, so the same database and config always give the same graph.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BinaryHeap, HashSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding::{rng_for, stream};

use super::{distance, rank, EmbeddingDB, Neighbor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HnswConfig {
    /// Links per node on upper layers; layer 0 keeps twice as many.
    pub m: usize,
    pub ef_construction: usize,
    pub ef_search: usize,
    pub seed: u64,
}

impl Default for HnswConfig {
    fn default() -> Self {
        Self {
            m: 16,
            ef_construction: 128,
            ef_search: 96,
            seed: 0,
        }
    }
}

/// Search candidate ordered by `(distance, sample_id)`.
#[derive(Debug, Clone, Copy)]
struct Cand {
    dist: f64,
    sample_id: u64,
    node: u32,
}

impl PartialEq for Cand {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Cand {}
impl PartialOrd for Cand {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Cand {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist
            .total_cmp(&other.dist)
            .then(self.sample_id.cmp(&other.sample_id))
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Graph {
    /// Database index of each node.
    items: Vec<usize>,
    /// `links[node][layer]`: neighbor node ids.
    links: Vec<Vec<Vec<u32>>>,
    entry: u32,
    top: usize,
}

struct Ctx<'a> {
    db: &'a EmbeddingDB,
    graph: &'a Graph,
}

impl Ctx<'_> {
    fn cand(&self, query: &[f32], node: u32) -> Cand {
        let i = self.graph.items[node as usize];
        Cand {
            dist: distance(self.db.metric, query, self.db.embedding(i)),
            sample_id: self.db.entries[i].sample_id,
            node,
        }
    }

    /// Best-first search on one layer; returns up to `ef` candidates, nearest
    /// first.
    fn search_layer(&self, query: &[f32], entry: &[Cand], ef: usize, layer: usize) -> Vec<Cand> {
        let mut visited: HashSet<u32> = entry.iter().map(|c| c.node).collect();
        let mut frontier: BinaryHeap<Reverse<Cand>> = entry.iter().copied().map(Reverse).collect();
        let mut best: BinaryHeap<Cand> = entry.iter().copied().collect();
        while best.len() > ef {
            best.pop();
        }
        while let Some(Reverse(c)) = frontier.pop() {
            if best.len() >= ef && c > *best.peek().expect("non-empty") {
                break;
            }
            for &nb in &self.graph.links[c.node as usize][layer] {
                if !visited.insert(nb) {
                    continue;
                }
                let cand = self.cand(query, nb);
                if best.len() < ef || cand < *best.peek().expect("non-empty") {
                    frontier.push(Reverse(cand));
                    best.push(cand);
                    if best.len() > ef {
                        best.pop();
                    }
                }
            }
        }
        best.into_sorted_vec()
    }

    fn descend(&self, query: &[f32], down_to: usize) -> Vec<Cand> {
        let mut ep = vec![self.cand(query, self.graph.entry)];
        for layer in (down_to + 1..=self.graph.top).rev() {
            ep = self.search_layer(query, &ep, 1, layer);
        }
        ep
    }
}

fn build_graph(db: &EmbeddingDB, items: &[usize], cfg: &HnswConfig, map_id: u32) -> Graph {
    let mut rng = rng_for(&[cfg.seed, stream::HNSW, map_id as u64]);
    let level_mult = 1.0 / (cfg.m as f64).ln();
    let mut graph = Graph {
        items: items.to_vec(),
        links: Vec::with_capacity(items.len()),
        entry: 0,
        top: 0,
    };
    for node in 0..items.len() as u32 {
        let u: f64 = rng.random();
        let level = (-(1.0 - u).ln() * level_mult).floor() as usize;
        graph.links.push(vec![Vec::new(); level + 1]);
        if node == 0 {
            graph.top = level;
            continue;
        }
        let query = db.embedding(items[node as usize]).to_vec();
        let mut new_links: Vec<(usize, Vec<u32>)> = Vec::new();
        {
            let ctx = Ctx { db, graph: &graph };
            let mut ep = ctx.descend(&query, level.min(graph.top));
            for layer in (0..=level.min(graph.top)).rev() {
                let found = ctx.search_layer(&query, &ep, cfg.ef_construction, layer);
                new_links.push((layer, found.iter().take(cfg.m).map(|c| c.node).collect()));
                ep = found;
            }
        }
        for (layer, nbs) in new_links {
            let cap = if layer == 0 { 2 * cfg.m } else { cfg.m };
            for &nb in &nbs {
                graph.links[nb as usize][layer].push(node);
                if graph.links[nb as usize][layer].len() > cap {
                    let base = db.embedding(items[nb as usize]).to_vec();
                    let ctx = Ctx { db, graph: &graph };
                    let mut cands: Vec<Cand> = graph.links[nb as usize][layer]
                        .iter()
                        .map(|&o| ctx.cand(&base, o))
                        .collect();
                    cands.sort_unstable();
                    cands.truncate(cap);
                    graph.links[nb as usize][layer] = cands.into_iter().map(|c| c.node).collect();
                }
            }
            graph.links[node as usize][layer] = nbs;
        }
        if level > graph.top {
            graph.top = level;
            graph.entry = node;
        }
    }
    graph
}

/// Approximate search structure over an [`EmbeddingDB`].
#[derive(Debug, Clone, PartialEq)]
pub struct HnswIndex {
    config: HnswConfig,
    graphs: BTreeMap<u32, Graph>,
}

impl HnswIndex {
    pub fn build(db: &EmbeddingDB, config: HnswConfig) -> Result<Self> {
        if config.m < 2 || config.ef_construction == 0 || config.ef_search == 0 {
            return Err(Error::InvalidInput(
                "HNSW needs m >= 2 and positive ef values".into(),
            ));
        }
        let graphs = db
            .by_map
            .iter()
            .map(|(&map_id, items)| (map_id, build_graph(db, items, &config, map_id)))
            .collect();
        Ok(Self { config, graphs })
    }

    pub fn config(&self) -> &HnswConfig {
        &self.config
    }

    /// Approximate `k` nearest entries on `map_id`. When `k` covers the whole
    /// map the answer is exact.
    pub fn query(
        &self,
        db: &EmbeddingDB,
        embedding: &[f32],
        k: usize,
        map_id: u32,
    ) -> Result<Vec<Neighbor>> {
        db.check_query(embedding, k)?;
        let graph = self
            .graphs
            .get(&map_id)
            .ok_or(Error::NoEntriesForMap(map_id))?;
        if k >= graph.items.len() {
            return db.query(embedding, k, map_id);
        }
        let ctx = Ctx { db, graph };
        let ep = ctx.descend(embedding, 0);
        let found = ctx.search_layer(embedding, &ep, self.config.ef_search.max(k), 0);
        let mut out: Vec<Neighbor> = found
            .into_iter()
            .take(k)
            .map(|c| Neighbor {
                sample_id: c.sample_id,
                index: graph.items[c.node as usize],
                distance: c.dist,
            })
            .collect();
        out.sort_unstable_by(rank);
        Ok(out)
    }
}
