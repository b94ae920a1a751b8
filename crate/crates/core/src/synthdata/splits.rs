use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{scenes_by_time, DatasetManifest, Role, SampleRecord, Split};

fn check_percent(k_percent: f64) -> Result<()> {
    if !(k_percent > 0.0 && k_percent < 100.0) {
        return Err(Error::InvalidInput(format!(
            "train percentage must be in (0, 100), got {k_percent}"
        )));
    }
    Ok(())
}

/// Number of leading scenes (of `n`) that go to the first partition.
fn leading_count(n: usize, k_percent: f64) -> usize {
    ((n as f64) * k_percent / 100.0 + 1e-9).floor() as usize
}

/// Tags the first `k_percent` of non-test scenes (by first timestamp, rounding
/// down) as train and the rest as val. Scenes are never split.
pub fn split_train_val(manifest: &mut DatasetManifest, k_percent: f64) -> Result<()> {
    check_percent(k_percent)?;
    let scenes = scenes_by_time(
        manifest
            .samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.split != Some(Split::Test)),
    );
    if scenes.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "train/val split needs at least 2 scenes, found {}",
            scenes.len()
        )));
    }
    let n_train = leading_count(scenes.len(), k_percent);
    if n_train == 0 || n_train == scenes.len() {
        return Err(Error::InvalidInput(format!(
            "{k_percent}% of {} scenes leaves one side of the split empty",
            scenes.len()
        )));
    }
    for (rank, (_, idxs)) in scenes.iter().enumerate() {
        let split = if rank < n_train {
            Split::Train
        } else {
            Split::Val
        };
        for &i in idxs {
            manifest.samples[i].split = Some(split);
        }
    }
    Ok(())
}

/// Training samples form the database; validation and test samples are queries.
pub fn assign_roles(manifest: &mut DatasetManifest) -> Result<()> {
    for s in &mut manifest.samples {
        s.role = Some(match s.split {
            Some(Split::Train) => Role::Database,
            Some(Split::Val | Split::Test) => Role::Query,
            None => {
                return Err(Error::InvalidInput(format!(
                    "sample {} has no split tag",
                    s.sample_id
                )))
            }
        });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MapFilterCounts {
    pub val_total: usize,
    pub val_kept: usize,
    pub test_total: usize,
    pub test_kept: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterReport {
    pub radius: String,
    pub per_map: BTreeMap<u32, MapFilterCounts>,
}

impl FilterReport {
    pub fn kept(&self) -> usize {
        self.per_map
            .values()
            .map(|c| c.val_kept + c.test_kept)
            .sum()
    }

    pub fn removed(&self) -> usize {
        self.per_map
            .values()
            .map(|c| c.val_total + c.test_total - c.val_kept - c.test_kept)
            .sum()
    }
}

/// Bucketed database positions per map, with bucket side equal to the radius,
/// so a radius query only inspects the 3×3 surrounding buckets.
struct RadiusIndex {
    side: f64,
    buckets: HashMap<(u32, i64, i64), Vec<(f64, f64)>>,
}

impl RadiusIndex {
    fn new<'a>(side: f64, points: impl Iterator<Item = &'a SampleRecord>) -> Self {
        let mut buckets: HashMap<(u32, i64, i64), Vec<(f64, f64)>> = HashMap::new();
        for s in points {
            let key = (
                s.map_id,
                (s.x / side).floor() as i64,
                (s.y / side).floor() as i64,
            );
            buckets.entry(key).or_default().push((s.x, s.y));
        }
        Self { side, buckets }
    }

    fn any_within(&self, map_id: u32, x: f64, y: f64, radius: f64) -> bool {
        let bx = (x / self.side).floor() as i64;
        let by = (y / self.side).floor() as i64;
        for dx in -1..=1 {
            for dy in -1..=1 {
                if let Some(pts) = self.buckets.get(&(map_id, bx + dx, by + dy)) {
                    if pts.iter().any(|&(px, py)| (px - x).hypot(py - y) <= radius) {
                        return true;
                    }
                }
            }
        }
        false
    }
}

/// Keeps a query iff a same-map database sample lies within `radius` meters
/// (closed); other queries become [`Role::Excluded`]. Previously excluded
/// samples are re-evaluated, so the operation is idempotent.
pub fn filter_queries(manifest: &mut DatasetManifest, radius: f64) -> Result<FilterReport> {
    if !(radius.is_finite() && radius > 0.0) {
        return Err(Error::InvalidInput(format!(
            "match radius must be positive, got {radius}"
        )));
    }
    let index = RadiusIndex::new(radius, manifest.with_role(Role::Database));
    let mut report = FilterReport {
        radius: format!("{radius}"),
        per_map: manifest
            .map_ids()
            .into_iter()
            .map(|m| (m, MapFilterCounts::default()))
            .collect(),
    };
    for s in &mut manifest.samples {
        if !matches!(s.role, Some(Role::Query | Role::Excluded)) {
            continue;
        }
        let keep = index.any_within(s.map_id, s.x, s.y, radius);
        s.role = Some(if keep { Role::Query } else { Role::Excluded });
        let c = report.per_map.entry(s.map_id).or_default();
        match s.split {
            Some(Split::Test) => {
                c.test_total += 1;
                c.test_kept += keep as usize;
            }
            _ => {
                c.val_total += 1;
                c.val_kept += keep as usize;
            }
        }
    }
    Ok(report)
}

/// Separates `holdout_map` from the rest for out-of-domain evaluation.
///
/// The first manifest holds every sample of the other maps with their tags
/// unchanged. The second holds the held-out map's samples re-split by scene
/// time: the first `k_percent` of its scenes become the database (tagged
/// train) and the remainder become queries (tagged val), then queries are
/// filtered against that database with `radius`.
pub fn holdout_split(
    manifest: &DatasetManifest,
    holdout_map: u32,
    k_percent: f64,
    radius: f64,
) -> Result<(DatasetManifest, DatasetManifest)> {
    if manifest.maps < 2 {
        return Err(Error::InvalidInput(
            "hold-one-map-out needs at least 2 maps".into(),
        ));
    }
    if holdout_map >= manifest.maps {
        return Err(Error::InvalidInput(format!(
            "holdout map {holdout_map} out of range for {} maps",
            manifest.maps
        )));
    }
    check_percent(k_percent)?;
    let (held, kept): (Vec<SampleRecord>, Vec<SampleRecord>) = manifest
        .samples
        .iter()
        .cloned()
        .partition(|s| s.map_id == holdout_map);

    let mut holdout = DatasetManifest {
        grid: manifest.grid,
        maps: manifest.maps,
        samples: held,
        warnings: Vec::new(),
    };
    let scenes = scenes_by_time(holdout.samples.iter().enumerate());
    if scenes.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "holdout map {holdout_map} needs at least 2 scenes, found {}",
            scenes.len()
        )));
    }
    let n_db = leading_count(scenes.len(), k_percent).clamp(1, scenes.len() - 1);
    for (rank, (_, idxs)) in scenes.iter().enumerate() {
        let (split, role) = if rank < n_db {
            (Split::Train, Role::Database)
        } else {
            (Split::Val, Role::Query)
        };
        for &i in idxs {
            holdout.samples[i].split = Some(split);
            holdout.samples[i].role = Some(role);
        }
    }
    filter_queries(&mut holdout, radius)?;

    let training = DatasetManifest {
        grid: manifest.grid,
        maps: manifest.maps,
        samples: kept,
        warnings: manifest.warnings.clone(),
    };
    Ok((training, holdout))
}

/// Per-map sample and class counts in the layout of a train/val/test
/// quantities table: `N` before filtering, `N'` after, and distinct cells in
/// the database and among kept queries.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MapStats {
    pub map_id: u32,
    pub n_train: usize,
    pub n_val: usize,
    pub n_val_kept: usize,
    pub n_test: usize,
    pub n_test_kept: usize,
    pub c_db: usize,
    pub c_q_val: usize,
    pub c_q_test: usize,
}

/// Distinct `(kx, ky)` cells seen in the database, val queries and test queries.
type CellSets = [BTreeSet<(i64, i64)>; 3];

pub fn table_stats(manifest: &DatasetManifest) -> Result<Vec<MapStats>> {
    let mut rows: BTreeMap<u32, (MapStats, CellSets)> = (0..manifest.maps)
        .map(|m| {
            (
                m,
                (
                    MapStats {
                        map_id: m,
                        ..MapStats::default()
                    },
                    Default::default(),
                ),
            )
        })
        .collect();
    for s in &manifest.samples {
        let cell = s.cell(&manifest.grid)?;
        let (row, cells) = rows.get_mut(&s.map_id).ok_or_else(|| {
            Error::InvalidInput(format!("sample {} map out of range", s.sample_id))
        })?;
        let kept = s.role == Some(Role::Query);
        let key = (cell.kx, cell.ky);
        match s.split {
            Some(Split::Train) => {
                row.n_train += 1;
                cells[0].insert(key);
            }
            Some(Split::Val) => {
                row.n_val += 1;
                if kept {
                    row.n_val_kept += 1;
                    cells[1].insert(key);
                }
            }
            Some(Split::Test) => {
                row.n_test += 1;
                if kept {
                    row.n_test_kept += 1;
                    cells[2].insert(key);
                }
            }
            None => {}
        }
    }
    Ok(rows
        .into_values()
        .map(|(mut row, cells)| {
            row.c_db = cells[0].len();
            row.c_q_val = cells[1].len();
            row.c_q_test = cells[2].len();
            row
        })
        .collect())
}
