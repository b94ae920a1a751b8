//! Deterministic multi-map synthetic LiDAR datasets and the split logic that
//! turns them into a database and a query set.
//!
//! Each map is a street lattice surrounded by hashed landmark structures.
//! Scenes are random drives over the lattice, so different scenes revisit the
//! same places and see the same landmarks from slightly different positions.

mod container;
mod splits;
mod world;

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geogrid::{discretize, CellKey, GridConfig, Pose};
use crate::numcore::Tensor2;
use crate::seeding::{rng_for, stream};

pub use container::{CloudContainer, PointCloud, PCC_MAGIC};
pub use splits::{
    assign_roles, filter_queries, holdout_split, split_train_val, table_stats, FilterReport,
    MapFilterCounts, MapStats,
};

use world::World;

/// Default fraction (percent) of scenes, by time order, used for training.
pub const DEFAULT_TRAIN_PERCENT: f64 = 90.0;

/// Default query-to-database match radius in meters.
pub const DEFAULT_MATCH_RADIUS: f64 = 18.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Database,
    Query,
    Excluded,
}

/// One scan's metadata as stored in the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample_id: u64,
    pub map_id: u32,
    pub x: f64,
    pub y: f64,
    pub scene_id: u32,
    /// Microseconds.
    pub timestamp: u64,
    pub split: Option<Split>,
    pub role: Option<Role>,
    pub cloud_offset: u64,
    pub cloud_len: u32,
}

impl SampleRecord {
    pub fn pose(&self) -> Pose {
        Pose::new(self.x, self.y, self.map_id)
    }

    pub fn cell(&self, grid: &GridConfig) -> Result<CellKey> {
        discretize(self.pose(), grid)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub grid: GridConfig,
    pub maps: u32,
    pub samples: Vec<SampleRecord>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl DatasetManifest {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(text)?;
        m.grid.validate()?;
        Ok(m)
    }

    pub fn with_role(&self, role: Role) -> impl Iterator<Item = &SampleRecord> {
        self.samples.iter().filter(move |s| s.role == Some(role))
    }

    pub fn map_ids(&self) -> BTreeSet<u32> {
        self.samples.iter().map(|s| s.map_id).collect()
    }

    /// Checks that every sample carries a split and a role, that roles agree
    /// with splits and that sample ids are unique.
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        let mut ids = BTreeSet::new();
        for s in &self.samples {
            if !ids.insert(s.sample_id) {
                return Err(Error::InvalidInput(format!(
                    "duplicate sample id {}",
                    s.sample_id
                )));
            }
            if s.map_id >= self.maps {
                return Err(Error::InvalidInput(format!(
                    "sample {} has map {} but the dataset has {} maps",
                    s.sample_id, s.map_id, self.maps
                )));
            }
            match (s.split, s.role) {
                (Some(Split::Train), Some(Role::Database)) => {}
                (Some(Split::Val | Split::Test), Some(Role::Query | Role::Excluded)) => {}
                (split, role) => {
                    return Err(Error::InvalidInput(format!(
                        "sample {} has inconsistent tags split={split:?} role={role:?}",
                        s.sample_id
                    )))
                }
            }
        }
        Ok(())
    }
}

/// A manifest together with the clouds it references.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub clouds: CloudContainer,
}

impl Dataset {
    pub fn cloud(&self, sample: &SampleRecord) -> Result<&PointCloud> {
        let c = self.clouds.get(sample.cloud_offset)?;
        if c.len() != sample.cloud_len as usize {
            return Err(Error::format(
                "manifest",
                format!(
                    "sample {} expects {} points, container holds {}",
                    sample.sample_id,
                    sample.cloud_len,
                    c.len()
                ),
            ));
        }
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub maps: u32,
    pub scenes_per_map: u32,
    /// Extra scenes per map recorded after all train/val scenes and tagged test.
    pub test_scenes_per_map: u32,
    pub samples_per_scene: u32,
    /// Arc length between consecutive samples of a scene.
    pub step_m: f64,
    /// Standard deviation of the per-step lateral drift of the trajectory.
    pub curvature_noise_m: f64,
    pub landmarks_per_cell: u32,
    pub landmark_cell_m: f64,
    pub points_per_scan: u32,
    pub sensor_range_m: f64,
    /// Standard deviation of the sensor origin offset from the recorded pose.
    pub jitter_sigma_m: f64,
    pub point_noise_m: f64,
    pub block_size_m: f64,
    pub blocks_per_side: u32,
    /// Map origins are drawn uniformly from `±origin_spread_m`.
    pub origin_spread_m: f64,
    pub grid: GridConfig,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            maps: 4,
            scenes_per_map: 10,
            test_scenes_per_map: 0,
            samples_per_scene: 55,
            step_m: 3.0,
            curvature_noise_m: 0.3,
            landmarks_per_cell: 6,
            landmark_cell_m: 5.0,
            points_per_scan: 512,
            sensor_range_m: 30.0,
            jitter_sigma_m: 0.3,
            point_noise_m: 0.05,
            block_size_m: 50.0,
            blocks_per_side: 2,
            origin_spread_m: 300.0,
            grid: GridConfig {
                h: 5.0,
                mask_radius: 1,
            },
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        let counts = [
            ("maps", self.maps),
            ("scenes_per_map", self.scenes_per_map),
            ("samples_per_scene", self.samples_per_scene),
            ("landmarks_per_cell", self.landmarks_per_cell),
            ("points_per_scan", self.points_per_scan),
            ("blocks_per_side", self.blocks_per_side),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::InvalidInput(format!("{name} must be positive")));
            }
        }
        let positive = [
            ("step_m", self.step_m),
            ("landmark_cell_m", self.landmark_cell_m),
            ("sensor_range_m", self.sensor_range_m),
            ("block_size_m", self.block_size_m),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidInput(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        let non_negative = [
            ("curvature_noise_m", self.curvature_noise_m),
            ("jitter_sigma_m", self.jitter_sigma_m),
            ("point_noise_m", self.point_noise_m),
            ("origin_spread_m", self.origin_spread_m),
        ];
        for (name, v) in non_negative {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidInput(format!(
                    "{name} must be non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

const DIRECTIONS: [(i64, i64); 4] = [(1, 0), (0, 1), (-1, 0), (0, -1)];
const LATERAL_LIMIT_M: f64 = 1.5;
const SCENE_SPACING_US: u64 = 3_600_000_000;
const SAMPLE_SPACING_US: u64 = 500_000;

/// Drives one scene over the street lattice and returns sample positions.
fn drive(world: &World, cfg: &SynthConfig, scene_key: u64) -> Vec<(f64, f64)> {
    let mut rng = rng_for(&[cfg.seed, stream::TRAJECTORY, scene_key]);
    let n = world.blocks as i64;
    let mut node = (rng.random_range(0..=n), rng.random_range(0..=n));
    let valid = |node: (i64, i64), d: (i64, i64)| world.node_in_bounds(node.0 + d.0, node.1 + d.1);
    let options: Vec<_> = DIRECTIONS
        .iter()
        .copied()
        .filter(|&d| valid(node, d))
        .collect();
    let mut dir = options[rng.random_range(0..options.len())];
    let mut along = rng.random_range(0.0..cfg.step_m);
    let drift = Normal::new(0.0, cfg.curvature_noise_m.max(1e-12)).expect("valid sigma");
    let mut lateral = 0.0f64;

    let mut out = Vec::with_capacity(cfg.samples_per_scene as usize);
    for _ in 0..cfg.samples_per_scene {
        while along >= world.block {
            along -= world.block;
            node = (node.0 + dir.0, node.1 + dir.1);
            let back = (-dir.0, -dir.1);
            let forward: Vec<_> = DIRECTIONS
                .iter()
                .copied()
                .filter(|&d| d != back && valid(node, d))
                .collect();
            dir = if forward.is_empty() {
                back
            } else {
                forward[rng.random_range(0..forward.len())]
            };
        }
        let (nx, ny) = world.node(node.0, node.1);
        let normal = (-dir.1 as f64, dir.0 as f64);
        let x = nx + dir.0 as f64 * along + normal.0 * lateral;
        let y = ny + dir.1 as f64 * along + normal.1 * lateral;
        out.push((x, y));

        along += cfg.step_m;
        if cfg.curvature_noise_m > 0.0 {
            lateral =
                (0.8 * lateral + drift.sample(&mut rng)).clamp(-LATERAL_LIMIT_M, LATERAL_LIMIT_M);
        }
    }
    out
}

/// Simulates one scan at `(x, y)`: landmarks in range, seen from a jittered
/// sensor origin, in a translation-only local frame.
fn scan(world: &World, cfg: &SynthConfig, sample_id: u64, x: f64, y: f64) -> Result<PointCloud> {
    let mut rng = rng_for(&[cfg.seed, stream::SCAN, sample_id]);
    let jitter = Normal::new(0.0, cfg.jitter_sigma_m.max(1e-12)).expect("valid sigma");
    let noise = Normal::new(0.0, cfg.point_noise_m.max(1e-12)).expect("valid sigma");
    let (ox, oy) = if cfg.jitter_sigma_m > 0.0 {
        (x + jitter.sample(&mut rng), y + jitter.sample(&mut rng))
    } else {
        (x, y)
    };
    let landmarks = world.landmarks_near(x, y, cfg.sensor_range_m);
    if landmarks.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no landmarks within {} m of sample {sample_id}",
            cfg.sensor_range_m
        )));
    }
    let keep = (cfg.points_per_scan as usize).min(landmarks.len());
    let mut picked = index::sample(&mut rng, landmarks.len(), keep).into_vec();
    picked.sort_unstable();
    let mut data = Vec::with_capacity(keep * 3);
    for i in picked {
        let [px, py, pz] = landmarks[i];
        let mut jitter_point = |v: f64| {
            if cfg.point_noise_m > 0.0 {
                v + noise.sample(&mut rng)
            } else {
                v
            }
        };
        data.push(jitter_point(px - ox) as f32);
        data.push(jitter_point(py - oy) as f32);
        data.push(jitter_point(pz) as f32);
    }
    PointCloud::new(Tensor2::new(keep, 3, data)?)
}

/// Generates the full dataset. Splits and roles are left unassigned except
/// for test scenes, which are tagged [`Split::Test`].
pub fn generate(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let worlds: Vec<World> = (0..cfg.maps).map(|m| World::new(cfg, m)).collect();
    let mut clouds = CloudContainer::new();
    let mut samples = Vec::new();
    let mut scene_cells: HashMap<CellKey, BTreeSet<u32>> = HashMap::new();

    let scenes_total = cfg.scenes_per_map + cfg.test_scenes_per_map;
    // Scene j of map m gets global index j·M + m so maps interleave in time.
    for j in 0..scenes_total {
        for m in 0..cfg.maps {
            let scene_id = j * cfg.maps + m;
            let start = scene_id as u64 * SCENE_SPACING_US;
            let split = (j >= cfg.scenes_per_map).then_some(Split::Test);
            let world = &worlds[m as usize];
            for (i, (x, y)) in drive(world, cfg, scene_id as u64).into_iter().enumerate() {
                let sample_id = samples.len() as u64;
                let cloud = scan(world, cfg, sample_id, x, y)?;
                let cloud_len = cloud.len() as u32;
                let cloud_offset = clouds.push(cloud);
                let rec = SampleRecord {
                    sample_id,
                    map_id: m,
                    x,
                    y,
                    scene_id,
                    timestamp: start + i as u64 * SAMPLE_SPACING_US,
                    split,
                    role: None,
                    cloud_offset,
                    cloud_len,
                };
                scene_cells
                    .entry(rec.cell(&cfg.grid)?)
                    .or_default()
                    .insert(scene_id);
                samples.push(rec);
            }
        }
    }

    let mut warnings = Vec::new();
    if !scene_cells.values().any(|scenes| scenes.len() > 1) {
        warnings.push(
            "no grid cell is visited by more than one scene; queries will have no matches"
                .to_string(),
        );
        log::warn!("{}", warnings[0]);
    }

    Ok(Dataset {
        manifest: DatasetManifest {
            grid: cfg.grid,
            maps: cfg.maps,
            samples,
            warnings,
        },
        clouds,
    })
}

/// Runs generation followed by the standard split pipeline: time-ordered
/// train/val split, role assignment and query filtering.
pub fn generate_split(
    cfg: &SynthConfig,
    train_percent: f64,
    radius: f64,
) -> Result<(Dataset, FilterReport)> {
    let mut ds = generate(cfg)?;
    split_train_val(&mut ds.manifest, train_percent)?;
    assign_roles(&mut ds.manifest)?;
    let report = filter_queries(&mut ds.manifest, radius)?;
    Ok((ds, report))
}

/// Keeps `max(1, round(N / k))` points chosen uniformly without replacement,
/// in their original order. `k = 1` returns the cloud unchanged.
pub fn decimate<R: Rng + ?Sized>(cloud: &PointCloud, k: u32, rng: &mut R) -> Result<PointCloud> {
    if k < 1 {
        return Err(Error::InvalidInput(
            "decimation factor must be at least 1".into(),
        ));
    }
    if k == 1 {
        return Ok(cloud.clone());
    }
    let n = cloud.len();
    let keep = ((n as f64 / k as f64).round() as usize).clamp(1, n);
    let mut picked = index::sample(rng, n, keep).into_vec();
    picked.sort_unstable();
    let src = cloud.as_tensor();
    let mut data = Vec::with_capacity(keep * 3);
    for i in picked {
        data.extend_from_slice(src.row(i));
    }
    PointCloud::new(Tensor2::new(keep, 3, data)?)
}

/// Groups sample indices by scene, ordered by each scene's first timestamp.
pub(crate) fn scenes_by_time<'a, I>(samples: I) -> Vec<(u32, Vec<usize>)>
where
    I: IntoIterator<Item = (usize, &'a SampleRecord)>,
{
    let mut scenes: BTreeMap<u32, (u64, Vec<usize>)> = BTreeMap::new();
    for (idx, s) in samples {
        let entry = scenes.entry(s.scene_id).or_insert((u64::MAX, Vec::new()));
        entry.0 = entry.0.min(s.timestamp);
        entry.1.push(idx);
    }
    let mut ordered: Vec<(u64, u32, Vec<usize>)> = scenes
        .into_iter()
        .map(|(id, (first, idxs))| (first, id, idxs))
        .collect();
    ordered.sort_by_key(|&(first, id, _)| (first, id));
    ordered
        .into_iter()
        .map(|(_, id, idxs)| (id, idxs))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> SynthConfig {
        SynthConfig {
            maps: 2,
            scenes_per_map: 4,
            samples_per_scene: 12,
            points_per_scan: 64,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a.manifest.to_json().unwrap(), b.manifest.to_json().unwrap());
        assert_eq!(a.clouds.to_bytes(), b.clouds.to_bytes());
        let c = generate(&SynthConfig { seed: 8, ..small() }).unwrap();
        assert_ne!(a.clouds.to_bytes(), c.clouds.to_bytes());
    }

    #[test]
    fn map_ids_and_scene_structure() {
        let cfg = SynthConfig { maps: 4, ..small() };
        let ds = generate(&cfg).unwrap();
        assert_eq!(ds.manifest.map_ids(), (0..4).collect());
        assert_eq!(ds.manifest.samples.len(), 4 * 4 * 12);
        let mut last: HashMap<u32, u64> = HashMap::new();
        for s in &ds.manifest.samples {
            if let Some(&prev) = last.get(&s.scene_id) {
                assert!(s.timestamp >= prev);
            }
            last.insert(s.scene_id, s.timestamp);
            assert_eq!(ds.cloud(s).unwrap().len(), 64);
            assert!(s.split.is_none() && s.role.is_none());
        }
        let ids: BTreeSet<u64> = ds.manifest.samples.iter().map(|s| s.sample_id).collect();
        assert_eq!(ids.len(), ds.manifest.samples.len());
    }

    #[test]
    fn test_scenes_come_last_in_time() {
        let cfg = SynthConfig {
            test_scenes_per_map: 1,
            ..small()
        };
        let ds = generate(&cfg).unwrap();
        let last_trainval = ds
            .manifest
            .samples
            .iter()
            .filter(|s| s.split.is_none())
            .map(|s| s.timestamp)
            .max()
            .unwrap();
        for s in ds
            .manifest
            .samples
            .iter()
            .filter(|s| s.split == Some(Split::Test))
        {
            assert!(s.timestamp > last_trainval);
        }
    }

    #[test]
    fn revisits_share_landmarks() {
        let cfg = SynthConfig {
            jitter_sigma_m: 0.2,
            point_noise_m: 0.05,
            points_per_scan: 4096,
            ..small()
        };
        let ds = generate(&cfg).unwrap();
        let samples = &ds.manifest.samples;
        // Pick a pair in the same cell from different scenes.
        let mut pair = None;
        'outer: for a in samples {
            for b in samples {
                if a.scene_id != b.scene_id
                    && a.cell(&cfg.grid).unwrap() == b.cell(&cfg.grid).unwrap()
                {
                    pair = Some((a, b));
                    break 'outer;
                }
            }
        }
        let (a, b) = pair.expect("the lattice guarantees revisits");
        let to_world = |s: &SampleRecord| -> Vec<[f64; 2]> {
            ds.cloud(s)
                .unwrap()
                .points()
                .map(|p| [p[0] as f64 + s.x, p[1] as f64 + s.y])
                .collect()
        };
        let (wa, wb) = (to_world(a), to_world(b));
        let close = wa
            .iter()
            .filter(|p| wb.iter().any(|q| (p[0] - q[0]).hypot(p[1] - q[1]) < 1.5))
            .count();
        assert!(
            close > wa.len() / 2,
            "{close} of {} points overlap",
            wa.len()
        );
    }

    #[test]
    fn warns_when_nothing_is_revisited() {
        let cfg = SynthConfig {
            maps: 1,
            scenes_per_map: 1,
            samples_per_scene: 5,
            points_per_scan: 16,
            ..SynthConfig::default()
        };
        let ds = generate(&cfg).unwrap();
        assert_eq!(ds.manifest.warnings.len(), 1);
        assert!(generate(&small()).unwrap().manifest.warnings.is_empty());
    }

    #[test]
    fn rejects_invalid_config() {
        assert!(generate(&SynthConfig { maps: 0, ..small() }).is_err());
        assert!(generate(&SynthConfig {
            step_m: -1.0,
            ..small()
        })
        .is_err());
        assert!(generate(&SynthConfig {
            jitter_sigma_m: f64::NAN,
            ..small()
        })
        .is_err());
    }

    fn cloud_of(n: usize) -> PointCloud {
        let pts: Vec<[f32; 3]> = (0..n).map(|i| [i as f32, 0.0, 1.0]).collect();
        PointCloud::from_points(&pts).unwrap()
    }

    #[test]
    fn decimate_examples() {
        let c = cloud_of(1000);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(decimate(&c, 20, &mut rng).unwrap().len(), 50);
        assert_eq!(decimate(&c, 1, &mut rng).unwrap(), c);
        assert!(decimate(&c, 0, &mut rng).is_err());
        assert_eq!(decimate(&cloud_of(3), 20, &mut rng).unwrap().len(), 1);

        let a = decimate(&c, 7, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = decimate(&c, 7, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    proptest::proptest! {
        #[test]
        fn decimate_size_and_subset(n in 1usize..400, k in 1u32..40, seed in proptest::prelude::any::<u64>()) {
            let c = cloud_of(n);
            let d = decimate(&c, k, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let expect = ((n as f64 / k as f64).round() as usize).max(1);
            proptest::prop_assert_eq!(d.len(), expect);
            let mut prev = -1.0f32;
            for p in d.points() {
                proptest::prop_assert!(p[0] > prev, "order preserved, no repeats");
                proptest::prop_assert!((p[0] as usize) < n);
                prev = p[0];
            }
        }
    }
}
