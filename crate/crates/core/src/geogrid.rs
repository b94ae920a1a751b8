//! Planar grid discretization and the cell ↔ class-label bijection.
//!
//! Poses are map-local planar coordinates in meters. A pose is mapped to a
//! [`CellKey`] by flooring each coordinate by the cell size; the set of
//! occupied cells across all maps is then numbered in lexicographic
//! `(kx, ky, map_id)` order to obtain contiguous class labels.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Discrete location: integer cell indices plus the map the cell belongs to.
///
/// The derived ordering compares `kx`, then `ky`, then `map_id`, which is the
/// label order used by [`LabelMap`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellKey {
    pub kx: i64,
    pub ky: i64,
    pub map_id: u32,
}

impl CellKey {
    pub const fn new(kx: i64, ky: i64, map_id: u32) -> Self {
        Self { kx, ky, map_id }
    }
}

impl fmt::Display for CellKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.kx, self.ky, self.map_id)
    }
}

/// A planar pose on one map. `z` is implicitly zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub map_id: u32,
}

impl Pose {
    pub const fn new(x: f64, y: f64, map_id: u32) -> Self {
        Self { x, y, map_id }
    }

    /// Planar Euclidean distance to a point, ignoring the map id.
    pub fn distance_to(&self, x: f64, y: f64) -> f64 {
        (self.x - x).hypot(self.y - y)
    }
}

fn default_mask_radius() -> u32 {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    /// Cell side length in meters.
    pub h: f64,
    /// Chebyshev radius (in cells) of the neighborhood excluded from the loss.
    #[serde(default = "default_mask_radius")]
    pub mask_radius: u32,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            h: 1.0,
            mask_radius: 1,
        }
    }
}

impl GridConfig {
    pub fn new(h: f64) -> Result<Self> {
        let cfg = Self {
            h,
            ..Self::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.h.is_finite() && self.h > 0.0) {
            return Err(Error::InvalidInput(format!(
                "grid size must be positive and finite, got {}",
                self.h
            )));
        }
        Ok(())
    }
}

/// Maps a pose to its grid cell: `kx = floor(x / h)`, `ky = floor(y / h)`.
pub fn discretize(pose: Pose, cfg: &GridConfig) -> Result<CellKey> {
    cfg.validate()?;
    if !(pose.x.is_finite() && pose.y.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "pose ({}, {}) is not finite",
            pose.x, pose.y
        )));
    }
    let kx = (pose.x / cfg.h).floor();
    let ky = (pose.y / cfg.h).floor();
    if kx.abs() >= i64::MAX as f64 || ky.abs() >= i64::MAX as f64 {
        return Err(Error::InvalidInput(format!(
            "pose ({}, {}) overflows the cell index range",
            pose.x, pose.y
        )));
    }
    Ok(CellKey::new(kx as i64, ky as i64, pose.map_id))
}

/// Center of a cell in map-local meters.
pub fn cell_center(cell: CellKey, cfg: &GridConfig) -> (f64, f64) {
    (
        (cell.kx as f64 + 0.5) * cfg.h,
        (cell.ky as f64 + 0.5) * cfg.h,
    )
}

/// Bijection between occupied cells and contiguous class labels `0..C`.
///
/// Immutable once built.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    forward: BTreeMap<CellKey, u32>,
    inverse: Vec<CellKey>,
}

/// Numbers the distinct cells in lexicographic order. Duplicates are ignored.
pub fn build_label_map<I>(cells: I) -> Result<LabelMap>
where
    I: IntoIterator<Item = CellKey>,
{
    let mut inverse: Vec<CellKey> = cells.into_iter().collect();
    if inverse.is_empty() {
        return Err(Error::Empty("label map needs at least one cell"));
    }
    inverse.sort_unstable();
    inverse.dedup();
    if inverse.len() > u32::MAX as usize {
        return Err(Error::InvalidInput("too many distinct cells".into()));
    }
    let forward = inverse
        .iter()
        .enumerate()
        .map(|(label, &cell)| (cell, label as u32))
        .collect();
    Ok(LabelMap { forward, inverse })
}

impl LabelMap {
    pub fn num_classes(&self) -> u32 {
        self.inverse.len() as u32
    }

    pub fn contains(&self, cell: &CellKey) -> bool {
        self.forward.contains_key(cell)
    }

    pub fn label_of(&self, cell: CellKey) -> Result<u32> {
        self.forward
            .get(&cell)
            .copied()
            .ok_or(Error::UnknownCell(cell))
    }

    pub fn cell_of(&self, label: u32) -> Result<CellKey> {
        self.inverse
            .get(label as usize)
            .copied()
            .ok_or(Error::LabelOutOfRange {
                label,
                num_classes: self.num_classes(),
            })
    }

    /// Cells in label order.
    pub fn cells(&self) -> &[CellKey] {
        &self.inverse
    }

    /// Labels of the stored cells within `radius` (Chebyshev, in cells) of
    /// `target` on the same map, excluding the target itself. Sorted ascending.
    pub fn neighbor_labels(&self, target: CellKey, radius: u32) -> Result<Vec<u32>> {
        self.label_of(target)?;
        let r = radius as i64;
        let mut out = Vec::new();
        for dx in -r..=r {
            for dy in -r..=r {
                if dx == 0 && dy == 0 {
                    continue;
                }
                let cell = CellKey::new(target.kx + dx, target.ky + dy, target.map_id);
                if let Some(&label) = self.forward.get(&cell) {
                    out.push(label);
                }
            }
        }
        out.sort_unstable();
        Ok(out)
    }

    /// Writes the line-oriented text form: a `C=<count> h=<grid-size>` header
    /// followed by `kx ky map_id label` records in label order.
    pub fn to_text(&self, h: f64) -> String {
        use std::fmt::Write;
        let mut out = String::with_capacity(16 * (self.inverse.len() + 1));
        let _ = writeln!(out, "C={} h={}", self.num_classes(), h);
        for (label, cell) in self.inverse.iter().enumerate() {
            let _ = writeln!(out, "{} {} {} {}", cell.kx, cell.ky, cell.map_id, label);
        }
        out
    }

    /// Parses the text form written by [`LabelMap::to_text`], returning the map
    /// and the grid size recorded in the header.
    pub fn from_text(text: &str) -> Result<(LabelMap, f64)> {
        const WHAT: &str = "label map";
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::format(WHAT, "missing header line"))?;
        let mut count = None;
        let mut h = None;
        for field in header.split_whitespace() {
            if let Some(v) = field.strip_prefix("C=") {
                count = Some(v.parse::<usize>().map_err(|e| {
                    Error::format(WHAT, format!("line 1: bad class count {v:?}: {e}"))
                })?);
            } else if let Some(v) = field.strip_prefix("h=") {
                h = Some(v.parse::<f64>().map_err(|e| {
                    Error::format(WHAT, format!("line 1: bad grid size {v:?}: {e}"))
                })?);
            }
        }
        let (count, h) = match (count, h) {
            (Some(c), Some(h)) => (c, h),
            _ => {
                return Err(Error::format(
                    WHAT,
                    format!("line 1: expected `C=<count> h=<grid-size>`, got {header:?}"),
                ))
            }
        };

        let mut inverse = Vec::with_capacity(count);
        for (idx, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let lineno = idx + 1;
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 4 {
                return Err(Error::format(
                    WHAT,
                    format!("line {lineno}: expected 4 fields, got {}", fields.len()),
                ));
            }
            let bad = |e: &dyn fmt::Display| Error::format(WHAT, format!("line {lineno}: {e}"));
            let kx: i64 = fields[0].parse().map_err(|e| bad(&e))?;
            let ky: i64 = fields[1].parse().map_err(|e| bad(&e))?;
            let map_id: u32 = fields[2].parse().map_err(|e| bad(&e))?;
            let label: usize = fields[3].parse().map_err(|e| bad(&e))?;
            if label != inverse.len() {
                return Err(Error::format(
                    WHAT,
                    format!("line {lineno}: label {label} out of sequence"),
                ));
            }
            inverse.push(CellKey::new(kx, ky, map_id));
        }
        if inverse.len() != count {
            return Err(Error::format(
                WHAT,
                format!("header declares {count} classes, found {}", inverse.len()),
            ));
        }
        let map = build_label_map(inverse.iter().copied())?;
        if map.inverse != inverse {
            return Err(Error::format(
                WHAT,
                "records are not in strictly increasing lexicographic order",
            ));
        }
        Ok((map, h))
    }
}

/// Labels excluded from the loss for a sample whose true cell is `target`.
pub fn masked_labels(map: &LabelMap, target: CellKey, cfg: &GridConfig) -> Result<Vec<u32>> {
    map.neighbor_labels(target, cfg.mask_radius)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid(h: f64) -> GridConfig {
        GridConfig::new(h).unwrap()
    }

    #[test]
    fn discretize_examples() {
        let g1 = grid(1.0);
        assert_eq!(
            discretize(Pose::new(3.7, -2.1, 2), &g1).unwrap(),
            CellKey::new(3, -3, 2)
        );
        assert_eq!(
            discretize(Pose::new(0.0, 0.0, 0), &g1).unwrap(),
            CellKey::new(0, 0, 0)
        );
        assert_eq!(
            discretize(Pose::new(10.0, 10.0, 1), &grid(4.0)).unwrap(),
            CellKey::new(2, 2, 1)
        );
        assert_eq!(
            discretize(Pose::new(10.0, -10.0, 0), &g1).unwrap(),
            CellKey::new(10, -10, 0)
        );
    }

    #[test]
    fn discretize_rejects_bad_input() {
        let g = grid(1.0);
        assert!(discretize(Pose::new(f64::NAN, 0.0, 0), &g).is_err());
        assert!(discretize(Pose::new(0.0, f64::INFINITY, 0), &g).is_err());
        assert!(GridConfig::new(0.0).is_err());
        assert!(GridConfig::new(-1.0).is_err());
    }

    fn example_map() -> LabelMap {
        build_label_map([
            CellKey::new(0, 0, 0),
            CellKey::new(1, 0, 1),
            CellKey::new(0, 1, 0),
        ])
        .unwrap()
    }

    #[test]
    fn label_map_examples() {
        let map = example_map();
        assert_eq!(map.num_classes(), 3);
        assert_eq!(map.label_of(CellKey::new(0, 0, 0)).unwrap(), 0);
        assert_eq!(map.label_of(CellKey::new(0, 1, 0)).unwrap(), 1);
        assert_eq!(map.label_of(CellKey::new(1, 0, 1)).unwrap(), 2);
        assert_eq!(map.cell_of(2).unwrap(), CellKey::new(1, 0, 1));
        assert!(matches!(
            map.label_of(CellKey::new(9, 9, 9)),
            Err(Error::UnknownCell(_))
        ));
        assert!(matches!(
            map.cell_of(3),
            Err(Error::LabelOutOfRange { label: 3, .. })
        ));

        let single = build_label_map([CellKey::new(5, 5, 0)]).unwrap();
        assert_eq!(single.num_classes(), 1);
        assert_eq!(single.label_of(CellKey::new(5, 5, 0)).unwrap(), 0);

        assert!(matches!(
            build_label_map(Vec::<CellKey>::new()),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn duplicates_are_collapsed() {
        let map = build_label_map([
            CellKey::new(1, 1, 0),
            CellKey::new(1, 1, 0),
            CellKey::new(-1, 4, 0),
        ])
        .unwrap();
        assert_eq!(map.num_classes(), 2);
        assert_eq!(map.label_of(CellKey::new(-1, 4, 0)).unwrap(), 0);
    }

    #[test]
    fn cell_center_examples() {
        let g = grid(1.0);
        assert_eq!(cell_center(CellKey::new(3, -3, 2), &g), (3.5, -2.5));
        assert_eq!(cell_center(CellKey::new(0, 0, 0), &g), (0.5, 0.5));
    }

    #[test]
    fn mask_of_isolated_cell_is_empty() {
        let map = build_label_map([CellKey::new(0, 0, 0), CellKey::new(5, 5, 0)]).unwrap();
        let mask = masked_labels(&map, CellKey::new(0, 0, 0), &grid(1.0)).unwrap();
        assert!(mask.is_empty());
    }

    #[test]
    fn mask_never_crosses_maps() {
        let map = example_map();
        let mask = masked_labels(&map, CellKey::new(0, 0, 0), &grid(1.0)).unwrap();
        assert_eq!(mask, vec![map.label_of(CellKey::new(0, 1, 0)).unwrap()]);
    }

    #[test]
    fn mask_of_full_neighborhood() {
        // 3x3 block around (10, 10) on map 1, plus far-away and other-map decoys.
        let mut cells = Vec::new();
        for kx in 9..=11 {
            for ky in 9..=11 {
                cells.push(CellKey::new(kx, ky, 1));
                cells.push(CellKey::new(kx, ky, 0));
            }
        }
        cells.push(CellKey::new(12, 10, 1));
        let map = build_label_map(cells).unwrap();
        let target = CellKey::new(10, 10, 1);
        let mask = masked_labels(&map, target, &grid(1.0)).unwrap();

        let mut expected: Vec<u32> = Vec::new();
        for kx in 9..=11 {
            for ky in 9..=11 {
                if (kx, ky) != (10, 10) {
                    expected.push(map.label_of(CellKey::new(kx, ky, 1)).unwrap());
                }
            }
        }
        expected.sort_unstable();
        assert_eq!(mask.len(), 8);
        assert_eq!(mask, expected);
    }

    #[test]
    fn mask_radius_two_reaches_further() {
        let map = build_label_map([
            CellKey::new(0, 0, 0),
            CellKey::new(2, -2, 0),
            CellKey::new(3, 0, 0),
        ])
        .unwrap();
        let cfg = GridConfig {
            h: 1.0,
            mask_radius: 2,
        };
        let mask = masked_labels(&map, CellKey::new(0, 0, 0), &cfg).unwrap();
        assert_eq!(mask, vec![map.label_of(CellKey::new(2, -2, 0)).unwrap()]);
    }

    #[test]
    fn mask_of_unknown_target_fails() {
        let map = example_map();
        assert!(masked_labels(&map, CellKey::new(7, 7, 0), &grid(1.0)).is_err());
    }

    #[test]
    fn text_format_round_trip() {
        let map = example_map();
        let text = map.to_text(2.5);
        assert!(text.starts_with("C=3 h=2.5\n"));
        assert!(text.contains("\n1 0 1 2\n"));
        let (back, h) = LabelMap::from_text(&text).unwrap();
        assert_eq!(back, map);
        assert_eq!(h, 2.5);
    }

    #[test]
    fn text_format_rejects_garbage() {
        assert!(LabelMap::from_text("").is_err());
        assert!(LabelMap::from_text("C=2 h=1\n0 0 0 0\n").is_err());
        assert!(LabelMap::from_text("C=2 h=1\n0 1 0 0\n0 0 0 1\n").is_err());
        let err = LabelMap::from_text("C=1 h=1\n0 x 0 0\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    proptest! {
        #[test]
        fn center_within_half_diagonal(
            x in -1.0e4f64..1.0e4,
            y in -1.0e4f64..1.0e4,
            h in 0.1f64..20.0,
        ) {
            let cfg = grid(h);
            let cell = discretize(Pose::new(x, y, 0), &cfg).unwrap();
            let (cx, cy) = cell_center(cell, &cfg);
            let d = (x - cx).hypot(y - cy);
            prop_assert!(d <= h * std::f64::consts::SQRT_2 / 2.0 + 1e-9 * h.max(x.abs()).max(y.abs()));
        }

        #[test]
        fn labels_follow_lexicographic_order(
            raw in proptest::collection::vec((-50i64..50, -50i64..50, 0u32..4), 1..200)
        ) {
            let cells: Vec<CellKey> = raw.iter().map(|&(a, b, m)| CellKey::new(a, b, m)).collect();
            let map = build_label_map(cells.iter().copied()).unwrap();
            for w in map.cells().windows(2) {
                prop_assert!(w[0] < w[1]);
            }
            for &c in &cells {
                let l = map.label_of(c).unwrap();
                prop_assert_eq!(map.cell_of(l).unwrap(), c);
            }
            for l in 0..map.num_classes() {
                prop_assert_eq!(map.label_of(map.cell_of(l).unwrap()).unwrap(), l);
            }
        }

        #[test]
        fn mask_excludes_target_and_other_maps(
            raw in proptest::collection::vec((-4i64..4, -4i64..4, 0u32..3), 1..80),
            pick in 0usize..80,
        ) {
            let cells: Vec<CellKey> = raw.iter().map(|&(a, b, m)| CellKey::new(a, b, m)).collect();
            let map = build_label_map(cells.iter().copied()).unwrap();
            let target = cells[pick % cells.len()];
            let own = map.label_of(target).unwrap();
            let mask = masked_labels(&map, target, &GridConfig::default()).unwrap();
            prop_assert!(!mask.contains(&own));
            for l in mask {
                let c = map.cell_of(l).unwrap();
                prop_assert_eq!(c.map_id, target.map_id);
                prop_assert!((c.kx - target.kx).abs() <= 1 && (c.ky - target.ky).abs() <= 1);
            }
        }
    }
}
