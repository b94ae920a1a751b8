//! `PCC1` point-cloud container.
//!
//! Layout: the magic bytes `PCC1`, then for each cloud a little-endian `u32`
//! point count followed by `count × 3` little-endian `f32` coordinates.
//! Manifests refer to a cloud by the byte offset of its count field.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numcore::Tensor2;

pub const PCC_MAGIC: &[u8; 4] = b"PCC1";

/// An `N × 3` set of sensor-local points in meters.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud(Tensor2<f32>);

impl PointCloud {
    pub fn new(points: Tensor2<f32>) -> Result<Self> {
        if points.cols() != 3 {
            return Err(Error::InvalidInput(format!(
                "point cloud must have 3 columns, got {}",
                points.cols()
            )));
        }
        if !points.all_finite() {
            return Err(Error::NonFinite("point cloud coordinate".into()));
        }
        Ok(Self(points))
    }

    pub fn from_points(points: &[[f32; 3]]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Empty("point cloud"));
        }
        let data = points.iter().flat_map(|p| p.iter().copied()).collect();
        Self::new(Tensor2::new(points.len(), 3, data)?)
    }

    pub fn len(&self) -> usize {
        self.0.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn point(&self, i: usize) -> [f32; 3] {
        let r = self.0.row(i);
        [r[0], r[1], r[2]]
    }

    pub fn points(&self) -> impl Iterator<Item = [f32; 3]> + '_ {
        (0..self.len()).map(|i| self.point(i))
    }

    pub fn as_tensor(&self) -> &Tensor2<f32> {
        &self.0
    }

    fn encoded_len(&self) -> usize {
        4 + 12 * self.len()
    }
}

/// In-memory set of clouds addressed by container byte offset.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CloudContainer {
    clouds: Vec<PointCloud>,
    offsets: Vec<u64>,
    by_offset: HashMap<u64, usize>,
}

impl CloudContainer {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a cloud and returns its byte offset in the encoded container.
    pub fn push(&mut self, cloud: PointCloud) -> u64 {
        let offset = match (self.offsets.last(), self.clouds.last()) {
            (Some(&o), Some(c)) => o + c.encoded_len() as u64,
            _ => PCC_MAGIC.len() as u64,
        };
        self.by_offset.insert(offset, self.clouds.len());
        self.offsets.push(offset);
        self.clouds.push(cloud);
        offset
    }

    pub fn len(&self) -> usize {
        self.clouds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clouds.is_empty()
    }

    pub fn get(&self, offset: u64) -> Result<&PointCloud> {
        self.by_offset
            .get(&offset)
            .map(|&i| &self.clouds[i])
            .ok_or_else(|| {
                Error::format(
                    "point-cloud container",
                    format!("no cloud at offset {offset}"),
                )
            })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let total = PCC_MAGIC.len()
            + self
                .clouds
                .iter()
                .map(PointCloud::encoded_len)
                .sum::<usize>();
        let mut out = Vec::with_capacity(total);
        out.extend_from_slice(PCC_MAGIC);
        for cloud in &self.clouds {
            out.extend_from_slice(&(cloud.len() as u32).to_le_bytes());
            for v in cloud.as_tensor().data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        const WHAT: &str = "point-cloud container";
        if bytes.len() < 4 || &bytes[..4] != PCC_MAGIC {
            return Err(Error::format(WHAT, "missing PCC1 magic"));
        }
        let mut out = Self::new();
        let mut pos = 4usize;
        while pos < bytes.len() {
            let header = bytes
                .get(pos..pos + 4)
                .ok_or_else(|| Error::format(WHAT, format!("truncated count at byte {pos}")))?;
            let n = u32::from_le_bytes(header.try_into().expect("4 bytes")) as usize;
            let body_start = pos + 4;
            let body_end = body_start + 12 * n;
            let body = bytes.get(body_start..body_end).ok_or_else(|| {
                Error::format(
                    WHAT,
                    format!("cloud at byte {pos} declares {n} points past end of file"),
                )
            })?;
            let data: Vec<f32> = body
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let cloud = PointCloud::new(Tensor2::new(n, 3, data)?)
                .map_err(|e| Error::format(WHAT, format!("cloud at byte {pos}: {e}")))?;
            let offset = out.push(cloud);
            debug_assert_eq!(offset, pos as u64);
            pos = body_end;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn offsets_point_at_count_fields() {
        let mut c = CloudContainer::new();
        let a = c.push(PointCloud::from_points(&[[1.0, 2.0, 3.0]]).unwrap());
        let b = c.push(PointCloud::from_points(&[[4.0, 5.0, 6.0], [7.0, 8.0, 9.0]]).unwrap());
        assert_eq!(a, 4);
        assert_eq!(b, 4 + 4 + 12);
        let bytes = c.to_bytes();
        assert_eq!(&bytes[..4], b"PCC1");
        assert_eq!(
            u32::from_le_bytes(bytes[b as usize..b as usize + 4].try_into().unwrap()),
            2
        );
        let back = CloudContainer::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.get(b).unwrap().point(1), [7.0, 8.0, 9.0]);
        assert!(back.get(5).is_err());
    }

    #[test]
    fn rejects_corrupt_bytes() {
        assert!(CloudContainer::from_bytes(b"PCC0").is_err());
        let mut c = CloudContainer::new();
        c.push(PointCloud::from_points(&[[1.0, 2.0, 3.0]]).unwrap());
        let bytes = c.to_bytes();
        assert!(CloudContainer::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut nan = bytes.clone();
        nan[8..12].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(CloudContainer::from_bytes(&nan).is_err());
    }

    #[test]
    fn point_cloud_validation() {
        assert!(PointCloud::from_points(&[]).is_err());
        assert!(PointCloud::new(Tensor2::zeros(2, 2)).is_err());
    }
}
