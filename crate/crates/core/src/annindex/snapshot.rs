//! `EMDB` database snapshots.
//!
//! Layout: magic `EMDB`, a little-endian `u32` header length, a JSON header
//! `{count, dim, metric, normalized}`, then `count` packed records of
//! `u64 sample_id, u32 map_id, f32 x, f32 y, u32 label, dim × f32`, all
//! little-endian.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{DbEntry, EmbeddingDB, Metric};

pub const DB_MAGIC: &[u8; 4] = b"EMDB";
const WHAT: &str = "database snapshot";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    count: usize,
    dim: usize,
    metric: Metric,
    normalized: bool,
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize) -> Result<&'a [u8]> {
    let out = bytes
        .get(*pos..*pos + n)
        .ok_or_else(|| Error::format(WHAT, format!("truncated at byte {}", *pos)))?;
    *pos += n;
    Ok(out)
}

fn arr<const N: usize>(b: &[u8]) -> [u8; N] {
    b.try_into().expect("length checked by take")
}

impl EmbeddingDB {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&Header {
            count: self.len(),
            dim: self.dim,
            metric: self.metric,
            normalized: self.normalized,
        })?;
        let record = 24 + 4 * self.dim;
        let mut out = Vec::with_capacity(8 + header.len() + record * self.len());
        out.extend_from_slice(DB_MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for (i, e) in self.entries.iter().enumerate() {
            out.extend_from_slice(&e.sample_id.to_le_bytes());
            out.extend_from_slice(&e.map_id.to_le_bytes());
            out.extend_from_slice(&e.x.to_le_bytes());
            out.extend_from_slice(&e.y.to_le_bytes());
            out.extend_from_slice(&e.label.to_le_bytes());
            for v in self.embedding(i) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != DB_MAGIC {
            return Err(Error::format(WHAT, "missing EMDB magic"));
        }
        let mut pos = 4;
        let header_len = u32::from_le_bytes(arr(take(bytes, &mut pos, 4)?)) as usize;
        let header: Header = serde_json::from_slice(take(bytes, &mut pos, header_len)?)
            .map_err(|e| Error::format(WHAT, format!("bad header: {e}")))?;
        let mut entries = Vec::with_capacity(header.count);
        let mut embeddings = Vec::with_capacity(header.count * header.dim);
        for _ in 0..header.count {
            let sample_id = u64::from_le_bytes(arr(take(bytes, &mut pos, 8)?));
            let map_id = u32::from_le_bytes(arr(take(bytes, &mut pos, 4)?));
            let x = f32::from_le_bytes(arr(take(bytes, &mut pos, 4)?));
            let y = f32::from_le_bytes(arr(take(bytes, &mut pos, 4)?));
            let label = u32::from_le_bytes(arr(take(bytes, &mut pos, 4)?));
            entries.push(DbEntry {
                sample_id,
                map_id,
                x,
                y,
                label,
            });
            let raw = take(bytes, &mut pos, 4 * header.dim)?;
            embeddings.extend(raw.chunks_exact(4).map(|c| f32::from_le_bytes(arr(c))));
        }
        if pos != bytes.len() {
            return Err(Error::format(WHAT, "trailing bytes after last record"));
        }
        Self::from_parts(
            entries,
            embeddings,
            header.dim,
            header.metric,
            header.normalized,
        )
        .map_err(|e| Error::format(WHAT, e.to_string()))
    }
}
