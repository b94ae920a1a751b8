//! `LNCK` checkpoints.
//!
//! Layout: magic `LNCK`, a little-endian `u32` header length, a JSON header
//! holding the [`ModelConfig`] and one `{name, rows, cols, offset}` record
//! per tensor, then the raw little-endian `f32` arrays. Offsets count bytes
//! from the start of the array section.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Tensor2;

use super::{init_params, ModelConfig, ModelParams};

pub const CKPT_MAGIC: &[u8; 4] = b"LNCK";
const WHAT: &str = "checkpoint";

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

pub fn write_checkpoint(params: &ModelParams) -> Result<Vec<u8>> {
    let mut offset = 0u64;
    let tensors = params
        .tensor_names()
        .into_iter()
        .zip(params.tensors())
        .map(|(name, t)| {
            let entry = TensorEntry {
                name,
                rows: t.rows(),
                cols: t.cols(),
                offset,
            };
            offset += 4 * t.len() as u64;
            entry
        })
        .collect();
    let header = serde_json::to_vec(&Header {
        config: params.config.clone(),
        tensors,
    })?;
    let mut out = Vec::with_capacity(8 + header.len() + offset as usize);
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for t in params.tensors() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<ModelParams> {
    if bytes.len() < 8 || &bytes[..4] != CKPT_MAGIC {
        return Err(Error::format(WHAT, "missing LNCK magic"));
    }
    let header_len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let header_bytes = bytes
        .get(8..8 + header_len)
        .ok_or_else(|| Error::format(WHAT, "truncated header"))?;
    let header: Header = serde_json::from_slice(header_bytes)
        .map_err(|e| Error::format(WHAT, format!("bad header: {e}")))?;
    let body = &bytes[8 + header_len..];

    let mut params = init_params(&header.config)?;
    let names = params.tensor_names();
    if names.len() != header.tensors.len() {
        return Err(Error::format(
            WHAT,
            format!(
                "expected {} tensors, header lists {}",
                names.len(),
                header.tensors.len()
            ),
        ));
    }
    let mut expected_end = 0u64;
    for ((dst, name), entry) in params.tensors_mut().zip(&names).zip(&header.tensors) {
        if &entry.name != name || (entry.rows, entry.cols) != dst.shape() {
            return Err(Error::format(
                WHAT,
                format!(
                    "tensor {} {}x{} does not match {} {:?}",
                    entry.name,
                    entry.rows,
                    entry.cols,
                    name,
                    dst.shape()
                ),
            ));
        }
        let start = entry.offset as usize;
        let end = start + 4 * dst.len();
        let raw = body
            .get(start..end)
            .ok_or_else(|| Error::format(WHAT, format!("tensor {name} runs past end of file")))?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        *dst = Tensor2::new(entry.rows, entry.cols, data)?;
        expected_end = expected_end.max(end as u64);
    }
    if expected_end as usize != body.len() {
        return Err(Error::format(WHAT, "trailing bytes after tensor data"));
    }
    if !params.all_finite() {
        return Err(Error::NonFinite("checkpoint parameter".into()));
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelParams {
        let mut cfg = ModelConfig::new(7);
        cfg.widths = vec![3, 5, 6];
        cfg.embedding_size = 4;
        init_params(&cfg).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let p = small();
        let bytes = write_checkpoint(&p).unwrap();
        assert_eq!(&bytes[..4], b"LNCK");
        let back = read_checkpoint(&bytes).unwrap();
        assert_eq!(back, p);
        assert_eq!(write_checkpoint(&back).unwrap(), bytes);
    }

    #[test]
    fn rejects_damage() {
        let bytes = write_checkpoint(&small()).unwrap();
        assert!(read_checkpoint(&bytes[..bytes.len() - 4]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(read_checkpoint(&extra).is_err());
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(read_checkpoint(&magic).is_err());
        let mut nan = bytes.clone();
        let n = nan.len();
        nan[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(read_checkpoint(&nan).is_err());
    }
}
