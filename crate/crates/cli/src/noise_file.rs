//! DNZ1 noise tensor files.
//!
//! Layout: the magic `DNZ1`, a little-endian u32 byte length, that many bytes
//! of UTF-8 JSON metadata, then the values as little-endian f32 in row-major
//! order.

use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};

use noisediv::Tensor;

pub const MAGIC: &[u8; 4] = b"DNZ1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseMeta {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub seed: u64,
    pub alpha: f64,
    pub iteration: usize,
}

impl NoiseMeta {
    pub fn new(shape: &[usize], seed: u64, alpha: f64, iteration: usize) -> Self {
        Self {
            shape: shape.to_vec(),
            dtype: "f32".into(),
            seed,
            alpha,
            iteration,
        }
    }
}

pub fn encode(t: &Tensor, meta: &NoiseMeta) -> Result<Vec<u8>> {
    ensure!(meta.shape == t.shape(), "metadata shape {:?} does not match tensor {:?}", meta.shape, t.shape());
    let doc = serde_json::to_vec(meta)?;
    let mut out = Vec::with_capacity(8 + doc.len() + 4 * t.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(doc.len() as u32).to_le_bytes());
    out.extend_from_slice(&doc);
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<(NoiseMeta, Tensor)> {
    ensure!(bytes.len() >= 8 && &bytes[..4] == MAGIC, "not a DNZ1 file");
    let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    ensure!(bytes.len() >= 8 + n, "truncated metadata");
    let meta: NoiseMeta = serde_json::from_slice(&bytes[8..8 + n]).context("metadata")?;
    if meta.dtype != "f32" {
        bail!("unsupported dtype {}", meta.dtype);
    }
    let body = &bytes[8 + n..];
    let count: usize = meta.shape.iter().product();
    ensure!(body.len() == 4 * count, "{} value bytes for shape {:?}", body.len(), meta.shape);
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let t = Tensor::new(meta.shape.clone(), data)?;
    Ok((meta, t))
}

pub fn read(path: &Path) -> Result<(NoiseMeta, Tensor)> {
    let bytes = std::fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
    decode(&bytes).with_context(|| format!("bad noise file {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use noisediv::SeededRng;

    #[test]
    fn header_layout() {
        let t = Tensor::new(vec![1, 2], vec![1.0, -0.5]).unwrap();
        let bytes = encode(&t, &NoiseMeta::new(&[1, 2], 3, 0.2, 7)).unwrap();
        assert_eq!(&bytes[..4], b"DNZ1");
        let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let doc: serde_json::Value = serde_json::from_slice(&bytes[8..8 + n]).unwrap();
        assert_eq!(doc["dtype"], "f32");
        assert_eq!(doc["iteration"], 7);
        assert_eq!(&bytes[8 + n..], [1f32.to_le_bytes(), (-0.5f32).to_le_bytes()].concat());
    }

    #[test]
    fn round_trip_is_exact_at_f32() {
        let t = SeededRng::new(1).gaussian(&[2, 3, 4, 4]);
        let meta = NoiseMeta::new(t.shape(), 1, 0.0, 0);
        let (m, back) = decode(&encode(&t, &meta).unwrap()).unwrap();
        assert_eq!(m, meta);
        for (a, b) in back.data().iter().zip(t.data()) {
            assert_eq!(*a, *b as f32 as f64);
        }
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let t = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let bytes = encode(&t, &NoiseMeta::new(&[2], 0, 0.0, 0)).unwrap();
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode(b"DNZ2....").is_err());
        assert!(encode(&t, &NoiseMeta::new(&[3], 0, 0.0, 0)).is_err());
    }
}
