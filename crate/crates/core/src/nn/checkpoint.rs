//! Single-file checkpoints: an 8-byte magic, a little-endian `u64` manifest
//! length, the JSON manifest, then every parameter as little-endian `f32`.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::params::{ParamStore, Partition};
use crate::nn::tensor::{Scalar, Tensor};

const MAGIC: &[u8; 8] = b"HVLMCKP1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub partition: Partition,
    pub shape: Vec<usize>,
    pub trainable: bool,
    /// Byte offset into the blob that follows the manifest.
    pub offset: usize,
    pub bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tensors: Vec<TensorEntry>,
    /// Free-form metadata (model config, vocabulary, stage).
    pub meta: serde_json::Value,
}

pub fn to_bytes<F: Scalar>(ps: &ParamStore<F>, meta: serde_json::Value) -> Result<Vec<u8>> {
    let mut tensors = Vec::with_capacity(ps.len());
    let mut blob = Vec::with_capacity(ps.count(None) * 4);
    for p in ps.iter() {
        let offset = blob.len();
        for v in p.value.data() {
            blob.extend_from_slice(&(v.to_f32().unwrap_or(f32::NAN)).to_le_bytes());
        }
        tensors.push(TensorEntry {
            name: p.name.clone(),
            partition: p.partition,
            shape: p.value.shape().to_vec(),
            trainable: p.trainable,
            offset,
            bytes: blob.len() - offset,
        });
    }
    let manifest = serde_json::to_vec(&Manifest { tensors, meta })?;
    let mut out = Vec::with_capacity(16 + manifest.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest);
    out.extend_from_slice(&blob);
    Ok(out)
}

/// Parses a checkpoint into its manifest and a parameter store holding the
/// stored values and trainable flags.
pub fn from_bytes<F: Scalar>(bytes: &[u8]) -> Result<(Manifest, ParamStore<F>)> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("missing magic header".into()));
    }
    let mlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..16 + mlen).ok_or_else(|| Error::Checkpoint("truncated manifest".into()))?;
    let manifest: Manifest = serde_json::from_slice(body)?;
    let blob = &bytes[16 + mlen..];
    let mut ps = ParamStore::new();
    for e in &manifest.tensors {
        let n: usize = e.shape.iter().product();
        if e.bytes != n * 4 {
            return Err(Error::Checkpoint(format!("{}: {} bytes for shape {:?}", e.name, e.bytes, e.shape)));
        }
        let raw = blob
            .get(e.offset..e.offset + e.bytes)
            .ok_or_else(|| Error::Checkpoint(format!("{}: data out of range", e.name)))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| F::from_f32(f32::from_le_bytes(c.try_into().expect("4 bytes"))).unwrap_or_else(F::nan))
            .collect();
        let id = ps.add(e.name.clone(), e.partition, Tensor::from_vec(&e.shape, data)?);
        ps.iter_mut().nth(id.0).expect("just added").trainable = e.trainable;
    }
    Ok((manifest, ps))
}

pub fn save<F: Scalar>(path: &Path, ps: &ParamStore<F>, meta: serde_json::Value) -> Result<()> {
    let bytes = to_bytes(ps, meta)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load<F: Scalar>(path: &Path) -> Result<(Manifest, ParamStore<F>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_values_and_flags() {
        let mut ps = ParamStore::<f32>::new();
        ps.add("w", Partition::Decoder, Tensor::from_f64(&[2, 3], &[1., -2., 3.5, 0.25, 1e-7, -0.0]).unwrap());
        ps.add("b", Partition::LmHead, Tensor::from_f64(&[1], &[7.0]).unwrap());
        ps.set_partition_trainable(Partition::LmHead, false);
        let bytes = to_bytes(&ps, serde_json::json!({"k": 1})).unwrap();
        let (m, back) = from_bytes::<f32>(&bytes).unwrap();
        assert_eq!(m.meta["k"], 1);
        assert_eq!(m.tensors[1].offset, 24);
        assert_eq!(back.checksums(), ps.checksums());
        assert!(!back.partition_trainable(Partition::LmHead));
        assert!(from_bytes::<f32>(&bytes[..20]).is_err());
    }
}
