//! Binary parameter checkpoints.
//!
//! Layout: the 8-byte magic `MMRECTNS`, a little-endian `u64` header length,
//! the UTF-8 JSON header, then the little-endian `f32` payloads back to back.
//! Header offsets are in bytes from the start of the payload section.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"MMRECTNS";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub nbytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub tensors: Vec<TensorEntry>,
    /// Free-form string metadata, e.g. the producing config hash.
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

pub fn encode(params: &ParamSet<f32>, metadata: &BTreeMap<String, String>) -> Vec<u8> {
    let mut tensors = Vec::with_capacity(params.len());
    let mut payload = Vec::with_capacity(params.numel() * 4);
    for (name, t) in params.iter() {
        let offset = payload.len();
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
            nbytes: payload.len() - offset,
        });
    }
    let header = serde_json::to_vec(&Header {
        tensors,
        metadata: metadata.clone(),
    })
    .expect("header serializes");
    let mut out = Vec::with_capacity(16 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    out
}

pub fn decode(bytes: &[u8]) -> Result<(ParamSet<f32>, BTreeMap<String, String>)> {
    let bad = |m: &str| TensorError::Checkpoint(m.to_string());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("missing MMRECTNS magic"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = &bytes[16..];
    if body.len() < hlen {
        return Err(bad("truncated header"));
    }
    let header: Header =
        serde_json::from_slice(&body[..hlen]).map_err(|e| bad(&format!("header: {e}")))?;
    let payload = &body[hlen..];
    let mut params = ParamSet::new();
    for e in header.tensors {
        let numel: usize = e.shape.iter().product();
        if e.nbytes != numel * 4 || e.offset + e.nbytes > payload.len() {
            return Err(bad(&format!("tensor `{}` out of bounds", e.name)));
        }
        let data = payload[e.offset..e.offset + e.nbytes]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.insert(e.name, Tensor::new(e.shape, data)?);
    }
    Ok((params, header.metadata))
}

pub fn save(
    path: impl AsRef<Path>,
    params: &ParamSet<f32>,
    metadata: &BTreeMap<String, String>,
) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode(params, metadata))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<(ParamSet<f32>, BTreeMap<String, String>)> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn encode_decode_round_trip(
            a in proptest::collection::vec(-1e6f32..1e6, 1..40),
            b in proptest::collection::vec(-1.0f32..1.0, 6),
        ) {
            let mut p = ParamSet::new();
            p.insert("layer.a", Tensor::vector(a));
            p.insert("layer.b", Tensor::new(vec![2, 3], b).unwrap());
            let mut meta = BTreeMap::new();
            meta.insert("config_hash".to_string(), "abc".to_string());
            let bytes = encode(&p, &meta);
            prop_assert_eq!(&bytes[..8], MAGIC);
            let (q, m) = decode(&bytes).unwrap();
            prop_assert_eq!(p, q);
            prop_assert_eq!(meta, m);
        }
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::vector(vec![1.0, 2.0]));
        let bytes = encode(&p, &BTreeMap::new());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(decode(&wrong).is_err());
        assert!(decode(&bytes[..bytes.len() - 2]).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        let mut p = ParamSet::new();
        p.insert("w", Tensor::vector(vec![0.25, -3.5]));
        save(&path, &p, &BTreeMap::new()).unwrap();
        assert_eq!(load(&path).unwrap().0, p);
    }
}
