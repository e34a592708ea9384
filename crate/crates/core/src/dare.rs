//! Drop-and-rescale merging of a fine-tuned parameter map into its base,
//! and a checksummed little-endian container for parameter maps.
//!
//! Container layout:
//!
//! ```text
//! magic     8 bytes   "DAREPM01"
//! hlen      u64 LE    length of the JSON header in bytes
//! header    hlen      {"entries":[{"name","shape","offset","len"}...],"sha256": hex of payload}
//! payload   f32 LE    entries back to back; offset and len count floats
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::rng::{derive_seed, SplitMix64};

pub const MAGIC: &[u8; 8] = b"DAREPM01";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f32>) -> Result<Self, DareError> {
        let t = Self { shape, values };
        if t.shape.iter().product::<usize>() != t.values.len() {
            return Err(DareError::BadEntry(format!(
                "shape {:?} holds {} values, got {}",
                t.shape,
                t.shape.iter().product::<usize>(),
                t.values.len()
            )));
        }
        Ok(t)
    }

    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self.values.len() == other.values.len()
            && self.values.iter().zip(&other.values).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

pub type ParameterMap = BTreeMap<String, Tensor>;

pub fn maps_bit_eq(a: &ParameterMap, b: &ParameterMap) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|((na, ta), (nb, tb))| na == nb && ta.bit_eq(tb))
}

#[derive(Debug, Error)]
pub enum DareError {
    #[error("shape mismatch for `{name}`: base {base:?}, tuned {tuned:?}")]
    ShapeMismatch { name: String, base: Vec<usize>, tuned: Vec<usize> },
    #[error("parameter names differ: only in base {only_base:?}, only in tuned {only_tuned:?}")]
    NameSetMismatch { only_base: Vec<String>, only_tuned: Vec<String> },
    #[error("invalid merge config: {0}")]
    InvalidConfig(String),
    #[error("bad entry: {0}")]
    BadEntry(String),
    #[error("corrupt header: {0}")]
    CorruptHeader(String),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("checksum mismatch: header {expected}, payload {actual}")]
    ChecksumMismatch { expected: String, actual: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MergeConfig {
    pub drop_rate: f64,
    pub seed: u64,
    #[serde(default = "default_weight")]
    pub weight: f64,
}

fn default_weight() -> f64 {
    1.0
}

impl MergeConfig {
    pub fn new(drop_rate: f64, seed: u64) -> Self {
        Self { drop_rate, seed, weight: 1.0 }
    }

    pub fn validate(&self) -> Result<(), DareError> {
        if !(0.0..1.0).contains(&self.drop_rate) {
            return Err(DareError::InvalidConfig(format!("drop rate {} is outside [0, 1)", self.drop_rate)));
        }
        if !(self.weight > 0.0 && self.weight <= 1.0) {
            return Err(DareError::InvalidConfig(format!("weight {} is outside (0, 1]", self.weight)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergeStats {
    pub elements: usize,
    pub dropped: usize,
}

fn check_compatible(base: &ParameterMap, tuned: &ParameterMap) -> Result<(), DareError> {
    let only_base: Vec<String> = base.keys().filter(|k| !tuned.contains_key(*k)).cloned().collect();
    let only_tuned: Vec<String> = tuned.keys().filter(|k| !base.contains_key(*k)).cloned().collect();
    if !only_base.is_empty() || !only_tuned.is_empty() {
        return Err(DareError::NameSetMismatch { only_base, only_tuned });
    }
    for (name, b) in base {
        let t = &tuned[name];
        if b.shape != t.shape || b.values.len() != t.values.len() {
            return Err(DareError::ShapeMismatch {
                name: name.clone(),
                base: b.shape.clone(),
                tuned: t.shape.clone(),
            });
        }
        for (which, x) in [("base", b), ("tuned", t)] {
            if x.shape.iter().product::<usize>() != x.values.len() {
                return Err(DareError::BadEntry(format!("{which} `{name}`: shape does not match value count")));
            }
        }
    }
    Ok(())
}

/// Merges one entry. Each element's delta survives with probability
/// `1 - p` and is rescaled by `weight / (1 - p)`; dropped elements keep
/// the base value.
fn merge_entry(name: &str, base: &Tensor, tuned: &Tensor, cfg: &MergeConfig) -> (Tensor, usize) {
    let mut rng = SplitMix64::new(derive_seed(cfg.seed, &[b"dare", name.as_bytes()]));
    let p = cfg.drop_rate;
    let scale = cfg.weight / (1.0 - p);
    let mut dropped = 0;
    let values = base
        .values
        .iter()
        .zip(&tuned.values)
        .map(|(&b, &t)| {
            if rng.next_f64() < p {
                dropped += 1;
                b
            } else if scale == 1.0 {
                t
            } else {
                let (b64, t64) = (f64::from(b), f64::from(t));
                (b64 + scale * (t64 - b64)) as f32
            }
        })
        .collect();
    (Tensor { shape: base.shape.clone(), values }, dropped)
}

pub fn dare_merge(
    base: &ParameterMap,
    tuned: &ParameterMap,
    cfg: &MergeConfig,
) -> Result<(ParameterMap, MergeStats), DareError> {
    cfg.validate()?;
    check_compatible(base, tuned)?;
    let merged: Vec<(String, Tensor, usize)> = base
        .par_iter()
        .map(|(name, b)| {
            let (t, dropped) = merge_entry(name, b, &tuned[name], cfg);
            (name.clone(), t, dropped)
        })
        .collect();
    let mut stats = MergeStats::default();
    let mut out = ParameterMap::new();
    for (name, t, dropped) in merged {
        stats.elements += t.values.len();
        stats.dropped += dropped;
        out.insert(name, t);
    }
    Ok((out, stats))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct HeaderEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct Header {
    entries: Vec<HeaderEntry>,
    sha256: String,
}

pub fn encode_params(map: &ParameterMap) -> Result<Vec<u8>, DareError> {
    let mut payload = Vec::new();
    let mut entries = Vec::with_capacity(map.len());
    let mut offset = 0;
    for (name, t) in map {
        if t.shape.iter().product::<usize>() != t.values.len() {
            return Err(DareError::BadEntry(format!("`{name}`: shape does not match value count")));
        }
        entries.push(HeaderEntry { name: name.clone(), shape: t.shape.clone(), offset, len: t.values.len() });
        offset += t.values.len();
        for v in &t.values {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = Header { entries, sha256: hex::encode(Sha256::digest(&payload)) };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn decode_params(bytes: &[u8]) -> Result<ParameterMap, DareError> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(DareError::CorruptHeader("missing magic".into()));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let hlen = usize::try_from(hlen).map_err(|_| DareError::CorruptHeader("header length overflow".into()))?;
    let hend = 16usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| DareError::CorruptHeader("header runs past end of file".into()))?;
    let header: Header =
        serde_json::from_slice(&bytes[16..hend]).map_err(|e| DareError::CorruptHeader(e.to_string()))?;

    let mut expected_floats = 0usize;
    for e in &header.entries {
        if e.shape.iter().product::<usize>() != e.len {
            return Err(DareError::CorruptHeader(format!(
                "`{}`: shape {:?} does not hold {} values",
                e.name, e.shape, e.len
            )));
        }
        if e.offset != expected_floats {
            return Err(DareError::CorruptHeader(format!("`{}`: offset {} is not contiguous", e.name, e.offset)));
        }
        expected_floats += e.len;
    }
    let payload = &bytes[hend..];
    let expected = expected_floats * 4;
    if payload.len() < expected {
        return Err(DareError::TruncatedPayload { expected, found: payload.len() });
    }
    if payload.len() > expected {
        return Err(DareError::CorruptHeader(format!(
            "payload has {} trailing bytes",
            payload.len() - expected
        )));
    }
    let actual = hex::encode(Sha256::digest(payload));
    if actual != header.sha256 {
        return Err(DareError::ChecksumMismatch { expected: header.sha256, actual });
    }
    let mut map = ParameterMap::new();
    for e in header.entries {
        let raw = &payload[e.offset * 4..(e.offset + e.len) * 4];
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if map.insert(e.name.clone(), Tensor { shape: e.shape, values }).is_some() {
            return Err(DareError::CorruptHeader(format!("duplicate entry `{}`", e.name)));
        }
    }
    Ok(map)
}

pub fn save_params(map: &ParameterMap, path: &Path) -> Result<(), DareError> {
    let bytes = encode_params(map)?;
    fs::write(path, bytes).map_err(|source| DareError::Io { path: path.to_path_buf(), source })
}

pub fn load_params(path: &Path) -> Result<ParameterMap, DareError> {
    let bytes = fs::read(path).map_err(|source| DareError::Io { path: path.to_path_buf(), source })?;
    decode_params(&bytes)
}
