//! Versioned binary checkpoints for both networks.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "GNFCKPT\0"
//! version    u32      CHECKPOINT_VERSION
//! type tag   u32      1 = HRTF-P, 2 = HRTF-U
//! header     u64 byte length, then UTF-8 JSON hyperparameters
//! tensors    u32 count, then per tensor:
//!              u32 name length, UTF-8 name,
//!              u32 rank, rank × u64 dims,
//!              product(dims) × f64 values
//! ```
//!
//! Tensor names are the parameter names plus `rff.b`, `normalizer.mean`,
//! `normalizer.scale` and (HRTF-P only) `clue.mean`, `clue.std`.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, ParamStore, Tensor};
use crate::features::{FeatureKind, RffEncoder, Standardizer};
use crate::graphs::SpatialParams;
use crate::model_p::{ModelP, PDims, PSetup, Wiring};
use crate::model_u::{ModelU, UDims};
use crate::nn::Normalizer;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GNFCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u32)]
pub enum ModelTag {
    Personalization = 1,
    Upsampling = 2,
}

impl ModelTag {
    fn from_u32(v: u32) -> Option<Self> {
        match v {
            1 => Some(ModelTag::Personalization),
            2 => Some(ModelTag::Upsampling),
            _ => None,
        }
    }
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("I/O error on {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("unknown model type tag {0}")]
    UnknownTag(u32),
    #[error("expected a {expected:?} checkpoint, found {found:?}")]
    WrongModel { expected: ModelTag, found: ModelTag },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint does not match the model it describes: {0}")]
    Mismatch(String),
}

impl From<AutodiffError> for CheckpointError {
    fn from(e: AutodiffError) -> Self {
        CheckpointError::Mismatch(e.to_string())
    }
}

/// Decoded file contents before model reconstruction.
#[derive(Clone, Debug, PartialEq)]
pub struct RawCheckpoint {
    pub tag: ModelTag,
    pub header: String,
    pub tensors: Vec<(String, Tensor)>,
}

impl RawCheckpoint {
    pub fn tensor(&self, name: &str) -> Result<&Tensor, CheckpointError> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| CheckpointError::Mismatch(format!("missing tensor {name}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tag as u32).to_le_bytes());
        out.extend_from_slice(&(self.header.len() as u64).to_le_bytes());
        out.extend_from_slice(self.header.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let raw_tag = read_u32(&mut r)?;
        let tag = ModelTag::from_u32(raw_tag).ok_or(CheckpointError::UnknownTag(raw_tag))?;
        let header_len = read_len(read_u64(&mut r)?)?;
        let header = read_string(&mut r, header_len)?;
        let count = read_u32(&mut r)? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let name = read_string(&mut r, name_len)?;
            let rank = read_u32(&mut r)? as usize;
            let shape = (0..rank).map(|_| read_u64(&mut r).and_then(read_len)).collect::<Result<Vec<_>, _>>()?;
            let n = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
            let n = n.filter(|&n| n.checked_mul(8).is_some_and(|b| b <= r.len())).ok_or_else(|| {
                CheckpointError::Malformed(format!("tensor {name} of shape {shape:?} exceeds the file"))
            })?;
            let data = (0..n).map(|_| read_f64(&mut r)).collect::<Result<Vec<_>, _>>()?;
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if !r.is_empty() {
            return Err(CheckpointError::Malformed(format!("{} trailing bytes", r.len())));
        }
        Ok(Self { tag, header, tensors })
    }

    pub fn write(&self, path: &Path) -> Result<(), CheckpointError> {
        let io = |source| CheckpointError::Io { path: path.display().to_string(), source };
        let mut f = fs::File::create(path).map_err(io)?;
        f.write_all(&self.to_bytes()).map_err(io)
    }

    pub fn read(path: &Path) -> Result<Self, CheckpointError> {
        let bytes =
            fs::read(path).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
        Self::from_bytes(&bytes)
    }

    fn expect(&self, tag: ModelTag) -> Result<(), CheckpointError> {
        if self.tag == tag {
            Ok(())
        } else {
            Err(CheckpointError::WrongModel { expected: tag, found: self.tag })
        }
    }

    fn header_as<T: DeserializeOwned>(&self) -> Result<T, CheckpointError> {
        serde_json::from_str(&self.header).map_err(|e| CheckpointError::Malformed(format!("header: {e}")))
    }
}

fn truncated() -> CheckpointError {
    CheckpointError::Malformed("truncated".into())
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<(), CheckpointError> {
    r.read_exact(buf).map_err(|_| truncated())
}

fn read_u32(r: &mut &[u8]) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut &[u8]) -> Result<u64, CheckpointError> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut &[u8]) -> Result<f64, CheckpointError> {
    Ok(f64::from_bits(read_u64(r)?))
}

fn read_len(v: u64) -> Result<usize, CheckpointError> {
    usize::try_from(v).map_err(|_| truncated())
}

fn read_string(r: &mut &[u8], len: usize) -> Result<String, CheckpointError> {
    if len > r.len() {
        return Err(truncated());
    }
    let (head, rest) = r.split_at(len);
    *r = rest;
    String::from_utf8(head.to_vec()).map_err(|_| CheckpointError::Malformed("name is not UTF-8".into()))
}

fn params(store: &ParamStore) -> impl Iterator<Item = (String, Tensor)> + '_ {
    store.iter().map(|(n, t)| (n.to_string(), t.clone()))
}

fn normalizer_tensors(n: &Normalizer) -> [(String, Tensor); 2] {
    [
        ("normalizer.mean".into(), Tensor::vector(n.mean.clone())),
        ("normalizer.scale".into(), Tensor::vector(vec![n.scale])),
    ]
}

fn read_normalizer(raw: &RawCheckpoint) -> Result<Normalizer, CheckpointError> {
    let scale = raw.tensor("normalizer.scale")?.data();
    if scale.len() != 1 {
        return Err(CheckpointError::Mismatch("normalizer.scale must hold one value".into()));
    }
    Ok(Normalizer { mean: raw.tensor("normalizer.mean")?.data().to_vec(), scale: scale[0] })
}

/// Loads every stored parameter and checks that none is missing.
fn restore_store(store: &mut ParamStore, raw: &RawCheckpoint) -> Result<(), CheckpointError> {
    let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
    for n in &names {
        raw.tensor(n)?;
    }
    let entries = raw.tensors.iter().filter(|(n, _)| names.contains(n)).map(|(n, t)| (n.as_str(), t));
    store.load_values(entries)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PHeader {
    dims: PDims,
    wiring: Wiring,
    retrieval: FeatureKind,
    m: usize,
    clue_feature: FeatureKind,
    measured: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct UHeader {
    dims: UDims,
    spatial: SpatialParams,
}

pub fn model_p_to_raw(model: &ModelP) -> RawCheckpoint {
    let s = &model.setup;
    let header = PHeader {
        dims: model.dims.clone(),
        wiring: model.wiring,
        retrieval: s.retrieval,
        m: s.m,
        clue_feature: s.clue_feature,
        measured: s.measured.clone(),
    };
    let mut tensors: Vec<(String, Tensor)> = params(&model.store).collect();
    tensors.push(("rff.b".into(), model.rff.matrix().clone()));
    tensors.extend(normalizer_tensors(&model.normalizer));
    tensors.push(("clue.mean".into(), Tensor::vector(s.clue_standardizer.mean.clone())));
    tensors.push(("clue.std".into(), Tensor::vector(s.clue_standardizer.std.clone())));
    RawCheckpoint {
        tag: ModelTag::Personalization,
        header: serde_json::to_string(&header).expect("header serializes"),
        tensors,
    }
}

pub fn model_p_from_raw(raw: &RawCheckpoint) -> Result<ModelP, CheckpointError> {
    raw.expect(ModelTag::Personalization)?;
    let h: PHeader = raw.header_as()?;
    let setup = PSetup {
        retrieval: h.retrieval,
        m: h.m,
        clue_feature: h.clue_feature,
        measured: h.measured,
        clue_standardizer: Standardizer {
            mean: raw.tensor("clue.mean")?.data().to_vec(),
            std: raw.tensor("clue.std")?.data().to_vec(),
        },
    };
    let mut model =
        ModelP::new(h.dims, h.wiring, setup, read_normalizer(raw)?, 0).map_err(CheckpointError::Mismatch)?;
    let rff =
        RffEncoder::from_matrix(raw.tensor("rff.b")?.clone()).map_err(|e| CheckpointError::Mismatch(e.to_string()))?;
    if rff.in_dim() != model.rff.in_dim() || rff.out_dim() != model.rff.out_dim() {
        return Err(CheckpointError::Mismatch("RFF matrix shape".into()));
    }
    model.rff = rff;
    restore_store(&mut model.store, raw)?;
    Ok(model)
}

pub fn model_u_to_raw(model: &ModelU) -> RawCheckpoint {
    let header = UHeader { dims: model.dims.clone(), spatial: model.spatial };
    let mut tensors: Vec<(String, Tensor)> = params(&model.store).collect();
    tensors.extend(normalizer_tensors(&model.normalizer));
    RawCheckpoint {
        tag: ModelTag::Upsampling,
        header: serde_json::to_string(&header).expect("header serializes"),
        tensors,
    }
}

pub fn model_u_from_raw(raw: &RawCheckpoint) -> Result<ModelU, CheckpointError> {
    raw.expect(ModelTag::Upsampling)?;
    let h: UHeader = raw.header_as()?;
    let mut model = ModelU::new(h.dims, h.spatial, read_normalizer(raw)?, 0).map_err(CheckpointError::Mismatch)?;
    restore_store(&mut model.store, raw)?;
    Ok(model)
}

pub fn save_model_p(model: &ModelP, path: &Path) -> Result<(), CheckpointError> {
    model_p_to_raw(model).write(path)
}

pub fn load_model_p(path: &Path) -> Result<ModelP, CheckpointError> {
    model_p_from_raw(&RawCheckpoint::read(path)?)
}

pub fn save_model_u(model: &ModelU, path: &Path) -> Result<(), CheckpointError> {
    model_u_to_raw(model).write(path)
}

pub fn load_model_u(path: &Path) -> Result<ModelU, CheckpointError> {
    model_u_from_raw(&RawCheckpoint::read(path)?)
}
