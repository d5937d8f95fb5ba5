//! Binary container for named f64 tensors.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "CMSR"  u32 version  u32 count
//! count × { u32 name_len, name (UTF-8), u8 dtype (0 = f64), u32 rank, rank × u64 extent, f64 payload }
//! u64 FNV-1a checksum of every preceding byte
//! ```

use std::hash::Hasher;
use std::path::Path;

use crate::denoiser::{DenoiserModel, UNetConfig};
use crate::distill::{AdamMoments, TeacherState, TrainState};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CMSR";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;

/// 64-bit FNV-1a, the container checksum.
pub fn checksum(bytes: &[u8]) -> u64 {
    let mut h = fnv::FnvHasher::default();
    h.write(bytes);
    h.finish()
}

/// Serializes named tensors in iteration order.
pub fn encode(tensors: &ParamSet) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F64);
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let sum = checksum(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated container at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Parses a container, verifying magic, version and checksum first.
pub fn decode(bytes: &[u8]) -> Result<ParamSet> {
    if bytes.len() < 4 + 4 + 4 + 8 {
        return Err(Error::Checkpoint(format!("container of {} bytes is truncated", bytes.len())));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
    if &body[..4] != MAGIC {
        return Err(Error::Checkpoint("bad magic, not a CMSR container".into()));
    }
    if checksum(body) != stored {
        return Err(Error::Checkpoint("checksum mismatch, container is corrupt or truncated".into()));
    }
    let mut r = Reader { bytes: body, pos: 4 };
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported container version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let count = r.u32()?;
    let mut set = ParamSet::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_owned();
        let dtype = r.take(1)?[0];
        if dtype != DTYPE_F64 {
            return Err(Error::Checkpoint(format!("tensor {name} has unsupported dtype {dtype}")));
        }
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .ok_or_else(|| Error::Checkpoint(format!("tensor {name} extents overflow")))?;
        let payload = r.take(numel.checked_mul(8).ok_or_else(|| Error::Checkpoint(format!("tensor {name} too large")))?)?;
        let data = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let t = Tensor::new(&shape, data).map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?;
        set.insert(name.clone(), t).map_err(|_| Error::Checkpoint(format!("duplicate tensor {name}")))?;
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint(format!("{} unexpected bytes after the last tensor", body.len() - r.pos)));
    }
    Ok(set)
}

pub fn save(path: &Path, tensors: &ParamSet) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, encode(tensors)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ParamSet> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
        other => other,
    })
}

const KIND_TEACHER: f64 = 0.0;
const KIND_STUDENT: f64 = 1.0;

fn put_scalar(set: &mut ParamSet, name: &str, v: f64) {
    set.insert(name, Tensor::scalar(v)).expect("metadata names are unique");
}

fn put_prefixed(set: &mut ParamSet, prefix: &str, params: &ParamSet) {
    for (name, t) in params.iter() {
        set.insert(format!("{prefix}.{name}"), t.clone()).expect("prefixed names are unique");
    }
}

fn scalar(set: &ParamSet, name: &str) -> Result<f64> {
    let t = set.get(name).ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
    if !t.is_scalar() {
        return Err(Error::Checkpoint(format!("tensor {name} should be a scalar, has shape {:?}", t.shape())));
    }
    Ok(t.item())
}

fn count(set: &ParamSet, name: &str) -> Result<u64> {
    let v = scalar(set, name)?;
    if v < 0.0 || v.fract() != 0.0 {
        return Err(Error::Checkpoint(format!("tensor {name} should hold a count, got {v}")));
    }
    Ok(v as u64)
}

/// Copies `prefix.*` out of `set` in the layout of `like`, naming the first
/// missing or mis-shaped tensor.
fn take_prefixed(set: &ParamSet, prefix: &str, like: &ParamSet) -> Result<ParamSet> {
    let mut out = ParamSet::new();
    for (name, expected) in like.iter() {
        let full = format!("{prefix}.{name}");
        let t = set.get(&full).ok_or_else(|| Error::Checkpoint(format!("missing tensor {full}")))?;
        if t.shape() != expected.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {full} has shape {:?}, the configured model expects {:?}",
                t.shape(),
                expected.shape()
            )));
        }
        out.insert(name, t.clone())?;
    }
    let stored = set.names().filter(|n| n.starts_with(&format!("{prefix}."))).count();
    if stored != like.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {stored} {prefix} tensors, the configured model has {}",
            like.len()
        )));
    }
    Ok(out)
}

fn put_config(set: &mut ParamSet, c: &UNetConfig) {
    put_scalar(set, "meta.unet.channels", c.channels as f64);
    put_scalar(set, "meta.unet.base_channels", c.base_channels as f64);
    put_scalar(set, "meta.unet.depth", c.depth as f64);
    put_scalar(set, "meta.unet.time_embed_dim", c.time_embed_dim as f64);
}

/// The architecture recorded in a checkpoint.
pub fn stored_config(set: &ParamSet) -> Result<UNetConfig> {
    let c = UNetConfig {
        channels: count(set, "meta.unet.channels")? as usize,
        base_channels: count(set, "meta.unet.base_channels")? as usize,
        depth: count(set, "meta.unet.depth")? as usize,
        time_embed_dim: count(set, "meta.unet.time_embed_dim")? as usize,
    };
    c.validate()?;
    Ok(c)
}

fn check_config(set: &ParamSet, expected: Option<&UNetConfig>) -> Result<UNetConfig> {
    let stored = stored_config(set)?;
    if let Some(e) = expected {
        if *e != stored {
            return Err(Error::Checkpoint(format!("checkpoint was written for {stored:?}, configured model is {e:?}")));
        }
    }
    Ok(stored)
}

pub fn teacher_to_tensors(state: &TeacherState) -> ParamSet {
    let mut set = ParamSet::new();
    put_scalar(&mut set, "meta.kind", KIND_TEACHER);
    put_config(&mut set, &state.model.config);
    put_scalar(&mut set, "meta.step", state.step as f64);
    put_scalar(&mut set, "meta.adam_updates", state.moments.updates as f64);
    put_prefixed(&mut set, "model", &state.model.params);
    put_prefixed(&mut set, "adam.m", &state.moments.m);
    put_prefixed(&mut set, "adam.v", &state.moments.v);
    set
}

pub fn teacher_from_tensors(set: &ParamSet, expected: Option<&UNetConfig>) -> Result<TeacherState> {
    if scalar(set, "meta.kind")? != KIND_TEACHER {
        return Err(Error::Checkpoint("not a teacher checkpoint".into()));
    }
    let config = check_config(set, expected)?;
    let mut model = DenoiserModel::new(config, 0)?;
    let like = model.params.clone();
    model.params = take_prefixed(set, "model", &like)?;
    let moments = AdamMoments {
        m: take_prefixed(set, "adam.m", &like)?,
        v: take_prefixed(set, "adam.v", &like)?,
        updates: count(set, "meta.adam_updates")?,
    };
    Ok(TeacherState { model, moments, step: count(set, "meta.step")? })
}

pub fn student_to_tensors(state: &TrainState, config: &UNetConfig) -> ParamSet {
    let mut set = ParamSet::new();
    put_scalar(&mut set, "meta.kind", KIND_STUDENT);
    put_config(&mut set, config);
    put_scalar(&mut set, "meta.step", state.step as f64);
    put_scalar(&mut set, "meta.adam_updates", state.moments.updates as f64);
    put_scalar(&mut set, "meta.mu", state.mu);
    put_scalar(&mut set, "meta.lr", state.lr);
    put_prefixed(&mut set, "model", &state.theta);
    put_prefixed(&mut set, "target", &state.theta_minus);
    put_prefixed(&mut set, "adam.m", &state.moments.m);
    put_prefixed(&mut set, "adam.v", &state.moments.v);
    set
}

pub fn student_from_tensors(set: &ParamSet, expected: Option<&UNetConfig>) -> Result<(UNetConfig, TrainState)> {
    if scalar(set, "meta.kind")? != KIND_STUDENT {
        return Err(Error::Checkpoint("not a student checkpoint".into()));
    }
    let config = check_config(set, expected)?;
    let like = DenoiserModel::new(config, 0)?.params;
    let state = TrainState {
        theta: take_prefixed(set, "model", &like)?,
        theta_minus: take_prefixed(set, "target", &like)?,
        moments: AdamMoments {
            m: take_prefixed(set, "adam.m", &like)?,
            v: take_prefixed(set, "adam.v", &like)?,
            updates: count(set, "meta.adam_updates")?,
        },
        step: count(set, "meta.step")?,
        mu: scalar(set, "meta.mu")?,
        lr: scalar(set, "meta.lr")?,
    };
    Ok((config, state))
}

/// Whether the checkpoint holds a distilled student.
pub fn is_student(set: &ParamSet) -> Result<bool> {
    Ok(scalar(set, "meta.kind")? == KIND_STUDENT)
}

/// The denoiser weights of either checkpoint kind (the student's θ, not θ⁻).
pub fn model_from_tensors(set: &ParamSet, expected: Option<&UNetConfig>) -> Result<DenoiserModel> {
    let config = check_config(set, expected)?;
    let mut model = DenoiserModel::new(config, 0)?;
    model.params = take_prefixed(set, "model", &model.params)?;
    Ok(model)
}
