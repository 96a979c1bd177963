//! Binary containers for latents (`NSPC`) and model checkpoints (`NSCK`).
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic [4] | version u16 | dtype u8
//! (checkpoint only) model tag u8 | metadata length u32 | metadata UTF-8
//! tensor count u32
//! per tensor: name length u32 | name | rank u8 | dims u32×rank | payload
//! CRC-32 u32 over every preceding byte
//! ```
//!
//! The metadata block is `key=value` lines. Latent files hold `z_t` then `z_b`.

use std::path::Path;

use super::nn::ModelKind;
use super::Latent;
use crate::error::{Error, Result};
use crate::scalar::{DType, Scalar};
use crate::tensor::{ParameterSet, Shape, Tensor};

pub const LATENT_MAGIC: [u8; 4] = *b"NSPC";
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"NSCK";
pub const FORMAT_VERSION: u16 = 1;
pub const SUPPORTED_VERSIONS: &[u16] = &[1];

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("value {v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn write_tensors<T: Scalar>(out: &mut Vec<u8>, tensors: &[(&str, &Tensor<T>)]) -> Result<()> {
    put_u32(out, tensors.len())?;
    for (name, t) in tensors {
        put_u32(out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        out.push(4);
        for d in t.shape().dims() {
            put_u32(out, d)?;
        }
        for &v in t.data() {
            v.write_le(out);
        }
    }
    Ok(())
}

fn seal(mut out: Vec<u8>) -> Vec<u8> {
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format(format!("truncated: need {n} bytes at offset {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")) as usize)
    }
}

/// Checks magic, version and checksum; returns the body reader and dtype.
fn open<'a>(bytes: &'a [u8], magic: [u8; 4]) -> Result<(Reader<'a>, DType)> {
    if bytes.len() < 4 || bytes[..4] != magic {
        return Err(Error::Format(format!("bad magic; expected {:?}", String::from_utf8_lossy(&magic))));
    }
    if bytes.len() < 6 {
        return Err(Error::Format("truncated header".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if !SUPPORTED_VERSIONS.contains(&version) {
        return Err(Error::Version { found: version, supported: SUPPORTED_VERSIONS.to_vec() });
    }
    if bytes.len() < 11 {
        return Err(Error::Format("truncated header".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("four bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let dtype = DType::from_tag(body[6]).ok_or_else(|| Error::Format(format!("unknown dtype tag {}", body[6])))?;
    Ok((Reader { bytes: body, pos: 7 }, dtype))
}

fn read_tensors<T: Scalar>(r: &mut Reader<'_>, dtype: DType) -> Result<Vec<(String, Tensor<T>)>> {
    let count = r.u32()?;
    let mut out = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = r.u32()?;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let rank = r.u8()? as usize;
        if !(1..=4).contains(&rank) {
            return Err(Error::Format(format!("tensor `{name}`: rank {rank} unsupported")));
        }
        let mut dims = vec![1usize; 4 - rank];
        for _ in 0..rank {
            dims.push(r.u32()?);
        }
        let shape = Shape::from_dims(&dims)?;
        let size = dtype.size();
        let payload = r.take(shape.numel().checked_mul(size).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        let data = payload
            .chunks_exact(size)
            .map(|b| match dtype {
                DType::F32 => T::c(f32::read_le(b) as f64),
                DType::F64 => T::c(f64::read_le(b)),
            })
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != r.bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", r.bytes.len() - r.pos)));
    }
    Ok(out)
}

fn header(magic: [u8; 4], dtype: DType) -> Vec<u8> {
    let mut out = magic.to_vec();
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(dtype.tag());
    out
}

pub fn write_latent<T: Scalar>(z: &Latent<T>) -> Result<Vec<u8>> {
    let mut out = header(LATENT_MAGIC, T::DTYPE);
    write_tensors(&mut out, &[("z_t", &z.z_t), ("z_b", &z.z_b)])?;
    Ok(seal(out))
}

pub fn read_latent<T: Scalar>(bytes: &[u8]) -> Result<Latent<T>> {
    let (mut r, dtype) = open(bytes, LATENT_MAGIC)?;
    let mut t = read_tensors::<T>(&mut r, dtype)?;
    if t.len() != 2 || t[0].0 != "z_t" || t[1].0 != "z_b" {
        return Err(Error::Format("latent file must hold exactly z_t then z_b".into()));
    }
    let (_, z_b) = t.pop().expect("two");
    let (_, z_t) = t.pop().expect("two");
    Latent::new(z_t, z_b)
}

pub fn save_latent<T: Scalar>(z: &Latent<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, write_latent(z)?).map_err(|e| Error::io(path, e))
}

pub fn load_latent<T: Scalar>(path: impl AsRef<Path>) -> Result<Latent<T>> {
    let path = path.as_ref();
    read_latent(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Model parameters plus free-form `key=value` metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub kind: ModelKind,
    pub metadata: Vec<(String, String)>,
    pub params: ParameterSet<T>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(kind: ModelKind, params: ParameterSet<T>) -> Self {
        Checkpoint { kind, metadata: Vec::new(), params }
    }

    pub fn with(mut self, key: &str, value: impl ToString) -> Self {
        self.set(key, value);
        self
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        match self.metadata.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => self.metadata.push((key.to_string(), value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.metadata.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Parses a required metadata entry.
    pub fn require<V: std::str::FromStr>(&self, key: &str) -> Result<V> {
        let raw = self.get(key).ok_or_else(|| Error::Format(format!("{} checkpoint lacks `{key}`", self.kind)))?;
        raw.parse().map_err(|_| Error::Format(format!("checkpoint `{key}` = {raw:?} is malformed")))
    }

    /// Errors unless the checkpoint holds a model of `kind`.
    pub fn expect_kind(&self, kind: ModelKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Format(format!("checkpoint holds a {} model, expected {kind}", self.kind)));
        }
        Ok(())
    }
}

pub fn write_checkpoint<T: Scalar>(ckpt: &Checkpoint<T>) -> Result<Vec<u8>> {
    let mut out = header(CHECKPOINT_MAGIC, T::DTYPE);
    out.push(ckpt.kind.tag());
    let mut meta = String::new();
    for (k, v) in &ckpt.metadata {
        if k.contains(['=', '\n']) || v.contains('\n') {
            return Err(Error::Format(format!("metadata entry {k:?} cannot be stored")));
        }
        meta.push_str(&format!("{k}={v}\n"));
    }
    put_u32(&mut out, meta.len())?;
    out.extend_from_slice(meta.as_bytes());
    let tensors: Vec<(&str, &Tensor<T>)> = ckpt.params.iter().map(|p| (p.name.as_str(), &p.value)).collect();
    write_tensors(&mut out, &tensors)?;
    Ok(seal(out))
}

/// Loaded parameters are all marked trainable.
pub fn read_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let (mut r, dtype) = open(bytes, CHECKPOINT_MAGIC)?;
    let tag = r.u8()?;
    let kind = ModelKind::from_tag(tag).ok_or_else(|| Error::Format(format!("unknown model tag {tag}")))?;
    let len = r.u32()?;
    let text = std::str::from_utf8(r.take(len)?).map_err(|_| Error::Format("metadata is not UTF-8".into()))?;
    let mut metadata = Vec::new();
    for line in text.lines().filter(|l| !l.is_empty()) {
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Format(format!("metadata line {line:?}")))?;
        metadata.push((k.to_string(), v.to_string()));
    }
    let mut params = ParameterSet::new();
    for (name, t) in read_tensors::<T>(&mut r, dtype)? {
        params.push(name, t, true)?;
    }
    Ok(Checkpoint { kind, metadata, params })
}

pub fn save_checkpoint<T: Scalar>(ckpt: &Checkpoint<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, write_checkpoint(ckpt)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<Checkpoint<T>> {
    let path = path.as_ref();
    read_checkpoint(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}
