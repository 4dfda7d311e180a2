//! Binary tensor container and training checkpoints.
//!
//! Layout: magic `HDRT`, u32 version, u32-length-prefixed UTF-8 header of
//! `key = value` lines, then records `[u32 path len, path, u8 dtype tag,
//! u32 rank, u64 extents.., little-endian payload]` up to a trailing
//! CRC32 of everything before it. All integers are little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{parse_kv, NetworkConfig};
use crate::objective::FeatureNet;
use crate::params::Weights;
use crate::tensor::{DType, Scalar, Tensor};
use crate::trainer::{OptimState, TrainConfig};

pub const MAGIC: &[u8; 4] = b"HDRT";
pub const VERSION: u32 = 1;
const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";

/// A tensor as stored, in its on-disk precision.
#[derive(Debug, Clone, PartialEq)]
pub enum StoredTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl StoredTensor {
    pub fn dtype(&self) -> DType {
        match self {
            Self::F32(_) => DType::F32,
            Self::F64(_) => DType::F64,
        }
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        match self {
            Self::F32(t) => t.cast(),
            Self::F64(t) => t.cast(),
        }
    }

    pub fn of<T: Scalar>(t: &Tensor<T>) -> Self {
        match T::DTYPE {
            DType::F32 => Self::F32(t.cast()),
            DType::F64 => Self::F64(t.cast()),
        }
    }
}

/// Decoded container contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub header: String,
    pub records: Vec<(String, StoredTensor)>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn len_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Checkpoint(format!("{what} too large ({n})")))
}

fn put_tensor<T: Scalar>(out: &mut Vec<u8>, t: &Tensor<T>) -> Result<()> {
    out.push(T::DTYPE.tag());
    put_u32(out, len_u32(t.rank(), "rank")?);
    for &e in t.shape() {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(out);
    }
    Ok(())
}

impl Container {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u32(&mut out, len_u32(self.header.len(), "header")?);
        out.extend_from_slice(self.header.as_bytes());
        for (path, t) in &self.records {
            put_u32(&mut out, len_u32(path.len(), "path")?);
            out.extend_from_slice(path.as_bytes());
            match t {
                StoredTensor::F32(t) => put_tensor(&mut out, t)?,
                StoredTensor::F64(t) => put_tensor(&mut out, t)?,
            }
        }
        let crc = crc32fast::hash(&out);
        put_u32(&mut out, crc);
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let trunc = || Error::Checkpoint("truncated file".into());
        if bytes.len() < 16 {
            return Err(trunc());
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Checkpoint("bad magic, not a checkpoint".into()));
        }
        let mut r = Reader { buf: bytes, pos: 4 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version} is not supported (expected {VERSION})"
            )));
        }
        let body_end = bytes.len() - 4;
        let stored_crc = u32::from_le_bytes(bytes[body_end..].try_into().expect("4 bytes"));
        let hlen = r.u32()? as usize;
        let header = std::str::from_utf8(r.take(hlen)?)
            .map_err(|_| Error::Checkpoint("header is not UTF-8".into()))?
            .to_string();
        let mut records = Vec::new();
        while r.pos < body_end {
            let plen = r.u32()? as usize;
            let path = std::str::from_utf8(r.take(plen)?)
                .map_err(|_| Error::Checkpoint("record path is not UTF-8".into()))?
                .to_string();
            let tag = r.take(1)?[0];
            let dtype = DType::from_tag(tag)
                .ok_or_else(|| Error::Checkpoint(format!("record `{path}`: unknown dtype tag {tag}")))?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                shape.push(usize::try_from(r.u64()?).map_err(|_| trunc())?);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &e| a.checked_mul(e))
                .ok_or_else(trunc)?;
            let raw = r.take(n.checked_mul(dtype.size_bytes()).ok_or_else(trunc)?)?;
            let t = match dtype {
                DType::F32 => StoredTensor::F32(Tensor::new(shape, raw.chunks_exact(4).map(f32::read_le).collect())?),
                DType::F64 => StoredTensor::F64(Tensor::new(shape, raw.chunks_exact(8).map(f64::read_le).collect())?),
            };
            records.push((path, t));
        }
        if r.pos != body_end {
            return Err(trunc());
        }
        if crc32fast::hash(&bytes[..body_end]) != stored_crc {
            return Err(Error::Checkpoint("CRC mismatch, file is corrupt".into()));
        }
        Ok(Self { header, records })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.encode()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len().saturating_sub(4))
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.buf[self.pos..end];
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

/// Everything needed to resume training or run inference.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub weights: Weights<T>,
    pub optim: OptimState<T>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn step(&self) -> u64 {
        self.optim.step
    }

    fn header(&self) -> String {
        let mut h = format!("kind = checkpoint\ndtype = {}\n", T::DTYPE);
        h.push_str(&self.network.to_kv());
        h.push_str(&self.train.to_kv());
        h.push_str(&self.optim.header_kv());
        h
    }

    pub fn to_container(&self) -> Container {
        let mut records: Vec<(String, StoredTensor)> = self
            .weights
            .iter()
            .map(|(k, v)| (k.clone(), StoredTensor::of(v)))
            .collect();
        for (k, v) in self.optim.m.iter() {
            records.push((format!("{ADAM_M}{k}"), StoredTensor::of(v)));
        }
        for (k, v) in self.optim.v.iter() {
            records.push((format!("{ADAM_V}{k}"), StoredTensor::of(v)));
        }
        Container {
            header: self.header(),
            records,
        }
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let kv = parse_kv(&c.header)?;
        let get = |key: &str| kv.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str());
        if get("kind") != Some("checkpoint") {
            return Err(Error::Checkpoint("file is not a training checkpoint".into()));
        }
        let mut network = NetworkConfig::default();
        let mut train = TrainConfig::default();
        let mut optim_kv = Vec::new();
        for (k, v) in &kv {
            if NetworkConfig::is_key(k) {
                network.set(k, v)?;
            } else if let Some(rest) = k.strip_prefix("train.") {
                train.set(rest, v)?;
            } else if k.starts_with("optim.") {
                optim_kv.push((k.clone(), v.clone()));
            } else if k != "kind" && k != "dtype" {
                return Err(Error::Checkpoint(format!("unknown header key `{k}`")));
            }
        }
        network.validate()?;
        let specs = network.param_specs();
        let known: BTreeMap<&str, &[usize]> = specs.iter().map(|s| (s.path.as_str(), s.shape.as_slice())).collect();
        let (mut w, mut m, mut v) = (BTreeMap::new(), BTreeMap::new(), BTreeMap::new());
        for (path, t) in &c.records {
            let (target, key) = if let Some(p) = path.strip_prefix(ADAM_M) {
                (&mut m, p)
            } else if let Some(p) = path.strip_prefix(ADAM_V) {
                (&mut v, p)
            } else {
                (&mut w, path.as_str())
            };
            let shape = known
                .get(key)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter path `{path}`")))?;
            let t = t.cast::<T>();
            if t.shape() != *shape {
                return Err(Error::Checkpoint(format!(
                    "parameter `{path}` has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            target.insert(key.to_string(), t);
        }
        let weights = Weights::from_map(w);
        weights
            .check_against(&specs)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let optim = OptimState::from_parts(Weights::from_map(m), Weights::from_map(v), &optim_kv, &weights)?;
        Ok(Self {
            network,
            train,
            weights,
            optim,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    /// Loads a checkpoint, converting stored tensors to `T`.
    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }
}

/// Precision recorded in a checkpoint header.
pub fn stored_dtype(path: &Path) -> Result<DType> {
    let c = Container::read(path)?;
    let kv = parse_kv(&c.header)?;
    kv.iter()
        .find(|(k, _)| k == "dtype")
        .ok_or_else(|| Error::Checkpoint("header lacks a dtype".into()))?
        .1
        .parse()
}

pub fn save_feature_net<T: Scalar>(net: &FeatureNet<T>, path: &Path) -> Result<()> {
    let taps: Vec<String> = net.taps().iter().map(usize::to_string).collect();
    Container {
        header: format!("kind = feature_net\ntaps = {}\n", taps.join(",")),
        records: net.weights().iter().map(|(k, v)| (k.clone(), StoredTensor::of(v))).collect(),
    }
    .write(path)
}

pub fn load_feature_net<T: Scalar>(path: &Path) -> Result<FeatureNet<T>> {
    let c = Container::read(path)?;
    let kv = parse_kv(&c.header)?;
    let get = |key: &str| kv.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str());
    if get("kind") != Some("feature_net") {
        return Err(Error::Checkpoint(format!("{}: not a feature-net file", path.display())));
    }
    let taps = get("taps")
        .ok_or_else(|| Error::Checkpoint("feature-net header lacks taps".into()))?
        .split(',')
        .map(|t| t.trim().parse::<usize>().map_err(|_| Error::Checkpoint(format!("bad tap `{t}`"))))
        .collect::<Result<Vec<_>>>()?;
    let map = c.records.iter().map(|(k, t)| (k.clone(), t.cast::<T>())).collect();
    FeatureNet::from_weights(Weights::from_map(map), taps)
}
