//! The `.koam` portable model container.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "KOAM"            4 bytes magic
//! version           u32 (= 1)
//! tensor_count      u32
//! metadata_count    u32
//! metadata entries  (u32 key_len, key, u32 val_len, val) * metadata_count
//! tensor records    * tensor_count:
//!     u32 name_len, name bytes
//!     u8  dtype code (0 = f32, 1 = f16, 2 = i8)
//!     u8  ndim, u32 * ndim dims
//!     u8  has_quant, [f32 scale, i32 zero_point]
//!     u64 byte_len, payload
//! ```

use std::collections::HashMap;
use std::io::{self, Read, Write};

use half::f16;
use thiserror::Error;

use crate::tensor::{fmt_dims, DType, QuantParams, Tensor, TensorData, TensorError};

pub const MAGIC: &[u8; 4] = b"KOAM";
pub const FORMAT_VERSION: u32 = 1;
/// Size of a file with no metadata and no tensors.
pub const HEADER_LEN: usize = 16;

pub const ARCH_KEY: &str = "arch";
pub const QUANT_POLICY_KEY: &str = "quant_policy";

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic: expected \"KOAM\"")]
    BadMagic,
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated record '{name}' at offset {offset} while reading {field}")]
    TruncatedRecord {
        name: String,
        offset: usize,
        field: &'static str,
    },
    #[error("duplicate tensor name '{0}'")]
    DuplicateName(String),
    #[error("invalid {field} in record '{name}' at offset {offset}: {reason}")]
    InvalidRecord {
        name: String,
        offset: usize,
        field: &'static str,
        reason: String,
    },
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// A named tensor store plus string metadata.
#[derive(Clone, Debug, Default)]
pub struct ModelArtifact {
    format_version: u32,
    metadata: Vec<(String, String)>,
    tensors: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl PartialEq for ModelArtifact {
    fn eq(&self, other: &Self) -> bool {
        self.format_version == other.format_version
            && self.metadata == other.metadata
            && self.tensors == other.tensors
    }
}

impl ModelArtifact {
    pub fn new() -> Self {
        Self {
            format_version: FORMAT_VERSION,
            ..Default::default()
        }
    }

    pub fn format_version(&self) -> u32 {
        self.format_version
    }

    pub fn metadata(&self) -> &[(String, String)] {
        &self.metadata
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    /// Sets a metadata value, replacing an existing key in place.
    pub fn set_meta(&mut self, key: impl Into<String>, value: impl Into<String>) {
        let (key, value) = (key.into(), value.into());
        match self.metadata.iter_mut().find(|(k, _)| *k == key) {
            Some(entry) => entry.1 = value,
            None => self.metadata.push((key, value)),
        }
    }

    /// Appends a tensor; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<(), FormatError> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(FormatError::DuplicateName(name));
        }
        self.index.insert(name.clone(), self.tensors.len());
        self.tensors.push((name, tensor));
        Ok(())
    }

    /// Replaces an existing tensor or appends a new one.
    pub fn upsert(&mut self, name: &str, tensor: Tensor) {
        match self.index.get(name) {
            Some(&i) => self.tensors[i].1 = tensor,
            None => {
                self.index.insert(name.to_string(), self.tensors.len());
                self.tensors.push((name.to_string(), tensor));
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i].1)
    }

    pub fn tensors(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Exact size of the serialized file in bytes.
    pub fn encoded_len(&self) -> usize {
        let meta: usize = self
            .metadata
            .iter()
            .map(|(k, v)| 8 + k.len() + v.len())
            .sum();
        let recs: usize = self
            .tensors
            .iter()
            .map(|(n, t)| record_overhead(n, t) + t.byte_len())
            .sum();
        HEADER_LEN + meta + recs
    }

    /// Sum of payload bytes over the tensors selected by `filter`.
    pub fn payload_bytes(&self, filter: impl Fn(&str, &Tensor) -> bool) -> usize {
        self.tensors
            .iter()
            .filter(|(n, t)| filter(n, t))
            .map(|(_, t)| t.byte_len())
            .sum()
    }
}

/// Bytes a record spends outside its payload.
pub fn record_overhead(name: &str, t: &Tensor) -> usize {
    4 + name.len() + 1 + 1 + 4 * t.ndim() + 1 + if t.quant().is_some() { 8 } else { 0 } + 8
}

/// Serializes `artifact` to `sink`, returning the number of bytes written.
pub fn save_model<W: Write>(artifact: &ModelArtifact, mut sink: W) -> Result<u64, FormatError> {
    let mut buf = Vec::with_capacity(artifact.encoded_len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&artifact.format_version.to_le_bytes());
    buf.extend_from_slice(&(artifact.tensors.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(artifact.metadata.len() as u32).to_le_bytes());
    for (k, v) in &artifact.metadata {
        put_str(&mut buf, k);
        put_str(&mut buf, v);
    }
    for (name, t) in &artifact.tensors {
        put_str(&mut buf, name);
        buf.push(t.dtype().code());
        buf.push(t.ndim() as u8);
        for &d in t.dims() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        match t.quant() {
            Some(q) => {
                buf.push(1);
                buf.extend_from_slice(&q.scale().to_le_bytes());
                buf.extend_from_slice(&q.zero_point().to_le_bytes());
            }
            None => buf.push(0),
        }
        buf.extend_from_slice(&(t.byte_len() as u64).to_le_bytes());
        match t.data() {
            TensorData::F32(v) => v
                .iter()
                .for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
            TensorData::F16(v) => v
                .iter()
                .for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
            TensorData::I8(v) => buf.extend(v.iter().map(|&x| x as u8)),
        }
    }
    sink.write_all(&buf)?;
    sink.flush()?;
    Ok(buf.len() as u64)
}

pub fn save_to_path(artifact: &ModelArtifact, path: &std::path::Path) -> Result<u64, FormatError> {
    let f = std::fs::File::create(path)?;
    save_model(artifact, io::BufWriter::new(f))
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, name: &str, field: &'static str) -> Result<&'a [u8], FormatError> {
        if self.bytes.len() - self.pos < n {
            return Err(FormatError::TruncatedRecord {
                name: name.to_string(),
                offset: self.pos,
                field,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, name: &str, field: &'static str) -> Result<u8, FormatError> {
        Ok(self.take(1, name, field)?[0])
    }

    fn u32(&mut self, name: &str, field: &'static str) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(
            self.take(4, name, field)?.try_into().unwrap(),
        ))
    }

    fn u64(&mut self, name: &str, field: &'static str) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(
            self.take(8, name, field)?.try_into().unwrap(),
        ))
    }

    fn string(&mut self, name: &str, field: &'static str) -> Result<String, FormatError> {
        let at = self.pos;
        let len = self.u32(name, field)? as usize;
        let raw = self.take(len, name, field)?;
        String::from_utf8(raw.to_vec()).map_err(|e| FormatError::InvalidRecord {
            name: name.to_string(),
            offset: at,
            field,
            reason: e.to_string(),
        })
    }
}

/// Parses a `.koam` stream into a validated artifact.
pub fn load_model<R: Read>(mut source: R) -> Result<ModelArtifact, FormatError> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    decode(&bytes)
}

pub fn load_from_path(path: &std::path::Path) -> Result<ModelArtifact, FormatError> {
    decode(&std::fs::read(path)?)
}

pub fn decode(bytes: &[u8]) -> Result<ModelArtifact, FormatError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(FormatError::BadMagic);
    }
    let mut cur = Cursor { bytes, pos: 4 };
    const HDR: &str = "<header>";
    let version = cur.u32(HDR, "version")?;
    if version != FORMAT_VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let ntensors = cur.u32(HDR, "tensor_count")? as usize;
    let nmeta = cur.u32(HDR, "metadata_count")? as usize;

    let mut art = ModelArtifact::new();
    for _ in 0..nmeta {
        let k = cur.string("<metadata>", "key")?;
        let v = cur.string(&k, "value")?;
        art.set_meta(k, v);
    }

    for i in 0..ntensors {
        let rec_start = cur.pos;
        let name = cur.string(&format!("<tensor #{i}>"), "name")?;
        let invalid =
            |offset: usize, field: &'static str, reason: String| FormatError::InvalidRecord {
                name: name.clone(),
                offset,
                field,
                reason,
            };
        let at = cur.pos;
        let code = cur.u8(&name, "dtype")?;
        let dtype = DType::from_code(code)
            .ok_or_else(|| invalid(at, "dtype", format!("unknown dtype code {code}")))?;
        let ndim = cur.u8(&name, "ndim")? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(cur.u32(&name, "dims")? as usize);
        }
        let at = cur.pos;
        let quant = match cur.u8(&name, "has_quant")? {
            0 => None,
            1 => {
                let scale = f32::from_le_bytes(cur.take(4, &name, "scale")?.try_into().unwrap());
                let zp = i32::from_le_bytes(cur.take(4, &name, "zero_point")?.try_into().unwrap());
                Some(QuantParams::new(scale, zp).map_err(|e| invalid(at, "quant", e.to_string()))?)
            }
            other => return Err(invalid(at, "has_quant", format!("flag {other} is not 0/1"))),
        };
        let at = cur.pos;
        let byte_len = cur.u64(&name, "byte_len")? as usize;
        let numel: usize = dims.iter().product();
        if ndim == 0 || numel.checked_mul(dtype.width()) != Some(byte_len) {
            return Err(invalid(
                at,
                "byte_len",
                format!(
                    "{byte_len} bytes does not match dims {} at {dtype}",
                    fmt_dims(&dims)
                ),
            ));
        }
        let payload = cur.take(byte_len, &name, "payload")?;
        let data = match dtype {
            DType::F32 => TensorData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::F16 => TensorData::F16(
                payload
                    .chunks_exact(2)
                    .map(|c| f16::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::I8 => TensorData::I8(payload.iter().map(|&b| b as i8).collect()),
        };
        let tensor = Tensor::new(dims, data, quant)
            .map_err(|e| invalid(rec_start, "tensor", e.to_string()))?;
        art.insert(name, tensor)?;
    }
    if cur.pos != bytes.len() {
        return Err(FormatError::InvalidRecord {
            name: "<trailer>".into(),
            offset: cur.pos,
            field: "eof",
            reason: format!("{} trailing bytes", bytes.len() - cur.pos),
        });
    }
    Ok(art)
}

/// Line-oriented listing `name dtype dims bytes`, one tensor per line.
pub fn manifest(artifact: &ModelArtifact) -> String {
    let mut out = String::new();
    for (name, t) in artifact.tensors() {
        out.push_str(&format!(
            "{name}\t{}\t{}\t{}\n",
            t.dtype(),
            fmt_dims(t.dims()),
            t.byte_len()
        ));
    }
    out
}

/// Lines present in exactly one of two manifests, prefixed `-` / `+`.
pub fn manifest_diff(before: &str, after: &str) -> Vec<String> {
    let a: Vec<&str> = before.lines().collect();
    let b: Vec<&str> = after.lines().collect();
    let mut out: Vec<String> = a
        .iter()
        .filter(|l| !b.contains(l))
        .map(|l| format!("- {l}"))
        .collect();
    out.extend(
        b.iter()
            .filter(|l| !a.contains(l))
            .map(|l| format!("+ {l}")),
    );
    out
}
