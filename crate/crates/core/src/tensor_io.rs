//! Dense tensors and the `DRUMTNSR` archive format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "DRUMTNSR"
//! version      u32      1
//! entry count  u32
//! entry*:
//!   name len   u32
//!   name       UTF-8 bytes
//!   dtype      u8       0 = real32, 1 = complex64 (interleaved re/im real32)
//!   ndim       u32
//!   dims       u64 * ndim
//!   payload    f32 * product(dims) * (1 | 2)
//! ```
//!
//! Arrays are row-major. Stacks keep the contrast axis slowest.

use std::collections::HashSet;
use std::fs;
use std::io;
use std::path::Path;

use ndarray::{ArrayD, ArrayView, Dimension, IxDyn};
use num_complex::Complex;
use thiserror::Error;

use crate::c64;

pub const MAGIC: &[u8; 8] = b"DRUMTNSR";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TensorIoError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("duplicate entry name `{0}`")]
    DuplicateName(String),
    #[error("bad magic {0:?}, expected \"DRUMTNSR\"")]
    BadMagic([u8; 8]),
    #[error("unsupported archive version {0}")]
    UnsupportedVersion(u32),
    #[error("archive truncated while reading {0}")]
    Truncated(String),
    #[error("entry `{name}`: unknown dtype code {code}")]
    UnknownDType { name: String, code: u8 },
    #[error("entry `{name}`: invalid dims {dims:?}")]
    InvalidDims { name: String, dims: Vec<usize> },
    #[error("entry `{name}`: payload has {got} values, dims imply {expected}")]
    PayloadMismatch {
        name: String,
        expected: usize,
        got: usize,
    },
    #[error("entry name is not valid UTF-8")]
    InvalidName,
    #[error("entry `{name}`: expected {expected:?} tensor, found {found:?}")]
    DTypeMismatch {
        name: String,
        expected: DType,
        found: DType,
    },
    #[error("entry `{name}`: expected {expected} dims, found {found:?}")]
    RankMismatch {
        name: String,
        expected: usize,
        found: Vec<usize>,
    },
    #[error("archive has no entry named `{0}`")]
    MissingEntry(String),
}

pub type Result<T> = std::result::Result<T, TensorIoError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    Real32,
    Complex64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::Real32 => 0,
            DType::Complex64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::Real32),
            1 => Some(DType::Complex64),
            _ => None,
        }
    }

    /// Number of real32 values per element.
    pub fn width(self) -> usize {
        match self {
            DType::Real32 => 1,
            DType::Complex64 => 2,
        }
    }
}

/// A named dense tensor stored as real32 values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    name: String,
    dims: Vec<usize>,
    dtype: DType,
    data: Vec<f32>,
}

impl Tensor {
    /// Build a tensor from raw real32 values (interleaved for complex).
    pub fn new(
        name: impl Into<String>,
        dims: Vec<usize>,
        dtype: DType,
        data: Vec<f32>,
    ) -> Result<Self> {
        let name = name.into();
        let count = element_count(&dims).ok_or_else(|| TensorIoError::InvalidDims {
            name: name.clone(),
            dims: dims.clone(),
        })?;
        let expected = count * dtype.width();
        if data.len() != expected {
            return Err(TensorIoError::PayloadMismatch {
                name,
                expected,
                got: data.len(),
            });
        }
        Ok(Self {
            name,
            dims,
            dtype,
            data,
        })
    }

    pub fn from_real<D: Dimension>(name: impl Into<String>, a: ArrayView<'_, f64, D>) -> Self {
        let dims = a.shape().to_vec();
        let data = a.iter().map(|&v| v as f32).collect();
        Self::new(name, normalize_dims(dims), DType::Real32, data)
            .expect("array shape is consistent by construction")
    }

    pub fn from_complex<D: Dimension>(name: impl Into<String>, a: ArrayView<'_, c64, D>) -> Self {
        let dims = a.shape().to_vec();
        let mut data = Vec::with_capacity(a.len() * 2);
        for v in a.iter() {
            data.push(v.re as f32);
            data.push(v.im as f32);
        }
        Self::new(name, normalize_dims(dims), DType::Complex64, data)
            .expect("array shape is consistent by construction")
    }

    /// 1-d real tensor from a non-empty slice.
    pub fn from_vec(name: impl Into<String>, values: &[f64]) -> Self {
        assert!(!values.is_empty(), "tensor extents must be positive");
        let data: Vec<f32> = values.iter().map(|&v| v as f32).collect();
        Self::new(name, vec![data.len()], DType::Real32, data).expect("1-d tensor")
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    /// Raw real32 payload (interleaved re/im for complex tensors).
    pub fn raw(&self) -> &[f32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dtype.width()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn to_real(&self) -> Result<ArrayD<f64>> {
        self.expect_dtype(DType::Real32)?;
        let v = self.data.iter().map(|&x| x as f64).collect();
        Ok(ArrayD::from_shape_vec(IxDyn(&self.dims), v).expect("dims checked on construction"))
    }

    pub fn to_complex(&self) -> Result<ArrayD<c64>> {
        self.expect_dtype(DType::Complex64)?;
        let v = self
            .data
            .chunks_exact(2)
            .map(|p| Complex::new(p[0] as f64, p[1] as f64))
            .collect();
        Ok(ArrayD::from_shape_vec(IxDyn(&self.dims), v).expect("dims checked on construction"))
    }

    /// Checks the number of dimensions, returning `self` for chaining.
    pub fn expect_rank(&self, ndim: usize) -> Result<&Self> {
        if self.dims.len() != ndim {
            return Err(TensorIoError::RankMismatch {
                name: self.name.clone(),
                expected: ndim,
                found: self.dims.clone(),
            });
        }
        Ok(self)
    }

    fn expect_dtype(&self, expected: DType) -> Result<()> {
        if self.dtype != expected {
            return Err(TensorIoError::DTypeMismatch {
                name: self.name.clone(),
                expected,
                found: self.dtype,
            });
        }
        Ok(())
    }
}

// zero-dimensional arrays are stored as a single-element vector
fn normalize_dims(dims: Vec<usize>) -> Vec<usize> {
    if dims.is_empty() {
        vec![1]
    } else {
        dims
    }
}

fn element_count(dims: &[usize]) -> Option<usize> {
    if dims.is_empty() || dims.iter().any(|&d| d == 0) {
        return None;
    }
    dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

/// An ordered collection of uniquely named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorArchive {
    entries: Vec<Tensor>,
}

impl TensorArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_entries(entries: Vec<Tensor>) -> Result<Self> {
        check_unique(&entries)?;
        Ok(Self { entries })
    }

    pub fn push(&mut self, t: Tensor) -> Result<()> {
        if self.get(t.name()).is_some() {
            return Err(TensorIoError::DuplicateName(t.name().to_string()));
        }
        self.entries.push(t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|t| t.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| TensorIoError::MissingEntry(name.to_string()))
    }

    pub fn entries(&self) -> &[Tensor] {
        &self.entries
    }

    pub fn into_entries(self) -> Vec<Tensor> {
        self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_archive(&self.entries, path)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self {
            entries: read_archive(path)?,
        })
    }
}

fn check_unique(entries: &[Tensor]) -> Result<()> {
    let mut seen = HashSet::new();
    for t in entries {
        if !seen.insert(t.name.as_str()) {
            return Err(TensorIoError::DuplicateName(t.name.clone()));
        }
    }
    Ok(())
}

/// Serialize tensors to bytes in archive format.
pub fn encode_archive(entries: &[Tensor]) -> Result<Vec<u8>> {
    check_unique(entries)?;
    let payload: usize = entries.iter().map(|t| t.data.len() * 4).sum();
    let mut buf = Vec::with_capacity(16 + payload + entries.len() * 64);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for t in entries {
        let name = t.name.as_bytes();
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name);
        buf.push(t.dtype.code());
        buf.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
        for &d in &t.dims {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

/// Parse archive bytes. Bad magic, unsupported versions and truncation are
/// reported as distinct errors.
pub fn decode_archive(bytes: &[u8]) -> Result<Vec<Tensor>> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 8] = r
        .take(8, "header")?
        .try_into()
        .expect("slice of length 8");
    if &magic != MAGIC {
        return Err(TensorIoError::BadMagic(magic));
    }
    let version = r.u32("header")?;
    if version != VERSION {
        return Err(TensorIoError::UnsupportedVersion(version));
    }
    let count = r.u32("header")? as usize;
    let mut out = Vec::with_capacity(count.min(1024));
    for idx in 0..count {
        let placeholder = format!("entry #{idx}");
        let name_len = r.u32(&placeholder)? as usize;
        let name = std::str::from_utf8(r.take(name_len, &placeholder)?)
            .map_err(|_| TensorIoError::InvalidName)?
            .to_string();
        let code = r.u8(&name)?;
        let dtype = DType::from_code(code).ok_or_else(|| TensorIoError::UnknownDType {
            name: name.clone(),
            code,
        })?;
        let ndim = r.u32(&name)? as usize;
        let mut dims = Vec::with_capacity(ndim.min(16));
        for _ in 0..ndim {
            dims.push(r.u64(&name)? as usize);
        }
        let n = element_count(&dims)
            .and_then(|c| c.checked_mul(dtype.width()))
            .ok_or_else(|| TensorIoError::InvalidDims {
                name: name.clone(),
                dims: dims.clone(),
            })?;
        let nbytes = n
            .checked_mul(4)
            .ok_or_else(|| TensorIoError::Truncated(format!("entry `{name}`")))?;
        let raw = r.take(nbytes, &name)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        out.push(Tensor {
            name,
            dims,
            dtype,
            data,
        });
    }
    check_unique(&out)?;
    Ok(out)
}

pub fn write_archive(entries: &[Tensor], path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_archive(entries)?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_archive(path: impl AsRef<Path>) -> Result<Vec<Tensor>> {
    let bytes = fs::read(path)?;
    decode_archive(&bytes)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, ctx: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| TensorIoError::Truncated(describe(ctx)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, ctx: &str) -> Result<u8> {
        Ok(self.take(1, ctx)?[0])
    }

    fn u32(&mut self, ctx: &str) -> Result<u32> {
        let b = self.take(4, ctx)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self, ctx: &str) -> Result<u64> {
        let b = self.take(8, ctx)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

fn describe(ctx: &str) -> String {
    if ctx == "header" || ctx.starts_with("entry #") {
        ctx.to_string()
    } else {
        format!("entry `{ctx}`")
    }
}
