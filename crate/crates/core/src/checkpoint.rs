//! Single-file checkpoint container.
//!
//! Layout (little endian):
//!
//! ```text
//! magic      8 bytes  "ECHOCKPT"
//! version    u32
//! n_meta     u32, then n_meta x (key: str, value: str)
//! n_arrays   u32, then n_arrays x (name: str, dtype: u8, ndim: u32, dims: u64 x ndim, payload)
//! sha256     32 bytes over everything above
//! ```
//!
//! Strings are a `u32` byte length followed by UTF-8. Array names are
//! namespaced with `/` (`field/`, `prior/`, `prior/adapter/`, `optim/`).

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::real::Real;

pub const MAGIC: &[u8; 8] = b"ECHOCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U64(Vec<u64>),
}

impl ArrayData {
    fn tag(&self) -> u8 {
        match self {
            ArrayData::F32(_) => 0,
            ArrayData::F64(_) => 1,
            ArrayData::U64(_) => 2,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
            ArrayData::U64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub arrays: BTreeMap<String, NamedArray>,
}

/// Stores a real vector with its native precision.
pub fn real_data<T: Real>(v: &[T]) -> ArrayData {
    if T::DTYPE == "f32" {
        ArrayData::F32(v.iter().map(|x| x.f64() as f32).collect())
    } else {
        ArrayData::F64(v.iter().map(|x| x.f64()).collect())
    }
}

/// Reads a floating-point array into `T`, converting precision if needed.
pub fn real_vec<T: Real>(arr: &NamedArray) -> Result<Vec<T>> {
    match &arr.data {
        ArrayData::F32(v) => Ok(v.iter().map(|&x| T::of(x as f64)).collect()),
        ArrayData::F64(v) => Ok(v.iter().map(|&x| T::of(x)).collect()),
        ArrayData::U64(_) => Err(Error::validation("expected a floating-point array")),
    }
}

/// Types that persist themselves into a [`Checkpoint`] under a prefix.
pub trait Persist: Sized {
    fn write_into(&self, ckpt: &mut Checkpoint, prefix: &str);
    fn read_from(ckpt: &Checkpoint, prefix: &str) -> Result<Self>;
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl ToString) {
        self.meta.insert(key.into(), value.to_string());
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::validation(format!("checkpoint is missing metadata `{key}`")))
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.meta(key)?
            .parse()
            .map_err(|_| Error::validation(format!("checkpoint metadata `{key}` is malformed")))
    }

    pub fn put(&mut self, name: impl Into<String>, shape: Vec<usize>, data: ArrayData) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.arrays.insert(name.into(), NamedArray { shape, data });
    }

    pub fn put_f32(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) {
        self.put(name, shape, ArrayData::F32(data));
    }

    pub fn put_f64(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) {
        self.put(name, shape, ArrayData::F64(data));
    }

    pub fn get(&self, name: &str) -> Result<&NamedArray> {
        self.arrays
            .get(name)
            .ok_or_else(|| Error::validation(format!("checkpoint is missing array `{name}`")))
    }

    pub fn get_f32(&self, name: &str) -> Result<&[f32]> {
        match &self.get(name)?.data {
            ArrayData::F32(v) => Ok(v),
            _ => Err(Error::validation(format!("array `{name}` is not f32"))),
        }
    }

    pub fn get_f64(&self, name: &str) -> Result<&[f64]> {
        match &self.get(name)?.data {
            ArrayData::F64(v) => Ok(v),
            _ => Err(Error::validation(format!("array `{name}` is not f64"))),
        }
    }

    pub fn get_u64(&self, name: &str) -> Result<&[u64]> {
        match &self.get(name)?.data {
            ArrayData::U64(v) => Ok(v),
            _ => Err(Error::validation(format!("array `{name}` is not u64"))),
        }
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        self.arrays.keys().any(|k| k.starts_with(prefix)) || self.meta.keys().any(|k| k.starts_with(prefix))
    }

    /// Copies every entry of `other` into `self`.
    pub fn merge(&mut self, other: Checkpoint) {
        self.meta.extend(other.meta);
        self.arrays.extend(other.arrays);
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, arr) in &self.arrays {
            put_str(&mut out, name);
            out.push(arr.data.tag());
            out.extend_from_slice(&(arr.shape.len() as u32).to_le_bytes());
            for &d in &arr.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match &arr.data {
                ArrayData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                ArrayData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                ArrayData::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
        let corrupt = |reason: &str| Error::CorruptCheckpoint { path: path.to_path_buf(), reason: reason.into() };
        if bytes.len() < MAGIC.len() + 4 + 32 {
            return Err(corrupt("file too short"));
        }
        if &bytes[..8] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("checksum mismatch"));
        }
        let mut r = Reader { buf: body, pos: 8 };
        let version = r.u32().ok_or_else(|| corrupt("truncated header"))?;
        if version != FORMAT_VERSION {
            return Err(Error::CheckpointVersion { found: version, expected: FORMAT_VERSION });
        }
        let mut ckpt = Checkpoint::new();
        let n_meta = r.u32().ok_or_else(|| corrupt("truncated metadata"))?;
        for _ in 0..n_meta {
            let k = r.string().ok_or_else(|| corrupt("truncated metadata"))?;
            let v = r.string().ok_or_else(|| corrupt("truncated metadata"))?;
            ckpt.meta.insert(k, v);
        }
        let n_arrays = r.u32().ok_or_else(|| corrupt("truncated array table"))?;
        for _ in 0..n_arrays {
            let name = r.string().ok_or_else(|| corrupt("truncated array name"))?;
            let tag = r.u8().ok_or_else(|| corrupt("truncated array"))?;
            let ndim = r.u32().ok_or_else(|| corrupt("truncated array"))? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64().ok_or_else(|| corrupt("truncated shape"))? as usize);
            }
            let count = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| corrupt("array shape overflows"))?;
            let data = match tag {
                0 => ArrayData::F32(
                    r.take(count * 4)
                        .ok_or_else(|| corrupt("truncated payload"))?
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                1 => ArrayData::F64(
                    r.take(count * 8)
                        .ok_or_else(|| corrupt("truncated payload"))?
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                2 => ArrayData::U64(
                    r.take(count * 8)
                        .ok_or_else(|| corrupt("truncated payload"))?
                        .chunks_exact(8)
                        .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                _ => return Err(corrupt("unknown dtype tag")),
            };
            ckpt.arrays.insert(name, NamedArray { shape, data });
        }
        if r.pos != body.len() {
            return Err(corrupt("trailing bytes before checksum"));
        }
        Ok(ckpt)
    }

    /// Atomic write: the data goes to a temporary file in the target
    /// directory which is then renamed over `path`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<PathBuf> {
        let path = path.as_ref();
        let dir = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        fs::create_dir_all(&dir)?;
        let mut tmp = tempfile::NamedTempFile::new_in(&dir)?;
        tmp.write_all(&self.to_bytes())?;
        tmp.as_file().sync_all()?;
        tmp.persist(path).map_err(|e| Error::Io(e.error))?;
        Ok(path.to_path_buf())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingFile { path: path.to_path_buf() });
        }
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes, path)
    }
}

pub fn save_checkpoint<S: Persist>(state: &S, path: impl AsRef<Path>) -> Result<PathBuf> {
    let mut ckpt = Checkpoint::new();
    state.write_into(&mut ckpt, "");
    ckpt.save(path)
}

pub fn load_checkpoint<S: Persist>(path: impl AsRef<Path>) -> Result<S> {
    let ckpt = Checkpoint::load(path)?;
    S::read_from(&ckpt, "")
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn string(&mut self) -> Option<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).ok()
    }
}
