//! Named-array archive used for model checkpoints and captioner frame files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "MDUGARR1"
//! count    u32
//! repeated count times:
//!   name_len u32, name (UTF-8)
//!   ndim     u32, dims (u64 each)
//!   data     f32 × prod(dims)
//! ```
//!
//! A checkpoint is an archive plus a JSON manifest next to it
//! (`<path>.manifest.json`).

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::autodiff::{Matrix, ParamStore};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"MDUGARR1";

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedArray {
    pub fn from_matrix(name: &str, m: &Matrix) -> Self {
        Self {
            name: name.to_string(),
            shape: vec![m.nrows(), m.ncols()],
            data: m.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn to_matrix(&self) -> Result<Matrix> {
        let (r, c) = match self.shape.as_slice() {
            [r, c] => (*r, *c),
            [n] => (1, *n),
            _ => return Err(Error::Checkpoint(format!("{}: expected a 1-D or 2-D array", self.name))),
        };
        Matrix::from_shape_vec((r, c), self.data.iter().map(|&v| v as f64).collect())
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", self.name)))
    }
}

pub fn write_archive(arrays: &[NamedArray]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for a in arrays {
        out.extend_from_slice(&(a.name.len() as u32).to_le_bytes());
        out.extend_from_slice(a.name.as_bytes());
        out.extend_from_slice(&(a.shape.len() as u32).to_le_bytes());
        for &d in &a.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &a.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("archive truncated".into()))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn read_archive(bytes: &[u8]) -> Result<Vec<NamedArray>> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic; not a named-array archive".into()));
    }
    let count = r.u32()? as usize;
    let mut arrays = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("array name is not UTF-8".into()))?
            .to_string();
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint(format!("{name}: shape overflow")))?;
        let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        arrays.push(NamedArray { name, shape, data });
    }
    if r.at != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after last array".into()));
    }
    Ok(arrays)
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

/// Writes every parameter plus a JSON manifest.
pub fn save_checkpoint<M: Serialize>(path: &Path, params: &ParamStore, manifest: &M) -> Result<()> {
    let arrays: Vec<NamedArray> = params.iter().map(|(n, m)| NamedArray::from_matrix(n, m)).collect();
    std::fs::write(path, write_archive(&arrays)).map_err(|e| Error::io(path, e))?;
    let mpath = manifest_path(path);
    let json = serde_json::to_string_pretty(manifest)?;
    std::fs::write(&mpath, json + "\n").map_err(|e| Error::io(mpath, e))?;
    Ok(())
}

pub fn load_manifest<M: DeserializeOwned>(path: &Path) -> Result<M> {
    let mpath = manifest_path(path);
    let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Overwrites `params` from the archive at `path`. Every parameter must be
/// present with its exact shape and the archive may hold nothing else.
pub fn load_params_into(path: &Path, params: &mut ParamStore) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let arrays = read_archive(&bytes)?;
    if arrays.len() != params.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} arrays, archive holds {}",
            params.len(),
            arrays.len()
        )));
    }
    for a in &arrays {
        let id = params
            .id(&a.name)
            .ok_or_else(|| Error::Checkpoint(format!("unexpected array {}", a.name)))?;
        let m = a.to_matrix()?;
        let expected = params.get(id).dim();
        if m.dim() != expected || a.shape.len() != 2 {
            return Err(Error::Checkpoint(format!(
                "{}: expected shape {:?}, found {:?}",
                a.name, expected, a.shape
            )));
        }
        *params.get_mut(id) = m;
    }
    Ok(())
}
