//! Binary checkpoint format.
//!
//! ```text
//! MESE-CKPT v1\n
//! u64 LE  config length, then that many bytes of JSON (EncoderConfig)
//! u32 LE  tensor count
//! per tensor: u32 name length, UTF-8 name, u32 rows, u32 cols,
//!             rows*cols little-endian f32 values (row-major)
//! ```
//!
//! Student tensors are named `student/<name>`, teacher tensors
//! `teacher/<name>`.

use std::fs;
use std::path::Path;

use super::{EncoderConfig, Model};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Matrix;

pub const CHECKPOINT_TAG: &str = "MESE-CKPT v1";

pub fn write_checkpoint(model: &Model) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_TAG.as_bytes());
    out.push(b'\n');
    let cfg = serde_json::to_vec(model.config())?;
    out.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
    out.extend_from_slice(&cfg);
    let count = model.student.len() + model.teacher.len();
    out.extend_from_slice(&(count as u32).to_le_bytes());
    for (prefix, set) in [("student", &model.student), ("teacher", &model.teacher)] {
        for (name, m) in set.iter() {
            let full = format!("{prefix}/{name}");
            out.extend_from_slice(&(full.len() as u32).to_le_bytes());
            out.extend_from_slice(full.as_bytes());
            out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
            for v in m.as_slice() {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::parse(self.path, 0, format!("truncated checkpoint at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }
}

/// Parses checkpoint bytes; `path` is only used in error messages.
pub fn read_checkpoint(bytes: &[u8], path: &Path) -> Result<Model> {
    let header = format!("{CHECKPOINT_TAG}\n");
    if !bytes.starts_with(header.as_bytes()) {
        return Err(Error::parse(path, 1, format!("missing `{CHECKPOINT_TAG}` header")));
    }
    let mut r = Reader {
        bytes,
        pos: header.len(),
        path,
    };
    let cfg_len = r.u64()? as usize;
    let config: EncoderConfig = serde_json::from_slice(r.take(cfg_len)?)
        .map_err(|e| Error::parse(path, 2, format!("bad config json: {e}")))?;
    let mut model = Model::new(config)?;
    let count = r.u32()? as usize;
    if count != model.student.len() + model.teacher.len() {
        return Err(Error::parse(
            path,
            0,
            format!("checkpoint holds {count} tensors, config implies {}", 2 * model.student.len()),
        ));
    }
    for _ in 0..count {
        let n = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|_| Error::parse(path, 0, "tensor name is not UTF-8"))?
            .to_string();
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let raw = r.take(rows * cols * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let value = Matrix::from_vec(rows, cols, data)?;
        let (set, short): (&mut ParamSet, &str) = if let Some(s) = name.strip_prefix("student/") {
            (&mut model.student, s)
        } else if let Some(s) = name.strip_prefix("teacher/") {
            (&mut model.teacher, s)
        } else {
            return Err(Error::parse(path, 0, format!("unexpected tensor `{name}`")));
        };
        let idx = set
            .index_of(short)
            .ok_or_else(|| Error::parse(path, 0, format!("unknown tensor `{name}`")))?;
        if set.tensor(idx).shape() != value.shape() {
            return Err(Error::parse(
                path,
                0,
                format!("tensor `{name}` has shape {:?}, expected {:?}", value.shape(), set.tensor(idx).shape()),
            ));
        }
        *set.tensor_mut(idx) = value;
    }
    if r.pos != bytes.len() {
        return Err(Error::parse(path, 0, "trailing bytes after last tensor"));
    }
    Ok(model)
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, write_checkpoint(model)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes, path)
}
