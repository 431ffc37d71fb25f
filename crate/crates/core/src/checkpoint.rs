//! Single-file checkpoint archive: the model config followed by every named
//! parameter array.
//!
//! Layout (little-endian): magic `CSTC`, u32 config length, config JSON,
//! u32 array count, then per array: u32 name length, name bytes, u32 rows,
//! u32 cols, rows*cols f64 values. Arrays are written in name order, so a
//! given model always produces the same bytes.

use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::Mat;

pub const MAGIC: &[u8; 4] = b"CSTC";

pub fn encode(model: &Model) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let cfg = serde_json::to_vec(model.config())?;
    put_u32(&mut out, cfg.len())?;
    out.extend_from_slice(&cfg);
    let named = model.params().to_named();
    put_u32(&mut out, named.len())?;
    for (name, m) in &named {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, m.nrows())?;
        put_u32(&mut out, m.ncols())?;
        for v in m.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Rebuilds the training model; every parameter must be present with the
/// right shape.
pub fn decode(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::invalid("not a checkpoint (bad magic)"));
    }
    let n = r.u32()?;
    let cfg: ModelConfig = serde_json::from_slice(r.take(n)?)?;
    let count = r.u32()?;
    let mut named = std::collections::BTreeMap::new();
    for _ in 0..count {
        let len = r.u32()?;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|e| Error::invalid(e.to_string()))?;
        let (rows, cols) = (r.u32()?, r.u32()?);
        let vals = r
            .take(rows * cols * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let m: Mat = Array2::from_shape_vec((rows, cols), vals).map_err(|e| Error::shape(e.to_string()))?;
        named.insert(name, m);
    }
    if r.pos != bytes.len() {
        return Err(Error::invalid("trailing bytes after checkpoint"));
    }
    let mut model = Model::new(cfg)?;
    if named.len() != model.params().len() {
        return Err(Error::invalid(format!(
            "checkpoint has {} arrays, model expects {}",
            named.len(),
            model.params().len()
        )));
    }
    model.params_mut().load_named(&named)?;
    Ok(model)
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    fs::write(path, encode(model)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Model> {
    decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

fn put_u32(out: &mut Vec<u8>, n: usize) -> Result<()> {
    let v = u32::try_from(n).map_err(|_| Error::invalid(format!("{n} does not fit the archive format")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::invalid("truncated checkpoint"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}
