//! Flat parameter container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "DFSCKPT1"
//! count    u32      number of entries
//! entry × count:
//!   name_len u32, name (UTF-8, dotted path)
//!   ndim     u32, dims u64 × ndim
//!   data     f32 × product(dims)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{DfsError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"DFSCKPT1";

pub fn write_checkpoint<W: Write>(store: &ParamStore, mut w: W) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for id in store.ids() {
        let name = store.name(id).as_bytes();
        let t = store.get(id);
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

struct Cursor<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Cursor<R> {
    fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner.read_exact(&mut buf).map_err(|_| DfsError::Format {
            offset: self.offset,
            msg: format!("truncated checkpoint while reading {what}"),
        })?;
        self.offset += n as u64;
        Ok(buf)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8, what)?.try_into().unwrap()))
    }
}

pub fn read_checkpoint<R: Read>(r: R) -> Result<Vec<(String, Tensor)>> {
    let mut cur = Cursor { inner: r, offset: 0 };
    if cur.bytes(8, "magic")? != MAGIC {
        return Err(DfsError::Format {
            offset: 0,
            msg: "bad checkpoint magic".into(),
        });
    }
    let count = cur.u32("entry count")?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = cur.u32("name length")? as usize;
        let at = cur.offset;
        let name = String::from_utf8(cur.bytes(len, "name")?).map_err(|_| DfsError::Format {
            offset: at,
            msg: "parameter name is not UTF-8".into(),
        })?;
        let ndim = cur.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(cur.u64("dimension")? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = cur.bytes(numel * 4, &name)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::new(&shape, data)?));
    }
    Ok(out)
}

pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    write_checkpoint(store, BufWriter::new(File::create(path)?))
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    read_checkpoint(BufReader::new(File::open(path)?))
}

/// Copies checkpoint entries into `store` by name. Every store entry whose
/// name starts with `required_prefix` must be present in the checkpoint.
pub fn restore(store: &mut ParamStore, entries: &[(String, Tensor)], required_prefix: &str) -> Result<()> {
    let mut seen = ParamStore::new();
    for (name, t) in entries {
        seen.add_buffer(name.clone(), t.clone());
    }
    for id in store.ids() {
        let name = store.name(id);
        if name.starts_with(required_prefix) && seen.find(name).is_none() {
            return Err(DfsError::Input(format!("checkpoint is missing parameter {name}")));
        }
    }
    store.load_matching(&seen)?;
    Ok(())
}
