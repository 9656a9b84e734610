//! Binary parameter checkpoints.
//!
//! Layout (all integers u32 little-endian):
//!
//! ```text
//! "CMFT" | version
//! repeated until EOF:
//!   id_len | id bytes (UTF-8) | rank | extent * rank | scalars (LE)
//! ```

use std::fs;
use std::path::Path;

use super::param::ParamStore;
use crate::error::{CftError, Result};
use crate::real::Real;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CMFT";
pub const VERSION: u32 = 1;

pub fn encode<S: Real>(store: &ParamStore<S>) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + store.num_elements() * S::BYTES);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for (_, p) in store.iter() {
        let id = p.id().as_bytes();
        out.extend_from_slice(&(id.len() as u32).to_le_bytes());
        out.extend_from_slice(id);
        let shape = p.value().shape();
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &e in shape {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in p.value().data() {
            v.write_le(&mut out);
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(CftError::format(
                "checkpoint",
                format!("truncated at byte {}", self.pos),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode<S: Real>(bytes: &[u8]) -> Result<Vec<(String, Tensor<S>)>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(CftError::format("checkpoint", "bad magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CftError::CheckpointVersion {
            found: version,
            expected: VERSION,
        });
    }
    let mut out = Vec::new();
    while r.pos < bytes.len() {
        let id_len = r.u32()? as usize;
        let id = std::str::from_utf8(r.take(id_len)?)
            .map_err(|e| CftError::format("checkpoint", format!("id not UTF-8: {e}")))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|e| e as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n * S::BYTES)?;
        let data = raw.chunks_exact(S::BYTES).map(S::read_le).collect();
        out.push((id, Tensor::new(shape, data)?));
    }
    Ok(out)
}

pub fn save<S: Real>(store: &ParamStore<S>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(store)).map_err(|e| CftError::io(path, e))
}

/// Overwrite every parameter of `store` from a checkpoint. The checkpoint
/// must hold exactly the store's ids with matching shapes.
pub fn load_into<S: Real>(store: &mut ParamStore<S>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| CftError::io(path, e))?;
    let entries = decode::<S>(&bytes)?;
    if entries.len() != store.len() {
        return Err(CftError::format(
            "checkpoint",
            format!("{} tensors for a model with {}", entries.len(), store.len()),
        ));
    }
    for (id, t) in entries {
        let pid = store
            .find(&id)
            .ok_or_else(|| CftError::format("checkpoint", format!("unknown parameter {id:?}")))?;
        store.set_value(pid, t)?;
    }
    Ok(())
}
