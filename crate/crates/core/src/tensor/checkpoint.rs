//! Named parameter storage and its binary checkpoint format.
//!
//! Layout (all integers little-endian `u64`, all values little-endian `f64`):
//!
//! ```text
//! "CPE-CKPT-1\n"
//! meta_len, meta bytes (UTF-8 `key = value` lines)
//! count
//! count × { name_len, name bytes, ndim, dims[ndim], values[prod(dims)] }
//! ```

use std::io::{Read, Write};

use super::{Tape, Tensor, Var};
use crate::error::{CpeError, Result};

pub const CHECKPOINT_MAGIC: &str = "CPE-CKPT-1\n";

const MAX_NAME: u64 = 1 << 12;
const MAX_META: u64 = 1 << 20;
const MAX_VALUES: u64 = 1 << 28;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.names.contains(&name) {
            return Err(CpeError::InvalidInput(format!("duplicate parameter {name}")));
        }
        self.names.push(name);
        self.tensors.push(value);
        Ok(ParamId(self.tensors.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Records every parameter on `tape`, as trainable leaves when
    /// `trainable` is set and as constants otherwise.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect()
    }

    /// Replaces every tensor by the same-named one in `other`; shapes must
    /// agree and every name must be present.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let src = other
                .by_name(name)
                .ok_or_else(|| CpeError::Checkpoint(format!("missing parameter {name}")))?;
            if src.shape() != t.shape() {
                return Err(CpeError::Checkpoint(format!(
                    "parameter {name}: shape {:?} in checkpoint, {:?} expected",
                    src.shape(),
                    t.shape()
                )));
            }
            *t = src.clone();
        }
        Ok(())
    }
}

/// Parameters plus free-form metadata text.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub metadata: String,
    pub params: ParamStore,
}

fn put_u64(w: &mut impl Write, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn get_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn get_bytes(r: &mut impl Read, len: u64, limit: u64, what: &str) -> Result<Vec<u8>> {
    if len > limit {
        return Err(CpeError::Checkpoint(format!("{what} length {len} exceeds {limit}")));
    }
    let mut buf = vec![0u8; len as usize];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

pub fn write_checkpoint(w: &mut impl Write, metadata: &str, params: &ParamStore) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC.as_bytes())?;
    put_u64(w, metadata.len() as u64)?;
    w.write_all(metadata.as_bytes())?;
    put_u64(w, params.len() as u64)?;
    for (name, t) in params.iter() {
        put_u64(w, name.len() as u64)?;
        w.write_all(name.as_bytes())?;
        put_u64(w, t.shape().len() as u64)?;
        for &d in t.shape() {
            put_u64(w, d as u64)?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<Checkpoint> {
    let mut magic = vec![0u8; CHECKPOINT_MAGIC.len()];
    r.read_exact(&mut magic)
        .map_err(|_| CpeError::Checkpoint("truncated header".into()))?;
    if magic != CHECKPOINT_MAGIC.as_bytes() {
        return Err(CpeError::Checkpoint("bad magic, expected CPE-CKPT-1".into()));
    }
    let meta_len = get_u64(r)?;
    let metadata = String::from_utf8(get_bytes(r, meta_len, MAX_META, "metadata")?)
        .map_err(|e| CpeError::Checkpoint(format!("metadata is not UTF-8: {e}")))?;
    let count = get_u64(r)?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let name_len = get_u64(r)?;
        let name = String::from_utf8(get_bytes(r, name_len, MAX_NAME, "name")?)
            .map_err(|e| CpeError::Checkpoint(format!("name is not UTF-8: {e}")))?;
        let ndim = get_u64(r)?;
        if ndim == 0 || ndim > 8 {
            return Err(CpeError::Checkpoint(format!("{name}: bad rank {ndim}")));
        }
        let mut shape = Vec::with_capacity(ndim as usize);
        let mut total: u64 = 1;
        for _ in 0..ndim {
            let d = get_u64(r)?;
            total = total.saturating_mul(d);
            shape.push(d as usize);
        }
        if total > MAX_VALUES {
            return Err(CpeError::Checkpoint(format!("{name}: {total} values is too many")));
        }
        let raw = get_bytes(r, total * 8, MAX_VALUES * 8, "values")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params.add(name, Tensor::new(shape, data)?)?;
    }
    Ok(Checkpoint { metadata, params })
}
