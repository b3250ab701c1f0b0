//! Named parameter tensors, initialization helpers, and the binary
//! checkpoint blob.
//!
//! Blob layout (little-endian): magic `MDCK`, u32 version, u32 tensor count,
//! then per tensor: u32 name length, name bytes, u32 ndim, u32 dims, f64 data.

use crate::error::{Error, Result};
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;
use rand::Rng;
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"MDCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        assert!(
            self.tensors.insert(name.to_string(), t).is_none(),
            "duplicate parameter {name}"
        );
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.tensors
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> Vec<String> {
        self.tensors.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > bytes.len() {
                return Err(Error::Malformed("checkpoint truncated".into()));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        let u32_at = |pos: &mut usize| -> Result<u32> {
            let s = take(pos, 4)?;
            Ok(u32::from_le_bytes(s.try_into().unwrap()))
        };
        if take(&mut pos, 4)? != MAGIC {
            return Err(Error::Malformed("not a checkpoint file".into()));
        }
        let version = u32_at(&mut pos)?;
        if version != VERSION {
            return Err(Error::Malformed(format!("unsupported checkpoint version {version}")));
        }
        let count = u32_at(&mut pos)? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name_len = u32_at(&mut pos)? as usize;
            let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
                .map_err(|_| Error::Malformed("bad tensor name".into()))?;
            let ndim = u32_at(&mut pos)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(u32_at(&mut pos)? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = take(&mut pos, numel * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            store.insert(&name, Tensor::from_vec(&shape, data));
        }
        Ok(store)
    }
}

/// One leaf per parameter tensor, registered at the start of a tape.
pub struct ParamVars {
    ids: BTreeMap<String, VarId>,
}

impl ParamVars {
    pub fn register(tape: &mut Tape, store: &ParamStore) -> Self {
        let ids = store
            .iter()
            .map(|(name, t)| (name.clone(), tape.leaf(t.clone())))
            .collect();
        ParamVars { ids }
    }

    pub fn get(&self, name: &str) -> VarId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &VarId)> {
        self.ids.iter()
    }
}

/// Xavier-uniform weight matrix.
pub fn xavier(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::from_vec(&[rows, cols], data)
}

/// Xavier-style init for a conv kernel [cout, cin*kh*kw] using the true
/// fan-in and fan-out of the convolution.
pub fn xavier_conv(rng: &mut impl Rng, cout: usize, cin: usize, kh: usize, kw: usize) -> Tensor {
    let fan_in = cin * kh * kw;
    let fan_out = cout * kh * kw;
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..cout * cin * kh * kw)
        .map(|_| rng.gen_range(-bound..bound))
        .collect();
    Tensor::from_vec(&[cout, cin * kh * kw], data)
}

pub fn zeros_row(cols: usize) -> Tensor {
    Tensor::zeros(&[1, cols])
}
