//! Named parameter storage, initialization, and checkpoint archives.
//!
//! Parameters live in a [`ParamStore`] keyed by dotted paths
//! (`encoder.block3.attn.wq`); iteration order is the sorted path order, which
//! makes checkpoint archives canonical: save -> load -> save is byte-identical.
//!
//! Checkpoint layout (little-endian):
//!
//! ```text
//! magic "CVC1" | u32 entry count | per entry:
//!   u32 name length | UTF-8 name | tensor in the "CVT1" format
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::tensor::io::{
    atomic_write, check_magic, read_tensor_from, write_tensor, IoError, IoResult, Reader,
};
use crate::tensor::{Rng, Tape, Tensor, Var};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CVC1";

/// Named tensors, sorted by path.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, Tensor<f32>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<f32>) {
        self.entries.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.entries.get(name)
    }

    pub fn set(&mut self, name: &str, value: Tensor<f32>) {
        debug_assert!(self.entries.contains_key(name), "unknown parameter {name}");
        self.entries.insert(name.to_string(), value);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<f32>> {
        self.entries.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<f32>)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.entries.values().map(|t| t.numel()).sum()
    }

    /// Entries under `prefix.`, with the prefix stripped.
    pub fn sub(&self, prefix: &str) -> ParamStore {
        let dotted = format!("{prefix}.");
        let entries = self
            .entries
            .iter()
            .filter_map(|(k, v)| {
                k.strip_prefix(&dotted)
                    .map(|rest| (rest.to_string(), v.clone()))
            })
            .collect();
        ParamStore { entries }
    }

    pub fn serialize(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, tensor) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            write_tensor(tensor, &mut out);
        }
        out
    }

    pub fn deserialize(bytes: &[u8]) -> IoResult<Self> {
        let mut r = Reader::new(bytes);
        check_magic(&mut r, CHECKPOINT_MAGIC)?;
        let count = r.u32("entry count")? as usize;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u32("name length")? as usize;
            let name_bytes = r.take(name_len, "entry name")?;
            let name = std::str::from_utf8(name_bytes)
                .map_err(|e| IoError::BadMetadata(format!("entry name not UTF-8: {e}")))?
                .to_string();
            let tensor = read_tensor_from::<f32>(&mut r)?;
            entries.insert(name, tensor);
        }
        Ok(ParamStore { entries })
    }

    pub fn save(&self, path: &Path) -> IoResult<()> {
        atomic_write(path, &self.serialize())
    }

    pub fn load(path: &Path) -> IoResult<Self> {
        Self::deserialize(&fs::read(path)?)
    }
}

/// Tape registration of a whole store: every parameter becomes a gradient
/// leaf, addressable by name during the forward pass.
pub struct TapeParams {
    vars: BTreeMap<String, Var>,
}

impl TapeParams {
    pub fn bind(tape: &mut Tape<f32>, store: &ParamStore) -> Self {
        let vars = store
            .iter()
            .map(|(name, tensor)| (name.clone(), tape.leaf(tensor.clone())))
            .collect();
        TapeParams { vars }
    }

    /// Var for a parameter path; panics on a path the model never registered
    /// (a wiring bug, not a runtime condition).
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

// ── Initialization ──────────────────────────────────────────────────────

/// Dense-layer weight: truncated normal with fan-in variance scaling,
/// `std = 1/sqrt(fan_in)`.
pub fn init_dense(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Tensor<f32> {
    let std = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(&[fan_in, fan_out], |_| {
        (rng.truncated_normal() * std) as f32
    })
}

/// Positional-embedding init: truncated normal scaled to 0.02.
pub fn init_pos_embedding(rng: &mut Rng, shape: &[usize]) -> Tensor<f32> {
    Tensor::from_fn(shape, |_| (rng.truncated_normal() * 0.02) as f32)
}

/// Unit Gaussian, used for latent grid features and the latent query.
pub fn init_unit_gaussian(rng: &mut Rng, shape: &[usize]) -> Tensor<f32> {
    Tensor::randn(shape, rng)
}
