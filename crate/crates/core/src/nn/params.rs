//! Named, ordered parameter collection with a per-tensor freeze mask.

use super::{NnError, Result, Tensor};
use sha2::{Digest, Sha256};

/// One named parameter tensor plus its freeze flag.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
    pub frozen: bool,
}

/// Ordered collection of named parameter tensors.
///
/// Entries are kept sorted by name, which fixes the flattening order used for
/// client deltas and checkpoints independently of insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelParams {
    entries: Vec<ParamEntry>,
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        match self.entries.binary_search_by(|e| e.name.as_str().cmp(name)) {
            Ok(_) => Err(NnError::DuplicateParam(name.to_string())),
            Err(pos) => {
                self.entries.insert(
                    pos,
                    ParamEntry {
                        name: name.to_string(),
                        tensor,
                        frozen: false,
                    },
                );
                Ok(())
            }
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    /// Mutable entry access for optimizers; callers must not rename entries.
    pub(crate) fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.index_of(name).map(|i| &self.entries[i].tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        let i = self.index_of(name)?;
        Ok(&mut self.entries[i].tensor)
    }

    fn index_of(&self, name: &str) -> Result<usize> {
        self.entries
            .binary_search_by(|e| e.name.as_str().cmp(name))
            .map_err(|_| NnError::UnknownParam(name.to_string()))
    }

    /// Mark tensors frozen/unfrozen by predicate over the name.
    pub fn set_frozen_where(&mut self, pred: impl Fn(&str) -> bool, frozen: bool) {
        for e in &mut self.entries {
            if pred(&e.name) {
                e.frozen = frozen;
            }
        }
    }

    pub fn clear_freeze(&mut self) {
        for e in &mut self.entries {
            e.frozen = false;
        }
    }

    pub fn frozen_names(&self) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|e| e.frozen)
            .map(|e| e.name.as_str())
            .collect()
    }

    /// Total element count across unfrozen tensors.
    pub fn unfrozen_len(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| !e.frozen)
            .map(|e| e.tensor.len())
            .sum()
    }

    /// Total element count across all tensors.
    pub fn total_len(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    /// Flatten unfrozen tensors (name order) into one vector.
    pub fn flatten_unfrozen(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.unfrozen_len());
        for e in &self.entries {
            if !e.frozen {
                out.extend_from_slice(e.tensor.data());
            }
        }
        out
    }

    /// Add `delta` (laid out as [`flatten_unfrozen`]) onto the unfrozen tensors.
    pub fn apply_unfrozen_delta(&mut self, delta: &[f64]) -> Result<()> {
        if delta.len() != self.unfrozen_len() {
            return Err(NnError::InvalidArgument(format!(
                "delta has {} elements, expected {}",
                delta.len(),
                self.unfrozen_len()
            )));
        }
        let mut off = 0;
        for e in &mut self.entries {
            if e.frozen {
                continue;
            }
            let n = e.tensor.len();
            for (v, d) in e.tensor.data_mut().iter_mut().zip(&delta[off..off + n]) {
                *v += d;
            }
            off += n;
        }
        Ok(())
    }
}

/// SHA-256 hex digest of a tensor's little-endian byte image.
pub fn tensor_digest(t: &Tensor) -> String {
    let mut h = Sha256::new();
    h.update(t.to_le_bytes());
    hex_string(&h.finalize())
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}
