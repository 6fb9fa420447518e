//! Named parameter storage shared by the codec, the feature extractor and the
//! optimizer. Modules hold [`ParamId`] handles; tensors live here.

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::Real;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
struct Entry {
    name: String,
    tensor: Tensor,
    trainable: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor, trainable: bool) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(Entry {
            name,
            tensor,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    /// Adds a `[fan_in, fan_out]` weight drawn from U(-1/√fan_in, 1/√fan_in).
    pub fn add_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        rng: &mut R,
    ) -> ParamId {
        let fan_in = shape[0].max(1);
        let bound = 1.0 / (fan_in as Real).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        let tensor = Tensor::new(shape.to_vec(), data).expect("shape product matches");
        self.add(name, tensor, true)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e.name.as_str(), &e.tensor))
    }

    /// Number of scalar values across trainable tensors.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.tensor.len())
            .sum()
    }

    /// Overwrites every tensor from `other`, matched by name and shape.
    pub fn load_from(&mut self, other: &[(String, Tensor)]) -> Result<()> {
        for entry in &mut self.entries {
            let (_, t) = other
                .iter()
                .find(|(n, _)| *n == entry.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {}", entry.name)))?;
            if t.shape() != entry.tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    entry.name,
                    t.shape(),
                    entry.tensor.shape()
                )));
            }
            entry.tensor = t.clone();
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and raw bits, truncated to 64 bits.
    pub fn checksum(&self) -> u64 {
        let mut h = Sha256::new();
        for e in &self.entries {
            h.update(e.name.as_bytes());
            for &d in e.tensor.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in e.tensor.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        let digest = h.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_init_respects_fan_in_bound() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let id = store.add_uniform("w", &[16, 4], &mut rng);
        assert!(store.get(id).data().iter().all(|v| v.abs() <= 0.25));
    }

    #[test]
    fn checksum_tracks_values() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::zeros(&[3]), true);
        let before = store.checksum();
        store.get_mut(id).data_mut()[1] = 1.0;
        assert_ne!(before, store.checksum());
    }

    #[test]
    fn load_from_rejects_shape_changes() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::zeros(&[3]), true);
        let err = store.load_from(&[("w".into(), Tensor::zeros(&[4]))]);
        assert!(err.is_err());
    }
}
