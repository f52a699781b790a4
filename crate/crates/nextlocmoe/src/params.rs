//! Named parameter storage shared by every model module.
//!
//! Parameters are registered once at model construction time in a fixed
//! order; modules keep [`ParamId`] handles. The trainable flag is what the
//! freeze policy flips, and it is what the tape consults to decide whether
//! gradient work is needed at all.

use std::collections::HashMap;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tape::Mat;

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

pub struct Param {
    pub name: String,
    pub value: Mat,
    pub trainable: bool,
}

#[derive(Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Mat, trainable: bool) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name `{name}`"
        );
        let id = ParamId(self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            value,
            trainable,
        });
        self.by_name.insert(name.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Mat {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.params[id.0].value
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn n_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn n_trainable_scalars(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    /// `(name, shape, trainable)` listing in registration order, used by the
    /// freeze-policy report and the checkpoint.
    pub fn manifest(&self) -> Vec<(String, (usize, usize), bool)> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.value.dim(), p.trainable))
            .collect()
    }

    /// SHA-256 over names, flags, shapes and raw value bits; any change to
    /// any weight changes the checksum. Used to prove that zero-shot
    /// transfer did not touch the weights.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for p in &self.params {
            hasher.update(p.name.as_bytes());
            hasher.update([p.trainable as u8]);
            hasher.update((p.value.nrows() as u64).to_le_bytes());
            hasher.update((p.value.ncols() as u64).to_le_bytes());
            for v in p.value.iter() {
                hasher.update(v.to_le_bytes());
            }
        }
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Overwrite values and flags from another store's serialized content,
    /// matching by name. Fails if the name sets or shapes differ.
    pub fn load_values(
        &mut self,
        entries: impl Iterator<Item = (String, Mat, bool)>,
        source: &str,
    ) -> Result<()> {
        let mut seen = 0usize;
        for (name, value, trainable) in entries {
            let id = self.id(&name).ok_or_else(|| {
                Error::Checkpoint(format!("{source}: unknown parameter `{name}`"))
            })?;
            if self.value(id).dim() != value.dim() {
                return Err(Error::Checkpoint(format!(
                    "{source}: shape mismatch for `{name}`: expected {:?}, got {:?}",
                    self.value(id).dim(),
                    value.dim()
                )));
            }
            self.params[id.0].value = value;
            self.params[id.0].trainable = trainable;
            seen += 1;
        }
        if seen != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "{source}: expected {} parameters, got {seen}",
                self.params.len()
            )));
        }
        Ok(())
    }
}

/// Uniform init in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub fn uniform_init(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize) -> Mat {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
}

pub fn zeros(rows: usize, cols: usize) -> Mat {
    Array2::zeros((rows, cols))
}

pub fn ones(rows: usize, cols: usize) -> Mat {
    Array2::ones((rows, cols))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn checksum_changes_with_any_weight() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        store.add("w", uniform_init(&mut rng, 3, 3, 3), true);
        let before = store.checksum();
        let id = store.id("w").unwrap();
        store.value_mut(id)[(2, 1)] += 1e-12;
        assert_ne!(before, store.checksum());
    }

    #[test]
    fn checksum_is_stable_for_identical_content() {
        let build = || {
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            store.add("a", uniform_init(&mut rng, 2, 4, 2), true);
            store.add("b", uniform_init(&mut rng, 1, 4, 4), false);
            store
        };
        assert_eq!(build().checksum(), build().checksum());
    }

    #[test]
    fn load_values_rejects_missing_and_mismatched() {
        let mut store = ParamStore::new();
        store.add("w", zeros(2, 2), true);
        store.add("b", zeros(1, 2), true);
        let err = store
            .load_values(vec![("w".to_string(), zeros(2, 2), true)].into_iter(), "t")
            .unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)));
        let err = store
            .load_values(
                vec![
                    ("w".to_string(), zeros(3, 2), true),
                    ("b".to_string(), zeros(1, 2), true),
                ]
                .into_iter(),
                "t",
            )
            .unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)));
    }
}
