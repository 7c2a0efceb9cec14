use indexmap::IndexMap;
use ndarray::Array2;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry<T> {
    pub value: Array2<T>,
    pub trainable: bool,
}

/// Named, ordered collection of 2-D parameter arrays.
///
/// Entries keep their insertion order, which doubles as the stable ordinal
/// used by checkpoints and finite-difference probes. Non-trainable entries
/// hold structural buffers (permutations, signs) that travel with the model
/// but are skipped by the optimizer and by gradient checks.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet<T> {
    entries: IndexMap<String, ParamEntry<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array2<T>) {
        self.insert_entry(name, value, true);
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, value: Array2<T>) {
        self.insert_entry(name, value, false);
    }

    pub fn insert_entry(&mut self, name: impl Into<String>, value: Array2<T>, trainable: bool) {
        let name = name.into();
        assert!(
            !self.entries.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.entries.insert(name, ParamEntry { value, trainable });
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<&Array2<T>> {
        self.entries.get(name).map(|e| &e.value)
    }

    /// Like [`get`](Self::get) but panics with the missing name; used by model
    /// code where the name set is fixed at construction.
    pub fn expect(&self, name: &str) -> &Array2<T> {
        self.get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array2<T>> {
        self.entries.get_mut(name).map(|e| &mut e.value)
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry<T>> {
        self.entries.get(name)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.get_index_of(name)
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.entries.get(name).map(|e| e.trainable).unwrap_or(false)
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        let e = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::argument(format!("unknown parameter {name}")))?;
        e.trainable = trainable;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<T>)> {
        self.entries.iter().map(|(k, e)| (k.as_str(), &e.value))
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &ParamEntry<T>)> {
        self.entries.iter().map(|(k, e)| (k.as_str(), e))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Array2<T>)> {
        self.entries
            .iter_mut()
            .map(|(k, e)| (k.as_str(), &mut e.value))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn trainable_names(&self) -> impl Iterator<Item = &str> {
        self.entries
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(k, _)| k.as_str())
    }

    /// Total number of scalars across all entries.
    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(k, e)| {
                    (
                        k.clone(),
                        ParamEntry {
                            value: Array2::zeros(e.value.raw_dim()),
                            trainable: e.trainable,
                        },
                    )
                })
                .collect(),
        }
    }

    pub fn same_shapes(&self, other: &Self) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::config(format!(
                "parameter count mismatch: {} vs {}",
                self.len(),
                other.len()
            )));
        }
        for ((a, ea), (b, eb)) in self.entries.iter().zip(other.entries.iter()) {
            if a != b || ea.value.dim() != eb.value.dim() {
                return Err(Error::config(format!(
                    "shape mismatch: {a} {:?} vs {b} {:?}",
                    ea.value.dim(),
                    eb.value.dim()
                )));
            }
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.entries
            .values()
            .all(|e| e.value.iter().all(|v| v.is_finite()))
    }

    /// First entry containing a non-finite value, if any.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.entries
            .iter()
            .find(|(_, e)| e.value.iter().any(|v| !v.is_finite()))
            .map(|(k, _)| k.as_str())
    }

    /// Copies the entries named in `other` into `self`, leaving the rest untouched.
    pub fn overwrite_from(&mut self, other: &Self) -> Result<()> {
        for (name, value) in other.iter() {
            let dst = self
                .get_mut(name)
                .ok_or_else(|| Error::argument(format!("unknown parameter {name}")))?;
            if dst.dim() != value.dim() {
                return Err(Error::config(format!("shape mismatch for {name}")));
            }
            dst.assign(value);
        }
        Ok(())
    }

    /// Returns a new set holding only the entries whose names start with `prefix`.
    pub fn subset(&self, prefix: &str) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, e)| (k.clone(), e.clone()))
                .collect(),
        }
    }

    pub fn extend(&mut self, other: Self) {
        for (k, e) in other.entries {
            self.insert_entry(k, e.value, e.trainable);
        }
    }

    /// Max-abs difference across all entries of two identically shaped sets.
    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.entries
            .iter()
            .zip(other.entries.iter())
            .flat_map(|((_, a), (_, b))| {
                a.value
                    .iter()
                    .zip(b.value.iter())
                    .map(|(x, y)| (*x - *y).abs())
            })
            .fold(T::zero(), T::max)
    }
}
