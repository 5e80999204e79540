use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{DiffError, Tensor};

/// Named parameter tensors (θ). Iteration order is by name, which fixes the
/// layout of [`ParamSet::flatten`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a tensor under a fresh name.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<(), DiffError> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(DiffError::DuplicateParam(name));
        }
        self.entries.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, DiffError> {
        self.entries
            .get(name)
            .ok_or_else(|| DiffError::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor, DiffError> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| DiffError::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.count());
        for t in self.entries.values() {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Inverse of [`ParamSet::flatten`], using `self` as the layout template.
    pub fn unflatten(&self, flat: &[f64]) -> Result<ParamSet, DiffError> {
        if flat.len() != self.count() {
            return Err(DiffError::ShapeMismatch {
                tag: "unflatten",
                detail: format!("{} values for {} parameters", flat.len(), self.count()),
            });
        }
        let mut offset = 0;
        let mut entries = BTreeMap::new();
        for (name, t) in &self.entries {
            let n = t.len();
            entries.insert(
                name.clone(),
                Tensor::from_parts(t.shape().to_vec(), flat[offset..offset + n].to_vec()),
            );
            offset += n;
        }
        Ok(ParamSet { entries })
    }

    pub fn zeros_like(&self) -> ParamSet {
        let entries = self
            .entries
            .iter()
            .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
            .collect();
        ParamSet { entries }
    }

    fn check_layout(&self, other: &ParamSet) -> Result<(), DiffError> {
        if self.entries.len() != other.entries.len() {
            return Err(DiffError::ShapeMismatch {
                tag: "param_set",
                detail: format!("{} vs {} entries", self.entries.len(), other.entries.len()),
            });
        }
        for ((ka, ta), (kb, tb)) in self.entries.iter().zip(&other.entries) {
            if ka != kb || ta.shape() != tb.shape() {
                return Err(DiffError::ShapeMismatch {
                    tag: "param_set",
                    detail: format!("'{}' {:?} vs '{}' {:?}", ka, ta.shape(), kb, tb.shape()),
                });
            }
        }
        Ok(())
    }

    /// `self + alpha * other`, element-wise.
    pub fn axpy(&self, alpha: f64, other: &ParamSet) -> Result<ParamSet, DiffError> {
        self.check_layout(other)?;
        let entries = self
            .entries
            .iter()
            .zip(other.entries.values())
            .map(|((k, a), b)| {
                let data = a.data().iter().zip(b.data()).map(|(x, y)| x + alpha * y).collect();
                (k.clone(), Tensor::from_parts(a.shape().to_vec(), data))
            })
            .collect();
        Ok(ParamSet { entries })
    }

    pub fn add(&self, other: &ParamSet) -> Result<ParamSet, DiffError> {
        self.axpy(1.0, other)
    }

    pub fn scale(&self, c: f64) -> ParamSet {
        let entries = self.entries.iter().map(|(k, t)| (k.clone(), t.map(|v| v * c))).collect();
        ParamSet { entries }
    }

    pub fn neg(&self) -> ParamSet {
        let entries = self.entries.iter().map(|(k, t)| (k.clone(), t.map(|v| -v))).collect();
        ParamSet { entries }
    }

    pub fn dot(&self, other: &ParamSet) -> Result<f64, DiffError> {
        self.check_layout(other)?;
        Ok(self.entries.values().zip(other.entries.values()).map(|(a, b)| a.dot(b)).sum())
    }

    pub fn norm(&self) -> f64 {
        self.entries
            .values()
            .flat_map(|t| t.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Cosine similarity of two gradients with the same layout. Zero vectors give 0.
    pub fn cosine(&self, other: &ParamSet) -> Result<f64, DiffError> {
        let d = self.dot(other)?;
        let n = self.norm() * other.norm();
        Ok(if n == 0.0 { 0.0 } else { d / n })
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(Tensor::all_finite)
    }

    /// Adds `prefix` to every name; used when composing models.
    pub fn prefixed(&self, prefix: &str) -> ParamSet {
        let entries = self
            .entries
            .iter()
            .map(|(k, t)| (format!("{}{}", prefix, k), t.clone()))
            .collect();
        ParamSet { entries }
    }

    /// Entries under `prefix`, with the prefix stripped.
    pub fn scoped(&self, prefix: &str) -> ParamSet {
        let entries = self
            .entries
            .iter()
            .filter_map(|(k, t)| k.strip_prefix(prefix).map(|s| (s.to_string(), t.clone())))
            .collect();
        ParamSet { entries }
    }

    /// Merges `other` into `self`; names must not collide.
    pub fn extend(&mut self, other: ParamSet) -> Result<(), DiffError> {
        for (k, t) in other.entries {
            self.insert(k, t)?;
        }
        Ok(())
    }
}

/// Serializable mirror of a [`ParamSet`] (name → shape + values).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl ParamSet {
    pub fn to_named(&self) -> Vec<NamedTensor> {
        self.entries
            .iter()
            .map(|(k, t)| NamedTensor {
                name: k.clone(),
                shape: t.shape().to_vec(),
                values: t.data().to_vec(),
            })
            .collect()
    }

    pub fn from_named(items: Vec<NamedTensor>) -> Result<ParamSet, DiffError> {
        let mut out = ParamSet::new();
        for item in items {
            out.insert(item.name, Tensor::new(item.shape, item.values)?)?;
        }
        Ok(out)
    }
}
