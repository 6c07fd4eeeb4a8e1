use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Array;
use crate::error::{LabError, Result};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Array,
    pub grad: Array,
}

/// Named network weights with gradient accumulators.
///
/// Insertion order is the iteration order; lookup by name goes through a
/// sorted index so two stores built by the same code line up entry by entry.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    entries: Vec<Param>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(LabError::contract(format!("duplicate parameter `{name}`")));
        }
        let id = self.entries.len();
        let grad = Array::zeros(value.shape());
        self.index.insert(name.clone(), id);
        self.entries.push(Param { name, value, grad });
        Ok(ParamId(id))
    }

    /// Weight matrix `[fan_in, fan_out]` and optional bias `[fan_out]`, both
    /// drawn uniformly from `±1/sqrt(fan_in)`.
    pub fn init_linear<R: Rng>(
        &mut self,
        rng: &mut R,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
    ) -> Result<(ParamId, Option<ParamId>)> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let w: Vec<f64> = (0..fan_in * fan_out)
            .map(|_| rng.gen_range(-bound..=bound))
            .collect();
        let w = self.insert(
            format!("{prefix}.weight"),
            Array::matrix(fan_in, fan_out, w)?,
        )?;
        let b = if bias {
            let b: Vec<f64> = (0..fan_out).map(|_| rng.gen_range(-bound..=bound)).collect();
            Some(self.insert(format!("{prefix}.bias"), Array::vector(b))?)
        } else {
            None
        };
        Ok((w, b))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.entries[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.id(name).map(|id| &mut self.entries[id.0])
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.entries.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.entries {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, grad: &[f64]) {
        let dst = self.entries[id.0].grad.data_mut();
        for (d, g) in dst.iter_mut().zip(grad) {
            *d += g;
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.entries
            .iter()
            .map(|p| p.grad.squared_norm())
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales all gradients so their global norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let scale = max_norm / norm;
            for p in &mut self.entries {
                p.grad.data_mut().iter_mut().for_each(|g| *g *= scale);
            }
        }
        norm
    }

    /// Copies parameter values from a store with the same layout.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(LabError::dim(
                "copy_values_from",
                &[self.entries.len()],
                &[other.entries.len()],
            ));
        }
        for (dst, src) in self.entries.iter_mut().zip(&other.entries) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(LabError::contract(format!(
                    "parameter layout differs at `{}` / `{}`",
                    dst.name, src.name
                )));
            }
            dst.value.data_mut().copy_from_slice(src.value.data());
        }
        Ok(())
    }

    /// Sets every parameter value to `v`.
    pub fn fill(&mut self, v: f64) {
        for p in &mut self.entries {
            p.value.data_mut().iter_mut().for_each(|x| *x = v);
        }
    }

    /// Replaces the value of a named parameter, checking the shape.
    pub fn set(&mut self, name: &str, data: &[f64]) -> Result<()> {
        let p = self
            .by_name_mut(name)
            .ok_or_else(|| LabError::contract(format!("unknown parameter `{name}`")))?;
        if p.value.len() != data.len() {
            return Err(LabError::dim("ParamStore::set", p.value.shape(), &[data.len()]));
        }
        p.value.data_mut().copy_from_slice(data);
        Ok(())
    }

    /// Adds every entry of `other` under `prefix.`.
    pub fn extend_prefixed(&mut self, prefix: &str, other: ParamStore) -> Result<()> {
        for p in other.entries {
            let id = self.insert(format!("{prefix}.{}", p.name), p.value)?;
            self.entries[id.0].grad = p.grad;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn names_are_unique() {
        let mut s = ParamStore::new();
        s.insert("a", Array::scalar(1.0)).unwrap();
        assert!(s.insert("a", Array::scalar(2.0)).is_err());
    }

    #[test]
    fn init_is_bounded_and_seeded() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = ParamStore::new();
        s.init_linear(&mut rng, "fc", 16, 4, true).unwrap();
        let bound = 0.25;
        for p in s.iter() {
            assert!(p.value.data().iter().all(|v| v.abs() <= bound));
            assert_eq!(p.grad.shape(), p.value.shape());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut t = ParamStore::new();
        t.init_linear(&mut rng, "fc", 16, 4, true).unwrap();
        assert_eq!(s, t);
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut s = ParamStore::new();
        let id = s.insert("w", Array::vector(vec![0.0; 2])).unwrap();
        s.accumulate(id, &[30.0, 40.0]);
        let before = s.clip_grad_norm(10.0);
        assert_eq!(before, 50.0);
        assert!((s.grad_norm() - 10.0).abs() < 1e-12);
        assert!((s.get(id).grad.data()[0] - 6.0).abs() < 1e-12);
    }
}
