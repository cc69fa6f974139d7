use std::ops::Index;

use super::{Grads, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Index of a tensor inside a [`Params`] store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered, named collection of learnable tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Params<T: Real> {
    entries: Vec<(String, Tensor<T>)>,
}

/// Tape handles for every entry of a [`Params`] store, in store order.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

impl<T: Real> Params<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(self.entries.iter().all(|(n, _)| *n != name), "duplicate parameter {name}");
        self.entries.push((name, tensor.with_grad()));
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].1
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|(n, _)| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Toggles gradient tracking for every entry (frozen parameters bind as constants).
    pub fn set_trainable(&mut self, on: bool) {
        for (_, t) in &mut self.entries {
            t.set_requires_grad(on);
        }
    }

    /// Records every entry on the tape as a leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        Bound {
            vars: self.entries.iter().map(|(_, t)| tape.leaf(t)).collect(),
        }
    }

    /// `grad += ∂loss/∂param` for every trainable entry.
    pub fn accumulate(&mut self, grads: &Grads<T>, bound: &Bound) {
        for ((_, t), &v) in self.entries.iter_mut().zip(&bound.vars) {
            if let (Some(acc), Some(g)) = (t.grad_mut(), grads.get(v)) {
                acc.iter_mut().zip(g).for_each(|(a, &d)| *a = *a + d);
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.entries.iter_mut().for_each(|(_, t)| t.zero_grad());
    }

    pub fn grad_norm(&self) -> T {
        self.entries
            .iter()
            .filter_map(|(_, t)| t.grad())
            .flat_map(|g| g.iter())
            .map(|&g| g * g)
            .sum::<T>()
            .sqrt()
    }

    /// Rescales all gradients so their global norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: T) -> T {
        let norm = self.grad_norm();
        if norm > max_norm && norm > T::zero() {
            self.scale_grads(max_norm / norm);
        }
        norm
    }

    pub fn scale_grads(&mut self, s: T) {
        for (_, t) in &mut self.entries {
            if let Some(g) = t.grad_mut() {
                g.iter_mut().for_each(|v| *v = *v * s);
            }
        }
    }

    /// Plain gradient descent: `p -= lr · grad`.
    pub fn sgd_step(&mut self, lr: T) {
        for (_, t) in &mut self.entries {
            let Some(g) = t.grad().map(<[T]>::to_vec) else { continue };
            t.data_mut().iter_mut().zip(g).for_each(|(p, d)| *p = *p - lr * d);
        }
    }

    pub fn cast<U: Real>(&self) -> Params<U> {
        Params {
            entries: self.entries.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
        }
    }

    /// Overwrites values from `(name, shape, data)` triples; every entry must be covered exactly once.
    pub fn load_values<'a>(&mut self, values: impl IntoIterator<Item = (&'a str, &'a [usize], Vec<T>)>) -> Result<()> {
        let mut seen = vec![false; self.entries.len()];
        for (name, shape, data) in values {
            let id = self
                .id_of(name)
                .ok_or_else(|| Error::Format(format!("unknown parameter {name}")))?;
            if seen[id.0] {
                return Err(Error::Format(format!("parameter {name} listed twice")));
            }
            seen[id.0] = true;
            let t = self.get_mut(id);
            if t.shape() != shape || t.len() != data.len() {
                return Err(Error::Format(format!(
                    "parameter {name}: expected shape {:?}, found {:?}",
                    t.shape(),
                    shape
                )));
            }
            t.data_mut().copy_from_slice(&data);
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Format(format!("parameter {} missing", self.entries[i].0)));
        }
        Ok(())
    }
}
