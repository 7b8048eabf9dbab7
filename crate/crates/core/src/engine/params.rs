//! Named parameter registry. Slot order is creation order and is the index
//! space used by [`crate::engine::Graph::param`] and the optimizer.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::engine::tensor::Tensor;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Param<S> {
    pub name: String,
    pub tensor: Tensor<S>,
    /// Weight decay applies only to slots flagged here (2-D projection
    /// weights; never biases, norms or embeddings).
    pub decay: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamSet<S> {
    entries: Vec<Param<S>>,
    #[serde(skip)]
    by_name: BTreeMap<String, usize>,
}

impl<S: Scalar> Default for ParamSet<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamSet<S> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            by_name: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<S>, decay: bool) -> usize {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter {name}"
        );
        let idx = self.entries.len();
        self.by_name.insert(name.clone(), idx);
        self.entries.push(Param { name, tensor, decay });
        idx
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn index_of(&self, name: &str) -> usize {
        *self
            .by_name
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get(&self, idx: usize) -> &Param<S> {
        &self.entries[idx]
    }

    pub fn tensor(&self, idx: usize) -> &Tensor<S> {
        &self.entries[idx].tensor
    }

    pub fn tensor_mut(&mut self, idx: usize) -> &mut Tensor<S> {
        &mut self.entries[idx].tensor
    }

    pub fn by_name(&self, name: &str) -> &Tensor<S> {
        self.tensor(self.index_of(name))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<S>> {
        self.entries.iter()
    }

    pub fn total_elements(&self) -> usize {
        self.entries.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Rebuilds the name index after deserialization.
    pub fn reindex(&mut self) {
        self.by_name = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.clone(), i))
            .collect();
    }

    pub fn cast<T: Scalar>(&self) -> ParamSet<T> {
        let mut out = ParamSet::new();
        for p in &self.entries {
            out.insert(p.name.clone(), p.tensor.cast::<T>(), p.decay);
        }
        out
    }
}

/// Per-slot gradients aligned with a [`ParamSet`]. Missing entries mean the
/// parameter was unreachable from the loss and its gradient is zero.
#[derive(Debug, Clone)]
pub struct Gradients<S> {
    slots: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn zeros(n: usize) -> Self {
        Self {
            slots: (0..n).map(|_| None).collect(),
        }
    }

    pub fn from_slots(slots: Vec<Option<Tensor<S>>>) -> Self {
        Self { slots }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn slot(&self, idx: usize) -> Option<&Tensor<S>> {
        self.slots[idx].as_ref()
    }

    /// Dense gradient for a slot; zeros when unreachable.
    pub fn dense(&self, idx: usize, params: &ParamSet<S>) -> Tensor<S> {
        match &self.slots[idx] {
            Some(t) => t.clone(),
            None => Tensor::zeros(params.tensor(idx).shape().to_vec()),
        }
    }

    /// Accumulates `scale * other` into self. Slot order is fixed, so
    /// repeated accumulation over an ordered batch is deterministic.
    pub fn add_scaled(&mut self, other: &[Option<Tensor<S>>], scale: S) {
        assert_eq!(self.slots.len(), other.len());
        for (dst, src) in self.slots.iter_mut().zip(other) {
            if let Some(src) = src {
                match dst {
                    Some(acc) => {
                        for (a, &b) in acc.data_mut().iter_mut().zip(src.data()) {
                            *a = *a + b * scale;
                        }
                    }
                    None => {
                        let mut t = src.clone();
                        for v in t.data_mut() {
                            *v = *v * scale;
                        }
                        *dst = Some(t);
                    }
                }
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.slots
            .iter()
            .flatten()
            .flat_map(|t| t.data().iter())
            .map(|v| v.to_f64_lossy().abs())
            .fold(0.0, f64::max)
    }
}
