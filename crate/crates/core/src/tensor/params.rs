use std::collections::HashMap;

use super::Tensor;
use crate::error::{DgaError, Result};

/// Index of a parameter inside a [`ParameterStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Entry {
    pub(crate) name: String,
    pub(crate) value: Tensor,
    pub(crate) grad: Vec<f64>,
    pub(crate) first_moment: Vec<f64>,
    pub(crate) second_moment: Vec<f64>,
}

/// Named trainable tensors in insertion order, each with a gradient slot and
/// Adam moment slots of the same shape.
#[derive(Clone, Debug, Default)]
pub struct ParameterStore {
    pub(crate) entries: Vec<Entry>,
    index: HashMap<String, ParamId>,
    pub(crate) step: u64,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(DgaError::contract(format!("duplicate parameter `{name}`")));
        }
        let n = value.len();
        let id = ParamId(self.entries.len());
        self.index.insert(name.clone(), id);
        self.entries.push(Entry {
            name,
            value,
            grad: vec![0.0; n],
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
        });
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn require(&self, name: &str) -> Result<ParamId> {
        self.id(name)
            .ok_or_else(|| DgaError::Checkpoint(format!("missing parameter `{name}`")))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.entries[id.0].grad
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.value))
    }

    /// Total number of scalar weights.
    pub fn num_weights(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Number of Adam steps taken so far.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Adds `scale · grads` into the gradient slots.
    pub fn accumulate(&mut self, grads: &Gradients, scale: f64) -> Result<()> {
        if grads.slots.len() != self.entries.len() {
            return Err(DgaError::contract("gradient buffer belongs to another store"));
        }
        for (e, slot) in self.entries.iter_mut().zip(&grads.slots) {
            if let Some(g) = slot {
                for (a, b) in e.grad.iter_mut().zip(g) {
                    *a += scale * b;
                }
            }
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|e| e.value.all_finite())
    }
}

/// Per-parameter gradients produced by one backward pass. `None` means zero.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub(crate) slots: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn zeros_for(store: &ParameterStore) -> Self {
        Gradients {
            slots: vec![None; store.len()],
        }
    }

    /// Gradient for one parameter, materialising zeros for unreachable ones.
    pub fn get(&self, id: ParamId, len: usize) -> Vec<f64> {
        self.slots[id.0].clone().unwrap_or_else(|| vec![0.0; len])
    }

    pub fn is_reached(&self, id: ParamId) -> bool {
        self.slots[id.0].is_some()
    }

    /// Element-wise sum, used to merge per-example buffers in a fixed order.
    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.slots.iter_mut().zip(&other.slots) {
            match (a.as_mut(), b) {
                (_, None) => {}
                (Some(a), Some(b)) => a.iter_mut().zip(b).for_each(|(x, y)| *x += y),
                (None, Some(b)) => *a = Some(b.clone()),
            }
        }
    }

    pub(crate) fn add_into(&mut self, id: ParamId, g: &[f64]) {
        match &mut self.slots[id.0] {
            Some(slot) => slot.iter_mut().zip(g).for_each(|(x, y)| *x += y),
            slot @ None => *slot = Some(g.to_vec()),
        }
    }
}
