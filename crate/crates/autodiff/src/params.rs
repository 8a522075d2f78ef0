use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::tape::{Gradients, Tape, Var};
use crate::{Result, Tensor, TensorError};

/// Named collection of learnable tensors.
///
/// A frozen set binds into a tape as constants: gradients never reach its
/// members and the optimizer refuses to step it.
#[derive(Clone, Debug, Default)]
pub struct ParameterSet {
    entries: BTreeMap<String, Arc<Tensor>>,
    frozen: bool,
}

/// Tape handles for every member of a [`ParameterSet`].
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Var {
        match self.vars.get(name) {
            Some(v) => *v,
            None => panic!("parameter `{name}` was not bound"),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Merges another binding; names must not collide.
    pub fn extend(&mut self, other: Bound) {
        for (k, v) in other.vars {
            let prev = self.vars.insert(k, v);
            debug_assert!(prev.is_none());
        }
    }
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.insert(name.into(), Arc::new(t));
    }

    /// Adds a `[rows, cols]` weight drawn from a Glorot-uniform range.
    pub fn insert_glorot<R: Rng + ?Sized>(&mut self, name: impl Into<String>, rows: usize, cols: usize, rng: &mut R) {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        self.insert_uniform(name, &[rows, cols], limit, rng);
    }

    pub fn insert_uniform<R: Rng + ?Sized>(&mut self, name: impl Into<String>, shape: &[usize], limit: f64, rng: &mut R) {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-limit..=limit)).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data).expect("shape matches data"));
    }

    pub fn insert_zeros(&mut self, name: impl Into<String>, shape: &[usize]) {
        self.insert(name, Tensor::zeros(shape));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(Arc::as_ref)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name).map(Arc::make_mut)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k, v.as_ref()))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.entries.iter_mut().map(|(k, v)| (k, Arc::make_mut(v)))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.entries.values().map(|t| t.numel()).sum()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
        self.zero_grad();
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
    }

    /// Registers every member on `tape` without copying data.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let vars = self.entries.iter().map(|(k, t)| (k.clone(), tape.shared(Arc::clone(t), !self.frozen))).collect();
        Bound { vars }
    }

    /// Registers every member as a constant regardless of the frozen flag.
    pub fn bind_constant(&self, tape: &mut Tape) -> Bound {
        let vars = self.entries.iter().map(|(k, t)| (k.clone(), tape.shared(Arc::clone(t), false))).collect();
        Bound { vars }
    }

    /// Adds the gradients recorded for `bound` into each member's `grad`.
    /// Frozen sets discard them.
    pub fn accumulate(&mut self, bound: &Bound, grads: &mut Gradients) {
        if self.frozen {
            return;
        }
        for (name, var) in &bound.vars {
            let Some(g) = grads.take(*var) else { continue };
            if let Some(t) = self.entries.get_mut(name) {
                Arc::make_mut(t).accumulate_grad(&g);
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for t in self.entries.values_mut() {
            if t.grad.is_some() {
                Arc::make_mut(t).zero_grad();
            }
        }
    }

    pub fn has_grad(&self) -> bool {
        self.entries.values().any(|t| t.grad.as_ref().is_some_and(|g| g.iter().any(|&x| x != 0.0)))
    }

    pub fn grad_norm(&self) -> f64 {
        self.entries.values().filter_map(|t| t.grad.as_ref()).flat_map(|g| g.iter()).map(|x| x * x).sum::<f64>().sqrt()
    }

    /// SHA-256 over names, shapes and the exact bytes of every value.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.entries {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        format!("{:x}", h.finalize())
    }

    /// Overwrites values from `other` for every shared name with equal shape.
    pub fn copy_values_from(&mut self, other: &ParameterSet) -> Result<()> {
        if self.frozen {
            return Err(TensorError::Contract("copy into a frozen parameter set".into()));
        }
        for (name, t) in &other.entries {
            let Some(dst) = self.entries.get_mut(name) else {
                return Err(TensorError::Contract(format!("unknown parameter `{name}`")));
            };
            if dst.shape() != t.shape() {
                return Err(TensorError::Dimension(format!("`{name}`: {:?} vs {:?}", dst.shape(), t.shape())));
            }
            *dst = Arc::new(Tensor::new(t.shape().to_vec(), t.data().to_vec())?);
        }
        Ok(())
    }
}
