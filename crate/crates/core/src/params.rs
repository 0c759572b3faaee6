use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a named parameter in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub grad: Vec<f64>,
    pub trainable: bool,
}

/// Flat collection of named parameters with gradient buffers.
///
/// Registration order is stable and drives every iteration (optimizer steps,
/// checkpoint serialization), which keeps runs reproducible.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name: {name}")));
        }
        let grad = vec![0.0; value.numel()];
        let idx = self.entries.len();
        self.by_name.insert(name.clone(), idx);
        self.entries.push(ParamEntry {
            name,
            value,
            grad,
            trainable,
        });
        Ok(ParamId(idx))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
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

    pub fn accumulate_grad(&mut self, id: ParamId, g: &[f64]) {
        let buf = &mut self.entries[id.0].grad;
        debug_assert_eq!(buf.len(), g.len());
        buf.iter_mut().zip(g).for_each(|(b, v)| *b += v);
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn scale_grad(&mut self, id: ParamId, factor: f64) {
        self.entries[id.0].grad.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    /// Parameters in registration order.
    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn total_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    /// Overwrite the value of the parameter named `name`, checking shape.
    pub fn load_named(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self
            .find(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter name: {name}")))?;
        let current = &mut self.entries[id.0];
        if current.value.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                op: "load_named",
                lhs: current.value.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        current.value = value;
        Ok(())
    }
}

/// Sample a tensor from N(0, std^2) with values clamped to `[-2*std, 2*std]`.
pub fn trunc_normal<R: Rng>(rng: &mut R, shape: Vec<usize>, std: f64) -> Tensor {
    let normal = Normal::new(0.0, std).expect("positive std");
    let bound = 2.0 * std;
    let data: Vec<f64> = (0..shape.iter().product::<usize>())
        .map(|_| normal.sample(rng).clamp(-bound, bound))
        .collect();
    Tensor::new(shape, data).expect("shape/data agree")
}
