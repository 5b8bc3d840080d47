use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Result, TensorError};
use crate::graph::Graph;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    /// Non-trainable entries (running statistics, metadata) are saved but
    /// never receive gradients or optimizer updates.
    pub trainable: bool,
}

/// Named parameter tensors in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    index: BTreeMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter `{name}`"
        );
        let id = ParamId(self.entries.len());
        self.index.insert(name.clone(), id);
        self.entries.push(ParamEntry {
            name,
            tensor,
            trainable,
        });
        id
    }

    /// Uniform init in `±sqrt(6 / (fan_in + fan_out))`.
    pub fn add_glorot(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> ParamId {
        let bound = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| T::of(rng.gen_range(-bound..bound)))
            .collect();
        let t = Tensor::new(shape.to_vec(), data).expect("shape and data agree");
        self.add(name, t, true)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape.to_vec()), true)
    }

    pub fn add_full(&mut self, name: impl Into<String>, shape: &[usize], v: f64) -> ParamId {
        self.add(name, Tensor::full(shape.to_vec(), T::of(v)), true)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn entry_mut(&mut self, id: ParamId) -> &mut ParamEntry<T> {
        &mut self.entries[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].tensor
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<T>)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e))
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<T>] {
        &mut self.entries
    }

    pub fn scalar_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.tensor.len())
            .sum()
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.tensor.grad = None;
        }
    }

    /// Adds the gradients that `graph` computed for bound parameters.
    pub fn accumulate_grads(&mut self, graph: &Graph<T>) {
        for (id, var) in graph.bound_params() {
            let e = &mut self.entries[id.0];
            if !e.trainable {
                continue;
            }
            if let Some(g) = graph.grad(var) {
                e.tensor.accumulate_grad(g);
            }
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.entries
            .iter()
            .filter_map(|e| e.tensor.grad.as_ref())
            .flat_map(|g| g.iter())
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales all gradients so their global L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let k = T::of(max_norm / norm);
            for e in &mut self.entries {
                if let Some(g) = e.tensor.grad.as_mut() {
                    g.iter_mut().for_each(|v| *v *= k);
                }
            }
        }
        norm
    }

    /// All entries keyed by name, converted to `f32` for serialization.
    pub fn to_named(&self) -> BTreeMap<String, Tensor<f32>> {
        self.entries
            .iter()
            .map(|e| (e.name.clone(), e.tensor.cast()))
            .collect()
    }

    /// Overwrites every entry from `named`. Shapes must match exactly; the
    /// first mismatching or missing entry in name order is reported.
    pub fn load_named(&mut self, named: &BTreeMap<String, Tensor<f32>>) -> Result<()> {
        for (name, id) in &self.index {
            let e = &self.entries[id.0];
            let Some(t) = named.get(name) else {
                return Err(TensorError::MissingParam(name.clone()));
            };
            if t.shape() != e.tensor.shape() {
                return Err(TensorError::ParamShape {
                    name: name.clone(),
                    expected: e.tensor.shape().to_vec(),
                    found: t.shape().to_vec(),
                });
            }
        }
        for (name, id) in &self.index {
            let trainable = self.entries[id.0].trainable;
            let mut t: Tensor<T> = named[name].cast();
            t.requires_grad = false;
            self.entries[id.0].tensor = t;
            self.entries[id.0].trainable = trainable;
        }
        Ok(())
    }
}
