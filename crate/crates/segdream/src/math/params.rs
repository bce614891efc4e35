//! Named parameter tensors with initialization helpers and graph binding.

use super::graph::{Grads, Graph, NodeId};
use super::Elem;
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use std::collections::HashMap;

/// An ordered collection of named tensors (insertion order is the canonical
/// order for optimizers and checkpoints).
#[derive(Clone)]
pub struct ParamSet<E: Elem> {
    names: Vec<String>,
    values: Vec<ArrayD<E>>,
    index: HashMap<String, usize>,
}

impl<E: Elem> Default for ParamSet<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Elem> ParamSet<E> {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: ArrayD<E>) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.values.push(value);
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, name: &str) -> &ArrayD<E> {
        let i = self.index[name];
        &self.values[i]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<E> {
        let i = self.index[name];
        &mut self.values[i]
    }

    pub fn value_at(&self, i: usize) -> &ArrayD<E> {
        &self.values[i]
    }

    pub fn value_at_mut(&mut self, i: usize) -> &mut ArrayD<E> {
        &mut self.values[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<E>)> {
        self.names.iter().map(|n| n.as_str()).zip(self.values.iter())
    }

    /// Exponential moving average update from another set with identical layout.
    pub fn ema_from(&mut self, other: &ParamSet<E>, decay: f64) {
        assert_eq!(self.names, other.names, "EMA parameter layout mismatch");
        let d = E::from_f64(decay);
        let om = E::from_f64(1.0 - decay);
        for (dst, src) in self.values.iter_mut().zip(other.values.iter()) {
            ndarray::Zip::from(dst).and(src).for_each(|a, &b| *a = d * *a + om * b);
        }
    }

    /// Create graph leaves for every parameter. `trainable` decides whether
    /// gradients will flow (acting/eval paths bind constants).
    pub fn bind(&self, g: &mut Graph<E>, trainable: bool) -> Binding {
        let ids = self
            .values
            .iter()
            .map(|v| {
                if trainable {
                    g.leaf(v.clone())
                } else {
                    g.constant(v.clone())
                }
            })
            .collect();
        Binding { ids }
    }

    /// Collect gradients for every parameter after a backward pass; absent
    /// gradients are exact zeros and stay `None`.
    pub fn collect_grads(&self, binding: &Binding, grads: &mut Grads<E>) -> Vec<Option<ArrayD<E>>> {
        binding.ids.iter().map(|&id| grads.take(id)).collect()
    }

    /// Convert every tensor to another element type (used to build f64 models
    /// for finite-difference checks).
    pub fn cast<F: Elem>(&self) -> ParamSet<F> {
        let mut out = ParamSet::new();
        for (name, value) in self.iter() {
            out.insert(name, value.mapv(|x| F::from_f64(x.as_f64())));
        }
        out
    }
}

/// Node ids for one `ParamSet::bind` call, aligned with parameter order.
pub struct Binding {
    ids: Vec<NodeId>,
}

impl Binding {
    pub fn id(&self, set: &ParamSet<impl Elem>, name: &str) -> NodeId {
        self.ids[set.index[name]]
    }

    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }
}

/// Truncated-normal initialization scaled by fan-in.
pub fn normal_init<E: Elem, R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> ArrayD<E> {
    ArrayD::from_shape_simple_fn(IxDyn(shape), || {
        let mut v: f64 = StandardNormal.sample(rng);
        while v.abs() > 2.0 {
            v = StandardNormal.sample(rng);
        }
        E::from_f64(v * std)
    })
}

pub fn zeros<E: Elem>(shape: &[usize]) -> ArrayD<E> {
    ArrayD::zeros(IxDyn(shape))
}

pub fn ones<E: Elem>(shape: &[usize]) -> ArrayD<E> {
    ArrayD::ones(IxDyn(shape))
}
