//! Named parameter storage and per-pass graph binding.
//!
//! All trainable state lives in a [`Params`] map keyed by dotted
//! hierarchical names (`fusion.block0.proj_x.weight`). A [`PassCtx`]
//! binds each parameter into the graph at most once per forward pass,
//! so a block applied at several positions ties its weights and the
//! graph accumulates gradients across uses.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use std::collections::BTreeMap;
use std::collections::HashMap;

#[derive(Debug, Clone, Default)]
pub struct Params<F> {
    map: BTreeMap<String, Tensor<F>>,
}

impl<F: Scalar> Params<F> {
    pub fn new() -> Self {
        Params {
            map: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<F>) {
        let name = name.into();
        let prev = self.map.insert(name.clone(), tensor);
        assert!(prev.is_none(), "duplicate parameter {name}");
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<F>> {
        self.map
            .get(name)
            .ok_or_else(|| Error::Mismatch(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<F>> {
        self.map
            .get_mut(name)
            .ok_or_else(|| Error::Mismatch(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<F>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<F>)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.map.values().map(|t| t.numel()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

pub struct PassCtx<'a, F: Scalar> {
    pub graph: Graph<F>,
    pub mode: Mode,
    pub rng: Rng,
    params: &'a Params<F>,
    bound: HashMap<String, Var<F>>,
}

impl<'a, F: Scalar> PassCtx<'a, F> {
    pub fn new(params: &'a Params<F>, mode: Mode, rng: Rng) -> Self {
        PassCtx {
            graph: Graph::new(),
            mode,
            rng,
            params,
            bound: HashMap::new(),
        }
    }

    /// Leaf var for a named parameter; cached so repeated binds within
    /// one pass return the same node.
    pub fn bind(&mut self, name: &str) -> Result<Var<F>> {
        if let Some(v) = self.bound.get(name) {
            return Ok(v.clone());
        }
        let var = self.graph.leaf(self.params.get(name)?.clone());
        self.bound.insert(name.to_string(), var.clone());
        Ok(var)
    }

    /// Gradients of every parameter bound during this pass. Call after
    /// `graph.backward`.
    pub fn param_grads(&self) -> BTreeMap<String, Tensor<F>> {
        self.bound
            .iter()
            .map(|(name, var)| (name.clone(), var.grad()))
            .collect()
    }
}
