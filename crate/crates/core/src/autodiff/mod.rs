//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation as it happens; node ids are
//! append-ordered, so reverse id order is a reverse topological order
//! and [`Graph::backward`] visits each reachable node exactly once.
//! A graph lives on one thread for the duration of one forward/backward
//! pass; parameters themselves are plain tensors bound in as leaves.

mod ops;

pub use ops::concat;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use std::cell::RefCell;
use std::rc::Rc;

/// Distributes the output gradient to each parent, in parent order.
/// Whatever forward values the rule needs are captured at op-build time.
type BackwardFn<F> = Box<dyn Fn(&Tensor<F>) -> Vec<Tensor<F>>>;

struct NodeData<F: Scalar> {
    value: Tensor<F>,
    grad: Tensor<F>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<F>>,
}

struct GraphInner<F: Scalar> {
    nodes: Vec<NodeData<F>>,
    backward_done: bool,
}

pub struct Graph<F: Scalar> {
    inner: Rc<RefCell<GraphInner<F>>>,
}

impl<F: Scalar> Clone for Graph<F> {
    fn clone(&self) -> Self {
        Graph {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph {
            inner: Rc::new(RefCell::new(GraphInner {
                nodes: Vec::new(),
                backward_done: false,
            })),
        }
    }

    /// Binds a tensor into the graph as a differentiable leaf.
    pub fn leaf(&self, value: Tensor<F>) -> Var<F> {
        self.push(value, Vec::new(), None)
    }

    /// A leaf whose gradient is never read; used for masks and targets.
    pub fn constant(&self, value: Tensor<F>) -> Var<F> {
        self.leaf(value)
    }

    pub(crate) fn push(
        &self,
        value: Tensor<F>,
        parents: Vec<usize>,
        backward: Option<BackwardFn<F>>,
    ) -> Var<F> {
        let grad = Tensor::zeros(value.shape());
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(NodeData {
            value,
            grad,
            parents,
            backward,
        });
        Var {
            graph: self.clone(),
            id,
        }
    }

    pub fn value(&self, var: &Var<F>) -> Tensor<F> {
        self.inner.borrow().nodes[var.id].value.clone()
    }

    pub fn grad(&self, var: &Var<F>) -> Tensor<F> {
        self.inner.borrow().nodes[var.id].grad.clone()
    }

    pub fn num_nodes(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    /// Propagates d(root)/d(node) into every reachable node's grad.
    ///
    /// The root must be scalar. A second call without [`Graph::reset_grads`]
    /// is an error, since grads would silently double-accumulate.
    pub fn backward(&self, root: &Var<F>) -> Result<()> {
        let mut inner = self.inner.borrow_mut();
        if inner.backward_done {
            return Err(Error::BackwardWithoutReset);
        }
        let root_shape = inner.nodes[root.id].value.shape().to_vec();
        if root_shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarRoot(root_shape));
        }
        inner.backward_done = true;

        let n = inner.nodes.len();
        let mut reachable = vec![false; n];
        reachable[root.id] = true;
        inner.nodes[root.id].grad = Tensor::full(&root_shape, F::one());

        // Ids are topological by construction; walking them downward
        // guarantees a node's grad is complete before it is expanded.
        for id in (0..=root.id).rev() {
            if !reachable[id] {
                continue;
            }
            let contributions = {
                let node = &inner.nodes[id];
                match &node.backward {
                    Some(rule) => rule(&node.grad),
                    None => continue,
                }
            };
            let parents = inner.nodes[id].parents.clone();
            debug_assert_eq!(contributions.len(), parents.len());
            for (pid, contrib) in parents.into_iter().zip(contributions) {
                reachable[pid] = true;
                inner.nodes[pid].grad.accumulate(&contrib);
            }
        }
        Ok(())
    }

    /// Zeroes every gradient buffer and re-arms backward.
    pub fn reset_grads(&self) {
        let mut inner = self.inner.borrow_mut();
        for node in &mut inner.nodes {
            node.grad = Tensor::zeros(node.value.shape());
        }
        inner.backward_done = false;
    }
}

/// Handle to one node of a [`Graph`]. Cheap to clone.
pub struct Var<F: Scalar> {
    graph: Graph<F>,
    id: usize,
}

impl<F: Scalar> Clone for Var<F> {
    fn clone(&self) -> Self {
        Var {
            graph: self.graph.clone(),
            id: self.id,
        }
    }
}

impl<F: Scalar> Var<F> {
    pub fn graph(&self) -> &Graph<F> {
        &self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Tensor<F> {
        self.graph.value(self)
    }

    pub fn grad(&self) -> Tensor<F> {
        self.graph.grad(self)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.inner.borrow().nodes[self.id].value.shape().to_vec()
    }
}
