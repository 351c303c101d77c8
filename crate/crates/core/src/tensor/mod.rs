//! Dense row-major `f32` tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is immutable once created; only its gradient buffer is
//! interior-mutable. Operations on tensors that require gradients record the
//! inputs and a local adjoint rule on an implicit tape (the operation graph,
//! ordered by creation id). [`Tensor::backward`] replays that record in
//! reverse creation order and populates `grad` on every reachable tensor
//! that requires gradients.
//!
//! The tape is single-use per forward pass: each forward builds a fresh
//! graph with fresh leaves, so gradients never leak between passes. Calling
//! `backward` twice on the same graph accumulates into the same buffers.
//!
//! A graph and its tensors belong to one logical thread (`Tensor` is not
//! `Send`). Model parameters are stored as plain buffers elsewhere and bound
//! into a graph per forward pass, which is what allows independent graphs to
//! run in parallel over samples.

mod io;
mod ops;

pub use io::{read_tensor, write_tensor, FGT_MAGIC};
pub use ops::{concat, cross_entropy, gru_cell, GruParams};

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Adjoint rule of one recorded operation: maps the output adjoint to one
/// adjoint buffer per parent, in parent order.
type BackwardFn = Box<dyn Fn(&[f32]) -> Vec<Vec<f32>>>;

struct Node {
    parents: Vec<Tensor>,
    backward: BackwardFn,
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f32>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f32>>>,
    node: Option<Node>,
}

/// Dense n-dimensional `f32` array with optional gradient tracking.
///
/// Cloning a `Tensor` is cheap: clones share the same storage and gradient
/// buffer.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .field("data", &self.inner.data)
            .finish()
    }
}

impl Tensor {
    /// Leaf tensor from a shape and row-major data.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f32>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::BadShape {
                op: "from_vec",
                detail: format!(
                    "shape {:?} implies {} elements, data has {}",
                    shape,
                    numel,
                    data.len()
                ),
            });
        }
        Ok(Self::leaf(shape, data, false))
    }

    /// Rank-0 scalar tensor.
    pub fn scalar(value: f32) -> Tensor {
        Self::leaf(vec![], vec![value], false)
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let n: usize = shape.iter().product();
        Self::leaf(shape, vec![0.0; n], false)
    }

    pub fn ones(shape: Vec<usize>) -> Tensor {
        let n: usize = shape.iter().product();
        Self::leaf(shape, vec![1.0; n], false)
    }

    pub fn full(shape: Vec<usize>, value: f32) -> Tensor {
        let n: usize = shape.iter().product();
        Self::leaf(shape, vec![value; n], false)
    }

    /// Leaf filled with zero-mean Gaussian samples scaled by `std`.
    pub fn randn<R: Rng>(shape: Vec<usize>, std: f32, rng: &mut R) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f32 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Self::leaf(shape, data, false)
    }

    /// Leaf with samples uniform in `[lo, hi)`.
    pub fn uniform<R: Rng>(shape: Vec<usize>, lo: f32, hi: f32, rng: &mut R) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
        Self::leaf(shape, data, false)
    }

    fn leaf(shape: Vec<usize>, data: Vec<f32>, requires_grad: bool) -> Tensor {
        Tensor {
            inner: Rc::new(Inner {
                id: next_id(),
                shape,
                data,
                requires_grad,
                grad: RefCell::new(None),
                node: None,
            }),
        }
    }

    pub(crate) fn from_node(
        shape: Vec<usize>,
        data: Vec<f32>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Tensor {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        let node = if requires_grad {
            Some(Node { parents, backward })
        } else {
            None
        };
        Tensor {
            inner: Rc::new(Inner {
                id: next_id(),
                shape,
                data,
                requires_grad,
                grad: RefCell::new(None),
                node,
            }),
        }
    }

    /// Mark this leaf as a gradient target. Must be called on leaves only;
    /// results of operations derive their tracking from their inputs.
    pub fn tracked(self) -> Tensor {
        debug_assert!(self.inner.node.is_none(), "tracked() applies to leaves");
        Tensor {
            inner: Rc::new(Inner {
                id: next_id(),
                shape: self.inner.shape.clone(),
                data: self.inner.data.clone(),
                requires_grad: true,
                grad: RefCell::new(None),
                node: None,
            }),
        }
    }

    /// Leaf copy that is cut off from the graph and tracks no gradients.
    pub fn detach(&self) -> Tensor {
        Self::leaf(self.inner.shape.clone(), self.inner.data.clone(), false)
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.inner.data
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f32> {
        if self.numel() != 1 {
            return Err(Error::BadShape {
                op: "item",
                detail: format!("expected one element, shape is {:?}", self.inner.shape),
            });
        }
        Ok(self.inner.data[0])
    }

    /// Accumulated gradient, if `backward` has reached this tensor.
    pub fn grad(&self) -> Option<Vec<f32>> {
        self.inner.grad.borrow().clone()
    }

    pub fn clear_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    pub fn is_finite(&self) -> bool {
        self.inner.data.iter().all(|v| v.is_finite())
    }

    /// Reverse-mode gradient pass from a scalar loss.
    ///
    /// Walks the recorded operations in reverse creation order and
    /// accumulates adjoints into the `grad` buffer of every reachable tensor
    /// with `requires_grad`.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Autograd(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.inner.shape
            )));
        }
        if !self.inner.data[0].is_finite() {
            return Err(Error::Autograd("backward on a non-finite loss".into()));
        }

        // Reachable subgraph, then reverse creation order. Creation ids are
        // monotone along data dependencies, so this is a valid topological
        // order of the tape.
        let mut reachable: HashMap<u64, Tensor> = HashMap::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if reachable.contains_key(&t.inner.id) {
                continue;
            }
            if let Some(node) = &t.inner.node {
                for p in &node.parents {
                    if p.requires_grad() && !reachable.contains_key(&p.inner.id) {
                        stack.push(p.clone());
                    }
                }
            }
            reachable.insert(t.inner.id, t);
        }

        let mut order: Vec<u64> = reachable.keys().copied().collect();
        order.sort_unstable_by(|a, b| b.cmp(a));

        let mut adjoints: HashMap<u64, Vec<f32>> = HashMap::new();
        adjoints.insert(self.inner.id, vec![1.0]);

        for id in order {
            let Some(adj) = adjoints.remove(&id) else {
                continue;
            };
            let tensor = &reachable[&id];
            {
                let mut slot = tensor.inner.grad.borrow_mut();
                match slot.as_mut() {
                    Some(buf) => {
                        for (g, a) in buf.iter_mut().zip(&adj) {
                            *g += a;
                        }
                    }
                    None => *slot = Some(adj.clone()),
                }
            }
            if let Some(node) = &tensor.inner.node {
                let parent_adjs = (node.backward)(&adj);
                debug_assert_eq!(parent_adjs.len(), node.parents.len());
                for (parent, padj) in node.parents.iter().zip(parent_adjs) {
                    if !parent.requires_grad() {
                        continue;
                    }
                    debug_assert_eq!(padj.len(), parent.numel());
                    match adjoints.get_mut(&parent.inner.id) {
                        Some(buf) => {
                            for (g, a) in buf.iter_mut().zip(&padj) {
                                *g += a;
                            }
                        }
                        None => {
                            adjoints.insert(parent.inner.id, padj);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}
