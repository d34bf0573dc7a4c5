//! Dense `f64` tensors with tape-free reverse-mode differentiation.
//!
//! Every [`Tensor`] is an immutable, reference-counted value. Operations on
//! tensors that require gradients record a backward closure together with
//! their parents, so the forward computation itself is the graph. Calling
//! [`Tensor::backward`] on a scalar walks that graph in reverse creation
//! order and returns [`Gradients`] keyed by tensor identity.
//!
//! Node ids come from a global monotonically increasing counter. A node is
//! always created after its parents, so sorting reachable nodes by
//! descending id is a valid reverse topological order.

mod ops;
mod serialize;
mod spatial;

pub use serialize::{read_tensor, write_tensor, TENSOR_MAGIC};
pub(crate) use serialize::{eof_as_format, read_u32};
pub use spatial::UpsampleMode;
pub(crate) use ops::{softplus, stable_sigmoid};

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

fn next_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// Maps the output gradient (and the output values) to one optional gradient
/// per parent. `None` means the parent does not need a gradient.
type BackwardFn = dyn Fn(&[f64], &[f64], &[Tensor]) -> Vec<Option<Vec<f64>>> + Send + Sync;

struct GradFn {
    parents: Vec<Tensor>,
    backward: Box<BackwardFn>,
}

struct Node {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad_fn: Option<GradFn>,
}

#[derive(Clone)]
pub struct Tensor(Arc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl Tensor {
    /// Builds a constant tensor. `data.len()` must equal the product of
    /// `shape`, and at most five axes are allowed.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        if shape.len() > 5 {
            return Err(Error::shape("new", format!("rank {} exceeds 5", shape.len())));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::LengthMismatch {
                expected: n,
                actual: data.len(),
            });
        }
        Ok(Self::raw(shape.to_vec(), data, false, None))
    }

    /// Builds a leaf that collects gradients during [`Tensor::backward`].
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        Ok(Self::new(shape, data)?.into_param())
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        let n = shape.iter().product();
        Self::raw(shape.to_vec(), vec![value; n], false, None)
    }

    pub fn scalar(value: f64) -> Tensor {
        Self::raw(vec![], vec![value], false, None)
    }

    fn raw(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, grad_fn: Option<GradFn>) -> Tensor {
        Tensor(Arc::new(Node {
            id: next_id(),
            shape,
            data,
            requires_grad,
            grad_fn,
        }))
    }

    /// Records an operation result. The backward closure is only kept when at
    /// least one parent requires a gradient.
    pub(crate) fn from_op<F>(shape: Vec<usize>, data: Vec<f64>, parents: Vec<Tensor>, backward: F) -> Tensor
    where
        F: Fn(&[f64], &[f64], &[Tensor]) -> Vec<Option<Vec<f64>>> + Send + Sync + 'static,
    {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        let grad_fn = requires_grad.then(|| GradFn {
            parents,
            backward: Box::new(backward),
        });
        Self::raw(shape, data, requires_grad, grad_fn)
    }

    /// Same values as `self`, as a fresh gradient-collecting leaf.
    pub fn into_param(self) -> Tensor {
        Self::raw(self.0.shape.clone(), self.0.data.clone(), true, None)
    }

    /// Same values, cut off from the graph.
    pub fn detach(&self) -> Tensor {
        if !self.requires_grad() {
            return self.clone();
        }
        Self::raw(self.0.shape.clone(), self.0.data.clone(), false, None)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.clone()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data[0]
    }

    /// Propagates gradients from this scalar to every reachable leaf.
    pub fn backward(&self) -> Result<Gradients> {
        if self.numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape().to_vec()));
        }
        let value = self.0.data[0];
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss(value));
        }
        let mut grads: HashMap<u64, Vec<f64>> = HashMap::new();
        if !self.requires_grad() {
            return Ok(Gradients { grads });
        }

        let mut order: Vec<Tensor> = Vec::new();
        let mut seen: HashSet<u64> = HashSet::new();
        let mut stack = vec![self.clone()];
        seen.insert(self.id());
        while let Some(t) = stack.pop() {
            if let Some(gf) = &t.0.grad_fn {
                for p in &gf.parents {
                    if p.requires_grad() && seen.insert(p.id()) {
                        stack.push(p.clone());
                    }
                }
            }
            order.push(t);
        }
        order.sort_unstable_by_key(|t| std::cmp::Reverse(t.id()));

        grads.insert(self.id(), vec![1.0]);
        for node in &order {
            let Some(gf) = &node.0.grad_fn else { continue };
            // Interior gradients are consumed; only leaf gradients are returned.
            let Some(g_out) = grads.remove(&node.id()) else { continue };
            let parent_grads = (gf.backward)(&g_out, &node.0.data, &gf.parents);
            debug_assert_eq!(parent_grads.len(), gf.parents.len());
            for (p, g) in gf.parents.iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                if !p.requires_grad() {
                    continue;
                }
                debug_assert_eq!(g.len(), p.numel());
                match grads.get_mut(&p.id()) {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => {
                        grads.insert(p.id(), g);
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Gradients of a scalar with respect to the leaves of its graph.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: HashMap<u64, Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, t: &Tensor) -> Option<&[f64]> {
        self.grads.get(&t.id()).map(Vec::as_slice)
    }

    /// Gradient for `t`, or zeros when `t` was not reachable from the loss.
    pub fn wrt(&self, t: &Tensor) -> Vec<f64> {
        self.get(t).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()])
    }
}

pub(crate) fn check_same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}
