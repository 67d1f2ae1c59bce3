//! Dense f64 tensors with reverse-mode differentiation.
//!
//! A [`Tensor`] is a cheap handle onto an immutable value buffer plus the
//! graph edge that produced it. Ops (see [`ops`]) validate shapes, compute
//! forward values eagerly, and record a backward closure when any input
//! requires gradients. [`Tensor::backward`] walks the recorded graph once
//! and accumulates gradients additively into every reachable node.
//!
//! Values are 64-bit floats in row-major order. Shapes are explicit; the
//! only broadcasting anywhere is scalar-with-tensor. Every op checks its
//! output for NaN/Inf and fails loudly instead of propagating poison.
//!
//! Graphs are single-threaded (handles are `Rc`-based and not `Send`);
//! distinct graphs may live on distinct threads. The raw value buffers are
//! shared via `Arc`, so weight data can be handed to worker threads and
//! re-wrapped there without copying.

pub mod checkpoint;
mod conv;
mod gradcheck;
mod ops;

pub use ops::concat;

pub use gradcheck::{grad_check, GradCheckReport};

use crate::error::{Error, Result};
use std::cell::RefCell;
use std::collections::HashSet;
use std::rc::Rc;
use std::sync::Arc;

/// Backward closure: given the gradient w.r.t. this node's output,
/// accumulate gradients into the captured input tensors.
type BackwardFn = Box<dyn Fn(&[f64])>;

struct Inner {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    /// Inputs of the op that produced this node; empty for leaves.
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

/// Handle to a tensor value and its position in the autodiff graph.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

fn check_len(shape: &[usize], len: usize) -> Result<()> {
    let numel: usize = shape.iter().product();
    if numel != len {
        return Err(Error::shape(
            "tensor",
            format!("shape {:?} wants {} elements, got {}", shape, numel, len),
        ));
    }
    Ok(())
}

impl Tensor {
    /// Constant leaf (no gradient tracking).
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        check_len(shape, data.len())?;
        Ok(Self::leaf(shape.to_vec(), Arc::new(data), false))
    }

    /// Leaf that participates in gradient accumulation.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        check_len(shape, data.len())?;
        Ok(Self::leaf(shape.to_vec(), Arc::new(data), true))
    }

    /// Leaf wrapping an existing shared buffer; used to hand weights to
    /// worker threads without copying.
    pub fn from_shared(shape: &[usize], data: Arc<Vec<f64>>, requires_grad: bool) -> Result<Tensor> {
        check_len(shape, data.len())?;
        Ok(Self::leaf(shape.to_vec(), data, requires_grad))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let numel = shape.iter().product();
        Self::leaf(shape.to_vec(), Arc::new(vec![0.0; numel]), false)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        let numel = shape.iter().product();
        Self::leaf(shape.to_vec(), Arc::new(vec![value; numel]), false)
    }

    /// Rank-0 tensor holding one value.
    pub fn scalar_value(value: f64) -> Tensor {
        Self::leaf(Vec::new(), Arc::new(vec![value]), false)
    }

    fn leaf(shape: Vec<usize>, data: Arc<Vec<f64>>, requires_grad: bool) -> Tensor {
        Tensor {
            inner: Rc::new(Inner {
                shape,
                data,
                requires_grad,
                grad: RefCell::new(None),
                parents: Vec::new(),
                backward: None,
            }),
        }
    }

    /// Interior node produced by an op. `parents` are the op inputs that
    /// require gradients; `backward` routes the output gradient to them.
    pub(crate) fn from_op(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Result<Tensor> {
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op });
        }
        if parents.is_empty() {
            return Ok(Self::leaf(shape, Arc::new(data), false));
        }
        Ok(Tensor {
            inner: Rc::new(Inner {
                shape,
                data: Arc::new(data),
                requires_grad: true,
                grad: RefCell::new(None),
                parents,
                backward: Some(backward),
            }),
        })
    }

    /// Op output that tracks no gradients (all inputs were constants).
    pub(crate) fn from_op_const(op: &'static str, shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op });
        }
        Ok(Self::leaf(shape, Arc::new(data), false))
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.inner.data
    }

    /// Shared handle to the raw buffer (for cross-thread reuse).
    pub fn data_arc(&self) -> Arc<Vec<f64>> {
        Arc::clone(&self.inner.data)
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// The single value of a rank-0/one-element tensor.
    pub fn scalar(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::shape(
                "scalar",
                format!("expected one element, shape is {:?}", self.shape()),
            ));
        }
        Ok(self.inner.data[0])
    }

    /// Copy of the accumulated gradient, if any.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Same value, severed from the graph.
    pub fn detach(&self) -> Tensor {
        Self::leaf(self.inner.shape.clone(), Arc::clone(&self.inner.data), false)
    }

    pub(crate) fn accumulate_grad(&self, delta: &[f64]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(buf) => {
                for (g, d) in buf.iter_mut().zip(delta) {
                    *g += d;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    fn key(&self) -> usize {
        Rc::as_ptr(&self.inner) as usize
    }

    /// Reverse-mode sweep from a scalar. Gradients accumulate additively
    /// into every `requires_grad` node reachable through the graph.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, shape is {:?}", self.shape()),
            ));
        }
        // Iterative post-order DFS over parents.
        let mut order: Vec<Tensor> = Vec::new();
        let mut seen: HashSet<usize> = HashSet::new();
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        seen.insert(self.key());
        while let Some((node, idx)) = stack.pop() {
            let parents = &node.inner.parents;
            if idx < parents.len() {
                let child = parents[idx].clone();
                stack.push((node, idx + 1));
                if child.inner.requires_grad && seen.insert(child.key()) {
                    stack.push((child, 0));
                }
            } else {
                order.push(node);
            }
        }
        // Interior grads are pass-local accumulators; only leaves keep
        // gradients across backward calls (additively).
        for node in &order {
            if !node.inner.parents.is_empty() {
                *node.inner.grad.borrow_mut() = None;
            }
        }
        self.accumulate_grad(&[1.0]);
        for node in order.iter().rev() {
            if let Some(backward) = &node.inner.backward {
                let grad = node
                    .inner
                    .grad
                    .borrow()
                    .clone()
                    .unwrap_or_else(|| vec![0.0; node.numel()]);
                backward(&grad);
            }
        }
        Ok(())
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}
