//! Reverse-mode autodiff on dense row-major tensors.
//!
//! Design notes:
//!
//! * A [`Tensor`] is a cheap handle (`Rc`) onto an immutable-by-convention
//!   buffer plus the graph edge that produced it. Ops build a DAG; calling
//!   [`Tensor::backward`] on a scalar walks it in reverse creation order and
//!   *accumulates* into `grad` of every reachable gradient-carrying tensor
//!   (repeated calls without [`Tensor::zero_grad`] keep accumulating).
//! * Buffers are only mutated in place through the optimizer
//!   ([`optim::AdamW::step`]) and batch-norm running statistics; everything
//!   else allocates fresh output buffers.
//! * All reductions run in a fixed left-to-right order, so results are
//!   bit-reproducible for identical inputs on any thread count.
//! * Every op validates shapes up front and checks its output for NaN/Inf;
//!   non-finite values are reported as [`TensorError::NonFinite`] instead of
//!   propagating silently.
//!
//! Graphs are thread-confined (`Rc`): independent samples or training runs
//! may run on separate threads each with their own graph, but a single graph
//! must stay on the thread that built it.

mod backward;
pub mod checkpoint;
pub mod nn;
pub mod ops;
pub mod optim;

pub use ops::{
    bev_transport, concat, conv2d, gather_cells, scatter_to_grid, BnMode, TransportRecord,
};

use std::cell::{Ref, RefCell};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

use crate::scalar::Scalar;

/// Errors produced by tensor construction and ops.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    AxisOutOfRange {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("tensor shapes must have positive dims, got {shape:?}")]
    EmptyDim { shape: Vec<usize> },
    #[error("data length {len} does not match shape {shape:?} (expect {expect})")]
    DataLength {
        len: usize,
        shape: Vec<usize>,
        expect: usize,
    },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: input contains a non-finite value")]
    NonFiniteInput { op: &'static str },
    #[error("backward requires a scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("backward called on a tensor that does not carry gradients")]
    NoGrad,
    #[error("{op}: {detail}")]
    Invalid { op: &'static str, detail: String },
}

/// Convenience alias used across the numeric modules.
pub type Result<T> = std::result::Result<T, TensorError>;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// Arguments handed to an op's backward function.
pub(crate) struct BackwardArgs<'a, S: Scalar> {
    /// Gradient flowing into the op's output.
    pub grad_out: &'a [S],
    /// The op's inputs, in the order they were passed to `from_op`.
    pub parents: &'a [Tensor<S>],
    /// The op's own output buffer (saved activations, e.g. for softmax).
    pub out: &'a [S],
}

/// Per-parent gradient contributions; `None` for parents that don't need one.
pub(crate) type BackwardFn<S> = Box<dyn Fn(&BackwardArgs<'_, S>) -> Vec<Option<Vec<S>>>>;

struct Inner<S: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<S>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<S>>>,
    parents: Vec<Tensor<S>>,
    backward: Option<BackwardFn<S>>,
}

/// Dense row-major tensor with optional gradient tracking.
pub struct Tensor<S: Scalar> {
    inner: Rc<Inner<S>>,
}

impl<S: Scalar> Clone for Tensor<S> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<S: Scalar> std::fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.iter().any(|&d| d == 0) {
        return Err(TensorError::EmptyDim {
            shape: shape.to_vec(),
        });
    }
    Ok(shape.iter().product())
}

impl<S: Scalar> Tensor<S> {
    fn build(
        shape: Vec<usize>,
        data: Vec<S>,
        requires_grad: bool,
        parents: Vec<Tensor<S>>,
        backward: Option<BackwardFn<S>>,
    ) -> Result<Self> {
        let expect = check_shape(&shape)?;
        if data.len() != expect {
            return Err(TensorError::DataLength {
                len: data.len(),
                shape,
                expect,
            });
        }
        Ok(Tensor {
            inner: Rc::new(Inner {
                id: fresh_id(),
                shape,
                data: RefCell::new(data),
                requires_grad,
                grad: RefCell::new(None),
                parents,
                backward,
            }),
        })
    }

    /// Constant tensor: carries no gradient.
    pub fn from_vec(shape: &[usize], data: Vec<S>) -> Result<Self> {
        Self::build(shape.to_vec(), data, false, Vec::new(), None)
    }

    /// Leaf parameter: gradient is accumulated here by `backward`.
    pub fn leaf(shape: &[usize], data: Vec<S>) -> Result<Self> {
        Self::build(shape.to_vec(), data, true, Vec::new(), None)
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let n = check_shape(shape)?;
        Self::from_vec(shape, vec![S::zero(); n])
    }

    pub fn full(shape: &[usize], value: S) -> Result<Self> {
        let n = check_shape(shape)?;
        Self::from_vec(shape, vec![value; n])
    }

    /// 1-element constant.
    pub fn scalar(value: S) -> Self {
        Self::from_vec(&[1], vec![value]).expect("scalar construction")
    }

    /// Output of an op: gradient tracking is inherited from the parents.
    /// The output buffer is checked for non-finite values.
    pub(crate) fn from_op(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<S>,
        parents: Vec<Tensor<S>>,
        backward: BackwardFn<S>,
    ) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op });
        }
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        let backward = requires_grad.then_some(backward);
        let parents = if requires_grad { parents } else { Vec::new() };
        Self::build(shape, data, requires_grad, parents, backward)
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn len(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false // shapes have positive dims by construction
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Borrow the underlying buffer read-only.
    pub fn data(&self) -> Ref<'_, Vec<S>> {
        self.inner.data.borrow()
    }

    /// Copy the underlying buffer out.
    pub fn values(&self) -> Vec<S> {
        self.inner.data.borrow().clone()
    }

    /// Value of a 1-element tensor.
    pub fn item(&self) -> Result<S> {
        if self.len() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.shape().to_vec(),
            });
        }
        Ok(self.inner.data.borrow()[0])
    }

    /// Copy of the accumulated gradient, if any has been produced.
    pub fn grad(&self) -> Option<Vec<S>> {
        self.inner.grad.borrow().clone()
    }

    /// Clear the accumulated gradient.
    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// In-place update of the raw buffer. Only the optimizer and
    /// checkpoint loading should use this; the autodiff graph assumes
    /// buffers never change between forward and backward.
    pub(crate) fn update_data(&self, f: impl FnOnce(&mut [S])) {
        f(&mut self.inner.data.borrow_mut());
    }

    /// Replace buffer contents (checkpoint restore). Lengths must match.
    pub fn load_data(&self, values: &[S]) -> Result<()> {
        if values.len() != self.len() {
            return Err(TensorError::DataLength {
                len: values.len(),
                shape: self.shape().to_vec(),
                expect: self.len(),
            });
        }
        self.inner.data.borrow_mut().copy_from_slice(values);
        Ok(())
    }

    pub(crate) fn accumulate_grad(&self, contribution: &[S]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contribution) {
                    *gi += *ci;
                }
            }
            None => *slot = Some(contribution.to_vec()),
        }
    }

    pub(crate) fn parents(&self) -> &[Tensor<S>] {
        &self.inner.parents
    }

    pub(crate) fn backward_fn(&self) -> Option<&BackwardFn<S>> {
        self.inner.backward.as_ref()
    }

    /// Reverse-mode sweep from a scalar. See [`backward`] for the walk order.
    pub fn backward(&self) -> Result<()> {
        backward::run(self)
    }

    /// Detached constant copy of this tensor (cuts the graph).
    pub fn detach(&self) -> Tensor<S> {
        Tensor::from_vec(self.shape(), self.values()).expect("detach preserves shape")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_zero_dims() {
        let err = Tensor::<f32>::zeros(&[2, 0, 3]).unwrap_err();
        assert!(matches!(err, TensorError::EmptyDim { .. }));
        let err = Tensor::<f32>::zeros(&[]).unwrap_err();
        assert!(matches!(err, TensorError::EmptyDim { .. }));
    }

    #[test]
    fn rejects_wrong_data_length() {
        let err = Tensor::from_vec(&[2, 2], vec![1.0f32; 3]).unwrap_err();
        assert!(matches!(err, TensorError::DataLength { expect: 4, .. }));
    }

    #[test]
    fn grad_accumulates_across_calls() {
        let g0 = vec![1.0f64, 2.0];
        let t = Tensor::leaf(&[2], vec![0.0, 0.0]).unwrap();
        t.accumulate_grad(&g0);
        t.accumulate_grad(&g0);
        assert_eq!(t.grad().unwrap(), vec![2.0, 4.0]);
        t.zero_grad();
        assert!(t.grad().is_none());
    }

    #[test]
    fn item_requires_single_element() {
        let t = Tensor::from_vec(&[2], vec![1.0f32, 2.0]).unwrap();
        assert!(matches!(t.item(), Err(TensorError::NonScalarLoss { .. })));
    }
}
