//! Dense float64 tensors with define-by-run reverse-mode differentiation.
//!
//! A [`Tensor`] is a cheap reference-counted handle. Every operation on a
//! tensor that requires gradients records a [`TapeNode`] on its result,
//! pointing back at its inputs, so the recorded graph is acyclic by
//! construction. [`Tensor::backward`] walks that graph once in reverse
//! topological order and accumulates gradients into the leaves.
//!
//! Tensors are deliberately `!Send`: a tape belongs to exactly one thread.
//! Independent models may be trained on separate threads as long as each
//! thread builds its own.

mod autograd;
mod conv;
mod ops;

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::fmt;
use std::rc::Rc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{shape_err, Result};

pub use conv::{batch_norm, conv2d, BatchNormState, Conv2dSpec};
pub use ops::{concat, split};
pub(crate) use ops::{sigmoid_f, softplus_f};

/// Backward rule of a recorded operation.
///
/// Arguments are the gradient of the output, the output values, the input
/// tensors and a mask telling which inputs need a gradient. Returns one
/// optional gradient per input, in input order.
pub(crate) type BackwardFn =
    Box<dyn Fn(&[f64], &[f64], &[Tensor], &[bool]) -> Vec<Option<Vec<f64>>>>;

pub(crate) struct TapeNode {
    pub(crate) op: &'static str,
    pub(crate) inputs: Vec<Tensor>,
    pub(crate) backward: BackwardFn,
}

struct Inner {
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    node: Option<TapeNode>,
}

#[derive(Clone)]
pub struct Tensor(Rc<Inner>);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` without recording any operations on the tape.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let _restore = Restore(prev);
    f()
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if shape.contains(&0) {
            return shape_err(format!("zero-sized dimension in shape {shape:?}"));
        }
        if numel(shape) != data.len() {
            return shape_err(format!(
                "shape {shape:?} holds {} elements, buffer has {}",
                numel(shape),
                data.len()
            ));
        }
        Ok(Tensor::raw(data, shape.to_vec(), false, None))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::raw(vec![0.0; numel(shape)], shape.to_vec(), false, None)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        Tensor::raw(vec![value; numel(shape)], shape.to_vec(), false, None)
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::raw(vec![value], vec![1], false, None)
    }

    /// Samples i.i.d. `N(0, std²)` entries.
    pub fn randn(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
        let data = (0..numel(shape))
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Tensor::raw(data, shape.to_vec(), false, None)
    }

    /// Samples i.i.d. entries uniformly from `[lo, hi)`.
    pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
        let data = (0..numel(shape)).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor::raw(data, shape.to_vec(), false, None)
    }

    /// Returns a new leaf holding a copy of this tensor's values, detached
    /// from any tape, with gradient tracking set as requested.
    pub fn leaf(&self, requires_grad: bool) -> Tensor {
        Tensor::raw(self.to_vec(), self.shape().to_vec(), requires_grad, None)
    }

    /// Turns a freshly constructed tensor into a trainable leaf.
    pub fn requires_grad(self) -> Tensor {
        self.leaf(true)
    }

    pub(crate) fn raw(
        data: Vec<f64>,
        shape: Vec<usize>,
        requires_grad: bool,
        node: Option<TapeNode>,
    ) -> Tensor {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor(Rc::new(Inner {
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad,
            node,
        }))
    }

    /// Builds the result of an operation, recording a tape node when any
    /// input needs a gradient and recording is enabled.
    pub(crate) fn from_op(
        data: Vec<f64>,
        shape: Vec<usize>,
        op: &'static str,
        inputs: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Tensor {
        let track = grad_enabled() && inputs.iter().any(|t| t.0.requires_grad);
        if track {
            Tensor::raw(data, shape, true, Some(TapeNode { op, inputs, backward }))
        } else {
            Tensor::raw(data, shape, false, None)
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        numel(&self.0.shape)
    }

    /// Size of dimension `axis`.
    pub fn dim(&self, axis: usize) -> usize {
        self.0.shape[axis]
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.0.data.borrow()
    }

    /// Mutable access to the values. Intended for optimizers and
    /// finite-difference probes acting on leaves.
    pub fn data_mut(&self) -> RefMut<'_, Vec<f64>> {
        self.0.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.borrow().clone()
    }

    pub fn item(&self) -> f64 {
        self.0.data.borrow()[0]
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        let mut flat = 0;
        for (i, (&ix, &d)) in index.iter().zip(self.shape()).enumerate() {
            assert!(ix < d, "index {ix} out of bounds for axis {i} of size {d}");
            flat = flat * d + ix;
        }
        self.0.data.borrow()[flat]
    }

    pub fn is_tracked(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.node.is_none()
    }

    /// Name of the operation that produced this tensor, if it was recorded.
    pub fn op_name(&self) -> Option<&'static str> {
        self.0.node.as_ref().map(|n| n.op)
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    pub(crate) fn accumulate_grad(&self, g: &[f64]) {
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => *slot = Some(g.to_vec()),
        }
    }

    pub(crate) fn node(&self) -> Option<&TapeNode> {
        self.0.node.as_ref()
    }

    pub(crate) fn key(&self) -> usize {
        Rc::as_ptr(&self.0) as usize
    }

    pub fn ptr_eq(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    /// True when every element is finite.
    pub fn all_finite(&self) -> bool {
        self.data().iter().all(|v| v.is_finite())
    }

    pub(crate) fn expect_rank(&self, rank: usize, what: &str) -> Result<()> {
        if self.rank() != rank {
            return shape_err(format!(
                "{what} expects a rank-{rank} tensor, got shape {:?}",
                self.shape()
            ));
        }
        Ok(())
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let data = self.data();
        let preview: Vec<f64> = data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("op", &self.op_name())
            .field("requires_grad", &self.is_tracked())
            .field("head", &preview)
            .finish()
    }
}
