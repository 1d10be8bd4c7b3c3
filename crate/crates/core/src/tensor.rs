//! Dense double-precision tensors used as nodes in a define-by-run graph.
//!
//! A [`Tensor`] is a shared handle: cloning it clones the handle, not the
//! storage. Gradients accumulate by summation into `grad` during
//! [`crate::graph::Graph::backward`] and are cleared by the optimizer.

use std::cell::{Ref, RefCell};
use std::rc::Rc;

use crate::error::{Error, Result};

pub(crate) struct TensorData {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub grad: Option<Vec<f64>>,
    pub requires_grad: bool,
}

/// Shared handle to a dense row-major array of `f64`.
#[derive(Clone)]
pub struct Tensor(pub(crate) Rc<RefCell<TensorData>>);

impl Tensor {
    fn build(shape: &[usize], values: Vec<f64>, requires_grad: bool) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::Contract(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                values.len()
            )));
        }
        Ok(Tensor(Rc::new(RefCell::new(TensorData {
            shape: shape.to_vec(),
            values,
            grad: None,
            requires_grad,
        }))))
    }

    /// Constant tensor (no gradient).
    pub fn from_vec(shape: &[usize], values: Vec<f64>) -> Result<Tensor> {
        Self::build(shape, values, false)
    }

    /// Trainable leaf tensor.
    pub fn param(shape: &[usize], values: Vec<f64>) -> Result<Tensor> {
        Self::build(shape, values, true)
    }

    pub fn scalar(v: f64) -> Tensor {
        Self::build(&[1], vec![v], false).unwrap()
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Self::build(shape, vec![0.0; n], false).unwrap()
    }

    /// Interior node produced by a graph op.
    pub(crate) fn traced(shape: Vec<usize>, values: Vec<f64>) -> Tensor {
        Tensor(Rc::new(RefCell::new(TensorData {
            shape,
            values,
            grad: None,
            requires_grad: true,
        })))
    }

    pub fn shape(&self) -> Vec<usize> {
        self.0.borrow().shape.clone()
    }

    pub fn ndim(&self) -> usize {
        self.0.borrow().shape.len()
    }

    pub fn len(&self) -> usize {
        self.0.borrow().values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn values(&self) -> Ref<'_, Vec<f64>> {
        Ref::map(self.0.borrow(), |d| &d.values)
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.borrow().values.clone()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        let d = self.0.borrow();
        assert_eq!(d.values.len(), 1, "item() on non-scalar tensor");
        d.values[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.borrow().requires_grad
    }

    pub fn set_requires_grad(&self, requires_grad: bool) {
        self.0.borrow_mut().requires_grad = requires_grad;
    }

    /// Accumulated gradient, if backward has touched this tensor.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.0.borrow_mut().grad = None;
    }

    /// Sum `delta` into the gradient buffer. No-op for tensors that opt out
    /// of gradients (e.g. frozen teacher outputs).
    pub(crate) fn accumulate_grad(&self, delta: &[f64]) {
        let mut d = self.0.borrow_mut();
        if !d.requires_grad {
            return;
        }
        let n = d.values.len();
        debug_assert_eq!(n, delta.len());
        let grad = d.grad.get_or_insert_with(|| vec![0.0; n]);
        for (g, dv) in grad.iter_mut().zip(delta) {
            *g += dv;
        }
    }

    pub(crate) fn seed_grad(&self, v: f64) {
        let mut d = self.0.borrow_mut();
        let n = d.values.len();
        d.grad = Some(vec![v; n]);
    }

    /// Overwrite values in place; shape must not change.
    pub fn set_values(&self, values: &[f64]) {
        let mut d = self.0.borrow_mut();
        assert_eq!(d.values.len(), values.len(), "set_values length mismatch");
        d.values.copy_from_slice(values);
    }

    /// Handles aliasing the same storage.
    pub fn same_storage(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let d = self.0.borrow();
        f.debug_struct("Tensor")
            .field("shape", &d.shape)
            .field("requires_grad", &d.requires_grad)
            .field("values", &d.values)
            .finish()
    }
}
