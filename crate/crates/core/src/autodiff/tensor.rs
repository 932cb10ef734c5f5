use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};

/// Dense row-major tensor of 64-bit reals.
///
/// Values are immutable after creation; cloning a tensor is cheap (the
/// storage is shared). Parameters additionally carry a gradient buffer that
/// [`Tape::backward`](super::Tape::backward) accumulates into and that the
/// trainer zeroes between steps.
#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Rc<Vec<f64>>,
    grad: Option<Rc<RefCell<Vec<f64>>>>,
    /// (tape id, node id) of the operation that produced this tensor.
    pub(crate) node: Option<(u64, usize)>,
}

impl Tensor {
    /// A constant tensor that does not require gradients.
    pub fn new(values: Vec<f64>, shape: &[usize]) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Contract(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if values.len() != numel {
            return Err(Error::Dimension(format!(
                "{} values do not fill shape {shape:?}",
                values.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            values: Rc::new(values),
            grad: None,
            node: None,
        })
    }

    /// A trainable tensor: requires grad and owns a zeroed gradient buffer.
    pub fn param(values: Vec<f64>, shape: &[usize]) -> Result<Self> {
        let mut t = Self::new(values, shape)?;
        t.grad = Some(Rc::new(RefCell::new(vec![0.0; t.numel()])));
        Ok(t)
    }

    pub fn scalar(value: f64) -> Self {
        Self::new(vec![value], &[1]).expect("scalar shape is valid")
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Self::new(vec![0.0; numel], shape).expect("caller provides a positive shape")
    }

    pub(crate) fn from_node(
        values: Rc<Vec<f64>>,
        shape: Vec<usize>,
        tape_id: u64,
        node_id: usize,
    ) -> Self {
        Self {
            shape,
            values,
            grad: None,
            node: Some((tape_id, node_id)),
        }
    }

    pub(crate) fn plain_rc(values: Rc<Vec<f64>>, shape: Vec<usize>) -> Self {
        Self {
            shape,
            values,
            grad: None,
            node: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub(crate) fn values_rc(&self) -> Rc<Vec<f64>> {
        Rc::clone(&self.values)
    }

    /// The single value of a scalar tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.values[0])
    }

    pub fn requires_grad(&self) -> bool {
        self.grad.is_some()
    }

    /// Copy of the accumulated gradient, if this tensor requires grad.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.grad.as_ref().map(|g| g.borrow().clone())
    }

    pub(crate) fn grad_rc(&self) -> Option<Rc<RefCell<Vec<f64>>>> {
        self.grad.as_ref().map(Rc::clone)
    }

    pub fn zero_grad(&self) {
        if let Some(g) = &self.grad {
            for v in g.borrow_mut().iter_mut() {
                *v = 0.0;
            }
        }
    }

    /// Add `delta` into the gradient buffer, if this tensor requires grad.
    pub fn accumulate_grad(&self, delta: &[f64]) {
        if let Some(g) = &self.grad {
            for (dst, &d) in g.borrow_mut().iter_mut().zip(delta) {
                *dst += d;
            }
        }
    }

    /// Scale the gradient buffer in place, if present.
    pub fn scale_grad(&self, scale: f64) {
        if let Some(g) = &self.grad {
            for v in g.borrow_mut().iter_mut() {
                *v *= scale;
            }
        }
    }

    /// Mutate the underlying values in place. Any live graph keeps the old
    /// storage via copy-on-write, so recorded forward passes stay intact.
    pub fn update_values<F: FnOnce(&mut [f64])>(&mut self, f: F) {
        f(Rc::make_mut(&mut self.values).as_mut_slice());
        self.node = None;
    }

    /// Independent copy with fresh value and gradient storage.
    pub fn deep_clone(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            values: Rc::new(self.values.as_ref().clone()),
            grad: self
                .grad
                .as_ref()
                .map(|g| Rc::new(RefCell::new(g.borrow().clone()))),
            node: None,
        }
    }
}
