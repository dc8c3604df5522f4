//! Dense f32 tensors with reverse-mode autodiff on a thread-local tape.
//!
//! Forward ops record backward closures while a [`Tape`] is alive; dropping
//! the tape discards the recording. Values are stored in f32, reductions and
//! matmul accumulate in f64. All kernels iterate in a fixed order, so equal
//! inputs produce bit-identical outputs and gradients.

pub mod ops;

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} does not fit buffer of {len} elements")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("{op}: expected a scalar, got shape {shape:?}")]
    NotScalar {
        op: &'static str,
        shape: Vec<usize>,
    },
    #[error("{op}: axis {axis} invalid for shape {shape:?}")]
    BadAxis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: index {index} out of range ({limit})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        limit: usize,
    },
    #[error("{op}: {msg}")]
    Unsupported { op: &'static str, msg: String },
}

pub(crate) struct Inner {
    pub(crate) data: Vec<f32>,
    pub(crate) shape: Vec<usize>,
    pub(crate) requires_grad: bool,
    /// Leaf parameters keep their gradient across backward passes;
    /// intermediates hand it off once and reset to None.
    pub(crate) is_param: bool,
    pub(crate) grad: Option<Vec<f32>>,
}

/// Shared handle to a tensor. Cloning is cheap and aliases the same storage.
#[derive(Clone)]
pub struct Tensor {
    pub(crate) inner: Rc<RefCell<Inner>>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let inner = self.inner.borrow();
        f.debug_struct("Tensor")
            .field("shape", &inner.shape)
            .field("requires_grad", &inner.requires_grad)
            .finish()
    }
}

impl Tensor {
    pub fn new(data: Vec<f32>, shape: &[usize]) -> Result<Tensor, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || shape.is_empty() {
            return Err(TensorError::InvalidShape {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(Self::build(data, shape.to_vec(), false, false))
    }

    /// Trainable leaf: accumulates gradients until [`Tensor::zero_grad`].
    pub fn param(data: Vec<f32>, shape: &[usize]) -> Result<Tensor, TensorError> {
        let t = Tensor::new(data, shape)?;
        {
            let mut inner = t.inner.borrow_mut();
            inner.requires_grad = true;
            inner.is_param = true;
        }
        Ok(t)
    }

    pub fn scalar(v: f32) -> Tensor {
        Self::build(vec![v], vec![1], false, false)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let numel = shape.iter().product();
        Self::build(vec![0.0; numel], shape.to_vec(), false, false)
    }

    pub fn full(shape: &[usize], v: f32) -> Tensor {
        let numel = shape.iter().product();
        Self::build(vec![v; numel], shape.to_vec(), false, false)
    }

    pub(crate) fn from_op(data: Vec<f32>, shape: Vec<usize>, requires_grad: bool) -> Tensor {
        Self::build(data, shape, requires_grad, false)
    }

    fn build(data: Vec<f32>, shape: Vec<usize>, requires_grad: bool, is_param: bool) -> Tensor {
        Tensor {
            inner: Rc::new(RefCell::new(Inner {
                data,
                shape,
                requires_grad,
                is_param,
                grad: None,
            })),
        }
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    /// Copy of the stored values.
    pub fn data(&self) -> Vec<f32> {
        self.inner.borrow().data.clone()
    }

    /// Value of a single-element tensor.
    ///
    /// Panics on other shapes; callers validate scalarness where it is not
    /// structurally guaranteed.
    pub fn value(&self) -> f32 {
        let inner = self.inner.borrow();
        assert_eq!(inner.data.len(), 1, "value() on non-scalar tensor");
        inner.data[0]
    }

    pub fn grad(&self) -> Option<Vec<f32>> {
        self.inner.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// Overwrite the stored values in place. Shape must be preserved.
    pub fn set_data(&self, data: &[f32]) -> Result<(), TensorError> {
        let mut inner = self.inner.borrow_mut();
        if data.len() != inner.data.len() {
            return Err(TensorError::InvalidShape {
                shape: inner.shape.clone(),
                len: data.len(),
            });
        }
        inner.data.copy_from_slice(data);
        Ok(())
    }

    /// Mutable access to values and current gradient, e.g. for an optimizer
    /// update step.
    pub fn with_data_grad_mut<R>(&self, f: impl FnOnce(&mut [f32], Option<&[f32]>) -> R) -> R {
        let mut inner = self.inner.borrow_mut();
        let Inner { data, grad, .. } = &mut *inner;
        f(data, grad.as_deref())
    }

    pub(crate) fn accumulate_grad(&self, contrib: &[f32]) {
        let mut inner = self.inner.borrow_mut();
        debug_assert_eq!(contrib.len(), inner.data.len());
        let len = inner.data.len();
        let grad = inner.grad.get_or_insert_with(|| vec![0.0; len]);
        for (g, &c) in grad.iter_mut().zip(contrib) {
            *g += c;
        }
    }

    /// Gradient handoff during backward: intermediates surrender their
    /// gradient (so a later backward pass starts clean), parameters keep it.
    pub(crate) fn take_grad_for_backprop(&self) -> Option<Vec<f32>> {
        let mut inner = self.inner.borrow_mut();
        if inner.is_param {
            inner.grad.clone()
        } else {
            inner.grad.take()
        }
    }

    pub(crate) fn dims2(&self, op: &'static str) -> Result<(usize, usize), TensorError> {
        let inner = self.inner.borrow();
        match inner.shape.as_slice() {
            &[m, n] => Ok((m, n)),
            _ => Err(TensorError::Unsupported {
                op,
                msg: format!("expected a 2-d tensor, got shape {:?}", inner.shape),
            }),
        }
    }
}

type BackStep = Box<dyn Fn()>;

thread_local! {
    static TAPE: RefCell<Option<Vec<BackStep>>> = const { RefCell::new(None) };
}

pub(crate) fn tape_active() -> bool {
    TAPE.with(|t| t.borrow().is_some())
}

pub(crate) fn tape_record(step: impl Fn() + 'static) {
    TAPE.with(|t| {
        if let Some(steps) = t.borrow_mut().as_mut() {
            steps.push(Box::new(step));
        }
    });
}

/// Recording scope for reverse-mode autodiff. At most one tape per thread;
/// ops run without an active tape compute forward only.
pub struct Tape {
    _not_send: std::marker::PhantomData<*const ()>,
}

impl Tape {
    pub fn new() -> Tape {
        TAPE.with(|t| {
            let mut slot = t.borrow_mut();
            assert!(slot.is_none(), "a Tape is already active on this thread");
            *slot = Some(Vec::new());
        });
        Tape {
            _not_send: std::marker::PhantomData,
        }
    }

    pub fn num_steps(&self) -> usize {
        TAPE.with(|t| t.borrow().as_ref().map_or(0, Vec::len))
    }

    /// Seed d(loss)/d(loss) = 1 and replay recorded steps newest-first.
    /// Reverse order guarantees every consumer of a tensor runs before its
    /// producer. Calling backward again replays the tape and adds one more
    /// full gradient into each leaf parameter.
    pub fn backward(&self, loss: &Tensor) -> Result<(), TensorError> {
        if loss.numel() != 1 {
            return Err(TensorError::NotScalar {
                op: "backward",
                shape: loss.shape(),
            });
        }
        loss.accumulate_grad(&[1.0]);
        let steps = TAPE
            .with(|t| t.borrow_mut().take())
            .expect("tape vanished while its guard was alive");
        for step in steps.iter().rev() {
            step();
        }
        TAPE.with(|t| *t.borrow_mut() = Some(steps));
        Ok(())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Drop for Tape {
    fn drop(&mut self) {
        TAPE.with(|t| *t.borrow_mut() = None);
    }
}
