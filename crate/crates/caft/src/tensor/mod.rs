//! Minimal reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! Tensors are immutable once created; every differentiable operation
//! returns a fresh tensor that records its parents and a backward closure.
//! Calling [`Tensor::backward`] on a scalar walks the recorded graph in
//! reverse topological order and accumulates gradients into every node
//! that requires them.

mod ops;
pub mod gradcheck;

use std::cell::{Cell, RefCell};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward: root must be a scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("backward: root does not require grad")]
    DetachedRoot,
    #[error("backward: already called on this root")]
    RepeatedBackward,
    #[error("embedding-lookup: token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
}

pub type Result<T> = std::result::Result<T, TensorError>;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn fresh_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

type BackwardFn = Box<dyn Fn(&[f64])>;

pub(crate) struct Inner {
    id: u64,
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
    backward_run: Cell<bool>,
}

/// Dense row-major tensor with an optional gradient accumulator.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

fn check_finite(op: &'static str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(TensorError::InvalidShape {
                op: "from_vec",
                shape,
                reason: format!("expected {} values, got {}", numel, values.len()),
            });
        }
        check_finite("from_vec", &values)?;
        Ok(Self::constant(shape, values))
    }

    pub(crate) fn constant(shape: Vec<usize>, values: Vec<f64>) -> Self {
        Tensor {
            inner: Rc::new(Inner {
                id: fresh_id(),
                shape,
                values,
                requires_grad: false,
                grad: RefCell::new(None),
                parents: Vec::new(),
                backward: None,
                backward_run: Cell::new(false),
            }),
        }
    }

    /// A gradient-tracked leaf, typically a model parameter bound for one graph.
    pub fn leaf(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(TensorError::InvalidShape {
                op: "leaf",
                shape,
                reason: format!("expected {} values, got {}", numel, values.len()),
            });
        }
        check_finite("leaf", &values)?;
        Ok(Tensor {
            inner: Rc::new(Inner {
                id: fresh_id(),
                shape,
                values,
                requires_grad: true,
                grad: RefCell::new(None),
                parents: Vec::new(),
                backward: None,
                backward_run: Cell::new(false),
            }),
        })
    }

    pub fn scalar(v: f64) -> Self {
        Self::constant(vec![1], vec![v])
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self::constant(shape, vec![0.0; numel])
    }

    pub(crate) fn from_op(
        op: &'static str,
        shape: Vec<usize>,
        values: Vec<f64>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Result<Self> {
        check_finite(op, &values)?;
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        Ok(Tensor {
            inner: Rc::new(Inner {
                id: fresh_id(),
                shape,
                values,
                requires_grad,
                grad: RefCell::new(None),
                parents: if requires_grad { parents } else { Vec::new() },
                backward: if requires_grad { Some(backward) } else { None },
                backward_run: Cell::new(false),
            }),
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.inner.values
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1);
        self.inner.values[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub(crate) fn accumulate_grad(&self, delta: &[f64]) {
        if !self.inner.requires_grad {
            return;
        }
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    /// Reverse-mode sweep from a scalar root. Populates `grad` on every
    /// reachable node that requires grad, visiting each node exactly once
    /// in reverse construction order.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarRoot {
                shape: self.inner.shape.clone(),
            });
        }
        if !self.inner.requires_grad {
            return Err(TensorError::DetachedRoot);
        }
        if self.inner.backward_run.get() {
            return Err(TensorError::RepeatedBackward);
        }
        self.inner.backward_run.set(true);

        // Iterative post-order DFS; construction ids are monotone so sorting
        // the visited set descending yields a valid reverse topological order.
        let mut order: Vec<Tensor> = Vec::new();
        let mut seen: HashSet<u64> = HashSet::new();
        let mut stack: Vec<Tensor> = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if !t.inner.requires_grad || !seen.insert(t.inner.id) {
                continue;
            }
            for p in &t.inner.parents {
                stack.push(p.clone());
            }
            order.push(t);
        }
        order.sort_by_key(|t| std::cmp::Reverse(t.inner.id));

        self.accumulate_grad(&[1.0]);
        for node in &order {
            if let Some(back) = &node.inner.backward {
                let grad = node.inner.grad.borrow().clone();
                if let Some(g) = grad {
                    back(&g);
                }
            }
        }
        Ok(())
    }
}
