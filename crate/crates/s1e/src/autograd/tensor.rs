//! Dense f64 tensors with optional gradient tracking.
//!
//! Tensors are immutable once created: every operation produces a fresh
//! tensor, and parameter updates swap in new tensors rather than mutating
//! storage in place. All values are validated to be finite at creation,
//! so NaN/Inf surfaces as an error at the op that produced it instead of
//! propagating silently through a training run.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use thiserror::Error;

/// Stable identity of a tensor; gradient maps are keyed by this.
pub type TensorId = u64;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> TensorId {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got {numel} elements")]
    NotScalar { numel: usize },
    #[error("backward already ran on this graph; rebuild the graph before calling it again")]
    GraphConsumed,
    #[error("parameter {name} has no gradient and is not frozen")]
    MissingGrad { name: String },
    #[error("index {index} out of bounds for axis of size {size} in {op}")]
    BadIndex {
        op: &'static str,
        index: usize,
        size: usize,
    },
}

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug)]
struct TensorInner {
    id: TensorId,
    shape: Vec<usize>,
    /// Shared storage: reshapes alias the same buffer under a new shape.
    data: Arc<Vec<f64>>,
    requires_grad: bool,
    /// True when this tensor participates in the recorded graph (it is a
    /// gradient leaf or was produced from one).
    tracked: bool,
}

/// A dense multi-dimensional array of f64 in row-major order.
#[derive(Clone, Debug)]
pub struct Tensor {
    inner: Arc<TensorInner>,
}

impl Tensor {
    fn build(shape: Vec<usize>, data: Arc<Vec<f64>>, requires_grad: bool, tracked: bool) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            inner: Arc::new(TensorInner {
                id: fresh_id(),
                shape,
                data,
                requires_grad,
                tracked,
            }),
        }
    }

    fn validated(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
        tracked: bool,
    ) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::ShapeMismatch {
                op,
                expected: format!("{numel} elements for shape {shape:?}"),
                got: format!("{} elements", data.len()),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op });
        }
        Ok(Tensor::build(shape, Arc::new(data), requires_grad, tracked))
    }

    /// A constant (non-differentiable) tensor.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        Tensor::validated("tensor_new", shape.to_vec(), data, false, false)
    }

    /// A gradient leaf: `backward` will report a gradient for it.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        Tensor::validated("tensor_param", shape.to_vec(), data, true, true)
    }

    /// Internal constructor for op outputs; `tracked` marks graph membership.
    pub(crate) fn from_op(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        tracked: bool,
    ) -> Result<Tensor> {
        Tensor::validated(op, shape, data, false, tracked)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let numel = shape.iter().product();
        Tensor::build(shape.to_vec(), Arc::new(vec![0.0; numel]), false, false)
    }

    /// Same storage under a different shape; no copy, no validation.
    pub(crate) fn aliased(&self, op: &'static str, shape: Vec<usize>, tracked: bool) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op,
                expected: format!("{numel} elements for shape {shape:?}"),
                got: format!("{} elements", self.numel()),
            });
        }
        Ok(Tensor::build(shape, Arc::clone(&self.inner.data), false, tracked))
    }

    pub fn scalar(v: f64) -> Result<Tensor> {
        Tensor::new(&[1], vec![v])
    }

    /// Same values, fresh identity, chosen grad flag. Used by optimizers and
    /// by finite-difference probing.
    pub fn with_data(&self, data: Vec<f64>, requires_grad: bool) -> Result<Tensor> {
        Tensor::validated(
            "tensor_with_data",
            self.shape().to_vec(),
            data,
            requires_grad,
            requires_grad,
        )
    }

    pub fn id(&self) -> TensorId {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.inner.data
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn tracked(&self) -> bool {
        self.inner.tracked
    }

    /// The single value of a scalar tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(TensorError::NotScalar {
                numel: self.numel(),
            });
        }
        Ok(self.inner.data[0])
    }

    /// True when both handles point at the same storage (weight sharing).
    pub fn ptr_eq(&self, other: &Tensor) -> bool {
        Arc::ptr_eq(&self.inner, &other.inner)
    }
}
