//! A minimal f64 tensor engine with reverse-mode differentiation: enough for
//! MLPs, masked multi-head attention, shuffle/reshape operators, and the
//! segmentation losses, all checkable against finite differences.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod tensor;

pub use checkpoint::{CheckpointError, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use gradcheck::grad_check;
pub use graph::{GradMap, Graph, MASK_NEG};
pub use optim::{sgd_step, OptimKind, Optimizer, ParamId, ParamSet, Schedule};
pub use tensor::{Result, Tensor, TensorError, TensorId};
