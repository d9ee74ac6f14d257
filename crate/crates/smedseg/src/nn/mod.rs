//! Minimal f64 neural-network toolkit: tensors, reverse-mode autodiff,
//! convolution/normalization layers, and Adam-family optimizers.
//!
//! Everything here is deterministic given a seed: initialization uses an
//! explicit counter-based RNG, and parallel loops partition output buffers
//! so reductions happen in a fixed order.

pub mod init;
pub mod layers;
pub mod ops;
pub mod optim;
pub mod tensor;
pub mod var;

pub use layers::Mode;
pub use optim::{Optimizer, OptimizerKind};
pub use tensor::Tensor;
pub use var::{NoGradGuard, Var};
