//! Dense tensors, differentiable kernels, layers and the optimizer.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod ops;
pub mod params;
pub mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{grad_check, grad_check_detailed, GradCheckReport};
pub use params::{Init, ParamId, ParamStore, Parameter, Partition};
pub use tensor::{matmul, Scalar, Tensor};
