//! Numeric substrate: tensors, seeded randomness, slice kernels, the
//! autodiff graph and a finite-difference gradient checker.

pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod params;
pub mod rng;
pub mod tensor;

pub use gradcheck::{grad_check, grad_check_report, grad_check_with, GradCheckReport, DEFAULT_EPS};
pub use graph::{Graph, Trace, Var};
pub use params::{Gradients, ParamId, ParamStore};
pub use rng::{seeded_normal, Rng};
pub use tensor::{Scalar, Tensor};
