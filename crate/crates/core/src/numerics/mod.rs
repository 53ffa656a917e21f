//! Dense tensors, elementwise nonlinearities, reverse-mode gradients and a
//! finite-difference gradient oracle.

mod gradcheck;
pub mod ops;
mod params;
pub mod rng;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_sampled, GradCheckReport};
pub use ops::{silu, softmax};
pub use params::{Param, ParamId, ParamStore};
pub use rng::SplitMix64;
pub use tape::{BackwardCtx, Gradients, ParamVars, Tape, Var};
pub use tensor::{matmul, Tensor};
pub(crate) use tensor::{matmul_nt, matmul_tn};
