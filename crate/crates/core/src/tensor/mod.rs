//! Minimal reverse-mode autodiff: tensors, tape, parameters, optimizers.

mod array;
mod float;
mod graph;
mod init;
mod optim;
mod params;

pub use array::Tensor;
pub use float::{Float, MatRef};
pub use graph::{Grads, Graph, Var};
pub use init::{kaiming_bound, kaiming_uniform, zero_bias};
pub use optim::{OptimizerConfig, OptimizerKind, OptimizerState};
pub use params::{Param, ParamSet};

/// True when `XTAB_VERIFY=1` asks for f64 verification mode.
pub fn verification_mode_requested() -> bool {
    std::env::var("XTAB_VERIFY").is_ok_and(|v| v == "1")
}
