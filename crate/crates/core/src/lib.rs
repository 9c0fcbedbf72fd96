//! Highway backpropagation for deep sequential models.
//!
//! A layer is split as `f(x) = r(x, g(x))`, giving `∂f/∂x = J + K` with an
//! expensive block Jacobian `J` and a cheap structured residual Jacobian
//! `K`. The backward pass is approximated iteratively: accumulate estimates
//! along the residual path with a parallel cumulative sum-product scan, then
//! push them through every block in parallel. After `k` iterations the
//! estimate is the sum of all gradient paths crossing at most `k` blocks;
//! after `L` it is exact.

pub mod engine;
pub mod error;
pub mod harness;
pub mod layers;
pub mod numkit;
pub mod oracle;
pub mod scan;

pub use engine::{
    exact_backprop, finalize_params, fpi, highway_bp, initial_estimate, iterate, run_forward,
    Algorithm, BackwardStats, Batch, ForwardPass, GradientEstimate, GradientSet, Gradients, Head,
    LossAttachment, ModelGraph, PathSplit, Targets,
};
pub use error::{Error, Result};
pub use layers::{
    Activation, BlockSpec, InitSpec, JacobianKind, LayerKind, LayerSpec, LayerTape, ParamGroup,
    ParamSet, ResidualJacobian,
};
pub use numkit::{hadamard, rel_l2, vec_mat, Cotangent, Mat64, Rng, StateVec, Vec64};
pub use scan::{apply_k, compose_k, cumsumprod, cumsumprod_par, cumsumprod_seq, KChain, ScanOutput};
