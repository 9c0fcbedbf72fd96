//! Forward evaluation, the iterative highway backward pass, and the exact
//! sequential reference.

mod backward;
mod forward;
mod model;

pub use backward::{
    backprop_from_forward, compute_gradients, exact_backprop, finalize_params, fpi, highway_bp,
    highway_bp_with, highway_from_forward, highway_with_chain, initial_estimate, iterate,
    layer_param_contributions, residual_chain, Algorithm, BackwardStats, GradientEstimate,
    GradientSet, Gradients, HighwayOptions, PathSplit,
};
pub use forward::{loss, predict, run_forward, ForwardPass};
pub use model::{Batch, Head, LossAttachment, ModelGraph, Targets};
