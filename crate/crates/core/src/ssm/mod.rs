//! Selective state-space core.
//!
//! Per channel `d` and state `s` the layer runs the linear recurrence
//!
//! ```text
//! h[n,d,s] = Ā[n,d,s]·h[n−1,d,s] + B̄[n,d,s]·x[n,d]      h[−1] = 0
//! y[n,d]   = Σ_s C[n,s]·h[n,d,s] + D[d]·x[n,d]
//! ```
//!
//! with `Ā = exp(Δ·A)` and `B̄ = ((exp(Δ·A) − 1)/A)·B` (exact zero-order
//! hold for a diagonal `A`). `B`, `C` and `Δ` are generated from the input.

mod discretize;
mod layer;
mod scan;

pub use discretize::{
    discretize, discretize_input, discretize_input_backward, discretize_transition,
    discretize_transition_backward, Discretization,
};
pub use layer::{gen_params, selective_ssm, SsmParams, SsmTrace, SsmVars, SsmWeights};
pub use scan::{
    blelloch_inclusive, scan_backward, scan_forward, scan_parallel, scan_sequential, AffinePair,
    ScanDims, ScanEngine, ScanGrads,
};
