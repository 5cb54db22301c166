//! The two-branch explorable module.
//!
//! For every colour channel (one shared network applied channel-wise), the
//! basis branch maps the LR input to a dictionary `z ∈ R^{s²×C}` and the
//! coefficient branch maps it to per-pixel Gaussian parameters `(μ, σ)`
//! over `C` coefficients. A draw `ω = μ + σ ⊙ ε` is turned into a residual by
//! placing `z·ω_i` as an `s×s` tile at the HR location of LR pixel `i`; the
//! sample is `cem_project(m + e, y)` where `m` is the deterministic estimate.

mod cem;
pub mod checkpoint;
mod config;
mod model;
mod sampling;

pub use cem::{cem_project, cem_project_traced, CemTrace};
pub use config::{DeterministicPath, VSpMConfig};
pub use model::{BasisSet, BranchOutputs, CoeffDistribution, VSpMModel};
pub use sampling::{
    assemble_residual, channel_branches, deterministic_path, residual_on_graph, sample_coeffs, super_resolve,
    super_resolve_counters, super_resolve_with, SRSampleSet, SampleOptions,
};
