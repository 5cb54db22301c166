//! Explorable single-image super-resolution through variational sparse
//! representation.
//!
//! A low-resolution image `y` is lifted to a deterministic estimate `m`
//! (bicubic by default) and a stochastic residual `e`. The residual of every
//! LR pixel is an `s×s` tile `z·ω_i`, where the basis `z` is predicted per
//! image and the sparse coefficients `ω_i` are drawn from a per-pixel Gaussian
//! whose parameters are inferred from `y`. Re-drawing `ω` yields arbitrarily
//! many plausible reconstructions; a back-projection step keeps each of them
//! consistent with `y`.
//!
//! Crate layout:
//! - [`numerics`]: dense tensors, tape-based reverse-mode autodiff, Adam.
//! - [`imaging`]: PNG I/O, the canonical bicubic degradation, patch pairs.
//! - [`vspm`]: the two-branch model, sampling and consistency projection.
//! - [`objective`]: normal-gamma sparse prior and the training losses.
//! - [`trainer`]: optimization schedule and checkpoints.
//! - [`metrics`]: PSNR, LR PSNR, a random-feature perceptual proxy and the
//!   diversity score.
//! - [`cli`]: configuration, run manifests and the command front-end.

pub mod cli;
pub mod error;
pub mod imaging;
pub mod metrics;
pub mod numerics;
pub mod objective;
pub mod oracle;
pub mod rng;
pub mod trainer;
pub mod vspm;

pub use error::{Error, Result};
