//! Spectral generalized energy distance.
//!
//! The crate provides the pieces needed to train implicit generative models
//! `y = f(c, z)` by minimizing an energy score whose metric is a multi-scale
//! spectrogram distance:
//!
//! * [`dsp`]: Hann-windowed overcomplete STFT, overlap-add resynthesis, mel filters.
//! * [`spectral`]: the multi-scale L1 + log-L2 spectrogram distance, as plain
//!   numbers and as a differentiable graph node.
//! * [`ged`]: kernel/distance conversion, MMD and energy-distance U-statistics,
//!   the energy score and the minibatch training loss with its repulsive term.
//! * [`autodiff`]: a small reverse-mode engine over dense `f64` tensors.
//! * [`models`], [`optim`]: generators, Adam with warmup, EMA and the training step.
//! * [`eval`]: coverage, norm and Fréchet-style diagnostics.
//! * [`experiments`]: the end-to-end runs driven by the `ged` binary.

pub mod autodiff;
pub mod checkpoint;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod ged;
mod linalg;
pub mod models;
pub mod optim;
pub mod rng;
pub mod spectral;
pub mod wav;

pub use error::{Error, Result};
pub use linalg::jacobi_eigen;
