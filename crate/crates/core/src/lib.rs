//! Variational Bayesian 3-D CNN for camera-based heart-rate estimation.
//!
//! The crate is organised bottom-up:
//!
//! - [`autodiff`]: tensors with a reverse-mode tape for the handful of ops the
//!   network needs (3-D conv / transposed conv, max pooling, batch norm, ELU).
//! - [`bayes`]: Gaussian variational weights with reparameterised sampling
//!   and closed-form KL to the prior.
//! - [`network`]: the dual-branch (raw + frame-difference) encoder/decoder.
//! - [`losses`]: negative Pearson, SNR reward and KL regularisation.
//! - [`signal`]: Butterworth band-pass, spline resampling, spectral HR.
//! - [`synth`] and [`dataset`]: synthetic clips and their on-disk format.
//! - [`uncertainty`]: Monte-Carlo prediction and the evaluation metrics.
//! - [`trainer`]: AdamW with cosine schedule and checkpoints.
//!
//! Inner loops run on rayon when the `parallel` feature is on (default);
//! every parallel kernel is written so that results are bitwise identical
//! to the single-threaded run.

pub mod autodiff;
pub mod bayes;
pub mod dataset;
pub mod error;
pub mod losses;
pub mod network;
pub mod par;
pub mod rng;
pub mod signal;
pub mod synth;
pub mod tensor;
pub mod trainer;
pub mod uncertainty;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
