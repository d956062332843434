//! Numeric core of the structural feature-autoencoder anomaly localizer.
//!
//! Slices are lifted into a multi-channel feature space by a frozen residual
//! backbone, reconstructed by a convolutional autoencoder trained on
//! `1 − MSSIM`, and anomalies are localized from the per-pixel SSIM between
//! the extracted and reconstructed features.
//!
//! The crate is `no_std` (it needs `alloc`). Enable the `std` feature for
//! runtime SIMD dispatch in the matrix kernels.

#![cfg_attr(not(any(test, feature = "std")), no_std)]
// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

extern crate alloc;

mod error;
mod gemm;

pub mod backbone;
pub mod data;
pub mod dataset;
pub mod evaluation;
pub mod features;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod phantom;
pub mod resize;
pub mod scoring;
pub mod sink;
pub mod ssim;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
