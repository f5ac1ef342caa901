//! Training-free checkpoint surgery for paired Base/Instruct models.
//!
//! An Instruct model is refined by decomposing each linear layer's weight
//! delta `W_Δ = W_I − W_B` with an SVD, splitting the singular spectrum at
//! `K = ⌈eRank(W_Δ)⌉`, and dropping (Timber-L) or attenuating (Timber) the
//! tail before adding the rebuilt delta back onto the Base weights. Rank- and
//! energy-ratio truncation plus plain linear interpolation are available as
//! baselines, and an unbiased Pass@k estimator scores rollout logs.
//!
//! Module map:
//!
//! - [`spectral`] — singular spectra, effective rank, thresholding, and the
//!   refinement strategies (plus SVD/reconstruction with the `linalg`
//!   feature).
//! - [`delta`] — delta algebra between paired weight matrices.
//! - [`checkpoint`] — safetensors container I/O, sharded indexes, and layer
//!   selection (`io` feature).
//! - [`pipeline`] — whole-model refinement and analysis runs (`io` feature).
//! - [`metrics`] — Pass@k / Mean@k estimation over graded rollouts.

pub mod delta;
pub mod error;
pub mod metrics;
pub mod spectral;
pub mod tensor;

#[cfg(feature = "io")]
pub mod checkpoint;
#[cfg(feature = "io")]
pub mod pipeline;

pub use error::{Error, Result};
pub use spectral::{RefineStrategy, SingularSpectrum};
pub use tensor::{DenseMatrix, Dtype, Precision, WeightMatrix};
