//! Spectral hallucination metrics for language-model embeddings.
//!
//! The crate computes the **EigenScore** of a generation-embedding matrix —
//! the mean log-eigenvalue of the regularized covariance of K sampled
//! outputs — and its fast spectral approximation, the **Efficient
//! EigenScore (EES)**, which estimates the same log-spectral mass through
//! Chebyshev moments of the density of states and stochastic trace
//! estimation, never materializing the covariance.
//!
//! On top of the two metrics sit:
//!
//! - [`sensitivity`]: detection of **Sensitive Embedding Indices** (SEIs) —
//!   embedding coordinates with outsized variability across training
//!   checkpoints — and the SEI-vs-random dropout experiment.
//! - [`send`]: the **SenD** (Sensitivity Dropout) training protocol run
//!   against a small feed-forward next-token model: every T checkpoints the
//!   current SEIs are recomputed and deterministically zeroed for the next
//!   T, until both the loss and the EES stopping thresholds are met.
//! - [`bench`]: a wall-clock scaling harness comparing the exact and
//!   approximate score paths over a grid of matrix shapes and moment
//!   counts, with CSV output.
//! - [`snapshot`]: a fixed little-endian binary interchange format for
//!   embedding matrices, plus a JSON manifest for checkpoint series.
//!
//! All randomized operations take explicit seeds and are bit-deterministic
//! for a given seed, including under the internal rayon parallelism.

pub mod bench;
pub mod linalg;
pub mod scores;
pub mod send;
pub mod sensitivity;
pub mod snapshot;
pub mod spectral;

pub use linalg::{DenseMatrix, LinalgError, Vector};
pub use scores::{EesConfig, ScoreError, ScoreMethod, ScoreReport};
pub use sensitivity::{CheckpointSeries, DropoutMask, SensitivityProfile};
pub use send::{RunLog, SendConfig, ToyModelConfig};
