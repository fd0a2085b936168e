//! Fake-image detection via natural-trace contrastive training.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`] — a small eager autodiff engine (dense f64 tensors on a
//!   gradient tape) with a finite-difference gradient checker.
//! * [`losses`] — fused, gradient-verified loss kernels for the two
//!   training stages plus their combining rules.
//! * [`model`] — the convolutional encoder, projection heads, linear
//!   classifier, and a checksummed checkpoint format.
//! * [`data`] — manifests, a PPM image codec, paired-view augmentation,
//!   batch assembly, and a deterministic synthetic corpus generator.
//! * [`imgproc`] — shared image primitives (Gaussian blur, bilinear
//!   resize) used by both augmentation and robustness perturbations.
//! * [`train`] — SGD with momentum and the stage-1 / stage-2 loops.
//! * [`eval`] — scoring, threshold metrics, average precision,
//!   perturbations, and the robustness sweep.
//!
//! All randomness flows through [`rng::Rng`], a counter-style seeded
//! generator with named substreams, so every pipeline in the crate is
//! bitwise reproducible from a single `u64` seed.

pub mod data;
pub mod error;
pub mod eval;
pub mod imgproc;
pub mod losses;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

/// Cap the process-wide worker pool at `n` threads.
///
/// Call once, before any parallel work; later calls fail once the pool
/// exists. One worker thread gives bitwise-deterministic runs; higher
/// counts only change timing, never results, because no parallel loop in
/// the crate reduces in a data-dependent order.
pub fn configure_threads(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::Argument("threads must be ≥ 1".to_string()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Argument(format!("thread pool already configured: {e}")))
}
