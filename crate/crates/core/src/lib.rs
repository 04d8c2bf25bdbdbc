//! Encoder-predictor sleep staging.
//!
//! The crate is organized along the processing chain:
//!
//! ```text
//! EDF + hypnogram ──► data        parse, map labels, resample, split, synthesize
//!                 ──► signal      30 s epochs (E, C, 3000) or log-STFT (E, C, 29, 129)
//!                 ──► model       encoder → predictor → head, built from a ModelSpec
//!                 ──► train       focal loss, AdamW, gradient accumulation, LR finder
//!                 ──► eval        sliding-window inference, metrics, bootstrap tests
//!                 ──► experiment  architecture grids, result tables
//! ```
//!
//! All randomness flows through [`rng`], which wraps a ChaCha8 generator so
//! results are reproducible across runs and platforms.

pub mod data;
pub mod eval;
pub mod experiment;
pub mod model;
pub mod rng;
pub mod signal;
pub mod train;

/// Number of canonical sleep-stage classes (W, N1, N2, N3, REM).
pub const NUM_CLASSES: usize = 5;

/// Duration of one scoring epoch in seconds.
pub const EPOCH_SECONDS: f64 = 30.0;

/// Sampling rate every model input is brought to.
pub const TARGET_SAMPLE_RATE: f64 = 100.0;

/// Samples per epoch at [`TARGET_SAMPLE_RATE`].
pub const EPOCH_SAMPLES: usize = 3000;
