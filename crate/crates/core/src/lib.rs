//! Contrastive pretraining of a diagonal-masked transformer encoder on
//! differential-entropy EEG features, with few-shot calibration for new
//! subjects.
//!
//! The crate is organised bottom-up:
//!
//! ```text
//! montage    electrode geometry, channel alignment, neighbour queries
//! dsp        filters, differential entropy, LDS smoothing, preprocessing
//! augment    MixUp / channel masking and the two contrastive views
//! gradcore   tensors plus a reverse-mode tape with finite-difference checks
//! model      embeddings, self-unknown attention encoder, projector, classifier
//! loss       NT-BCE contrastive loss and cross-entropy
//! train      Adam, contrastive pretraining, calibration, prediction
//! eval       LOSOCV, ICD/ICS, robustness sweeps, connectivity, export
//! data_io    sample banks, checkpoints, split protocols, synthetic data
//! config     the serialisable run configuration used by the CLI
//! ```

pub mod augment;
pub mod config;
pub mod data_io;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod gradcore;
pub mod loss;
pub mod model;
pub mod montage;
pub mod train;

pub use error::{Error, Result};
