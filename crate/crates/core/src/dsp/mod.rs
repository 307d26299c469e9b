//! Filtering, differential-entropy features, LDS smoothing and the
//! channel/segment cleaning heuristics applied to raw trials.

mod features;
mod filter;
mod preprocess;

pub use features::{
    differential_entropy, extract_de, lds_smooth, tail_windows, Band, BandSpec, FeatureSample,
    RawTrial, DE_VARIANCE_FLOOR,
};
pub use filter::{bandpass, butter_bandpass, iir_notch, notch, Section, Sos, BUTTER_ORDER, NOTCH_Q};
pub use preprocess::{
    detect_bad_channels, interpolate_channels, interpolation_weights, pearson, reject_bad_segments,
    process_trial, rereference_mean, PreprocessConfig,
};
