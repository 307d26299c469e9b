//! Sample banks on disk, model checkpoints, train/test split protocols and
//! the seeded synthetic generator.
//!
//! A bank directory holds `manifest.json`, `features.bin` (magic
//! `CLDTAFB1`, then every sample's channels × bands DE as little-endian
//! `f32` in manifest order), the montage as `montage.csv`, and optionally
//! `raw/t<index>.bin` per raw trial (magic `CLDTARW1`, `fs` as `f64`, then
//! channels × samples `f32`).

mod bank;
mod checkpoint;
mod split;
mod synth;

pub use bank::{read_bank, write_bank, SampleBank, FEATURES_MAGIC, FORMAT_VERSION, RAW_MAGIC};
pub use checkpoint::{
    load_checkpoint, load_checkpoint_for, save_checkpoint, Checkpoint, Precision, CHECKPOINT_MAGIC,
};
pub use split::{apply_split, SplitProtocol, SplitRule};
pub use synth::{
    gen_synthetic, gen_synthetic_with_truth, synthetic_montage, SynthMode, SynthSpec, SynthTruth, SYNTH_FS,
};

#[cfg(test)]
mod tests;
