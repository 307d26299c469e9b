//! Evaluation protocols and analyses: leave-one-subject-out and
//! subject-dependent accuracy, class-distance statistics, electrode-failure
//! and noise sweeps, channel connectivity and feature export.

mod analysis;
mod export;
mod protocol;
mod robustness;

pub use analysis::{
    connectivity, connectivity_from, icd_ics, mean_channel_representation, ClassDistances, ConnectivityResult,
};
pub use export::{stage_features, write_features_csv, Stage};
pub use protocol::{
    draw_per_class, losocv, losocv_folds, losocv_runs, run_fold, subject_dependent, BaselineRun, Fold, FoldRun,
    LosoOptions,
};
pub use robustness::{electrode_failure_sweep, failure_order, noise_sweep, SweepPoint};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureMode {
    /// Failed channels read zero.
    #[default]
    Zero,
    /// Failed channels carry the features of the nearest working channel.
    Neighbor,
}

/// Per-channel vectors compared by [`connectivity`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Representation {
    /// Final-layer query rows averaged over the evaluation samples.
    #[default]
    FinalLayer,
    /// The learned per-channel embedding `enc.l_emb`.
    LearnedEmbedding,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Exponent of the pairwise distance in [`icd_ics`].
    pub alpha: f64,
    pub failure_counts: Vec<usize>,
    pub failure_mode: FailureMode,
    /// Noise variance as a multiple of each feature's sample variance.
    pub noise_levels: Vec<f64>,
    pub representation: Representation,
    /// Also calibrate a randomly initialised model on every fold.
    pub baseline: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            alpha: 2.0,
            failure_counts: vec![0, 1, 2, 5, 10, 20, 30, 40],
            failure_mode: FailureMode::Zero,
            noise_levels: vec![0.1, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0],
            representation: Representation::FinalLayer,
            baseline: false,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha = {} must be positive", self.alpha)));
        }
        if let Some(k) = self.noise_levels.iter().find(|k| !(**k > 0.0 && k.is_finite())) {
            return Err(Error::Config(format!("noise level {k} must be positive")));
        }
        Ok(())
    }
}

/// Per-subject accuracies with their mean and population standard
/// deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: String,
    pub seed: u64,
    pub subjects: Vec<u32>,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl EvalReport {
    pub fn new(protocol: impl Into<String>, seed: u64, rows: Vec<(u32, f64)>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidArgument("a report needs at least one subject".into()));
        }
        if let Some((s, a)) = rows.iter().find(|(_, a)| !(0.0..=1.0).contains(a)) {
            return Err(Error::InvalidArgument(format!("subject {s}: accuracy {a} outside [0, 1]")));
        }
        let (subjects, accuracies): (Vec<u32>, Vec<f64>) = rows.into_iter().unzip();
        let n = accuracies.len() as f64;
        let mean = accuracies.iter().sum::<f64>() / n;
        let std = (accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
        Ok(Self {
            protocol: protocol.into(),
            seed,
            subjects,
            accuracies,
            mean,
            std,
        })
    }
}

/// Runs `f` over `items` on `jobs` worker threads, keeping input order.
/// `jobs == 1` runs inline.
pub(crate) fn run_parallel<T: Sync, R: Send>(
    items: &[T],
    jobs: usize,
    f: impl Fn(&T) -> Result<R> + Sync,
) -> Result<Vec<R>> {
    if jobs <= 1 {
        return items.iter().map(f).collect();
    }
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    pool.install(|| items.par_iter().map(&f).collect())
}

#[cfg(test)]
mod tests;
