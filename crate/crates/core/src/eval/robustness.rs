use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{run_parallel, FailureMode};
use crate::dsp::FeatureSample;
use crate::error::{Error, Result};
use crate::gradcore::ParameterSet;
use crate::model::{positions_tensor, ModelConfig};
use crate::montage::ChannelMontage;
use crate::train::{accuracy_of, derive_seed};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepPoint {
    pub param: f64,
    pub accuracy: f64,
}

/// The seeded order in which channels fail: a sweep with `m` failures
/// disables the first `m`, so larger counts contain the smaller sets.
pub fn failure_order(n_channels: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n_channels).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[21])));
    order
}

fn inputs(samples: &[FeatureSample]) -> Result<(Vec<Array2<f64>>, Vec<usize>)> {
    if samples.is_empty() {
        return Err(Error::Precondition("empty evaluation set".into()));
    }
    Ok((
        samples.iter().map(FeatureSample::de_f64).collect(),
        samples.iter().map(|s| s.label).collect(),
    ))
}

/// Disables `failed` channels of one DE matrix. In neighbour mode a failed
/// row is copied from the nearest channel that still works.
pub(crate) fn fail_channels(
    de: &Array2<f64>,
    failed: &[usize],
    mode: FailureMode,
    montage: &ChannelMontage,
) -> Result<Array2<f64>> {
    let mut out = de.clone();
    let mut dead = vec![false; de.nrows()];
    for &c in failed {
        dead[c] = true;
    }
    for &c in failed {
        match mode {
            FailureMode::Zero => out.row_mut(c).fill(0.0),
            FailureMode::Neighbor => {
                let src = montage
                    .nearest_among(c, |j| !dead[j])
                    .ok_or_else(|| Error::Precondition("no working channel left".into()))?;
                let row = de.row(src).to_owned();
                out.row_mut(c).assign(&row);
            }
        }
    }
    Ok(out)
}

/// Accuracy with `m` failed channels for every `m` in `counts`.
#[allow(clippy::too_many_arguments)]
pub fn electrode_failure_sweep(
    params: &ParameterSet,
    mconf: &ModelConfig,
    montage: &ChannelMontage,
    samples: &[FeatureSample],
    counts: &[usize],
    mode: FailureMode,
    seed: u64,
    jobs: usize,
) -> Result<Vec<SweepPoint>> {
    let n = montage.len();
    if let Some(m) = counts.iter().find(|&&m| m >= n) {
        return Err(Error::InvalidArgument(format!("{m} failed channels of {n}")));
    }
    let (de, labels) = inputs(samples)?;
    let pos = positions_tensor(montage);
    let order = failure_order(n, seed);
    run_parallel(counts, jobs, |&m| {
        let broken = de
            .iter()
            .map(|x| fail_channels(x, &order[..m], mode, montage))
            .collect::<Result<Vec<_>>>()?;
        Ok(SweepPoint {
            param: m as f64,
            accuracy: accuracy_of(params, mconf, &pos, &broken, &labels)?,
        })
    })
}

/// Accuracy under additive Gaussian noise whose variance is `k` times each
/// feature's sample variance over `samples`, for every `k` in `levels`. All
/// levels scale one shared draw of standard normal noise.
#[allow(clippy::too_many_arguments)]
pub fn noise_sweep(
    params: &ParameterSet,
    mconf: &ModelConfig,
    montage: &ChannelMontage,
    samples: &[FeatureSample],
    levels: &[f64],
    seed: u64,
    jobs: usize,
) -> Result<Vec<SweepPoint>> {
    if let Some(k) = levels.iter().find(|k| !(**k > 0.0 && k.is_finite())) {
        return Err(Error::InvalidArgument(format!("noise level {k} must be positive")));
    }
    let (de, labels) = inputs(samples)?;
    let dim = de[0].dim();
    let count = de.len() as f64;
    let mean = de.iter().fold(Array2::<f64>::zeros(dim), |acc, x| acc + x) / count;
    let var = de
        .iter()
        .fold(Array2::<f64>::zeros(dim), |acc, x| acc + (x - &mean).mapv(|v| v * v))
        / count;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[22]));
    let z: Vec<Array2<f64>> = de
        .iter()
        .map(|_| Array2::from_shape_simple_fn(dim, || StandardNormal.sample(&mut rng)))
        .collect();
    let sd = var.mapv(f64::sqrt);
    let pos = positions_tensor(montage);
    run_parallel(levels, jobs, |&k| {
        let scale = &sd * k.sqrt();
        let noisy: Vec<Array2<f64>> = de.iter().zip(&z).map(|(x, e)| x + &(e * &scale)).collect();
        Ok(SweepPoint {
            param: k,
            accuracy: accuracy_of(params, mconf, &pos, &noisy, &labels)?,
        })
    })
}
