use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::bank::SampleBank;
use crate::dsp::{bandpass, extract_de, BandSpec, FeatureSample, RawTrial};
use crate::error::{Error, Result};
use crate::montage::{Channel, ChannelMontage};

/// Sampling rate of generated time series.
pub const SYNTH_FS: f64 = 200.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthMode {
    /// DE features drawn directly.
    #[default]
    Features,
    /// Multichannel time series whose band powers follow the same model;
    /// features come from [`extract_de`].
    Timeseries,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n_subjects: usize,
    pub n_classes: usize,
    pub n_channels: usize,
    pub n_bands: usize,
    pub trials_per_subject: usize,
    /// One-second windows per trial.
    pub samples_per_trial: usize,
    pub class_mean_scale: f64,
    pub subject_shift_std: f64,
    pub sample_noise_std: f64,
    pub seed: u64,
    pub mode: SynthMode,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_subjects: 5,
            n_classes: 3,
            n_channels: 62,
            n_bands: 5,
            trials_per_subject: 10,
            samples_per_trial: 30,
            class_mean_scale: 1.0,
            subject_shift_std: 0.5,
            sample_noise_std: 0.5,
            seed: 42,
            mode: SynthMode::Features,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_subjects", self.n_subjects),
            ("n_classes", self.n_classes),
            ("n_channels", self.n_channels),
            ("n_bands", self.n_bands),
            ("trials_per_subject", self.trials_per_subject),
            ("samples_per_trial", self.samples_per_trial),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        for (name, v) in [
            ("class_mean_scale", self.class_mean_scale),
            ("subject_shift_std", self.subject_shift_std),
            ("sample_noise_std", self.sample_noise_std),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} = {v} must be a finite non-negative number")));
            }
        }
        if self.mode == SynthMode::Timeseries && self.n_bands != BandSpec::default().len() {
            return Err(Error::Config(format!(
                "time-series mode uses the {} default bands, got n_bands = {}",
                BandSpec::default().len(),
                self.n_bands
            )));
        }
        Ok(())
    }
}

/// The generating parameters: `class_means[c, ch, b]` and
/// `subject_shifts[s, ch, b]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthTruth {
    pub class_means: Array3<f64>,
    pub subject_shifts: Array3<f64>,
}

fn normal(std: f64) -> Normal<f64> {
    Normal::new(0.0, std).expect("validated std")
}

fn draw3(rng: &mut ChaCha8Rng, dim: (usize, usize, usize), std: f64) -> Array3<f64> {
    let d = normal(std);
    Array3::from_shape_fn(dim, |_| d.sample(rng))
}

/// The montage of synthetic banks: the first `n` channels of the default
/// montage when it has enough, otherwise points spread on the upper unit
/// hemisphere.
pub fn synthetic_montage(n: usize) -> Result<ChannelMontage> {
    let full = ChannelMontage::default_62();
    if n <= full.len() {
        return ChannelMontage::new(full.channels()[..n].to_vec());
    }
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let channels = (0..n)
        .map(|i| {
            let z = 1.0 - (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = golden * i as f64;
            Channel {
                name: format!("S{i}"),
                position: [r * phi.cos(), r * phi.sin(), z],
            }
        })
        .collect();
    ChannelMontage::new(channels)
}

fn band_spec(n: usize) -> BandSpec {
    let default = BandSpec::default();
    if n == default.len() {
        return default;
    }
    let step = 45.0 / n as f64;
    BandSpec {
        bands: (0..n)
            .map(|b| crate::dsp::Band {
                name: format!("b{b}"),
                low: 1.0 + step * b as f64,
                high: 1.0 + step * (b + 1) as f64,
            })
            .collect(),
    }
}

/// Generates a seeded synthetic bank. Labels are assigned by trial index
/// modulo the class count; every subject has one session.
pub fn gen_synthetic(spec: &SynthSpec) -> Result<SampleBank> {
    gen_synthetic_with_truth(spec).map(|(bank, _)| bank)
}

pub fn gen_synthetic_with_truth(spec: &SynthSpec) -> Result<(SampleBank, SynthTruth)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (c, n, b) = (spec.n_classes, spec.n_channels, spec.n_bands);
    let truth = SynthTruth {
        class_means: draw3(&mut rng, (c, n, b), spec.class_mean_scale),
        subject_shifts: draw3(&mut rng, (spec.n_subjects, n, b), spec.subject_shift_std),
    };
    let montage = synthetic_montage(n)?;
    let bands = band_spec(b);
    let classes = (0..c).map(|k| format!("class{k}")).collect();
    let noise = normal(spec.sample_noise_std);
    let mut samples = Vec::with_capacity(spec.n_subjects * spec.trials_per_subject * spec.samples_per_trial);
    let mut raw = Vec::new();
    for s in 0..spec.n_subjects {
        for t in 0..spec.trials_per_subject {
            let label = t % c;
            let level = |ch: usize, band: usize| {
                truth.class_means[[label, ch, band]] + truth.subject_shifts[[s, ch, band]]
            };
            match spec.mode {
                SynthMode::Features => {
                    for w in 0..spec.samples_per_trial {
                        let de = Array2::from_shape_fn((n, b), |(ch, band)| {
                            (level(ch, band) + noise.sample(&mut rng)) as f32
                        });
                        samples.push(FeatureSample {
                            subject_id: s as u32,
                            session_id: 0,
                            trial_id: t as u32,
                            window_index: w as u32,
                            label,
                            de,
                        });
                    }
                }
                SynthMode::Timeseries => {
                    let levels = Array2::from_shape_fn((n, b), |(ch, band)| level(ch, band));
                    let trial = synth_trial(&mut rng, spec, &bands, &levels, s, t, label)?;
                    samples.extend(extract_de(&trial, &bands, 1.0, None)?);
                    raw.push(trial);
                }
            }
        }
    }
    let mut bank = SampleBank::new("synthetic", classes, bands, montage, samples)?;
    bank.raw = raw;
    Ok((bank, truth))
}

/// One trial: per channel the sum over bands of band-limited noise. The
/// white noise feeding band `b` is scaled in every one-second window by
/// `exp(level + ε)` before filtering and normalised by the filter's gain on
/// unscaled noise, so the DE of that band is about `level + ε + ½·ln(2πe)`.
/// Values are rounded to `f32`, the on-disk precision.
fn synth_trial(
    rng: &mut ChaCha8Rng,
    spec: &SynthSpec,
    bands: &BandSpec,
    levels: &Array2<f64>,
    subject: usize,
    trial: usize,
    label: usize,
) -> Result<RawTrial> {
    let win = SYNTH_FS as usize;
    let len = win * spec.samples_per_trial;
    let n = spec.n_channels;
    let white = normal(1.0);
    let eps = normal(spec.sample_noise_std);
    let mut data = Array2::<f64>::zeros((n, len));
    for (bi, band) in bands.bands.iter().enumerate() {
        let x = Array2::from_shape_fn((n, len), |_| white.sample(rng));
        let unit = bandpass(x.view(), band.low, band.high, SYNTH_FS)?;
        let mut scaled = x;
        for (ch, mut row) in scaled.rows_mut().into_iter().enumerate() {
            let sd = unit.row(ch).std(0.0);
            for w in 0..spec.samples_per_trial {
                let gain = (levels[[ch, bi]] + eps.sample(rng)).exp() / sd;
                row.slice_mut(ndarray::s![w * win..(w + 1) * win]).mapv_inplace(|v| v * gain);
            }
        }
        data += &bandpass(scaled.view(), band.low, band.high, SYNTH_FS)?;
    }
    data.mapv_inplace(|v| f64::from(v as f32));
    RawTrial::new(subject as u32, 0, trial as u32, label, SYNTH_FS, data)
}
