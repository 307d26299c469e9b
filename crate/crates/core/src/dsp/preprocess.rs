use std::collections::BTreeSet;

use ndarray::{s, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use super::features::{extract_de, lds_smooth, tail_windows, BandSpec, FeatureSample, RawTrial};
use super::filter::notch;
use crate::error::{Error, Result};
use crate::montage::ChannelMontage;

/// Thresholds for bad-channel and bad-segment detection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    /// Longest tolerated run of identical values, in seconds.
    pub flatline_s: f64,
    /// A channel is bad when its std exceeds this multiple of the mean std.
    pub std_factor: f64,
    /// Minimum Pearson correlation with the nearest neighbour.
    pub min_neighbor_corr: f64,
    /// A window is rejected when a channel's variance exceeds this multiple
    /// of its whole-trial variance.
    pub segment_var_factor: f64,
    /// Neighbours used for interpolation.
    pub interp_k: usize,
    /// Mains frequency removed before anything else; skipped when `None` or
    /// at or above Nyquist.
    pub notch_hz: Option<f64>,
    pub window_s: f64,
    /// Only the last `tail_s` seconds of a trial are used.
    pub tail_s: Option<f64>,
    /// Process-to-observation variance ratio of the LDS smoother; `None`
    /// leaves the features unsmoothed.
    pub lds_q_ratio: Option<f64>,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            flatline_s: 5.0,
            std_factor: 4.0,
            min_neighbor_corr: 0.6,
            segment_var_factor: 7.0,
            interp_k: 4,
            notch_hz: Some(50.0),
            window_s: 1.0,
            tail_s: Some(30.0),
            lds_q_ratio: Some(0.01),
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("flatline_s", Some(self.flatline_s)),
            ("std_factor", Some(self.std_factor)),
            ("segment_var_factor", Some(self.segment_var_factor)),
            ("window_s", Some(self.window_s)),
            ("notch_hz", self.notch_hz),
            ("tail_s", self.tail_s),
            ("lds_q_ratio", self.lds_q_ratio),
        ];
        if let Some((name, v)) = positive.iter().find_map(|(n, v)| v.filter(|v| !(*v > 0.0 && v.is_finite())).map(|v| (n, v))) {
            return Err(Error::Config(format!("preprocess.{name} = {v} must be positive")));
        }
        if self.interp_k == 0 {
            return Err(Error::Config("preprocess.interp_k must be at least 1".into()));
        }
        Ok(())
    }
}

fn std_pop(x: ArrayView1<f64>) -> f64 {
    x.var(0.0).sqrt()
}

fn longest_constant_run(x: ArrayView1<f64>) -> usize {
    let mut best = 0;
    let mut run = 0;
    let mut prev = None;
    for &v in x {
        if Some(v) == prev {
            run += 1;
        } else {
            run = 1;
            prev = Some(v);
        }
        best = best.max(run);
    }
    best
}

/// Pearson correlation, `None` when either signal has zero variance.
pub fn pearson(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Option<f64> {
    let n = a.len() as f64;
    let (ma, mb) = (a.sum() / n, b.sum() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    (saa > 0.0 && sbb > 0.0).then(|| sab / (saa * sbb).sqrt())
}

fn check_montage(trial: &RawTrial, montage: &ChannelMontage) -> Result<()> {
    if trial.n_channels() != montage.len() {
        return Err(Error::Shape(format!(
            "trial has {} channels, montage {}",
            trial.n_channels(),
            montage.len()
        )));
    }
    Ok(())
}

/// Channels failing any of the flatline, amplitude or neighbour-correlation
/// tests.
///
/// A flatline is a run of identical consecutive values lasting longer than
/// `flatline_s`. The amplitude test compares each channel's standard
/// deviation with `std_factor` times the mean standard deviation over all
/// channels. The correlation test is skipped for a pair in which either
/// channel is constant.
pub fn detect_bad_channels(
    trial: &RawTrial,
    montage: &ChannelMontage,
    cfg: &PreprocessConfig,
) -> Result<BTreeSet<usize>> {
    check_montage(trial, montage)?;
    let n = trial.n_channels();
    let mut bad = BTreeSet::new();

    let max_run = cfg.flatline_s * trial.fs;
    for (c, row) in trial.data.axis_iter(Axis(0)).enumerate() {
        if longest_constant_run(row) as f64 > max_run {
            bad.insert(c);
        }
    }

    let stds: Vec<f64> = trial.data.axis_iter(Axis(0)).map(std_pop).collect();
    let mean_std = stds.iter().sum::<f64>() / n as f64;
    for (c, &s) in stds.iter().enumerate() {
        if s > cfg.std_factor * mean_std {
            bad.insert(c);
        }
    }

    if n >= 2 {
        for c in 0..n {
            let nb = montage.nearest_neighbor(c)?;
            if let Some(r) = pearson(trial.data.row(c), trial.data.row(nb)) {
                if r < cfg.min_neighbor_corr {
                    bad.insert(c);
                }
            }
        }
    }
    Ok(bad)
}

/// Keep-mask over the end-aligned windows of the trial (the same windows
/// [`super::extract_de`] uses with no tail limit).
pub fn reject_bad_segments(trial: &RawTrial, window_s: f64, var_factor: f64) -> Result<Vec<bool>> {
    let win = trial.window_len(window_s)?;
    if win > trial.n_samples() {
        return Err(Error::InvalidArgument(format!(
            "window of {win} samples longer than trial ({})",
            trial.n_samples()
        )));
    }
    let whole: Vec<f64> = trial.data.axis_iter(Axis(0)).map(|r| r.var(0.0)).collect();
    Ok(tail_windows(trial.n_samples(), win, None)
        .into_iter()
        .map(|start| {
            let seg = trial.data.slice(s![.., start..start + win]);
            seg.axis_iter(Axis(0))
                .zip(&whole)
                .all(|(row, &v)| row.var(0.0) <= var_factor * v)
        })
        .collect())
}

/// Interpolation weights for one bad channel: inverse-distance weights over
/// the `k` nearest good channels, normalised to sum to 1. A good channel at
/// distance zero takes all the weight.
pub fn interpolation_weights(
    montage: &ChannelMontage,
    target: usize,
    bad: &BTreeSet<usize>,
    k: usize,
) -> Result<Vec<(usize, f64)>> {
    let near = montage.k_nearest(target, k.max(1), |j| !bad.contains(&j));
    if near.is_empty() {
        return Err(Error::Precondition("no good channel to interpolate from".into()));
    }
    if near[0].1 == 0.0 {
        let coincident: Vec<usize> = near.iter().filter(|p| p.1 == 0.0).map(|p| p.0).collect();
        let w = 1.0 / coincident.len() as f64;
        return Ok(coincident.into_iter().map(|j| (j, w)).collect());
    }
    let total: f64 = near.iter().map(|p| 1.0 / p.1).sum();
    Ok(near.into_iter().map(|(j, d)| (j, (1.0 / d) / total)).collect())
}

/// Replaces every bad channel with the inverse-distance-weighted mean of its
/// nearest good channels.
pub fn interpolate_channels(
    trial: &RawTrial,
    bad: &BTreeSet<usize>,
    montage: &ChannelMontage,
    k: usize,
) -> Result<RawTrial> {
    check_montage(trial, montage)?;
    if let Some(&c) = bad.iter().find(|&&c| c >= trial.n_channels()) {
        return Err(Error::InvalidArgument(format!("bad channel {c} out of range")));
    }
    if bad.len() == trial.n_channels() {
        return Err(Error::Precondition("all channels are bad".into()));
    }
    let mut data = trial.data.clone();
    for &c in bad {
        let weights = interpolation_weights(montage, c, bad, k)?;
        let mut row = ndarray::Array1::<f64>::zeros(trial.n_samples());
        for (j, w) in weights {
            row.scaled_add(w, &trial.data.row(j));
        }
        data.row_mut(c).assign(&row);
    }
    Ok(trial.with_data(data))
}

/// Common average reference: subtracts the across-channel mean from every
/// sample.
pub fn rereference_mean(trial: &RawTrial) -> Result<RawTrial> {
    trial.validate()?;
    let mean = trial
        .data
        .mean_axis(Axis(0))
        .expect("at least one channel");
    let data: Array2<f64> = &trial.data - &mean.insert_axis(Axis(0));
    Ok(trial.with_data(data))
}

/// The full trial pipeline: notch, bad-channel interpolation, common
/// average reference, DE over the trial tail, bad-segment rejection and LDS
/// smoothing of the surviving windows. Rejected windows leave gaps in
/// `window_index`.
pub fn process_trial(
    trial: &RawTrial,
    montage: &ChannelMontage,
    bands: &BandSpec,
    cfg: &PreprocessConfig,
) -> Result<Vec<FeatureSample>> {
    trial.validate()?;
    let mut t = trial.clone();
    if let Some(f0) = cfg.notch_hz.filter(|&f| f < t.fs / 2.0) {
        t = t.with_data(notch(t.data.view(), f0, t.fs)?);
    }
    let bad = detect_bad_channels(&t, montage, cfg)?;
    if !bad.is_empty() {
        t = interpolate_channels(&t, &bad, montage, cfg.interp_k)?;
    }
    let t = rereference_mean(&t)?;
    let samples = extract_de(&t, bands, cfg.window_s, cfg.tail_s)?;
    let keep = reject_bad_segments(&t, cfg.window_s, cfg.segment_var_factor)?;
    // The tail windows are the last ones of the end-aligned grid.
    let keep = &keep[keep.len() - samples.len()..];
    let mut kept: Vec<FeatureSample> = samples.into_iter().zip(keep).filter(|(_, &k)| k).map(|(s, _)| s).collect();
    if let (Some(q), true) = (cfg.lds_q_ratio, kept.len() >= 2) {
        let seq: Vec<Array2<f64>> = kept.iter().map(FeatureSample::de_f64).collect();
        for (s, m) in kept.iter_mut().zip(lds_smooth(&seq, q)?) {
            s.de = m.mapv(|v| v as f32);
        }
    }
    Ok(kept)
}
