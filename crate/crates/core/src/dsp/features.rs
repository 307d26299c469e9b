use ndarray::{s, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use super::filter::{butter_bandpass, BUTTER_ORDER};
use crate::error::{Error, Result};

/// Variance floor inside the logarithm of the DE formula.
pub const DE_VARIANCE_FLOOR: f64 = 1e-12;

/// One recorded trial: channels × samples in µV.
#[derive(Clone, Debug, PartialEq)]
pub struct RawTrial {
    pub subject_id: u32,
    pub session_id: u32,
    pub trial_id: u32,
    pub label: usize,
    pub fs: f64,
    pub data: Array2<f64>,
}

impl RawTrial {
    pub fn new(
        subject_id: u32,
        session_id: u32,
        trial_id: u32,
        label: usize,
        fs: f64,
        data: Array2<f64>,
    ) -> Result<Self> {
        let t = Self {
            subject_id,
            session_id,
            trial_id,
            label,
            fs,
            data,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fs > 0.0 && self.fs.is_finite()) {
            return Err(Error::InvalidArgument(format!("sampling rate {}", self.fs)));
        }
        if self.data.nrows() == 0 || self.data.ncols() == 0 {
            return Err(Error::InvalidArgument("trial needs ≥1 channel and ≥1 sample".into()));
        }
        Ok(())
    }

    pub fn n_channels(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_samples(&self) -> usize {
        self.data.ncols()
    }

    pub fn duration(&self) -> f64 {
        self.n_samples() as f64 / self.fs
    }

    pub fn with_data(&self, data: Array2<f64>) -> Self {
        Self {
            data,
            ..self.clone()
        }
    }

    /// Samples per window of `window_s` seconds.
    pub fn window_len(&self, window_s: f64) -> Result<usize> {
        let w = (window_s * self.fs).round();
        if !(w >= 1.0) {
            return Err(Error::InvalidArgument(format!("window {window_s} s too short")));
        }
        Ok(w as usize)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub name: String,
    pub low: f64,
    pub high: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BandSpec {
    pub bands: Vec<Band>,
}

impl Default for BandSpec {
    fn default() -> Self {
        let b = |name: &str, low, high| Band {
            name: name.into(),
            low,
            high,
        };
        Self {
            bands: vec![
                b("delta", 0.1, 4.0),
                b("theta", 4.0, 8.0),
                b("alpha", 8.0, 13.0),
                b("beta", 13.0, 31.0),
                b("gamma", 31.0, 50.0),
            ],
        }
    }
}

impl BandSpec {
    pub fn len(&self) -> usize {
        self.bands.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bands.is_empty()
    }

    pub fn names(&self) -> Vec<String> {
        self.bands.iter().map(|b| b.name.clone()).collect()
    }

    pub fn validate(&self, fs: f64) -> Result<()> {
        if self.bands.is_empty() {
            return Err(Error::InvalidArgument("empty band list".into()));
        }
        for b in &self.bands {
            if !(0.0 < b.low && b.low < b.high && b.high < fs / 2.0) {
                return Err(Error::InvalidArgument(format!(
                    "band {} ({}-{} Hz) outside (0, {}) Hz",
                    b.name,
                    b.low,
                    b.high,
                    fs / 2.0
                )));
            }
        }
        Ok(())
    }
}

/// One window of DE features, channels × bands. Stored in single precision,
/// the precision of the on-disk bank.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSample {
    pub subject_id: u32,
    pub session_id: u32,
    pub trial_id: u32,
    pub window_index: u32,
    pub label: usize,
    pub de: Array2<f32>,
}

impl FeatureSample {
    pub fn n_channels(&self) -> usize {
        self.de.nrows()
    }

    pub fn n_bands(&self) -> usize {
        self.de.ncols()
    }

    pub fn de_f64(&self) -> Array2<f64> {
        self.de.mapv(f64::from)
    }
}

/// Differential entropy of a Gaussian window, `½·ln(2πe·σ²)` with the
/// population variance floored at [`DE_VARIANCE_FLOOR`].
pub fn differential_entropy(window: ArrayView1<f64>) -> Result<f64> {
    let n = window.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("DE window of {n} samples")));
    }
    let mean = window.sum() / n as f64;
    let var = window.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    Ok(0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E * var.max(DE_VARIANCE_FLOOR)).ln())
}

/// Start indices of the non-overlapping windows aligned to the end of a
/// signal of `n` samples, covering at most the last `tail` samples.
pub fn tail_windows(n: usize, win: usize, tail: Option<usize>) -> Vec<usize> {
    let span = tail.map_or(n, |t| t.min(n));
    let count = span / win;
    let first = n - count * win;
    (0..count).map(|k| first + k * win).collect()
}

/// DE features for every window of the trial tail.
///
/// Each band is filtered over the whole trial before windowing. With
/// `tail_s = None` the whole trial is used; windows are aligned to the end so
/// that any leftover samples are dropped from the start.
pub fn extract_de(
    trial: &RawTrial,
    bands: &BandSpec,
    window_s: f64,
    tail_s: Option<f64>,
) -> Result<Vec<FeatureSample>> {
    trial.validate()?;
    bands.validate(trial.fs)?;
    let win = trial.window_len(window_s)?;
    if win < 2 {
        return Err(Error::InvalidArgument("window shorter than 2 samples".into()));
    }
    if trial.n_samples() < win {
        return Err(Error::InvalidArgument(format!(
            "trial of {:.3} s shorter than one {window_s} s window",
            trial.duration()
        )));
    }
    let tail = tail_s.map(|t| (t * trial.fs).round() as usize);
    let starts = tail_windows(trial.n_samples(), win, tail);
    if starts.is_empty() {
        return Err(Error::InvalidArgument("tail shorter than one window".into()));
    }

    let mut de = vec![Array2::<f32>::zeros((trial.n_channels(), bands.len())); starts.len()];
    for (bi, band) in bands.bands.iter().enumerate() {
        let filtered = butter_bandpass(BUTTER_ORDER, band.low, band.high, trial.fs)?
            .filtfilt_rows(trial.data.view())?;
        for (w, &start) in starts.iter().enumerate() {
            for c in 0..trial.n_channels() {
                let v = differential_entropy(filtered.slice(s![c, start..start + win]))?;
                de[w][[c, bi]] = v as f32;
            }
        }
    }
    Ok(de
        .into_iter()
        .enumerate()
        .map(|(w, de)| FeatureSample {
            subject_id: trial.subject_id,
            session_id: trial.session_id,
            trial_id: trial.trial_id,
            window_index: w as u32,
            label: trial.label,
            de,
        })
        .collect())
}

/// Random-walk Kalman filter followed by a Rauch–Tung–Striebel smoother,
/// run independently on every scalar dimension of the sequence.
///
/// The observation variance `r` of a dimension is its sample variance over
/// the sequence and the process variance is `q_ratio · r`. Constant
/// dimensions are returned unchanged.
pub fn lds_smooth(seq: &[Array2<f64>], q_ratio: f64) -> Result<Vec<Array2<f64>>> {
    let first = seq
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty sequence".into()))?;
    if !(q_ratio > 0.0) {
        return Err(Error::InvalidArgument(format!("q ratio {q_ratio}")));
    }
    let shape = first.raw_dim();
    if seq.iter().any(|m| m.raw_dim() != shape) {
        return Err(Error::Shape("inconsistent matrix shapes in sequence".into()));
    }
    let mut out: Vec<Array2<f64>> = seq.to_vec();
    let mut y = vec![0.0; seq.len()];
    for idx in ndarray::indices(shape) {
        for (t, m) in seq.iter().enumerate() {
            y[t] = m[idx];
        }
        let smoothed = smooth_1d(&y, q_ratio);
        for (t, m) in out.iter_mut().enumerate() {
            m[idx] = smoothed[t];
        }
    }
    Ok(out)
}

fn smooth_1d(y: &[f64], q_ratio: f64) -> Vec<f64> {
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let r = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    if r == 0.0 {
        return y.to_vec();
    }
    let q = q_ratio * r;
    let mut xf = Vec::with_capacity(y.len());
    let mut pf = Vec::with_capacity(y.len());
    let (mut x, mut p) = (y[0], r);
    for (t, &obs) in y.iter().enumerate() {
        if t > 0 {
            p += q;
        }
        let k = p / (p + r);
        x += k * (obs - x);
        p *= 1.0 - k;
        xf.push(x);
        pf.push(p);
    }
    let mut xs = xf.clone();
    for t in (0..y.len().saturating_sub(1)).rev() {
        let g = pf[t] / (pf[t] + q);
        xs[t] = xf[t] + g * (xs[t + 1] - xf[t]);
    }
    xs
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array1;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn de_closed(var: f64) -> f64 {
        0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E * var).ln()
    }

    #[test]
    fn unit_variance_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Array1<f64> = (0..200_000)
            .map(|_| Normal::new(0.0, 1.0).unwrap().sample(&mut rng))
            .collect();
        let de = differential_entropy(x.view()).unwrap();
        assert!((de - 1.4189385).abs() < 0.01, "{de}");
    }

    #[test]
    fn variance_giving_unit_entropy() {
        let var = std::f64::consts::E / (2.0 * std::f64::consts::PI);
        // ±a has population variance a².
        let a = var.sqrt();
        let x = Array1::from_iter((0..100).map(|i| if i % 2 == 0 { a } else { -a }));
        assert!((differential_entropy(x.view()).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_window_hits_floor() {
        let x = Array1::from_elem(50, 7.0);
        let de = differential_entropy(x.view()).unwrap();
        assert!(de.is_finite());
        assert!((de - de_closed(1e-12)).abs() < 1e-12);
        assert!(differential_entropy(Array1::from_elem(1, 0.0).view()).is_err());
    }

    proptest! {
        #[test]
        fn shift_invariant(xs in prop::collection::vec(-5.0f64..5.0, 4..64), c in -100.0f64..100.0) {
            let x = Array1::from(xs);
            let a = differential_entropy(x.view()).unwrap();
            let b = differential_entropy((&x + c).view()).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
        }

        #[test]
        fn scale_law(xs in prop::collection::vec(-5.0f64..5.0, 4..64), a in 0.1f64..20.0) {
            let x = Array1::from(xs);
            let var = x.var(0.0);
            prop_assume!(var > 1e-3);
            let d = differential_entropy((&x * a).view()).unwrap() - differential_entropy(x.view()).unwrap();
            prop_assert!((d - a.ln()).abs() < 1e-9);
        }
    }

    fn noise_trial(seconds: f64, channels: usize, seed: u64) -> RawTrial {
        let fs = 200.0;
        let n = (seconds * fs) as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let data = Array2::from_shape_fn((channels, n), |_| normal.sample(&mut rng));
        RawTrial::new(1, 1, 1, 0, fs, data).unwrap()
    }

    #[test]
    fn thirty_second_trial_gives_thirty_windows() {
        let t = noise_trial(30.0, 62, 3);
        let out = extract_de(&t, &BandSpec::default(), 1.0, Some(30.0)).unwrap();
        assert_eq!(out.len(), 30);
        assert!(out.iter().all(|s| s.de.dim() == (62, 5)));
        assert!(out.iter().enumerate().all(|(i, s)| s.window_index == i as u32));
    }

    #[test]
    fn tail_alignment_counts() {
        assert_eq!(tail_windows(1050, 200, None), vec![50, 250, 450, 650, 850]);
        assert_eq!(tail_windows(1050, 200, Some(400)), vec![650, 850]);
        assert_eq!(tail_windows(100, 200, None), Vec::<usize>::new());
    }

    #[test]
    fn short_trial_is_rejected() {
        let t = noise_trial(0.5, 2, 4);
        assert!(extract_de(&t, &BandSpec::default(), 1.0, None).is_err());
    }

    #[test]
    fn scaling_by_ten_adds_ln_ten() {
        let t = noise_trial(4.0, 3, 5);
        let scaled = t.with_data(&t.data * 10.0);
        let a = extract_de(&t, &BandSpec::default(), 1.0, None).unwrap();
        let b = extract_de(&scaled, &BandSpec::default(), 1.0, None).unwrap();
        for (x, y) in a.iter().zip(&b) {
            for (u, v) in x.de.iter().zip(&y.de) {
                assert!(v > u);
                // f32 storage limits the precision of the difference.
                assert!(((v - u) as f64 - 10f64.ln()).abs() < 1e-5);
            }
        }
    }

    /// Dense MAP solve of the same random-walk model: minimise
    /// Σ(y−x)²/r + (x₀−y₀)²/r + Σ(xₜ−xₜ₋₁)²/q.
    fn map_oracle(y: &[f64], q_ratio: f64) -> Vec<f64> {
        let n = y.len();
        let mean = y.iter().sum::<f64>() / n as f64;
        let r = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        let q = q_ratio * r;
        let mut a = vec![vec![0.0; n]; n];
        let mut b = vec![0.0; n];
        for t in 0..n {
            a[t][t] += 1.0 / r;
            b[t] += y[t] / r;
        }
        a[0][0] += 1.0 / r;
        b[0] += y[0] / r;
        for t in 1..n {
            a[t][t] += 1.0 / q;
            a[t - 1][t - 1] += 1.0 / q;
            a[t][t - 1] -= 1.0 / q;
            a[t - 1][t] -= 1.0 / q;
        }
        // Gaussian elimination with partial pivoting.
        for col in 0..n {
            let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
            a.swap(col, piv);
            b.swap(col, piv);
            for row in col + 1..n {
                let f = a[row][col] / a[col][col];
                for k in col..n {
                    a[row][k] -= f * a[col][k];
                }
                b[row] -= f * b[col];
            }
        }
        let mut x = vec![0.0; n];
        for row in (0..n).rev() {
            let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
            x[row] = (b[row] - s) / a[row][row];
        }
        x
    }

    #[test]
    fn impulse_is_smoothed_like_map_solution() {
        let mut y = vec![0.0; 11];
        y[5] = 1.0;
        let seq: Vec<Array2<f64>> = y.iter().map(|&v| Array2::from_elem((1, 1), v)).collect();
        let out: Vec<f64> = lds_smooth(&seq, 0.01).unwrap().iter().map(|m| m[[0, 0]]).collect();
        let oracle = map_oracle(&y, 0.01);
        for (a, b) in out.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
        assert!(out[5] < 1.0);
        assert!(out.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn random_sequence_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let y: Vec<f64> = (0..40).map(|t| (t as f64 / 5.0).sin() + 0.3 * normal.sample(&mut rng)).collect();
        let seq: Vec<Array2<f64>> = y.iter().map(|&v| Array2::from_elem((1, 1), v)).collect();
        let out = lds_smooth(&seq, 0.05).unwrap();
        for (m, b) in out.iter().zip(map_oracle(&y, 0.05)) {
            assert!((m[[0, 0]] - b).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_sequence_and_empty() {
        let seq = vec![Array2::from_elem((2, 3), 1.5); 7];
        assert_eq!(lds_smooth(&seq, 0.01).unwrap(), seq);
        assert!(lds_smooth(&[], 0.01).is_err());
        let bad = vec![Array2::zeros((2, 3)), Array2::zeros((3, 2))];
        assert!(lds_smooth(&bad, 0.01).is_err());
    }
}
