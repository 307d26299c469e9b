use ndarray::{Array2, ArrayView2, Axis};
use num_complex::Complex64;

use crate::error::{Error, Result};

/// Butterworth order used for every band filter.
pub const BUTTER_ORDER: usize = 4;
/// Quality factor of the notch filter.
pub const NOTCH_Q: f64 = 30.0;

/// One biquad `[b0, b1, b2, a0, a1, a2]` with `a0 = 1`.
pub type Section = [f64; 6];

/// A cascade of second-order sections.
#[derive(Clone, Debug, PartialEq)]
pub struct Sos {
    sections: Vec<Section>,
}

impl Sos {
    pub fn sections(&self) -> &[Section] {
        &self.sections
    }

    /// Complex frequency response at `freq` Hz.
    pub fn response(&self, freq: f64, fs: f64) -> Complex64 {
        let w = 2.0 * std::f64::consts::PI * freq / fs;
        self.sections
            .iter()
            .map(|s| section_response(s, w))
            .product()
    }

    /// Magnitude response at `freq` Hz.
    pub fn gain(&self, freq: f64, fs: f64) -> f64 {
        self.response(freq, fs).norm()
    }

    /// Causal filtering of one signal from rest.
    pub fn filter(&self, x: &[f64]) -> Vec<f64> {
        let mut zi = vec![[0.0; 2]; self.sections.len()];
        self.filter_with(x, &mut zi)
    }

    fn filter_with(&self, x: &[f64], zi: &mut [[f64; 2]]) -> Vec<f64> {
        let mut y = x.to_vec();
        for (s, z) in self.sections.iter().zip(zi.iter_mut()) {
            let [b0, b1, b2, _, a1, a2] = *s;
            for v in y.iter_mut() {
                let xin = *v;
                let out = b0 * xin + z[0];
                z[0] = b1 * xin - a1 * out + z[1];
                z[1] = b2 * xin - a2 * out;
                *v = out;
            }
        }
        y
    }

    /// Steady-state initial conditions for a unit step, per section.
    fn steady_state(&self) -> Vec<[f64; 2]> {
        let mut scale = 1.0;
        self.sections
            .iter()
            .map(|s| {
                let [b0, b1, b2, _, a1, a2] = *s;
                let dc = (b0 + b1 + b2) / (1.0 + a1 + a2);
                let z1 = b2 - a2 * dc;
                let z0 = b1 - a1 * dc + z1;
                let out = [z0 * scale, z1 * scale];
                scale *= dc;
                out
            })
            .collect()
    }

    /// Zero-phase forward-backward filtering with odd-extension padding and
    /// steady-state initial conditions.
    pub fn filtfilt(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len();
        if n == 0 {
            return Vec::new();
        }
        let pad = (3 * (2 * self.sections.len() + 1)).min(n - 1);
        let mut ext = Vec::with_capacity(n + 2 * pad);
        ext.extend((1..=pad).rev().map(|i| 2.0 * x[0] - x[i]));
        ext.extend_from_slice(x);
        ext.extend((1..=pad).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));

        let zi = self.steady_state();
        let mut z: Vec<[f64; 2]> = zi.iter().map(|p| [p[0] * ext[0], p[1] * ext[0]]).collect();
        let mut y = self.filter_with(&ext, &mut z);
        y.reverse();
        let mut z: Vec<[f64; 2]> = zi.iter().map(|p| [p[0] * y[0], p[1] * y[0]]).collect();
        let mut y = self.filter_with(&y, &mut z);
        y.reverse();
        y.drain(..pad);
        y.truncate(n);
        y
    }

    /// Applies [`Sos::filtfilt`] to every row of a channels × samples matrix.
    pub fn filtfilt_rows(&self, data: ArrayView2<f64>) -> Result<Array2<f64>> {
        check_finite(data)?;
        let mut out = Array2::zeros(data.raw_dim());
        for (src, mut dst) in data.axis_iter(Axis(0)).zip(out.axis_iter_mut(Axis(0))) {
            let row: Vec<f64> = src.iter().copied().collect();
            for (d, v) in dst.iter_mut().zip(self.filtfilt(&row)) {
                *d = v;
            }
        }
        Ok(out)
    }
}

fn section_response(s: &Section, w: f64) -> Complex64 {
    let z1 = Complex64::from_polar(1.0, -w);
    let z2 = z1 * z1;
    (s[0] + s[1] * z1 + s[2] * z2) / (s[3] + s[4] * z1 + s[5] * z2)
}

fn check_finite(data: ArrayView2<f64>) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidArgument("non-finite sample in filter input".into()))
    }
}

/// Digital Butterworth band-pass of the given order, designed by bilinear
/// transform of the pre-warped analog prototype. Each section is scaled to
/// unit gain at the digital image of the analog centre frequency.
pub fn butter_bandpass(order: usize, low: f64, high: f64, fs: f64) -> Result<Sos> {
    let nyq = fs / 2.0;
    if !(fs > 0.0 && 0.0 < low && low < high && high < nyq) {
        return Err(Error::InvalidArgument(format!(
            "band {low}-{high} Hz not inside (0, {nyq}) Hz"
        )));
    }
    if order == 0 || order % 2 == 1 {
        return Err(Error::InvalidArgument(format!("order must be even and positive, got {order}")));
    }
    let fs2 = 2.0 * fs;
    let warp = |f: f64| fs2 * (std::f64::consts::PI * f / fs).tan();
    let (wl, wh) = (warp(low), warp(high));
    let bw = wh - wl;
    let w0 = (wl * wh).sqrt();

    let mut poles = Vec::with_capacity(2 * order);
    for k in 0..order {
        let theta = std::f64::consts::PI * (2 * k + order + 1) as f64 / (2 * order) as f64;
        let p = Complex64::from_polar(1.0, theta) * (bw / 2.0);
        let root = (p * p - w0 * w0).sqrt();
        for s in [p + root, p - root] {
            poles.push((fs2 + s) / (fs2 - s));
        }
    }
    poles.retain(|p| p.im > 0.0);
    if poles.len() != order {
        return Err(Error::InvalidArgument("band too narrow for stable design".into()));
    }
    poles.sort_by(|a, b| a.norm().total_cmp(&b.norm()));

    let center = 2.0 * (w0 / fs2).atan();
    let sections = poles
        .iter()
        .map(|p| {
            let mut s = [1.0, 0.0, -1.0, 1.0, -2.0 * p.re, p.norm_sqr()];
            let g = section_response(&s, center).norm();
            for b in &mut s[..3] {
                *b /= g;
            }
            s
        })
        .collect();
    Ok(Sos { sections })
}

/// Second-order IIR notch at `f0` Hz with quality factor `q`.
pub fn iir_notch(f0: f64, q: f64, fs: f64) -> Result<Sos> {
    if !(fs > 0.0 && 0.0 < f0 && f0 < fs / 2.0 && q > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "notch at {f0} Hz outside (0, {}) Hz",
            fs / 2.0
        )));
    }
    let w0 = 2.0 * std::f64::consts::PI * f0 / fs;
    let beta = (w0 / q / 2.0).tan();
    let gain = 1.0 / (1.0 + beta);
    let c = w0.cos();
    Ok(Sos {
        sections: vec![[
            gain,
            -2.0 * gain * c,
            gain,
            1.0,
            -2.0 * gain * c,
            2.0 * gain - 1.0,
        ]],
    })
}

/// Zero-phase 4th-order Butterworth band-pass applied to every channel.
pub fn bandpass(data: ArrayView2<f64>, low: f64, high: f64, fs: f64) -> Result<Array2<f64>> {
    butter_bandpass(BUTTER_ORDER, low, high, fs)?.filtfilt_rows(data)
}

/// Zero-phase notch (Q = 30) applied to every channel.
pub fn notch(data: ArrayView2<f64>, f0: f64, fs: f64) -> Result<Array2<f64>> {
    iir_notch(f0, NOTCH_Q, fs)?.filtfilt_rows(data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rustfft::FftPlanner;

    const FS: f64 = 200.0;

    fn sine(freq: f64, n: usize) -> Vec<f64> {
        (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / FS).sin())
            .collect()
    }

    fn rms(x: &[f64]) -> f64 {
        (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
    }

    /// |H(f)| from the FFT of the impulse response, independent of the
    /// closed-form evaluation in `Sos::gain`.
    fn fft_gain(sos: &Sos, freq: f64) -> f64 {
        let n = 200 * 512;
        let mut imp = vec![0.0; n];
        imp[0] = 1.0;
        let h = sos.filter(&imp);
        let mut buf: Vec<rustfft::num_complex::Complex64> =
            h.iter().map(|&v| rustfft::num_complex::Complex64::new(v, 0.0)).collect();
        FftPlanner::new().plan_fft_forward(n).process(&mut buf);
        let bin = (freq / FS * n as f64).round() as usize;
        buf[bin].norm()
    }

    fn middle(x: &[f64]) -> &[f64] {
        let q = x.len() / 4;
        &x[q..x.len() - q]
    }

    #[test]
    fn design_matches_fft_of_impulse_response() {
        let sos = butter_bandpass(4, 8.0, 13.0, FS).unwrap();
        assert_eq!(sos.sections().len(), 4);
        for f in [2.0, 8.0, 10.0, 13.0, 30.0] {
            let a = sos.gain(f, FS);
            let b = fft_gain(&sos, f);
            assert!((a - b).abs() < 1e-6, "{f}: {a} vs {b}");
        }
        // Butterworth: -3 dB at both edges.
        for f in [8.0, 13.0] {
            let g = fft_gain(&sos, f);
            assert!((g - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-3, "{f}: {g}");
        }
    }

    #[test]
    fn in_band_sine_keeps_rms() {
        let x = sine(10.0, 2000);
        let data = Array2::from_shape_vec((1, x.len()), x.clone()).unwrap();
        let y = bandpass(data.view(), 8.0, 13.0, FS).unwrap();
        let y: Vec<f64> = y.row(0).to_vec();
        let expected = fft_gain(&butter_bandpass(4, 8.0, 13.0, FS).unwrap(), 10.0).powi(2);
        let ratio = rms(middle(&y)) / rms(middle(&x));
        assert!((ratio - expected).abs() < 0.01, "{ratio} vs {expected}");
        assert!((ratio - 1.0).abs() < 0.05);
    }

    #[test]
    fn out_of_band_sine_is_attenuated() {
        // The 0.1 Hz edge pole has a time constant of about 4 s, so the
        // padding transient needs a long record to die out.
        let x = sine(60.0, 200 * 120);
        let data = Array2::from_shape_vec((1, x.len()), x.clone()).unwrap();
        let y = bandpass(data.view(), 0.1, 4.0, FS).unwrap();
        let db = 20.0 * (rms(middle(y.row(0).as_slice().unwrap())) / rms(middle(&x))).log10();
        let oracle = 40.0 * fft_gain(&butter_bandpass(4, 0.1, 4.0, FS).unwrap(), 60.0).log10();
        assert!(db <= -20.0, "{db} dB");
        assert!(oracle <= -20.0);
    }

    #[test]
    fn notch_attenuates_mains_and_keeps_alpha() {
        let sos = iir_notch(50.0, NOTCH_Q, FS).unwrap();
        assert!(20.0 * fft_gain(&sos, 50.0).log10() * 2.0 <= -30.0);
        let mains = sine(50.0, 4000);
        let y = sos.filtfilt(&mains);
        let db = 20.0 * (rms(middle(&y)) / rms(middle(&mains))).log10();
        assert!(db <= -30.0, "{db} dB");

        let alpha = sine(10.0, 4000);
        let y = sos.filtfilt(&alpha);
        let ratio = rms(middle(&y)) / rms(middle(&alpha));
        assert!((ratio - 1.0).abs() < 0.02, "{ratio}");
    }

    #[test]
    fn zeros_stay_zero() {
        let z = Array2::<f64>::zeros((3, 400));
        assert!(bandpass(z.view(), 8.0, 13.0, FS).unwrap().iter().all(|&v| v == 0.0));
        assert!(notch(z.view(), 50.0, FS).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_phase_has_no_lag() {
        let x = sine(10.0, 1000);
        let y = butter_bandpass(4, 8.0, 13.0, FS).unwrap().filtfilt(&x);
        let (a, b) = (middle(&x), middle(&y));
        let xcorr = |lag: i64| -> f64 {
            (0..a.len() as i64)
                .filter_map(|i| {
                    let j = i + lag;
                    (j >= 0 && j < b.len() as i64).then(|| a[i as usize] * b[j as usize])
                })
                .sum()
        };
        let best = (-10..=10).max_by(|&p, &q| xcorr(p).total_cmp(&xcorr(q))).unwrap();
        assert_eq!(best, 0);
    }

    #[test]
    fn steady_state_start_has_no_transient_for_constants() {
        let sos = iir_notch(50.0, NOTCH_Q, FS).unwrap();
        let y = sos.filtfilt(&[3.0; 200]);
        for v in y {
            assert!((v - 3.0).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_bad_bands_and_nonfinite_input() {
        assert!(butter_bandpass(4, 40.0, 120.0, FS).is_err());
        assert!(butter_bandpass(4, 13.0, 8.0, FS).is_err());
        assert!(iir_notch(100.0, 30.0, FS).is_err());
        let mut d = Array2::<f64>::zeros((1, 50));
        d[[0, 3]] = f64::NAN;
        assert!(bandpass(d.view(), 8.0, 13.0, FS).is_err());
    }
}
