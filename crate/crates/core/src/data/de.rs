//! Differential-entropy features from band power.

use std::f64::consts::{E, PI};

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

/// Delta, theta, alpha, beta and gamma bands in Hz.
pub const SEED_BANDS: [(f64, f64); 5] = [(1.0, 4.0), (4.0, 8.0), (8.0, 14.0), (14.0, 31.0), (31.0, 50.0)];

/// Band powers below this are clamped before taking the logarithm.
pub const POWER_FLOOR: f64 = 1e-12;

/// `½ ln(2πe σ²)`, the entropy of a Gaussian with variance `σ²`.
pub fn differential_entropy(variance: f64) -> f64 {
    0.5 * (2.0 * PI * E * variance).ln()
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeFeatures {
    /// Channel-major: `values[ch * bands + band]`.
    pub values: Vec<f64>,
    /// `(channel, band)` pairs whose power was clamped to [`POWER_FLOOR`].
    pub floored: Vec<(usize, usize)>,
}

fn check_bands(bands: &[(f64, f64)], sample_rate: f64) -> Result<()> {
    if !(sample_rate > 0.0) {
        return Err(Error::invalid(format!("sample rate must be > 0, got {sample_rate}")));
    }
    for &(lo, hi) in bands {
        if !(lo >= 0.0 && lo < hi && hi <= sample_rate / 2.0) {
            return Err(Error::invalid(format!(
                "band [{lo}, {hi}) must satisfy 0 <= lo < hi <= Nyquist ({})",
                sample_rate / 2.0
            )));
        }
    }
    Ok(())
}

/// Band powers of one window from a Hann-windowed periodogram.
///
/// The one-sided spectrum is scaled so that its total equals the signal
/// variance in expectation. Bin `f` belongs to `[lo, hi)`; the Nyquist bin
/// also belongs to a band whose upper edge is the Nyquist frequency.
pub fn band_powers(signal: &[f64], bands: &[(f64, f64)], sample_rate: f64) -> Result<Vec<f64>> {
    let n = signal.len();
    if n < 2 {
        return Err(Error::invalid("window needs at least 2 samples"));
    }
    check_bands(bands, sample_rate)?;
    let nfft = n.next_power_of_two();
    let window: Vec<f64> = (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / (n - 1) as f64).cos())
        .collect();
    let w2: f64 = window.iter().map(|w| w * w).sum();
    let mut buf: Vec<Complex<f64>> = vec![Complex::new(0.0, 0.0); nfft];
    for (b, (x, w)) in buf.iter_mut().zip(signal.iter().zip(&window)) {
        b.re = x * w;
    }
    FftPlanner::new().plan_fft_forward(nfft).process(&mut buf);
    let half = nfft / 2;
    let nyquist = sample_rate / 2.0;
    let power: Vec<f64> = (0..=half)
        .map(|k| {
            let p = buf[k].norm_sqr() / (nfft as f64 * w2);
            if k == 0 || k == half { p } else { 2.0 * p }
        })
        .collect();
    Ok(bands
        .iter()
        .map(|&(lo, hi)| {
            power
                .iter()
                .enumerate()
                .filter(|&(k, _)| {
                    let f = k as f64 * sample_rate / nfft as f64;
                    (f >= lo && f < hi) || (k == half && hi >= nyquist)
                })
                .map(|(_, p)| p)
                .sum()
        })
        .collect())
}

/// DE features of a `channels × samples` window, channel-major.
pub fn de_feature<S: AsRef<[f64]>>(channels: &[S], bands: &[(f64, f64)], sample_rate: f64) -> Result<DeFeatures> {
    let mut values = Vec::with_capacity(channels.len() * bands.len());
    let mut floored = Vec::new();
    for (ch, signal) in channels.iter().enumerate() {
        for (band, p) in band_powers(signal.as_ref(), bands, sample_rate)?.into_iter().enumerate() {
            let p = if p > POWER_FLOOR {
                p
            } else {
                floored.push((ch, band));
                POWER_FLOOR
            };
            values.push(differential_entropy(p));
        }
    }
    Ok(DeFeatures { values, floored })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn formula_fixed_points() {
        assert_eq!(differential_entropy(1.0 / (2.0 * PI * E)), 0.0);
        assert!((differential_entropy(1.0) - 1.41894).abs() < 1e-5);
    }

    #[test]
    fn sinusoid_power_lands_in_its_band() {
        let fs = 200.0;
        let sig: Vec<f64> = (0..200).map(|i| (2.0 * PI * 10.0 * i as f64 / fs).sin()).collect();
        let p = band_powers(&sig, &SEED_BANDS, fs).unwrap();
        let total: f64 = p.iter().sum();
        assert!(p[2] / total > 0.95, "{p:?}");
        // Sine of amplitude 1 has variance 1/2.
        assert!((total - 0.5).abs() < 0.05, "{total}");
    }

    #[test]
    fn zero_signal_is_floored_and_flagged() {
        let out = de_feature(&[vec![0.0; 64], vec![1.0; 64]], &[(0.0, 100.0), (20.0, 40.0)], 200.0).unwrap();
        assert_eq!(out.values.len(), 4);
        assert_eq!(out.values[0], differential_entropy(POWER_FLOOR));
        assert!(out.floored.contains(&(0, 0)));
        assert!(out.floored.contains(&(0, 1)));
    }

    #[test]
    fn de_is_monotone_in_power() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let base: Vec<f64> = (0..200).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut last = f64::NEG_INFINITY;
        for scale in [0.5, 1.0, 2.0, 4.0] {
            let sig: Vec<f64> = base.iter().map(|v| v * scale).collect();
            let de = de_feature(&[sig], &SEED_BANDS, 200.0).unwrap().values;
            assert!(de[0] > last);
            last = de[0];
        }
    }

    #[test]
    fn rejects_bad_windows_and_bands() {
        assert!(band_powers(&[1.0], &SEED_BANDS, 200.0).is_err());
        assert!(band_powers(&[1.0; 8], &[(10.0, 5.0)], 200.0).is_err());
        assert!(band_powers(&[1.0; 8], &[(10.0, 120.0)], 200.0).is_err());
    }

    #[test]
    fn output_is_channel_major() {
        let a: Vec<f64> = (0..100).map(|i| (i as f64 * 0.3).sin()).collect();
        let b: Vec<f64> = a.iter().map(|v| 3.0 * v).collect();
        let out = de_feature(&[a.clone(), b], &SEED_BANDS, 200.0).unwrap().values;
        let only_a = de_feature(&[a], &SEED_BANDS, 200.0).unwrap().values;
        assert_eq!(out.len(), 10);
        assert_eq!(&out[..5], &only_a[..]);
        for k in 0..5 {
            assert!((out[5 + k] - out[k] - 0.5 * 9f64.ln()).abs() < 1e-9);
        }
    }
}
