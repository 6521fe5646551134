use std::f64::consts::PI;

use super::{DspError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct FilterSpec {
    pub sample_rate_hz: f64,
    pub passband_low_hz: f64,
    pub passband_high_hz: f64,
    /// Odd, so the filter is type I linear phase.
    pub tap_count: usize,
}

impl Default for FilterSpec {
    fn default() -> Self {
        FilterSpec {
            sample_rate_hz: 128.0,
            passband_low_hz: 0.5,
            passband_high_hz: 50.0,
            tap_count: 129,
        }
    }
}

impl FilterSpec {
    pub fn validate(&self) -> Result<()> {
        let nyquist = self.sample_rate_hz / 2.0;
        if !(self.sample_rate_hz > 0.0) {
            return Err(DspError::InvalidFilter("sample rate must be positive".into()));
        }
        if !(0.0 <= self.passband_low_hz
            && self.passband_low_hz < self.passband_high_hz
            && self.passband_high_hz < nyquist)
        {
            return Err(DspError::InvalidFilter(format!(
                "need 0 <= low < high < {nyquist} Hz, got {}..{}",
                self.passband_low_hz, self.passband_high_hz
            )));
        }
        if self.tap_count.is_multiple_of(2) || self.tap_count < 3 {
            return Err(DspError::InvalidFilter(format!(
                "tap count {} must be odd and >= 3",
                self.tap_count
            )));
        }
        Ok(())
    }
}

// Hamming-windowed sinc low-pass, scaled to unit DC gain. Only the first half
// is computed; the rest is mirrored so the taps are exactly symmetric.
fn lowpass(cutoff: f64, n: usize) -> Vec<f64> {
    let m = (n - 1) / 2;
    let mut h = vec![0.0; n];
    for i in 0..=m {
        let x = i as f64 - m as f64;
        let sinc = if x == 0.0 {
            2.0 * cutoff
        } else {
            (2.0 * PI * cutoff * x).sin() / (PI * x)
        };
        let w = 0.54 - 0.46 * (2.0 * PI * i as f64 / (n - 1) as f64).cos();
        h[i] = sinc * w;
        h[n - 1 - i] = sinc * w;
    }
    let dc: f64 = h.iter().sum();
    h.iter_mut().for_each(|v| *v /= dc);
    h
}

/// Band-pass taps as the difference of two unit-DC low-passes, so the DC
/// gain is zero by construction, then scaled to unit gain at band center.
pub fn fir_design(spec: &FilterSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    let n = spec.tap_count;
    let hi = lowpass(spec.passband_high_hz / spec.sample_rate_hz, n);
    let mut taps = if spec.passband_low_hz > 0.0 {
        let lo = lowpass(spec.passband_low_hz / spec.sample_rate_hz, n);
        hi.iter().zip(&lo).map(|(a, b)| a - b).collect()
    } else {
        hi
    };
    let center = (spec.passband_low_hz + spec.passband_high_hz) / 2.0;
    let gain = frequency_response(&taps, center, spec.sample_rate_hz);
    taps.iter_mut().for_each(|v| *v /= gain);
    Ok(taps)
}

/// Magnitude of the taps' transfer function at `freq_hz`.
pub fn frequency_response(taps: &[f64], freq_hz: f64, sample_rate_hz: f64) -> f64 {
    let w = 2.0 * PI * freq_hz / sample_rate_hz;
    let (re, im) = taps.iter().enumerate().fold((0.0, 0.0), |(re, im), (i, h)| {
        (re + h * (w * i as f64).cos(), im - h * (w * i as f64).sin())
    });
    re.hypot(im)
}

// Centered correlation with symmetric taps: zero phase, zero outside `x`.
fn apply_centered(x: &[f64], taps: &[f64]) -> Vec<f64> {
    let m = taps.len() / 2;
    (0..x.len())
        .map(|n| {
            let lo = n.saturating_sub(m);
            let hi = (n + m).min(x.len() - 1);
            (lo..=hi).map(|j| taps[j + m - n] * x[j]).sum()
        })
        .collect()
}

/// Zero-phase filtering: forward pass, then a pass over the reversed signal.
/// Both ends are extended by odd reflection (`2·x[0] − x[k]`) before
/// filtering and trimmed afterwards, so the output has the input's length.
pub fn filtfilt(wave: &[f64], taps: &[f64]) -> Vec<f64> {
    let len = wave.len();
    if len == 0 {
        return Vec::new();
    }
    let pad = (3 * taps.len()).min(len - 1);
    let mut ext = Vec::with_capacity(len + 2 * pad);
    ext.extend((1..=pad).rev().map(|k| 2.0 * wave[0] - wave[k]));
    ext.extend_from_slice(wave);
    ext.extend((1..=pad).map(|k| 2.0 * wave[len - 1] - wave[len - 1 - k]));
    let mut y = apply_centered(&ext, taps);
    y.reverse();
    let mut y = apply_centered(&y, taps);
    y.reverse();
    y[pad..pad + len].to_vec()
}
