use std::f64::consts::PI;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use super::{DspError, Result};

/// Which one-sided bins survive masking.
#[derive(Debug, Clone, PartialEq)]
pub enum BinMask {
    /// Zero every bin whose center frequency exceeds the limit.
    ZeroAbove(f64),
    /// Explicit keep flags, one per one-sided bin.
    Keep(Vec<bool>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StftSpec {
    pub window_length: usize,
    pub hop: usize,
    pub sample_rate_hz: f64,
    pub mask: BinMask,
}

impl Default for StftSpec {
    fn default() -> Self {
        StftSpec {
            window_length: 32,
            hop: 16,
            sample_rate_hz: 128.0,
            mask: BinMask::ZeroAbove(50.0),
        }
    }
}

impl StftSpec {
    pub fn n_bins(&self) -> usize {
        self.window_length / 2 + 1
    }

    /// Periodic Hann window.
    pub fn window(&self) -> Vec<f64> {
        let n = self.window_length as f64;
        (0..self.window_length)
            .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n).cos())
            .collect()
    }

    pub fn keep_flags(&self) -> Result<Vec<bool>> {
        match &self.mask {
            BinMask::ZeroAbove(limit) => {
                let df = self.sample_rate_hz / self.window_length as f64;
                Ok((0..self.n_bins()).map(|k| k as f64 * df <= *limit).collect())
            }
            BinMask::Keep(flags) if flags.len() == self.n_bins() => Ok(flags.clone()),
            BinMask::Keep(flags) => Err(DspError::InvalidStft(format!(
                "mask has {} flags for {} bins",
                flags.len(),
                self.n_bins()
            ))),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.window_length < 2 || self.hop == 0 || self.hop > self.window_length {
            return Err(DspError::InvalidStft(format!(
                "need 0 < hop <= window, got hop {} window {}",
                self.hop, self.window_length
            )));
        }
        Ok(())
    }

    /// Whether shifted copies of the window sum to a constant.
    pub fn is_cola(&self) -> bool {
        let w = self.window();
        let sums: Vec<f64> = (0..self.hop)
            .map(|m| w.iter().skip(m).step_by(self.hop).sum())
            .collect();
        sums.iter()
            .all(|s| (s - sums[0]).abs() <= 1e-10 * sums[0].abs().max(1.0))
    }
}

/// One-sided frames, `frames[f][k]`, plus the length of the analysed signal.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub frames: Vec<Vec<Complex64>>,
    pub signal_len: usize,
}

pub fn stft(wave: &[f64], spec: &StftSpec) -> Result<Spectrogram> {
    spec.validate()?;
    let n = spec.window_length;
    if wave.len() < n {
        return Err(DspError::TooShort {
            len: wave.len(),
            window: n,
        });
    }
    let fft = FftPlanner::new().plan_fft_forward(n);
    let window = spec.window();
    let count = (wave.len() - n) / spec.hop + 1;
    let frames = (0..count)
        .map(|f| {
            let start = f * spec.hop;
            let mut buf: Vec<Complex64> = wave[start..start + n]
                .iter()
                .zip(&window)
                .map(|(x, w)| Complex64::new(x * w, 0.0))
                .collect();
            fft.process(&mut buf);
            buf.truncate(spec.n_bins());
            buf
        })
        .collect();
    Ok(Spectrogram {
        frames,
        signal_len: wave.len(),
    })
}

/// Overlap-add resynthesis divided by the summed analysis windows. Samples
/// no frame covers with non-zero weight come back as 0.
pub fn istft(spec_gram: &Spectrogram, spec: &StftSpec) -> Result<Vec<f64>> {
    Ok(overlap_add(spec_gram, spec)?.0)
}

// Returns the resynthesis and, per sample, whether it was recoverable.
fn overlap_add(spec_gram: &Spectrogram, spec: &StftSpec) -> Result<(Vec<f64>, Vec<bool>)> {
    spec.validate()?;
    if !spec.is_cola() {
        return Err(DspError::InvalidStft(format!(
            "Hann window {} with hop {} does not satisfy constant overlap-add",
            spec.window_length, spec.hop
        )));
    }
    let n = spec.window_length;
    let bins = spec.n_bins();
    let ifft = FftPlanner::new().plan_fft_inverse(n);
    let window = spec.window();
    let mut out = vec![0.0; spec_gram.signal_len];
    let mut wsum = vec![0.0; spec_gram.signal_len];
    for (f, frame) in spec_gram.frames.iter().enumerate() {
        if frame.len() != bins {
            return Err(DspError::InvalidStft(format!(
                "frame {f} has {} bins, expected {bins}",
                frame.len()
            )));
        }
        let mut full = vec![Complex64::new(0.0, 0.0); n];
        full[..bins].copy_from_slice(frame);
        for k in bins..n {
            full[k] = frame[n - k].conj();
        }
        ifft.process(&mut full);
        let start = f * spec.hop;
        for i in 0..n.min(out.len().saturating_sub(start)) {
            out[start + i] += full[i].re / n as f64;
            wsum[start + i] += window[i];
        }
    }
    let covered: Vec<bool> = wsum.iter().map(|&s| s > 1e-8).collect();
    for (v, (&s, &c)) in out.iter_mut().zip(wsum.iter().zip(&covered)) {
        *v = if c { *v / s } else { 0.0 };
    }
    Ok((out, covered))
}

/// STFT, zero masked bins, resynthesize. Samples the frames cannot recover
/// (the window's zero at the very first sample, and any tail past the last
/// frame) pass through unchanged.
pub fn stft_denoise(wave: &[f64], spec: &StftSpec) -> Result<Vec<f64>> {
    let keep = spec.keep_flags()?;
    let mut gram = stft(wave, spec)?;
    for frame in &mut gram.frames {
        for (c, &k) in frame.iter_mut().zip(&keep) {
            if !k {
                *c = Complex64::new(0.0, 0.0);
            }
        }
    }
    let (mut out, covered) = overlap_add(&gram, spec)?;
    for i in 0..out.len() {
        if !covered[i] {
            out[i] = wave[i];
        }
    }
    Ok(out)
}
