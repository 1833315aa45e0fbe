//! Mel spectrogram featurization.
//!
//! Audio is resampled, windowed (Hann) and transformed frame by frame; a
//! triangular filterbank spaced evenly on the Mel scale collapses the
//! power spectrum into `n_mels` bands; values go to dB and are min-max
//! normalized into `[0, 1]`. Spectrograms of one dataset are resized along
//! time to their mean column count so every sample shares one shape.

pub mod file;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use thiserror::Error;

use crate::ingest::AudioClip;

pub use file::{read_spec, read_spec_from, write_spec, write_spec_to, SpecFileError};

#[derive(Debug, Error)]
pub enum MelError {
    #[error("negative frequency {0}")]
    NegativeFrequency(f64),
    #[error("invalid mel config: {0}")]
    InvalidConfig(String),
    #[error("clip {0:?} shorter than one window ({1} < {2} samples)")]
    ClipTooShort(String, usize, usize),
    #[error("filter {0} has empty support; reduce n_mels or raise the FFT resolution")]
    EmptyFilter(usize),
    #[error("mean_columns of an empty set")]
    EmptySet,
}

/// STFT / filterbank parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MelConfig {
    pub target_sample_rate: u32,
    pub window_size: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    /// Floor added under the log to keep silent frames finite.
    pub log_floor: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            target_sample_rate: 22_050,
            window_size: 2048,
            hop: 512,
            n_mels: 128,
            fmin: 0.0,
            fmax: 11_025.0,
            log_floor: 1e-10,
        }
    }
}

impl MelConfig {
    pub fn validate(&self) -> Result<(), MelError> {
        if self.target_sample_rate == 0 {
            return Err(MelError::InvalidConfig("sample rate must be positive".into()));
        }
        if self.hop == 0 || self.window_size < self.hop {
            return Err(MelError::InvalidConfig(format!(
                "window {} must be >= hop {} >= 1",
                self.window_size, self.hop
            )));
        }
        if self.n_mels == 0 {
            return Err(MelError::InvalidConfig("n_mels must be >= 1".into()));
        }
        let nyquist = f64::from(self.target_sample_rate) / 2.0;
        if !(0.0 <= self.fmin && self.fmin < self.fmax && self.fmax <= nyquist) {
            return Err(MelError::InvalidConfig(format!(
                "need 0 <= fmin ({}) < fmax ({}) <= nyquist ({nyquist})",
                self.fmin, self.fmax
            )));
        }
        if self.log_floor <= 0.0 {
            return Err(MelError::InvalidConfig("log floor must be positive".into()));
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.window_size / 2 + 1
    }
}

/// Hertz to mel: `m = 2595 * log10(1 + f / 700)`.
pub fn hz_to_mel(f: f64) -> Result<f64, MelError> {
    if f < 0.0 {
        return Err(MelError::NegativeFrequency(f));
    }
    Ok(2595.0 * (1.0 + f / 700.0).log10())
}

/// Inverse of `hz_to_mel`.
pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Dense matrix of `f64`, row-major; DSP intermediate.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// rows x cols spectrogram, `f32` row-major (the on-disk precision).
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    rows: usize,
    cols: usize,
    values: Vec<f32>,
    normalized: bool,
}

impl MelSpectrogram {
    pub fn new(rows: usize, cols: usize, values: Vec<f32>, normalized: bool) -> Self {
        assert_eq!(rows * cols, values.len());
        assert!(rows > 0 && cols > 0);
        Self {
            rows,
            cols,
            values,
            normalized,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn at(&self, r: usize, c: usize) -> f32 {
        self.values[r * self.cols + c]
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }
}

/// Linear-interpolation resampling to `dst_rate`.
pub fn resample_linear(samples: &[f32], src_rate: u32, dst_rate: u32) -> Vec<f32> {
    assert!(src_rate > 0 && dst_rate > 0);
    if src_rate == dst_rate || samples.len() <= 1 {
        return samples.to_vec();
    }
    let ratio = f64::from(src_rate) / f64::from(dst_rate);
    let out_len = ((samples.len() as f64) / ratio).round().max(1.0) as usize;
    let mut out = Vec::with_capacity(out_len);
    for i in 0..out_len {
        let pos = i as f64 * ratio;
        let lo = pos.floor() as usize;
        if lo + 1 >= samples.len() {
            out.push(samples[samples.len() - 1]);
        } else {
            let frac = pos - lo as f64;
            let v = f64::from(samples[lo]) * (1.0 - frac) + f64::from(samples[lo + 1]) * frac;
            out.push(v as f32);
        }
    }
    out
}

/// Periodic Hann window.
fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos()))
        .collect()
}

/// One-sided power spectrogram `(window/2 + 1) x frames`.
///
/// The clip is resampled to the configured rate first; frames start every
/// `hop` samples, so `frames = (len - window) / hop + 1`.
pub fn stft_power(clip: &AudioClip, config: &MelConfig) -> Result<Matrix, MelError> {
    config.validate()?;
    let samples = resample_linear(&clip.samples, clip.sample_rate, config.target_sample_rate);
    let window = config.window_size;
    if samples.len() < window {
        return Err(MelError::ClipTooShort(
            clip.source_id.clone(),
            samples.len(),
            window,
        ));
    }
    let frames = (samples.len() - window) / config.hop + 1;
    let bins = config.n_bins();
    let win = hann(window);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(window);
    let mut out = Matrix::zeros(bins, frames);
    let mut buf = vec![Complex::new(0.0, 0.0); window];
    for frame in 0..frames {
        let start = frame * config.hop;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex::new(f64::from(samples[start + i]) * win[i], 0.0);
        }
        fft.process(&mut buf);
        for (bin, v) in buf.iter().take(bins).enumerate() {
            out.data[bin * frames + frame] = v.norm_sqr();
        }
    }
    Ok(out)
}

/// Triangular filterbank `(n_mels x bins)` with centers equally spaced on
/// the mel scale between `fmin` and `fmax`; each row is scaled to peak at
/// exactly 1.
pub fn mel_filterbank(config: &MelConfig) -> Result<Matrix, MelError> {
    config.validate()?;
    let bins = config.n_bins();
    let mel_lo = hz_to_mel(config.fmin)?;
    let mel_hi = hz_to_mel(config.fmax)?;
    // n_mels + 2 edge points; triangle i spans points [i, i+2].
    let edges: Vec<f64> = (0..config.n_mels + 2)
        .map(|i| {
            let m = mel_lo + (mel_hi - mel_lo) * i as f64 / (config.n_mels + 1) as f64;
            mel_to_hz(m)
        })
        .collect();
    let bin_hz: Vec<f64> = (0..bins)
        .map(|k| k as f64 * f64::from(config.target_sample_rate) / config.window_size as f64)
        .collect();
    let mut fb = Matrix::zeros(config.n_mels, bins);
    for m in 0..config.n_mels {
        let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
        let mut peak = 0f64;
        for (k, &f) in bin_hz.iter().enumerate() {
            let rising = (f - left) / (center - left);
            let falling = (right - f) / (right - center);
            let w = rising.min(falling).max(0.0);
            fb.data[m * bins + k] = w;
            peak = peak.max(w);
        }
        if peak == 0.0 {
            return Err(MelError::EmptyFilter(m));
        }
        for k in 0..bins {
            fb.data[m * bins + k] /= peak;
        }
    }
    Ok(fb)
}

/// Center frequencies (Hz) of the filterbank triangles.
pub fn filter_centers_hz(config: &MelConfig) -> Result<Vec<f64>, MelError> {
    let mel_lo = hz_to_mel(config.fmin)?;
    let mel_hi = hz_to_mel(config.fmax)?;
    Ok((1..=config.n_mels)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (config.n_mels + 1) as f64))
        .collect())
}

/// Unnormalized Mel spectrogram in dB: `10 log10(filterbank . power + eps)`.
pub fn mel_spectrogram(clip: &AudioClip, config: &MelConfig) -> Result<MelSpectrogram, MelError> {
    let power = stft_power(clip, config)?;
    let fb = mel_filterbank(config)?;
    let frames = power.cols;
    let bins = power.rows;
    let mut values = vec![0f32; config.n_mels * frames];
    for m in 0..config.n_mels {
        let fb_row = fb.row(m);
        for t in 0..frames {
            let mut acc = 0f64;
            for k in 0..bins {
                let w = fb_row[k];
                if w != 0.0 {
                    acc += w * power.data[k * frames + t];
                }
            }
            values[m * frames + t] = (10.0 * (acc + config.log_floor).log10()) as f32;
        }
    }
    Ok(MelSpectrogram::new(config.n_mels, frames, values, false))
}

/// Nearest integer to the mean column count; exact halves round up.
/// Computed in exact integer arithmetic so reduction order cannot matter.
pub fn mean_columns(specs: &[MelSpectrogram]) -> Result<usize, MelError> {
    if specs.is_empty() {
        return Err(MelError::EmptySet);
    }
    let sum: u64 = specs.iter().map(|s| s.cols() as u64).sum();
    let n = specs.len() as u64;
    Ok(((2 * sum + n) / (2 * n)) as usize)
}

/// Resample every row along time to exactly `target` columns by linear
/// interpolation; the identity when the width already matches.
pub fn resize_columns(spec: &MelSpectrogram, target: usize) -> MelSpectrogram {
    assert!(target >= 1, "target width must be >= 1");
    let (rows, cols) = (spec.rows(), spec.cols());
    if cols == target {
        return spec.clone();
    }
    let mut values = vec![0f32; rows * target];
    for r in 0..rows {
        let row = &spec.values()[r * cols..(r + 1) * cols];
        for (j, out) in values[r * target..(r + 1) * target].iter_mut().enumerate() {
            let pos = if target == 1 {
                (cols - 1) as f64 / 2.0
            } else {
                j as f64 * (cols - 1) as f64 / (target - 1) as f64
            };
            let lo = pos.floor() as usize;
            *out = if lo + 1 >= cols {
                row[cols - 1]
            } else {
                let frac = pos - lo as f64;
                (f64::from(row[lo]) * (1.0 - frac) + f64::from(row[lo + 1]) * frac) as f32
            };
        }
    }
    MelSpectrogram::new(rows, target, values, spec.is_normalized())
}

/// Whole-matrix min-max normalization into `[0, 1]`; a constant matrix
/// maps to all zeros.
pub fn minmax_normalize(spec: &MelSpectrogram) -> MelSpectrogram {
    let mut min = f32::INFINITY;
    let mut max = f32::NEG_INFINITY;
    for &v in spec.values() {
        min = min.min(v);
        max = max.max(v);
    }
    let values = if max > min {
        let range = max - min;
        spec.values().iter().map(|&v| (v - min) / range).collect()
    } else {
        vec![0f32; spec.values().len()]
    };
    MelSpectrogram::new(spec.rows(), spec.cols(), values, true)
}
