//! Streaming log-mel features: 25 ms periodic-Hann frames every 10 ms,
//! power spectrum, HTK-scale triangular filters, natural log, then global
//! mean/std normalization.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;
pub const DEFAULT_N_MELS: usize = 40;
pub const LOG_EPSILON: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontendConfig {
    pub sample_rate: u32,
    pub n_mels: usize,
    pub norm_mean: Vec<f32>,
    pub norm_std: Vec<f32>,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self::identity(DEFAULT_SAMPLE_RATE, DEFAULT_N_MELS)
    }
}

impl FrontendConfig {
    /// Mean 0 / std 1 normalization.
    pub fn identity(sample_rate: u32, n_mels: usize) -> Self {
        Self {
            sample_rate,
            n_mels,
            norm_mean: vec![0.0; n_mels],
            norm_std: vec![1.0; n_mels],
        }
    }

    pub fn window_samples(&self) -> usize {
        self.sample_rate as usize * 25 / 1000
    }

    pub fn hop_samples(&self) -> usize {
        self.sample_rate as usize / 100
    }

    /// Smallest power of two holding one window.
    pub fn fft_size(&self) -> usize {
        self.window_samples().next_power_of_two()
    }

    pub fn validate(&self) -> Result<()> {
        let sr = self.sample_rate as usize;
        if sr == 0 || !sr.is_multiple_of(200) {
            return Err(Error::config(format!(
                "sample rate {sr} does not give whole-sample 25 ms windows and 10 ms hops"
            )));
        }
        if self.n_mels == 0 {
            return Err(Error::config("n_mels must be positive"));
        }
        if self.norm_mean.len() != self.n_mels || self.norm_std.len() != self.n_mels {
            return Err(Error::config(format!(
                "normalization vectors have {}/{} entries, expected {}",
                self.norm_mean.len(),
                self.norm_std.len(),
                self.n_mels
            )));
        }
        if self.norm_mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("norm_mean must be finite"));
        }
        if self.norm_std.iter().any(|&v| !(v.is_finite() && v > 0.0)) {
            return Err(Error::config(
                "norm_std must be finite and strictly positive",
            ));
        }
        Ok(())
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// `n_mels + 2` filter edge frequencies, equally spaced on the mel scale
/// from 0 Hz to Nyquist. Band `m` peaks at edge `m + 1`.
pub fn mel_edges_hz(sample_rate: u32, n_mels: usize) -> Vec<f64> {
    let top = hz_to_mel(sample_rate as f64 / 2.0);
    (0..n_mels + 2)
        .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
        .collect()
}

/// Windowing, FFT and filterbank for one configuration.
pub struct LogMel {
    cfg: FrontendConfig,
    window: Vec<f64>,
    // dense [n_mels][n_fft/2 + 1]
    filters: Vec<Vec<f64>>,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for LogMel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LogMel")
            .field("cfg", &self.cfg)
            .finish_non_exhaustive()
    }
}

impl LogMel {
    pub fn new(cfg: FrontendConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.window_samples();
        let n_fft = cfg.fft_size();
        // periodic Hann
        let window = (0..n)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
            .collect();
        let edges = mel_edges_hz(cfg.sample_rate, cfg.n_mels);
        let bin_hz = cfg.sample_rate as f64 / n_fft as f64;
        let filters = (0..cfg.n_mels)
            .map(|m| {
                let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
                (0..=n_fft / 2)
                    .map(|k| {
                        let f = k as f64 * bin_hz;
                        let up = (f - lo) / (mid - lo);
                        let down = (hi - f) / (hi - mid);
                        up.min(down).max(0.0)
                    })
                    .collect()
            })
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(n_fft);
        Ok(Self {
            cfg,
            window,
            filters,
            fft,
        })
    }

    pub fn config(&self) -> &FrontendConfig {
        &self.cfg
    }

    /// Mel band energies (before the log) of one window of samples.
    pub fn energies(&self, samples: &[f32]) -> Result<Vec<f64>> {
        if samples.len() != self.window.len() {
            return Err(Error::shape(format!(
                "frame has {} samples, expected {}",
                samples.len(),
                self.window.len()
            )));
        }
        let mut buf = vec![Complex::new(0.0, 0.0); self.cfg.fft_size()];
        for ((b, &s), &w) in buf.iter_mut().zip(samples).zip(&self.window) {
            b.re = s as f64 * w;
        }
        self.fft.process(&mut buf);
        let power: Vec<f64> = buf[..=buf.len() / 2].iter().map(|c| c.norm_sqr()).collect();
        Ok(self
            .filters
            .iter()
            .map(|f| f.iter().zip(&power).map(|(w, p)| w * p).sum())
            .collect())
    }

    /// Un-normalized log-mel frame.
    pub fn frame(&self, samples: &[f32]) -> Result<Vec<f32>> {
        Ok(self
            .energies(samples)?
            .into_iter()
            .map(|e| (e + LOG_EPSILON).ln() as f32)
            .collect())
    }
}

pub fn compute_logmel_frame(samples: &[f32], cfg: &FrontendConfig) -> Result<Vec<f32>> {
    LogMel::new(cfg.clone())?.frame(samples)
}

pub fn normalize(frame: &[f32], cfg: &FrontendConfig) -> Vec<f32> {
    frame
        .iter()
        .zip(cfg.norm_mean.iter().zip(&cfg.norm_std))
        .map(|(&v, (&m, &s))| (v - m) / s)
        .collect()
}

pub fn denormalize(frame: &[f32], cfg: &FrontendConfig) -> Vec<f32> {
    frame
        .iter()
        .zip(cfg.norm_mean.iter().zip(&cfg.norm_std))
        .map(|(&v, (&m, &s))| v * s + m)
        .collect()
}

/// Incremental framing over PCM pushed in arbitrary pieces.
#[derive(Debug)]
pub struct FeatureStream {
    logmel: LogMel,
    buffer: Vec<f32>,
}

impl FeatureStream {
    pub fn new(cfg: FrontendConfig) -> Result<Self> {
        Ok(Self {
            logmel: LogMel::new(cfg)?,
            buffer: Vec::new(),
        })
    }

    pub fn config(&self) -> &FrontendConfig {
        self.logmel.config()
    }

    /// Appends samples and returns every normalized frame they complete.
    pub fn push(&mut self, pcm: &[f32]) -> Result<Vec<Vec<f32>>> {
        self.buffer.extend_from_slice(pcm);
        let win = self.logmel.cfg.window_samples();
        let hop = self.logmel.cfg.hop_samples();
        let mut frames = Vec::new();
        let mut start = 0;
        while start + win <= self.buffer.len() {
            let raw = self.logmel.frame(&self.buffer[start..start + win])?;
            frames.push(normalize(&raw, &self.logmel.cfg));
            start += hop;
        }
        self.buffer.drain(..start);
        Ok(frames)
    }

    pub fn reset(&mut self) {
        self.buffer.clear();
    }
}

/// Normalized frames of a whole signal.
pub fn stream_features(pcm: &[f32], cfg: &FrontendConfig) -> Result<Vec<Vec<f32>>> {
    FeatureStream::new(cfg.clone())?.push(pcm)
}

pub fn frame_count(n_samples: usize, cfg: &FrontendConfig) -> usize {
    let win = cfg.window_samples();
    if n_samples < win {
        0
    } else {
        (n_samples - win) / cfg.hop_samples() + 1
    }
}
