//! Posterior smoothing and keyword scoring.
//!
//! The score of a window is the geometric mean, over keyword classes, of
//! each class's peak smoothed posterior inside the window. An event fires
//! when the score crosses the threshold upwards, then the decoder stays
//! quiet for one window.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Frames per second of the feature stream (10 ms hop).
pub const FRAME_RATE: usize = 100;
/// Aggregation window in 10 ms frames (1.1 s).
pub const WINDOW_FRAMES: usize = 110;
/// Default smoothing length in 10 ms frames (100 ms).
pub const SMOOTHING_FRAMES: usize = 10;

/// Numerically stable softmax, evaluated in `f64`.
pub fn softmax(logits: &[f32]) -> Vec<f32> {
    let max = logits.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
    let exps: Vec<f64> = logits.iter().map(|&v| (v as f64 - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| (e / sum) as f32).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorFrame {
    /// Index of the newest feature frame the posterior depends on.
    pub timestamp: usize,
    pub probs: Vec<f32>,
}

impl PosteriorFrame {
    pub fn from_logits(timestamp: usize, logits: &[f32]) -> Self {
        Self {
            timestamp,
            probs: softmax(logits),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionEvent {
    pub end_timestamp: usize,
    pub score: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    /// Aggregation window, in inference steps.
    pub window: usize,
    /// Moving-average length, in inference steps.
    pub smoothing: usize,
    pub keyword_ids: Vec<usize>,
    pub threshold: f32,
}

impl DecoderConfig {
    /// Defaults for a network that runs once every `first_stride` frames
    /// and predicts `n_classes` targets, the last two being SIL and FILLER.
    pub fn for_stride(first_stride: usize, n_classes: usize) -> Self {
        let s = first_stride.max(1);
        let keyword_ids = if n_classes >= 3 {
            (0..n_classes - 2).collect()
        } else {
            vec![0]
        };
        Self {
            window: (WINDOW_FRAMES / s).max(1),
            smoothing: (SMOOTHING_FRAMES / s).max(1),
            keyword_ids,
            threshold: 0.5,
        }
    }

    pub fn validate(&self, n_classes: usize) -> Result<()> {
        if self.smoothing == 0 || self.window < self.smoothing {
            return Err(Error::config(format!(
                "need window >= smoothing >= 1, got window {} smoothing {}",
                self.window, self.smoothing
            )));
        }
        if self.keyword_ids.is_empty() {
            return Err(Error::config("no keyword classes"));
        }
        let mut seen = vec![false; n_classes];
        for &id in &self.keyword_ids {
            if id >= n_classes {
                return Err(Error::config(format!(
                    "keyword id {id} out of {n_classes} classes"
                )));
            }
            if n_classes >= 3 && id >= n_classes - 2 {
                return Err(Error::config(format!(
                    "keyword id {id} is a SIL/FILLER class"
                )));
            }
            if std::mem::replace(&mut seen[id], true) {
                return Err(Error::config(format!("keyword id {id} listed twice")));
            }
        }
        if !self.threshold.is_finite() {
            return Err(Error::config("threshold must be finite"));
        }
        Ok(())
    }
}

/// Mean of `new` and the newest `len - 1` frames of `history`.
pub fn smooth_posteriors(
    history: &[PosteriorFrame],
    new: &PosteriorFrame,
    len: usize,
) -> PosteriorFrame {
    let len = len.max(1);
    let take = (len - 1).min(history.len());
    let mut acc: Vec<f64> = new.probs.iter().map(|&p| p as f64).collect();
    for f in &history[history.len() - take..] {
        for (a, &p) in acc.iter_mut().zip(&f.probs) {
            *a += p as f64;
        }
    }
    let n = (take + 1) as f64;
    PosteriorFrame {
        timestamp: new.timestamp,
        probs: acc.into_iter().map(|a| (a / n) as f32).collect(),
    }
}

/// Geometric mean over `keyword_ids` of each class's maximum in `window`,
/// clamped to `[0, 1]`. An empty window scores 0.
pub fn detection_score<'a>(
    window: impl IntoIterator<Item = &'a PosteriorFrame>,
    keyword_ids: &[usize],
) -> f32 {
    let mut peaks = vec![0.0f64; keyword_ids.len()];
    let mut any = false;
    for f in window {
        any = true;
        for (p, &id) in peaks.iter_mut().zip(keyword_ids) {
            *p = p.max(f.probs.get(id).copied().unwrap_or(0.0) as f64);
        }
    }
    if !any || keyword_ids.is_empty() {
        return 0.0;
    }
    let log_sum: f64 = peaks.iter().map(|p| p.max(0.0).ln()).sum();
    let score = (log_sum / keyword_ids.len() as f64).exp();
    if score.is_nan() {
        0.0
    } else {
        score.clamp(0.0, 1.0) as f32
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderOutput {
    pub posterior: PosteriorFrame,
    pub smoothed: PosteriorFrame,
    pub score: f32,
    pub event: Option<DetectionEvent>,
}

/// Stateful smoothing, windowed scoring and event emission.
#[derive(Debug, Clone)]
pub struct Decoder {
    cfg: DecoderConfig,
    raw: VecDeque<PosteriorFrame>,
    smoothed: VecDeque<PosteriorFrame>,
    prev_score: f32,
    steps: usize,
    quiet_until: usize,
}

impl Decoder {
    pub fn new(cfg: DecoderConfig, n_classes: usize) -> Result<Self> {
        cfg.validate(n_classes)?;
        Ok(Self {
            cfg,
            raw: VecDeque::new(),
            smoothed: VecDeque::new(),
            prev_score: f32::NEG_INFINITY,
            steps: 0,
            quiet_until: 0,
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.cfg
    }

    pub fn push(&mut self, posterior: PosteriorFrame) -> DecoderOutput {
        let history: Vec<PosteriorFrame> = self.raw.iter().cloned().collect();
        let smoothed = smooth_posteriors(&history, &posterior, self.cfg.smoothing);
        self.raw.push_back(posterior.clone());
        if self.raw.len() >= self.cfg.smoothing {
            self.raw.pop_front();
        }
        self.smoothed.push_back(smoothed.clone());
        if self.smoothed.len() > self.cfg.window {
            self.smoothed.pop_front();
        }
        let score = detection_score(&self.smoothed, &self.cfg.keyword_ids);
        let crossed = self.prev_score < self.cfg.threshold && score >= self.cfg.threshold;
        let event = if crossed && self.steps >= self.quiet_until {
            self.quiet_until = self.steps + self.cfg.window;
            Some(DetectionEvent {
                end_timestamp: posterior.timestamp,
                score,
            })
        } else {
            None
        };
        self.prev_score = score;
        self.steps += 1;
        DecoderOutput {
            posterior,
            smoothed,
            score,
            event,
        }
    }
}
