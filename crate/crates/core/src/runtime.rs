//! End-to-end streaming: PCM → log-mel frames → one inference step every
//! `s₁` frames → softmax → smoothing → windowed score → events.
//!
//! Engines start from their silence state. The runner prepends just enough
//! zero frames that step outputs land on the same grid as a batch pass over
//! the real frames, and it drops steps whose receptive field still reaches
//! into that padding. A clip of `F` frames therefore yields
//! `⌊(F − RF)/s₁⌋ + 1` posteriors, each stamped with the newest frame it
//! depends on.

use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::decoder::{
    softmax, Decoder, DecoderConfig, DecoderOutput, DetectionEvent, PosteriorFrame,
};
use crate::error::{Error, Result};
use crate::format::{Model, ModelFile};
use crate::frontend::FeatureStream;
use crate::linearize::{linearize_network, LinearizedNet, LinearizedState};
use crate::model::{network_forward, stream_left_context, ConvNet, Network, StreamingNet};
use crate::quant::{calibrate_activations, quantize_network, QuantizedNet, QuantizedState};
use crate::tensor::Tensor2D;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EngineKind {
    /// Float streaming convolution.
    Conv,
    /// Float linearized GEMVs.
    Linear,
    /// Int8 linearized GEMVs.
    Int8,
}

impl FromStr for EngineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conv" => Ok(Self::Conv),
            "linear" => Ok(Self::Linear),
            "int8" => Ok(Self::Int8),
            other => Err(Error::config(format!(
                "unknown engine {other:?} (conv, linear, int8)"
            ))),
        }
    }
}

/// A stateful per-stream executor.
#[derive(Debug, Clone)]
pub enum Engine {
    Conv(StreamingNet),
    Linear(LinearizedNet, LinearizedState),
    Int8(QuantizedNet, QuantizedState),
}

impl Engine {
    pub fn new(model: &Model, kind: EngineKind) -> Result<Self> {
        match (kind, model) {
            (EngineKind::Conv, Model::Float(net)) => {
                Ok(Engine::Conv(StreamingNet::new(net, net.first_stride())?))
            }
            (EngineKind::Linear, Model::Float(net)) => {
                let lnet = linearize_network(net, net.first_stride())?;
                let st = lnet.initial_state();
                Ok(Engine::Linear(lnet, st))
            }
            (EngineKind::Linear, Model::Linearized(lnet)) => {
                Ok(Engine::Linear(lnet.clone(), lnet.initial_state()))
            }
            (EngineKind::Int8, Model::Quantized(q)) => {
                Ok(Engine::Int8(q.clone(), q.initial_state()))
            }
            (EngineKind::Int8, _) => Err(Error::config(format!(
                "the int8 engine needs a quantized model, this one is {}",
                model.kind()
            ))),
            (_, _) => Err(Error::config(format!(
                "engine {kind:?} cannot run a {} model",
                model.kind()
            ))),
        }
    }

    pub fn chunk_size(&self) -> usize {
        match self {
            Engine::Conv(s) => s.chunk_size(),
            Engine::Linear(n, _) => n.chunk_size(),
            Engine::Int8(n, _) => n.chunk_size(),
        }
    }

    /// One inference step; returns the logits.
    pub fn step(&mut self, chunk: &Tensor2D) -> Result<Vec<f32>> {
        let y = match self {
            Engine::Conv(s) => s.step(chunk)?,
            Engine::Linear(n, st) => n.step(st, chunk)?,
            Engine::Int8(n, st) => n.step(st, chunk)?,
        };
        Ok(y.into_data())
    }
}

/// `(kernel, stride)` of every layer in evaluation order.
fn geometry(model: &Model) -> Vec<(usize, usize)> {
    match model {
        Model::Float(n) => n
            .layers()
            .iter()
            .map(|l| (l.layer.kernel(), l.layer.stride()))
            .collect(),
        Model::Linearized(n) => n
            .stages()
            .iter()
            .map(|s| (s.kernel(), s.stride()))
            .collect(),
        Model::Quantized(n) => n
            .stages()
            .iter()
            .map(|s| (s.kernel(), s.stride()))
            .collect(),
    }
}

/// Zero frames an engine's silence state stands in for.
pub fn left_context(model: &Model) -> usize {
    let mut ctx = 0;
    let mut jump = 1;
    for (k, s) in geometry(model) {
        ctx += k.saturating_sub(s) * jump;
        jump *= s;
    }
    ctx
}

/// Incremental runner over PCM pushed in arbitrary pieces.
#[derive(Debug)]
pub struct StreamRunner {
    engine: Engine,
    features: FeatureStream,
    decoder: Decoder,
    stride: usize,
    rf: usize,
    pending: Vec<Vec<f32>>,
    steps_run: usize,
    first_emitted: usize,
    // engine-stream frames that are padding rather than audio
    pad: usize,
}

impl StreamRunner {
    pub fn new(file: &ModelFile, kind: EngineKind, decoder: DecoderConfig) -> Result<Self> {
        file.validate()?;
        let engine = Engine::new(&file.model, kind)?;
        let stride = file.model.first_stride();
        let ctx = left_context(&file.model);
        let pad = (stride - ctx % stride) % stride;
        let n_mels = file.frontend.n_mels;
        Ok(Self {
            engine,
            features: FeatureStream::new(file.frontend.clone())?,
            decoder: Decoder::new(decoder, file.model.n_classes())?,
            stride,
            rf: file.model.receptive_field(),
            pending: vec![vec![0.0; n_mels]; pad],
            steps_run: 0,
            first_emitted: (pad + ctx) / stride,
            pad,
        })
    }

    pub fn receptive_field(&self) -> usize {
        self.rf
    }

    /// Feeds samples; returns decoder output for every step completed.
    pub fn push(&mut self, pcm: &[f32]) -> Result<Vec<DecoderOutput>> {
        self.pending.extend(self.features.push(pcm)?);
        let mut out = Vec::new();
        while self.pending.len() >= self.stride {
            let cols: Vec<Vec<f32>> = self.pending.drain(..self.stride).collect();
            let chunk = Tensor2D::from_columns(cols[0].len(), &cols)?;
            let logits = self.engine.step(&chunk)?;
            let j = self.steps_run;
            self.steps_run += 1;
            if j < self.first_emitted {
                continue;
            }
            let m = j - self.first_emitted;
            let timestamp = m * self.stride + self.rf - 1;
            out.push(
                self.decoder
                    .push(PosteriorFrame::from_logits(timestamp, &logits)),
            );
        }
        Ok(out)
    }

    /// Number of padding frames prepended to the audio.
    pub fn padding(&self) -> usize {
        self.pad
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamResult {
    pub outputs: Vec<DecoderOutput>,
}

impl StreamResult {
    pub fn events(&self) -> Vec<DetectionEvent> {
        self.outputs
            .iter()
            .filter_map(|o| o.event.clone())
            .collect()
    }

    pub fn scores(&self) -> Vec<f32> {
        self.outputs.iter().map(|o| o.score).collect()
    }
}

/// Runs a whole clip. `threshold` overrides the model file's decoder
/// threshold.
pub fn run_stream(
    file: &ModelFile,
    pcm: &[f32],
    kind: EngineKind,
    threshold: Option<f32>,
) -> Result<StreamResult> {
    let mut cfg = file.decoder.clone();
    if let Some(t) = threshold {
        cfg.threshold = t;
    }
    let mut runner = StreamRunner::new(file, kind, cfg)?;
    Ok(StreamResult {
        outputs: runner.push(pcm)?,
    })
}

/// End time in seconds of feature frame `frame`.
pub fn frame_end_seconds(frame: usize, file: &ModelFile) -> f64 {
    let fe = &file.frontend;
    (frame * fe.hop_samples() + fe.window_samples()) as f64 / fe.sample_rate as f64
}

/// Worst deviations found by [`verify_model`]. `None` means the suite does
/// not apply to the model kind.
#[derive(Debug, Clone, PartialEq)]
pub struct VerifyReport {
    pub steps: usize,
    pub stream_vs_batch: Option<f32>,
    pub linear_vs_stream: Option<f32>,
    pub macs_match: Option<bool>,
    /// Largest per-class mean absolute softmax difference, int8 vs float.
    pub quant_drift: Option<f32>,
    pub int8_deterministic: Option<bool>,
}

pub const STREAM_TOL: f32 = 1e-5;
pub const LINEAR_TOL: f32 = 1e-6;
pub const DRIFT_TOL: f32 = 0.05;

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.stream_vs_batch.is_none_or(|d| d <= STREAM_TOL)
            && self.linear_vs_stream.is_none_or(|d| d <= LINEAR_TOL)
            && self.macs_match.is_none_or(|ok| ok)
            && self.quant_drift.is_none_or(|d| d <= DRIFT_TOL)
            && self.int8_deterministic.is_none_or(|ok| ok)
    }
}

/// Standard-normal feature stream, `channels x frames`.
pub fn random_features(seed: u64, channels: usize, frames: usize) -> Tensor2D {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..channels * frames)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    Tensor2D::new(channels, frames, data).expect("finite samples")
}

/// Max abs deviation between streaming and batch-on-padded-input.
pub fn stream_vs_batch(net: &(impl ConvNet + ?Sized), x: &Tensor2D) -> Result<f32> {
    let streamed = StreamingNet::new(net, net.first_stride())?.run(x)?;
    let batch = network_forward(net, &x.left_pad(stream_left_context(net)))?;
    streamed.max_abs_diff(&batch)
}

/// Max abs deviation between the linearized engine and streaming
/// convolution, step by step, plus whether the executed MAC count equals
/// the static count.
pub fn linear_vs_stream(net: &(impl ConvNet + ?Sized), x: &Tensor2D) -> Result<(f32, bool)> {
    let t = net.first_stride();
    let lnet = linearize_network(net, t)?;
    let mut conv = StreamingNet::new(net, t)?;
    let mut st = lnet.initial_state();
    let mut worst = 0.0f32;
    let mut macs_ok = true;
    for j in 0..x.frames() / t {
        let chunk = x.slice_frames(j * t, (j + 1) * t)?;
        let before = st.macs_executed();
        let a = lnet.step(&mut st, &chunk)?;
        macs_ok &=
            (st.macs_executed() - before) as usize == crate::model::count_macs_per_step(net)?;
        worst = worst.max(a.max_abs_diff(&conv.step(&chunk)?)?);
    }
    Ok((worst, macs_ok))
}

/// Quantizes `lnet` on `x` and compares softmax posteriors of the int8 and
/// float engines over the same stream. Returns the largest per-class mean
/// absolute difference.
pub fn quant_drift(lnet: &LinearizedNet, x: &Tensor2D) -> Result<(f32, QuantizedNet)> {
    let q = quantize_network(lnet, &calibrate_activations(lnet, x)?)?;
    Ok((posterior_drift(lnet, &q, x)?, q))
}

pub fn posterior_drift(lnet: &LinearizedNet, q: &QuantizedNet, x: &Tensor2D) -> Result<f32> {
    let t = lnet.chunk_size();
    let steps = x.frames() / t;
    let mut fs = lnet.initial_state();
    let mut qs = q.initial_state();
    let mut sums = vec![0.0f64; lnet.n_classes()];
    for j in 0..steps {
        let chunk = x.slice_frames(j * t, (j + 1) * t)?;
        let pf = softmax(lnet.step(&mut fs, &chunk)?.data());
        let pq = softmax(q.step(&mut qs, &chunk)?.data());
        for ((s, a), b) in sums.iter_mut().zip(&pf).zip(&pq) {
            *s += (a - b).abs() as f64;
        }
    }
    Ok(sums
        .iter()
        .map(|s| (s / steps.max(1) as f64) as f32)
        .fold(0.0, f32::max))
}

/// Two fresh int8 runs over `x` produce identical int8 logits.
pub fn int8_deterministic(q: &QuantizedNet, x: &Tensor2D) -> Result<bool> {
    let t = q.chunk_size();
    let run = || -> Result<Vec<i8>> {
        let mut st = q.initial_state();
        let mut out = Vec::new();
        for j in 0..x.frames() / t {
            out.extend(q.step_int8(&mut st, &x.slice_frames(j * t, (j + 1) * t)?)?);
        }
        Ok(out)
    };
    Ok(run()? == run()?)
}

/// Runs every equivalence suite that applies to `model` on `steps` steps of
/// seeded random features.
pub fn verify_model(model: &Model, steps: usize, seed: u64) -> Result<VerifyReport> {
    if steps == 0 {
        return Err(Error::config("need at least one step"));
    }
    let frames = steps * model.first_stride();
    let x = random_features(seed, model.input_features(), frames);
    let mut report = VerifyReport {
        steps,
        stream_vs_batch: None,
        linear_vs_stream: None,
        macs_match: None,
        quant_drift: None,
        int8_deterministic: None,
    };
    let lnet = match model {
        Model::Float(net) => {
            report.stream_vs_batch = Some(stream_vs_batch(net, &x)?);
            let (d, macs) = linear_vs_stream(net, &x)?;
            report.linear_vs_stream = Some(d);
            report.macs_match = Some(macs);
            Some(linearize_network(net, net.first_stride())?)
        }
        Model::Linearized(l) => Some(l.clone()),
        Model::Quantized(q) => {
            report.int8_deterministic = Some(int8_deterministic(q, &x)?);
            None
        }
    };
    if let Some(lnet) = lnet {
        let (drift, q) = quant_drift(&lnet, &x)?;
        report.quant_drift = Some(drift);
        report.int8_deterministic = Some(int8_deterministic(&q, &x)?);
    }
    Ok(report)
}

/// Float network of a model file, if it has one.
pub fn float_network(model: &Model) -> Option<&Network> {
    match model {
        Model::Float(n) => Some(n),
        _ => None,
    }
}
