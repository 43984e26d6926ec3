//! Causal 1D convolution, batch and chunked-streaming.
//!
//! Batch output column `i` reads input columns `[s*i, s*i + K)`. The
//! streaming form keeps the last `K - s` input columns as state, prepends
//! them to each chunk of `t` columns (with `t` a multiple of `s`), and
//! yields exactly `t / s` output columns per chunk. Concatenating the chunk
//! outputs reproduces the batch output on the input left-padded with the
//! initial state.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor2D;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    None,
    Relu,
}

impl Activation {
    #[inline]
    pub fn apply(self, v: f32) -> f32 {
        match self {
            Activation::None => v,
            Activation::Relu => v.max(0.0),
        }
    }
}

pub fn apply_activation(x: &Tensor2D, kind: Activation) -> Tensor2D {
    x.map(|v| kind.apply(v))
}

/// A 1D convolution with weights `[out][in][kernel]`, per-output bias and
/// an activation applied after the bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv1DLayer {
    out_channels: usize,
    in_channels: usize,
    kernel: usize,
    stride: usize,
    weights: Vec<f32>,
    bias: Vec<f32>,
    activation: Activation,
}

impl Conv1DLayer {
    pub fn new(
        out_channels: usize,
        in_channels: usize,
        kernel: usize,
        stride: usize,
        weights: Vec<f32>,
        bias: Vec<f32>,
        activation: Activation,
    ) -> Result<Self> {
        if out_channels == 0 || in_channels == 0 || kernel == 0 || stride == 0 {
            return Err(Error::config(format!(
                "conv dims must be positive (D={out_channels}, C={in_channels}, K={kernel}, s={stride})"
            )));
        }
        if weights.len() != out_channels * in_channels * kernel {
            return Err(Error::shape(format!(
                "weights have {} values, expected {out_channels}x{in_channels}x{kernel}",
                weights.len()
            )));
        }
        if bias.len() != out_channels {
            return Err(Error::shape(format!(
                "bias has {} values, expected {out_channels}",
                bias.len()
            )));
        }
        if weights.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("conv parameters must be finite".into()));
        }
        Ok(Self {
            out_channels,
            in_channels,
            kernel,
            stride,
            weights,
            bias,
            activation,
        })
    }

    pub fn zeros(
        out_channels: usize,
        in_channels: usize,
        kernel: usize,
        stride: usize,
        activation: Activation,
    ) -> Result<Self> {
        Self::new(
            out_channels,
            in_channels,
            kernel,
            stride,
            vec![0.0; out_channels * in_channels * kernel],
            vec![0.0; out_channels],
            activation,
        )
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    pub fn bias(&self) -> &[f32] {
        &self.bias
    }

    #[inline]
    pub fn weight(&self, d: usize, c: usize, k: usize) -> f32 {
        self.weights[(d * self.in_channels + c) * self.kernel + k]
    }

    /// Columns of history carried between streaming steps.
    pub fn history_len(&self) -> usize {
        self.kernel.saturating_sub(self.stride)
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn output_frames(&self, input_frames: usize) -> Option<usize> {
        (input_frames >= self.kernel).then(|| (input_frames - self.kernel) / self.stride + 1)
    }

    pub fn forward(&self, x: &Tensor2D) -> Result<Tensor2D> {
        conv1d_forward(x, self)
    }
}

pub fn conv1d_forward(x: &Tensor2D, layer: &Conv1DLayer) -> Result<Tensor2D> {
    if x.channels() != layer.in_channels {
        return Err(Error::shape(format!(
            "input has {} channels, layer expects {}",
            x.channels(),
            layer.in_channels
        )));
    }
    let frames = layer.output_frames(x.frames()).ok_or_else(|| {
        Error::shape(format!(
            "input has {} frames, kernel needs at least {}",
            x.frames(),
            layer.kernel
        ))
    })?;
    let (k_len, s) = (layer.kernel, layer.stride);
    let mut out = Vec::with_capacity(layer.out_channels * frames);
    for d in 0..layer.out_channels {
        let w_d = &layer.weights[d * layer.in_channels * k_len..][..layer.in_channels * k_len];
        for i in 0..frames {
            let mut acc = 0.0f32;
            for c in 0..layer.in_channels {
                let w = &w_d[c * k_len..][..k_len];
                let xs = &x.row(c)[s * i..][..k_len];
                for k in 0..k_len {
                    acc += w[k] * xs[k];
                }
            }
            out.push(layer.activation.apply(acc + layer.bias[d]));
        }
    }
    Tensor2D::new(layer.out_channels, frames, out)
}

/// Streaming history for one layer: the most recent `K - s` input columns.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamState {
    history: Tensor2D,
    chunk_size: usize,
}

impl StreamState {
    pub fn history(&self) -> &Tensor2D {
        &self.history
    }

    pub fn chunk_size(&self) -> usize {
        self.chunk_size
    }

    /// State whose history is `K - s` copies of `column`, i.e. what the
    /// layer would hold after seeing a constant input forever.
    pub fn filled(layer: &Conv1DLayer, chunk_size: usize, column: &[f32]) -> Result<Self> {
        check_chunk(layer, chunk_size)?;
        if column.len() != layer.in_channels {
            return Err(Error::shape(format!(
                "fill column has {} values, layer expects {}",
                column.len(),
                layer.in_channels
            )));
        }
        Ok(Self {
            history: Tensor2D::repeat_column(column, layer.history_len())?,
            chunk_size,
        })
    }

    /// Consumes one chunk and returns its `t / s` output columns.
    pub fn step(&mut self, layer: &Conv1DLayer, chunk: &Tensor2D) -> Result<Tensor2D> {
        stream_step(layer, self, chunk)
    }
}

fn check_chunk(layer: &Conv1DLayer, chunk_size: usize) -> Result<()> {
    if chunk_size == 0 || !chunk_size.is_multiple_of(layer.stride) {
        return Err(Error::config(format!(
            "chunk size {chunk_size} is not a positive multiple of stride {}",
            layer.stride
        )));
    }
    Ok(())
}

pub fn stream_state_init(layer: &Conv1DLayer, chunk_size: usize) -> Result<StreamState> {
    StreamState::filled(layer, chunk_size, &vec![0.0; layer.in_channels])
}

pub fn stream_step(
    layer: &Conv1DLayer,
    state: &mut StreamState,
    chunk: &Tensor2D,
) -> Result<Tensor2D> {
    if chunk.frames() != state.chunk_size {
        return Err(Error::shape(format!(
            "chunk has {} frames, stream expects {}",
            chunk.frames(),
            state.chunk_size
        )));
    }
    if chunk.channels() != layer.in_channels {
        return Err(Error::shape(format!(
            "chunk has {} channels, layer expects {}",
            chunk.channels(),
            layer.in_channels
        )));
    }
    if state.history.channels() != layer.in_channels
        || state.history.frames() != layer.history_len()
    {
        return Err(Error::shape("stream state does not belong to this layer"));
    }
    let window = state.history.concat_frames(chunk)?;
    let out = conv1d_forward(&window, layer)?;
    debug_assert_eq!(out.frames(), state.chunk_size / layer.stride);
    let keep = layer.history_len();
    state.history = window.slice_frames(window.frames() - keep, window.frames())?;
    Ok(out)
}
