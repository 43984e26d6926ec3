//! Post-training int8 quantization of a linearized network.
//!
//! Weights are quantized symmetrically per tensor; every activation edge
//! (network input and each stage output) gets asymmetric per-tensor params
//! from min/max calibration. A stage computes
//!
//! ```text
//! acc = Σ w_q·x_q − zp_in·Σ w_q + bias_q          (int32)
//! y_q = round(acc · w_s·in_s/out_s [+ residual]) + zp_out
//! ```
//!
//! with requantization done in `f64`, so identical inputs give identical
//! int8 outputs on every platform.

use crate::affine::{choose_quant_params, quantize_slice, QuantMode, QuantParams};
use crate::conv::Activation;
use crate::error::{Error, Result};
use crate::linearize::{gather_window, LinearizedNet};
use crate::tensor::Tensor2D;

/// Largest GEMV input for which the int32 accumulator cannot overflow:
/// 16384 terms of at most 127·255.
pub const MAX_IN_DIM: usize = 16_384;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Range {
    pub min: f32,
    pub max: f32,
}

impl Range {
    fn empty() -> Self {
        Self {
            min: f32::INFINITY,
            max: f32::NEG_INFINITY,
        }
    }

    fn observe(&mut self, values: &[f32]) {
        for &v in values {
            self.min = self.min.min(v);
            self.max = self.max.max(v);
        }
    }

    pub fn contains(&self, v: f32) -> bool {
        self.min <= v && v <= self.max
    }
}

/// Observed value ranges on every activation edge: edge 0 is the network
/// input, edge `i + 1` is the output of stage `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationRanges {
    pub edges: Vec<Range>,
}

impl CalibrationRanges {
    pub fn stage_input(&self, stage: usize) -> Option<Range> {
        self.edges.get(stage).copied()
    }

    pub fn stage_output(&self, stage: usize) -> Option<Range> {
        self.edges.get(stage + 1).copied()
    }
}

/// Streams `calib` through a fresh copy of the float network and records
/// min/max of every stage input and output, including the primed ring
/// contents.
pub fn calibrate_activations(lnet: &LinearizedNet, calib: &Tensor2D) -> Result<CalibrationRanges> {
    let t = lnet.chunk_size();
    if calib.channels() != lnet.input_features() {
        return Err(Error::Calibration(format!(
            "calibration stream has {} channels, network expects {}",
            calib.channels(),
            lnet.input_features()
        )));
    }
    let steps = calib.frames() / t;
    if steps == 0 {
        return Err(Error::Calibration(format!(
            "calibration stream has {} frames, need at least {t}",
            calib.frames()
        )));
    }
    let mut edges = vec![Range::empty(); lnet.stages().len() + 1];
    for (edge, col) in edges.iter_mut().zip(lnet.zero_input_columns()) {
        edge.observe(&col);
    }
    let mut state = lnet.initial_state();
    for j in 0..steps {
        let chunk = calib.slice_frames(j * t, (j + 1) * t)?;
        let (out, newest) = lnet.step_traced(&mut state, &chunk)?;
        edges[0].observe(chunk.data());
        for (edge, col) in edges[1..].iter_mut().zip(&newest[1..]) {
            edge.observe(col);
        }
        edges.last_mut().expect("non-empty").observe(&out);
    }
    Ok(CalibrationRanges { edges })
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedLinearLayer {
    in_dim: usize,
    out_dim: usize,
    weights: Vec<i8>,
    weight_params: QuantParams,
    bias: Vec<i32>,
    in_params: QuantParams,
    out_params: QuantParams,
    activation: Activation,
    col_sums: Vec<i32>,
}

impl QuantizedLinearLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        in_dim: usize,
        out_dim: usize,
        weights: Vec<i8>,
        weight_params: QuantParams,
        bias: Vec<i32>,
        in_params: QuantParams,
        out_params: QuantParams,
        activation: Activation,
    ) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 || weights.len() != in_dim * out_dim || bias.len() != out_dim
        {
            return Err(Error::shape(format!(
                "int8 linear {in_dim}->{out_dim} got {} weights and {} biases",
                weights.len(),
                bias.len()
            )));
        }
        if in_dim > MAX_IN_DIM {
            return Err(Error::config(format!(
                "input width {in_dim} exceeds {MAX_IN_DIM}; int32 accumulation could overflow"
            )));
        }
        if weight_params.zero_point() != 0 {
            return Err(Error::config("weight quantization must be symmetric"));
        }
        let mut col_sums = vec![0i32; out_dim];
        for row in weights.chunks_exact(out_dim) {
            for (s, &w) in col_sums.iter_mut().zip(row) {
                *s += w as i32;
            }
        }
        Ok(Self {
            in_dim,
            out_dim,
            weights,
            weight_params,
            bias,
            in_params,
            out_params,
            activation,
            col_sums,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn weights(&self) -> &[i8] {
        &self.weights
    }

    pub fn weight_params(&self) -> QuantParams {
        self.weight_params
    }

    pub fn bias(&self) -> &[i32] {
        &self.bias
    }

    pub fn in_params(&self) -> QuantParams {
        self.in_params
    }

    pub fn out_params(&self) -> QuantParams {
        self.out_params
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    /// Int32 accumulators `Σ w·(x − zp_in) + bias`.
    fn accumulate(&self, x: &[i8]) -> Vec<i32> {
        let mut acc = vec![0i32; self.out_dim];
        for (&xi, row) in x.iter().zip(self.weights.chunks_exact(self.out_dim)) {
            let xi = xi as i32;
            for (a, &w) in acc.iter_mut().zip(row) {
                *a += w as i32 * xi;
            }
        }
        let zp = self.in_params.zero_point();
        for ((a, &s), &b) in acc.iter_mut().zip(&self.col_sums).zip(&self.bias) {
            *a += b - zp * s;
        }
        acc
    }

    /// Requantizes accumulators (plus an optional residual column in its
    /// own params) to the output params, then applies the activation by
    /// clamping at the output zero point.
    fn requantize(&self, acc: &[i32], residual: Option<(&[i8], QuantParams)>) -> Vec<i8> {
        let out_s = self.out_params.scale() as f64;
        let mult = self.weight_params.scale() as f64 * self.in_params.scale() as f64 / out_s;
        let zp_out = self.out_params.zero_point();
        acc.iter()
            .enumerate()
            .map(|(d, &a)| {
                let mut y = a as f64 * mult;
                if let Some((src, p)) = residual {
                    y += (src[d] as i32 - p.zero_point()) as f64 * (p.scale() as f64 / out_s);
                }
                let mut q = (y.round() as i64 + zp_out as i64).clamp(-128, 127) as i32;
                if self.activation == Activation::Relu {
                    q = q.max(zp_out);
                }
                q as i8
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedStage {
    name: String,
    layer: QuantizedLinearLayer,
    in_channels: usize,
    kernel: usize,
    stride: usize,
    residual_from: Option<usize>,
}

impl QuantizedStage {
    pub fn new(
        name: impl Into<String>,
        layer: QuantizedLinearLayer,
        in_channels: usize,
        kernel: usize,
        stride: usize,
        residual_from: Option<usize>,
    ) -> Result<Self> {
        let name = name.into();
        if in_channels == 0 || kernel == 0 || stride == 0 || layer.in_dim != in_channels * kernel {
            return Err(Error::config(format!(
                "{name}: int8 input {} does not match C={in_channels} x K={kernel}",
                layer.in_dim
            )));
        }
        Ok(Self {
            name,
            layer,
            in_channels,
            kernel,
            stride,
            residual_from,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn layer(&self) -> &QuantizedLinearLayer {
        &self.layer
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

    pub fn residual_from(&self) -> Option<usize> {
        self.residual_from
    }

    pub fn history_len(&self) -> usize {
        self.kernel.saturating_sub(self.stride)
    }
}

/// Int8 mirror of a [`LinearizedNet`]. Immutable; rings live in
/// [`QuantizedState`].
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedNet {
    input_features: usize,
    chunk_size: usize,
    input_params: QuantParams,
    stages: Vec<QuantizedStage>,
}

impl QuantizedNet {
    pub fn new(
        input_features: usize,
        chunk_size: usize,
        input_params: QuantParams,
        stages: Vec<QuantizedStage>,
    ) -> Result<Self> {
        if stages.is_empty() {
            return Err(Error::config("quantized net has no stages"));
        }
        let mut channels = input_features;
        let mut params = input_params;
        for (i, st) in stages.iter().enumerate() {
            let expected_stride = if i == 0 { chunk_size } else { 1 };
            if st.stride != expected_stride || st.in_channels != channels {
                return Err(Error::config(format!(
                    "{}: stage geometry (C={}, s={}) breaks the chain (expected C={channels}, s={expected_stride})",
                    st.name, st.in_channels, st.stride
                )));
            }
            if st.layer.in_params != params {
                return Err(Error::config(format!(
                    "{}: input params differ from the previous stage's output params",
                    st.name
                )));
            }
            if let Some(j) = st.residual_from {
                if j > i || stages[j].in_channels != st.layer.out_dim || (j == 0 && chunk_size != 1)
                {
                    return Err(Error::config(format!(
                        "{}: invalid residual source {j}",
                        st.name
                    )));
                }
            }
            channels = st.layer.out_dim;
            params = st.layer.out_params;
        }
        Ok(Self {
            input_features,
            chunk_size,
            input_params,
            stages,
        })
    }

    pub fn input_features(&self) -> usize {
        self.input_features
    }

    pub fn chunk_size(&self) -> usize {
        self.chunk_size
    }

    pub fn input_params(&self) -> QuantParams {
        self.input_params
    }

    pub fn stages(&self) -> &[QuantizedStage] {
        &self.stages
    }

    pub fn n_classes(&self) -> usize {
        self.stages.last().map(|s| s.layer.out_dim).unwrap_or(0)
    }

    pub fn macs_per_step(&self) -> usize {
        self.stages
            .iter()
            .map(|s| s.layer.in_dim * s.layer.out_dim)
            .sum()
    }

    pub fn param_count(&self) -> usize {
        self.stages
            .iter()
            .map(|s| s.layer.weights.len() + s.layer.bias.len())
            .sum()
    }

    fn eval_stage(&self, i: usize, window: &[i8], newest: &[Vec<i8>]) -> Vec<i8> {
        let st = &self.stages[i];
        let acc = st.layer.accumulate(window);
        let residual = st
            .residual_from
            .map(|j| (newest[j].as_slice(), self.stages[j].layer.in_params));
        st.layer.requantize(&acc, residual)
    }

    /// Rings primed with the int8 pipeline's own response to silence.
    pub fn initial_state(&self) -> QuantizedState {
        let zero = self.input_params.quantize(0.0);
        let mut cols: Vec<Vec<i8>> = vec![vec![zero; self.input_features]];
        let mut rings = Vec::with_capacity(self.stages.len());
        for (i, st) in self.stages.iter().enumerate() {
            let u = &cols[i];
            rings.push(
                u.iter()
                    .flat_map(|&v| std::iter::repeat_n(v, st.history_len()))
                    .collect(),
            );
            let window: Vec<i8> = u
                .iter()
                .flat_map(|&v| std::iter::repeat_n(v, st.kernel))
                .collect();
            let out = self.eval_stage(i, &window, &cols);
            cols.push(out);
        }
        QuantizedState { rings }
    }

    /// One step; returns the int8 logit column in the classifier's output
    /// params.
    pub fn step_int8(&self, state: &mut QuantizedState, chunk: &Tensor2D) -> Result<Vec<i8>> {
        if chunk.channels() != self.input_features || chunk.frames() != self.chunk_size {
            return Err(Error::shape(format!(
                "chunk is {}x{}, quantized net expects {}x{}",
                chunk.channels(),
                chunk.frames(),
                self.input_features,
                self.chunk_size
            )));
        }
        if state.rings.len() != self.stages.len() {
            return Err(Error::shape("state does not belong to this network"));
        }
        let mut input = quantize_slice(chunk.data(), self.input_params)?;
        let mut frames = self.chunk_size;
        let mut newest: Vec<Vec<i8>> = Vec::with_capacity(self.stages.len());
        for i in 0..self.stages.len() {
            let st = &self.stages[i];
            let c = st.in_channels;
            newest.push((0..c).map(|ch| input[ch * frames + frames - 1]).collect());
            let (window, next) = gather_window(
                c,
                st.kernel,
                &state.rings[i],
                st.history_len(),
                &input,
                frames,
            );
            state.rings[i] = next;
            input = self.eval_stage(i, &window, &newest);
            frames = 1;
        }
        Ok(input)
    }

    /// One step with the logits dequantized to float.
    pub fn step(&self, state: &mut QuantizedState, chunk: &Tensor2D) -> Result<Tensor2D> {
        quantized_step(self, state, chunk)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedState {
    rings: Vec<Vec<i8>>,
}

impl QuantizedState {
    pub fn rings(&self) -> &[Vec<i8>] {
        &self.rings
    }
}

pub fn quantized_step(
    qnet: &QuantizedNet,
    state: &mut QuantizedState,
    chunk: &Tensor2D,
) -> Result<Tensor2D> {
    let q = qnet.step_int8(state, chunk)?;
    let p = qnet.stages.last().expect("non-empty").layer.out_params;
    let logits: Vec<f32> = q.iter().map(|&v| p.dequantize(v)).collect();
    Tensor2D::new(logits.len(), 1, logits)
}

pub fn quantize_network(lnet: &LinearizedNet, ranges: &CalibrationRanges) -> Result<QuantizedNet> {
    let n = lnet.stages().len();
    if ranges.edges.len() != n + 1 {
        return Err(Error::Calibration(format!(
            "have {} activation ranges, network needs {}",
            ranges.edges.len(),
            n + 1
        )));
    }
    let edge_params = ranges
        .edges
        .iter()
        .enumerate()
        .map(|(i, r)| {
            choose_quant_params(r.min, r.max, QuantMode::Asymmetric)
                .map_err(|e| Error::Calibration(format!("edge {i}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut stages = Vec::with_capacity(n);
    for (i, st) in lnet.stages().iter().enumerate() {
        let lin = st.linear();
        let (lo, hi) = lin
            .weights()
            .iter()
            .fold((0.0f32, 0.0f32), |(lo, hi), &w| (lo.min(w), hi.max(w)));
        let wp = choose_quant_params(lo, hi, QuantMode::Symmetric)?;
        let weights = quantize_slice(lin.weights(), wp)?;
        let in_p = edge_params[i];
        let bias_scale = wp.scale() as f64 * in_p.scale() as f64;
        let bias = lin
            .bias()
            .iter()
            .map(|&b| {
                let q = (b as f64 / bias_scale).round();
                if q.abs() > i32::MAX as f64 {
                    Err(Error::Calibration(format!(
                        "{}: bias {b} overflows int32 at scale {bias_scale}",
                        st.name()
                    )))
                } else {
                    Ok(q as i32)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let layer = QuantizedLinearLayer::new(
            lin.in_dim(),
            lin.out_dim(),
            weights,
            wp,
            bias,
            in_p,
            edge_params[i + 1],
            lin.activation(),
        )
        .map_err(|e| e.in_layer(st.name()))?;
        stages.push(QuantizedStage::new(
            st.name(),
            layer,
            st.in_channels(),
            st.kernel(),
            st.stride(),
            st.residual_from(),
        )?);
    }
    QuantizedNet::new(
        lnet.input_features(),
        lnet.chunk_size(),
        edge_params[0],
        stages,
    )
}
