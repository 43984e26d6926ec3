//! Exact rewrite of a streaming conv net as a chain of linear layers.
//!
//! When the first layer's stride equals the chunk size and every later
//! layer has stride 1, each layer sees exactly `K` input columns per step
//! (its `K - s` history plus the new columns) and emits exactly one column.
//! A convolution over a `C x K` window is a matrix-vector product with the
//! weights reshaped from `[D][C][K]` to `[C*K][D]`, so every step of the
//! network becomes one GEMV per layer. The per-layer history stays as ring
//! buffers feeding those GEMVs.
//!
//! Flattening is channel-major on both sides: `x[c*K + k] = window[c][k]`
//! and `W[c*K + k][d] = conv[d][c][k]`.

use std::fmt;

use crate::conv::{Activation, Conv1DLayer};
use crate::error::{Error, Result};
use crate::model::ConvNet;
use crate::tensor::Tensor2D;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub layer: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LinearizabilityReport {
    pub compliant: bool,
    pub violations: Vec<Violation>,
}

impl fmt::Display for LinearizabilityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.compliant {
            return write!(f, "compliant");
        }
        let parts: Vec<String> = self
            .violations
            .iter()
            .map(|v| format!("{}: {}", v.layer, v.reason))
            .collect();
        write!(f, "{}", parts.join("; "))
    }
}

/// Checks both linearization conditions for chunk size `t`. Never fails;
/// every offending layer is listed.
pub fn check_linearizable(net: &(impl ConvNet + ?Sized), t: usize) -> LinearizabilityReport {
    let mut violations = Vec::new();
    for (i, l) in net.layers().iter().enumerate() {
        let s = l.layer.stride();
        if i == 0 {
            if s != t {
                violations.push(Violation {
                    layer: l.name.clone(),
                    reason: format!("first layer stride {s} != chunk size {t}"),
                });
            }
        } else if s != 1 {
            violations.push(Violation {
                layer: l.name.clone(),
                reason: format!("stride {s} != 1 after the first layer"),
            });
        }
    }
    LinearizabilityReport {
        compliant: violations.is_empty(),
        violations,
    }
}

/// Dense layer with weights stored `[in_dim][out_dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    in_dim: usize,
    out_dim: usize,
    weights: Vec<f32>,
    bias: Vec<f32>,
    activation: Activation,
}

impl LinearLayer {
    pub fn new(
        in_dim: usize,
        out_dim: usize,
        weights: Vec<f32>,
        bias: Vec<f32>,
        activation: Activation,
    ) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::config("linear dims must be positive"));
        }
        if weights.len() != in_dim * out_dim || bias.len() != out_dim {
            return Err(Error::shape(format!(
                "linear {in_dim}->{out_dim} got {} weights and {} biases",
                weights.len(),
                bias.len()
            )));
        }
        if weights.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(
                "linear parameters must be finite".into(),
            ));
        }
        Ok(Self {
            in_dim,
            out_dim,
            weights,
            bias,
            activation,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    pub fn bias(&self) -> &[f32] {
        &self.bias
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    /// `activation(Wᵀ x + b)`. Accumulates each output over inputs in
    /// ascending order, the same order the convolution uses.
    pub fn forward(&self, x: &[f32]) -> Vec<f32> {
        assert_eq!(x.len(), self.in_dim, "linear input length");
        let mut acc = vec![0.0f32; self.out_dim];
        for (xi, row) in x.iter().zip(self.weights.chunks_exact(self.out_dim)) {
            for (a, w) in acc.iter_mut().zip(row) {
                *a += w * xi;
            }
        }
        acc.iter()
            .zip(&self.bias)
            .map(|(a, b)| self.activation.apply(a + b))
            .collect()
    }
}

pub fn linearize_conv_layer(layer: &Conv1DLayer) -> LinearLayer {
    let (d_out, c_in, k_len) = (layer.out_channels(), layer.in_channels(), layer.kernel());
    let mut weights = vec![0.0; c_in * k_len * d_out];
    for d in 0..d_out {
        for c in 0..c_in {
            for k in 0..k_len {
                weights[(c * k_len + k) * d_out + d] = layer.weight(d, c, k);
            }
        }
    }
    LinearLayer::new(
        c_in * k_len,
        d_out,
        weights,
        layer.bias().to_vec(),
        layer.activation(),
    )
    .expect("conv layer dims are valid")
}

/// One linearized layer plus the geometry of the window it reads.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    name: String,
    linear: LinearLayer,
    in_channels: usize,
    kernel: usize,
    stride: usize,
    residual_from: Option<usize>,
}

impl Stage {
    pub fn new(
        name: impl Into<String>,
        linear: LinearLayer,
        in_channels: usize,
        kernel: usize,
        stride: usize,
        residual_from: Option<usize>,
    ) -> Result<Self> {
        let name = name.into();
        if in_channels == 0 || kernel == 0 || stride == 0 || linear.in_dim() != in_channels * kernel
        {
            return Err(Error::config(format!(
                "{name}: linear input {} does not match C={in_channels} x K={kernel} (s={stride})",
                linear.in_dim()
            )));
        }
        Ok(Self {
            name,
            linear,
            in_channels,
            kernel,
            stride,
            residual_from,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn linear(&self) -> &LinearLayer {
        &self.linear
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.linear.out_dim()
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

/// Builds the flattened `C*K` window from the ring (`hist` columns) and the
/// newest input columns, and returns the ring's next contents.
///
/// Both buffers are channel-major. Only the first `K` columns of
/// `[ring ∥ new]` are read; that is all of it unless `K < s`.
pub(crate) fn gather_window<T: Copy>(
    channels: usize,
    kernel: usize,
    ring: &[T],
    hist: usize,
    new: &[T],
    new_frames: usize,
) -> (Vec<T>, Vec<T>) {
    let total = hist + new_frames;
    let at = |c: usize, i: usize| {
        if i < hist {
            ring[c * hist + i]
        } else {
            new[c * new_frames + i - hist]
        }
    };
    let mut window = Vec::with_capacity(channels * kernel);
    let mut next_ring = Vec::with_capacity(channels * hist);
    for c in 0..channels {
        window.extend((0..kernel).map(|k| at(c, k)));
        next_ring.extend((total - hist..total).map(|i| at(c, i)));
    }
    (window, next_ring)
}

/// Stages and chunk geometry of a linearized network. Immutable; per-stream
/// ring buffers live in [`LinearizedState`].
#[derive(Debug, Clone, PartialEq)]
pub struct LinearizedNet {
    input_features: usize,
    chunk_size: usize,
    stages: Vec<Stage>,
}

impl LinearizedNet {
    /// Validates that the stages form a linearizable chain: the first stage
    /// strides by the chunk size, later stages by 1, channel counts line up
    /// and residual sources have matching width.
    pub fn new(input_features: usize, chunk_size: usize, stages: Vec<Stage>) -> Result<Self> {
        if stages.is_empty() {
            return Err(Error::config("linearized net has no stages"));
        }
        let mut channels = input_features;
        for (i, st) in stages.iter().enumerate() {
            let expected_stride = if i == 0 { chunk_size } else { 1 };
            if st.stride != expected_stride {
                return Err(Error::config(format!(
                    "{}: stride {} breaks linearization (expected {expected_stride})",
                    st.name, st.stride
                )));
            }
            if st.in_channels != channels {
                return Err(Error::config(format!(
                    "{}: takes {} channels, previous stage emits {channels}",
                    st.name, st.in_channels
                )));
            }
            if let Some(j) = st.residual_from {
                if j > i
                    || stages[j].in_channels != st.out_channels()
                    || (j == 0 && chunk_size != 1)
                {
                    return Err(Error::config(format!(
                        "{}: invalid residual source {j}",
                        st.name
                    )));
                }
            }
            channels = st.out_channels();
        }
        Ok(Self {
            input_features,
            chunk_size,
            stages,
        })
    }

    pub fn input_features(&self) -> usize {
        self.input_features
    }

    pub fn chunk_size(&self) -> usize {
        self.chunk_size
    }

    pub fn n_classes(&self) -> usize {
        self.stages.last().map(|s| s.out_channels()).unwrap_or(0)
    }

    /// All stages; the last one is the classifier.
    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    pub fn classifier(&self) -> &Stage {
        self.stages.last().expect("non-empty")
    }

    pub fn macs_per_step(&self) -> usize {
        self.stages
            .iter()
            .map(|s| s.linear.in_dim() * s.linear.out_dim())
            .sum()
    }

    pub fn param_count(&self) -> usize {
        self.stages
            .iter()
            .map(|s| s.linear.weights().len() + s.linear.bias().len())
            .sum()
    }

    /// Input column of every stage under all-zero network input, plus the
    /// resulting logit column.
    pub fn zero_input_columns(&self) -> Vec<Vec<f32>> {
        let mut cols = vec![vec![0.0; self.input_features]];
        for (i, st) in self.stages.iter().enumerate() {
            let u = &cols[i];
            let window: Vec<f32> = u
                .iter()
                .flat_map(|&v| std::iter::repeat_n(v, st.kernel))
                .collect();
            let mut out = st.linear.forward(&window);
            if let Some(j) = st.residual_from {
                for (o, r) in out.iter_mut().zip(&cols[j]) {
                    *o += r;
                }
            }
            cols.push(out);
        }
        cols
    }

    /// Ring buffers primed with the network's response to silence.
    pub fn initial_state(&self) -> LinearizedState {
        let cols = self.zero_input_columns();
        let rings = self
            .stages
            .iter()
            .zip(&cols)
            .map(|(st, u)| {
                u.iter()
                    .flat_map(|&v| std::iter::repeat_n(v, st.history_len()))
                    .collect()
            })
            .collect();
        LinearizedState { rings, macs: 0 }
    }

    /// One inference step: `chunk_size` input frames in, one logit column
    /// out.
    pub fn step(&self, state: &mut LinearizedState, chunk: &Tensor2D) -> Result<Tensor2D> {
        linearized_step(self, state, chunk)
    }

    /// Like [`Self::step`] but also returns every stage's input column and
    /// the output column, for calibration.
    pub(crate) fn step_traced(
        &self,
        state: &mut LinearizedState,
        chunk: &Tensor2D,
    ) -> Result<(Vec<f32>, Vec<Vec<f32>>)> {
        if chunk.channels() != self.input_features || chunk.frames() != self.chunk_size {
            return Err(Error::shape(format!(
                "chunk is {}x{}, linearized net expects {}x{}",
                chunk.channels(),
                chunk.frames(),
                self.input_features,
                self.chunk_size
            )));
        }
        if state.rings.len() != self.stages.len() {
            return Err(Error::shape("state does not belong to this network"));
        }
        // newest input column of each stage, for residual sources
        let mut newest: Vec<Vec<f32>> = Vec::with_capacity(self.stages.len() + 1);
        let mut input: Vec<f32> = chunk.data().to_vec();
        let mut frames = self.chunk_size;
        for (st, ring) in self.stages.iter().zip(state.rings.iter_mut()) {
            let c = st.in_channels;
            newest.push((0..c).map(|ch| input[ch * frames + frames - 1]).collect());
            let (window, next) =
                gather_window(c, st.kernel, ring, st.history_len(), &input, frames);
            *ring = next;
            let mut out = st.linear.forward(&window);
            state.macs += (st.linear.in_dim() * st.linear.out_dim()) as u64;
            if let Some(j) = st.residual_from {
                for (o, r) in out.iter_mut().zip(&newest[j]) {
                    *o += r;
                }
            }
            input = out;
            frames = 1;
        }
        Ok((input, newest))
    }
}

/// Per-stream ring buffers of a [`LinearizedNet`], plus a counter of the
/// multiply-accumulates executed so far.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearizedState {
    rings: Vec<Vec<f32>>,
    macs: u64,
}

impl LinearizedState {
    pub fn macs_executed(&self) -> u64 {
        self.macs
    }

    /// Channel-major ring contents of each stage.
    pub fn rings(&self) -> &[Vec<f32>] {
        &self.rings
    }
}

pub fn linearized_step(
    lnet: &LinearizedNet,
    state: &mut LinearizedState,
    chunk: &Tensor2D,
) -> Result<Tensor2D> {
    let (out, _) = lnet.step_traced(state, chunk)?;
    Tensor2D::new(out.len(), 1, out)
}

pub fn linearize_network(
    net: &(impl ConvNet + ?Sized),
    chunk_size: usize,
) -> Result<LinearizedNet> {
    let report = check_linearizable(net, chunk_size);
    if !report.compliant {
        return Err(Error::NotLinearizable(report));
    }
    let stages = net
        .layers()
        .into_iter()
        .map(|l| {
            Stage::new(
                l.name,
                linearize_conv_layer(l.layer),
                l.layer.in_channels(),
                l.layer.kernel(),
                l.layer.stride(),
                l.residual_from,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    LinearizedNet::new(net.input_features(), chunk_size, stages)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conv::conv1d_forward;
    use crate::model::{build_lico_net, build_mlp, LiCoBlock, LiCoNet, StreamingNet};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn report_examples() {
        let net = build_lico_net(40, 5, 16, 4, 4, 3, 11, 0).unwrap();
        assert!(check_linearizable(&net, 3).compliant);
        let r = check_linearizable(&net, 1);
        assert!(!r.compliant);
        assert_eq!(r.violations.len(), 1);
        assert_eq!(r.violations[0].layer, "block1.conv1");
        assert!(r.violations[0].reason.contains("chunk size"));
    }

    #[test]
    fn strided_inner_block_is_named() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut blocks = Vec::new();
        for l in 0..4 {
            let s = if l == 2 { 2 } else { 1 };
            let conv1 = crate::model::random_layer(&mut rng, 4, 4, 3, s, Activation::Relu).unwrap();
            let conv2 = crate::model::random_layer(&mut rng, 8, 4, 1, 1, Activation::Relu).unwrap();
            let conv3 = crate::model::random_layer(&mut rng, 4, 8, 1, 1, Activation::None).unwrap();
            blocks.push(LiCoBlock::new(conv1, conv2, conv3).unwrap());
        }
        let cls = Conv1DLayer::zeros(2, 4, 1, 1, Activation::None).unwrap();
        let net = LiCoNet::new(4, blocks, cls).unwrap();
        let r = check_linearizable(&net, 1);
        assert_eq!(r.violations.len(), 1);
        assert_eq!(r.violations[0].layer, "block3.conv1");
        match linearize_network(&net, 1) {
            Err(Error::NotLinearizable(rep)) => assert_eq!(rep, r),
            other => panic!("expected gate rejection, got {other:?}"),
        }
    }

    #[test]
    fn reshape_examples() {
        let layer = Conv1DLayer::new(
            1,
            2,
            2,
            1,
            vec![1., 2., 3., 4.],
            vec![0.0],
            Activation::None,
        )
        .unwrap();
        assert_eq!(linearize_conv_layer(&layer).weights(), &[1., 2., 3., 4.]);

        // pointwise: [D][C] becomes [C][D]
        let layer = Conv1DLayer::new(
            2,
            3,
            1,
            1,
            vec![1., 2., 3., 4., 5., 6.],
            vec![0.0; 2],
            Activation::None,
        )
        .unwrap();
        assert_eq!(
            linearize_conv_layer(&layer).weights(),
            &[1., 4., 2., 5., 3., 6.]
        );
    }

    /// Oracle: a window-sized convolution evaluated directly.
    #[test]
    fn linear_equals_conv_on_random_windows() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let (d, c, k) = (
                rng.random_range(1..8),
                rng.random_range(1..8),
                rng.random_range(1..7),
            );
            let act = if rng.random_bool(0.5) {
                Activation::Relu
            } else {
                Activation::None
            };
            let w = (0..d * c * k)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            let b = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let layer = Conv1DLayer::new(d, c, k, 1, w, b, act).unwrap();
            let window = Tensor2D::new(
                c,
                k,
                (0..c * k).map(|_| rng.random_range(-3.0..3.0)).collect(),
            )
            .unwrap();
            let expect = conv1d_forward(&window, &layer).unwrap();
            let got = linearize_conv_layer(&layer).forward(window.data());
            assert_eq!(got.len(), d);
            for (g, e) in got.iter().zip(expect.data()) {
                assert!((g - e).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn stage_counts() {
        let net = build_lico_net(40, 5, 32, 6, 5, 1, 11, 0).unwrap();
        let lnet = linearize_network(&net, 1).unwrap();
        assert_eq!(lnet.stages().len(), 16);
        assert_eq!(lnet.classifier().name(), "classifier");
        assert_eq!(lnet.stages()[0].history_len(), 4);
        assert_eq!(lnet.stages()[1].history_len(), 0);
    }

    #[test]
    fn kernel_equal_stride_has_empty_ring() {
        let cls =
            Conv1DLayer::new(1, 1, 3, 3, vec![1., 10., 100.], vec![0.0], Activation::None).unwrap();
        let net = crate::model::MlpNet::new(3, 1, vec![], cls).unwrap();
        let lnet = linearize_network(&net, 3).unwrap();
        let mut st = lnet.initial_state();
        assert!(st.rings()[0].is_empty());
        let y = lnet
            .step(&mut st, &Tensor2D::new(1, 3, vec![1., 2., 3.]).unwrap())
            .unwrap();
        assert_eq!(y.data(), &[321.0]);
    }

    #[test]
    fn single_layer_stream_example() {
        let cls =
            Conv1DLayer::new(1, 1, 2, 1, vec![1.0, 1.0], vec![0.0], Activation::None).unwrap();
        let net = crate::model::MlpNet::new(2, 1, vec![], cls).unwrap();
        let lnet = linearize_network(&net, 1).unwrap();
        let mut st = lnet.initial_state();
        let outs: Vec<f32> = [1.0, 2.0, 3.0]
            .iter()
            .map(|&v| {
                lnet.step(&mut st, &Tensor2D::new(1, 1, vec![v]).unwrap())
                    .unwrap()
                    .data()[0]
            })
            .collect();
        assert_eq!(outs, vec![1.0, 3.0, 5.0]);
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let z = |d, c, k| Conv1DLayer::zeros(d, c, k, 1, Activation::None).unwrap();
        let net = crate::model::MlpNet::new(3, 2, vec![z(4, 2, 3)], z(2, 4, 1)).unwrap();
        let lnet = linearize_network(&net, 1).unwrap();
        let mut st = lnet.initial_state();
        for v in [1.0, -5.0, 7.0] {
            let y = lnet
                .step(&mut st, &Tensor2D::new(2, 1, vec![v, v]).unwrap())
                .unwrap();
            assert!(y.data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn matches_streaming_conv_and_counts_macs() {
        for (net, t) in [
            (
                crate::model::Network::from(build_lico_net(8, 3, 6, 2, 4, 1, 5, 3).unwrap()),
                1,
            ),
            (build_lico_net(8, 2, 6, 4, 3, 2, 5, 4).unwrap().into(), 2),
            (build_lico_net(8, 2, 6, 4, 2, 3, 5, 4).unwrap().into(), 3),
            (build_mlp(4, 8, 10, 12, 5, 6).unwrap().into(), 1),
        ] {
            let lnet = linearize_network(&net, t).unwrap();
            let mut st = lnet.initial_state();
            let mut conv = StreamingNet::new(&net, t).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(8);
            for step in 1..=40u64 {
                let chunk = Tensor2D::new(
                    8,
                    t,
                    (0..8 * t).map(|_| rng.random_range(-1.0..1.0)).collect(),
                )
                .unwrap();
                let a = lnet.step(&mut st, &chunk).unwrap();
                let b = conv.step(&chunk).unwrap();
                assert!(a.max_abs_diff(&b).unwrap() <= 1e-6);
                assert_eq!(
                    st.macs_executed(),
                    step * crate::model::count_macs_per_step(&net).unwrap() as u64
                );
            }
        }
    }

    #[test]
    fn constructor_rejects_broken_chains() {
        let lin = |i, o| {
            LinearLayer::new(i, o, vec![0.0; i * o], vec![0.0; o], Activation::None).unwrap()
        };
        let ok = Stage::new("a", lin(6, 4), 2, 3, 1, None).unwrap();
        assert!(Stage::new("a", lin(6, 4), 2, 2, 1, None).is_err());
        assert!(LinearizedNet::new(2, 2, vec![ok.clone()]).is_err());
        let strided = Stage::new("b", lin(4, 4), 4, 1, 2, None).unwrap();
        assert!(LinearizedNet::new(2, 1, vec![ok.clone(), strided]).is_err());
        let wrong_in = Stage::new("b", lin(3, 4), 3, 1, 1, None).unwrap();
        assert!(LinearizedNet::new(2, 1, vec![ok.clone(), wrong_in]).is_err());
        assert!(LinearizedNet::new(2, 1, vec![ok]).is_ok());
    }
}
