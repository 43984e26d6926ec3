//! Network topologies and whole-network evaluation.
//!
//! Every network here is a chain of [`Conv1DLayer`]s ending in a pointwise
//! classifier, optionally with residual links that add a layer's input to a
//! later layer's output. [`ConvNet`] exposes that chain so batch forward,
//! streaming, linearization and accounting can treat LiCo-Nets and MLPs
//! alike.

mod lico;
mod mlp;
mod stats;
mod streaming;

pub use lico::{build_lico_block, build_lico_net, LiCoBlock, LiCoNet};
pub use mlp::{build_mlp, build_mlp_layers, MlpNet};
pub use stats::{
    bias_count, count_macs_per_step, count_params, receptive_field, stream_left_context,
};
pub use streaming::StreamingNet;

use rand::Rng;

use crate::conv::{Activation, Conv1DLayer};
use crate::error::{Error, Result};
use crate::tensor::Tensor2D;

/// One layer of a flattened network.
#[derive(Debug, Clone)]
pub struct LayerRef<'a> {
    pub name: String,
    pub layer: &'a Conv1DLayer,
    /// Index of an earlier layer whose *input* is added to this layer's
    /// output, newest column aligned.
    pub residual_from: Option<usize>,
}

pub trait ConvNet {
    fn input_features(&self) -> usize;

    /// Layers in evaluation order; the classifier is last.
    fn layers(&self) -> Vec<LayerRef<'_>>;

    fn n_classes(&self) -> usize {
        self.layers()
            .last()
            .map(|l| l.layer.out_channels())
            .unwrap_or(0)
    }

    fn first_stride(&self) -> usize {
        self.layers().first().map(|l| l.layer.stride()).unwrap_or(1)
    }
}

/// A model of either supported family.
#[derive(Debug, Clone, PartialEq)]
pub enum Network {
    LiCo(LiCoNet),
    Mlp(MlpNet),
}

impl Network {
    pub fn arch_name(&self) -> &'static str {
        match self {
            Network::LiCo(_) => "lico",
            Network::Mlp(_) => "mlp",
        }
    }
}

impl ConvNet for Network {
    fn input_features(&self) -> usize {
        match self {
            Network::LiCo(n) => n.input_features(),
            Network::Mlp(n) => n.input_features(),
        }
    }

    fn layers(&self) -> Vec<LayerRef<'_>> {
        match self {
            Network::LiCo(n) => n.layers(),
            Network::Mlp(n) => n.layers(),
        }
    }
}

impl From<LiCoNet> for Network {
    fn from(n: LiCoNet) -> Self {
        Network::LiCo(n)
    }
}

impl From<MlpNet> for Network {
    fn from(n: MlpNet) -> Self {
        Network::Mlp(n)
    }
}

/// Uniform `±1/sqrt(fan_in)` initialization for weights and bias.
pub(crate) fn random_layer(
    rng: &mut impl Rng,
    out_channels: usize,
    in_channels: usize,
    kernel: usize,
    stride: usize,
    activation: Activation,
) -> Result<Conv1DLayer> {
    let bound = 1.0 / ((in_channels * kernel) as f32).sqrt();
    let weights = (0..out_channels * in_channels * kernel)
        .map(|_| rng.random_range(-bound..=bound))
        .collect();
    let bias = (0..out_channels)
        .map(|_| rng.random_range(-bound..=bound))
        .collect();
    Conv1DLayer::new(
        out_channels,
        in_channels,
        kernel,
        stride,
        weights,
        bias,
        activation,
    )
}

/// Adds `source` to `out` column-wise, aligning the newest columns.
pub(crate) fn add_residual(out: &Tensor2D, source: &Tensor2D) -> Result<Tensor2D> {
    if source.channels() != out.channels() || source.frames() < out.frames() {
        return Err(Error::shape(format!(
            "residual source {}x{} cannot feed output {}x{}",
            source.channels(),
            source.frames(),
            out.channels(),
            out.frames()
        )));
    }
    let offset = source.frames() - out.frames();
    let mut data = out.data().to_vec();
    for c in 0..out.channels() {
        let src = &source.row(c)[offset..];
        for (v, s) in data[c * out.frames()..][..out.frames()].iter_mut().zip(src) {
            *v += s;
        }
    }
    Tensor2D::new(out.channels(), out.frames(), data)
}

/// Batch forward pass: per-frame class logits, `n_classes x frames`.
pub fn network_forward(net: &(impl ConvNet + ?Sized), x: &Tensor2D) -> Result<Tensor2D> {
    if x.channels() != net.input_features() {
        return Err(Error::shape(format!(
            "input has {} channels, network expects {}",
            x.channels(),
            net.input_features()
        )));
    }
    let layers = net.layers();
    let mut inputs: Vec<Tensor2D> = Vec::with_capacity(layers.len());
    let mut current = x.clone();
    for l in &layers {
        let mut out = l.layer.forward(&current).map_err(|e| e.in_layer(&l.name))?;
        if let Some(j) = l.residual_from {
            let src = if j == inputs.len() {
                &current
            } else {
                &inputs[j]
            };
            out = add_residual(&out, src).map_err(|e| e.in_layer(&l.name))?;
        }
        inputs.push(current);
        current = out;
    }
    Ok(current)
}

/// Input column seen by each layer when the network is fed all-zero
/// features forever; the last entry is the resulting logit column.
///
/// Streaming states start from these columns so that streaming output
/// equals batch output on zero-left-padded input.
pub fn zero_input_columns(net: &(impl ConvNet + ?Sized)) -> Result<Vec<Vec<f32>>> {
    let layers = net.layers();
    let mut cols = vec![vec![0.0; net.input_features()]];
    for (idx, l) in layers.iter().enumerate() {
        let window = Tensor2D::repeat_column(&cols[idx], l.layer.kernel())?;
        let mut out = l.layer.forward(&window).map_err(|e| e.in_layer(&l.name))?;
        if let Some(j) = l.residual_from {
            let src = Tensor2D::repeat_column(&cols[j], 1)?;
            out = add_residual(&out, &src)?;
        }
        cols.push(out.column(0));
    }
    Ok(cols)
}

/// Number of batch output columns for `input_frames` input frames.
pub fn output_frames(net: &(impl ConvNet + ?Sized), input_frames: usize) -> Option<usize> {
    net.layers()
        .iter()
        .try_fold(input_frames, |t, l| l.layer.output_frames(t))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn residual_aligns_newest_columns() {
        let out = Tensor2D::new(1, 2, vec![10.0, 20.0]).unwrap();
        let src = Tensor2D::new(1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(add_residual(&out, &src).unwrap().data(), &[13.0, 24.0]);
        assert!(add_residual(&src, &out).is_err());
    }
}
