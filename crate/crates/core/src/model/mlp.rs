use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{random_layer, ConvNet, LayerRef};
use crate::conv::{Activation, Conv1DLayer};
use crate::error::{Error, Result};

/// Fully connected baseline over a fixed window of `input_frames` feature
/// frames.
///
/// The first layer is stored as a convolution whose kernel spans the whole
/// window (flattened channel-major, like every other linearized layer), so
/// the MLP streams with stride `s` exactly like a one-block conv net.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpNet {
    input_frames: usize,
    input_features: usize,
    hidden: Vec<Conv1DLayer>,
    classifier: Conv1DLayer,
}

impl MlpNet {
    pub fn new(
        input_frames: usize,
        input_features: usize,
        hidden: Vec<Conv1DLayer>,
        classifier: Conv1DLayer,
    ) -> Result<Self> {
        if input_frames == 0 || input_features == 0 {
            return Err(Error::config("MLP input dims must be positive"));
        }
        let mut channels = input_features;
        for (i, layer) in hidden
            .iter()
            .chain(std::iter::once(&classifier))
            .enumerate()
        {
            let kernel = if i == 0 { input_frames } else { 1 };
            if layer.in_channels() != channels || layer.kernel() != kernel {
                return Err(Error::config(format!(
                    "MLP layer {} must map {channels}x{kernel} inputs, has {}x{}",
                    i + 1,
                    layer.in_channels(),
                    layer.kernel()
                )));
            }
            if i > 0 && layer.stride() != 1 {
                return Err(Error::config("only the first MLP layer may be strided"));
            }
            channels = layer.out_channels();
        }
        if classifier.activation() != Activation::None {
            return Err(Error::config("classifier must emit raw logits"));
        }
        Ok(Self {
            input_frames,
            input_features,
            hidden,
            classifier,
        })
    }

    pub fn input_frames(&self) -> usize {
        self.input_frames
    }

    pub fn hidden(&self) -> &[Conv1DLayer] {
        &self.hidden
    }

    pub fn classifier(&self) -> &Conv1DLayer {
        &self.classifier
    }

    /// Same weights, evaluated every `stride` frames.
    pub fn with_first_stride(self, stride: usize) -> Result<Self> {
        let restride = |l: &Conv1DLayer| {
            Conv1DLayer::new(
                l.out_channels(),
                l.in_channels(),
                l.kernel(),
                stride,
                l.weights().to_vec(),
                l.bias().to_vec(),
                l.activation(),
            )
        };
        let Self {
            input_frames,
            input_features,
            mut hidden,
            mut classifier,
        } = self;
        match hidden.first_mut() {
            Some(first) => *first = restride(first)?,
            None => classifier = restride(&classifier)?,
        }
        Self::new(input_frames, input_features, hidden, classifier)
    }
}

impl ConvNet for MlpNet {
    fn input_features(&self) -> usize {
        self.input_features
    }

    fn layers(&self) -> Vec<LayerRef<'_>> {
        let mut out: Vec<LayerRef<'_>> = self
            .hidden
            .iter()
            .enumerate()
            .map(|(i, layer)| LayerRef {
                name: format!("fc{}", i + 1),
                layer,
                residual_from: None,
            })
            .collect();
        out.push(LayerRef {
            name: "classifier".into(),
            layer: &self.classifier,
            residual_from: None,
        });
        out
    }
}

/// Builds an MLP with arbitrary hidden widths, all ReLU.
pub fn build_mlp_layers(
    input_frames: usize,
    input_features: usize,
    widths: &[usize],
    n_classes: usize,
    seed: u64,
) -> Result<MlpNet> {
    if input_frames == 0 || input_features == 0 || n_classes == 0 || widths.contains(&0) {
        return Err(Error::config("MLP dims must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hidden = Vec::with_capacity(widths.len());
    let mut channels = input_features;
    let mut kernel = input_frames;
    for &w in widths {
        hidden.push(random_layer(
            &mut rng,
            w,
            channels,
            kernel,
            1,
            Activation::Relu,
        )?);
        channels = w;
        kernel = 1;
    }
    let classifier = random_layer(&mut rng, n_classes, channels, kernel, 1, Activation::None)?;
    MlpNet::new(input_frames, input_features, hidden, classifier)
}

pub fn build_mlp(
    input_frames: usize,
    input_features: usize,
    h1: usize,
    h2: usize,
    n_classes: usize,
    seed: u64,
) -> Result<MlpNet> {
    build_mlp_layers(input_frames, input_features, &[h1, h2], n_classes, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{count_params, network_forward, receptive_field};
    use crate::tensor::Tensor2D;

    #[test]
    fn presets_have_expected_layers() {
        let large = build_mlp(21, 40, 80, 320, 11, 0).unwrap();
        let dims: Vec<_> = large
            .layers()
            .iter()
            .map(|l| {
                (
                    l.layer.in_channels() * l.layer.kernel(),
                    l.layer.out_channels(),
                )
            })
            .collect();
        assert_eq!(dims, vec![(840, 80), (80, 320), (320, 11)]);
        assert_eq!(receptive_field(&large), 21);

        let small = build_mlp(21, 40, 40, 320, 11, 0).unwrap();
        assert_eq!(small.hidden()[0].out_channels(), 40);
        assert!(build_mlp(1, 1, 1, 1, 1, 0).is_ok());
        assert!(build_mlp(21, 40, 0, 320, 11, 0).is_err());
    }

    #[test]
    fn classifier_only_net() {
        let net = build_mlp_layers(3, 2, &[], 4, 0).unwrap();
        assert_eq!(count_params(&net), 3 * 2 * 4 + 4);
        let y = network_forward(&net, &Tensor2D::zeros(2, 5)).unwrap();
        assert_eq!((y.channels(), y.frames()), (4, 3));
    }

    #[test]
    fn stride_changes_only_evaluation_rate() {
        let net = build_mlp(4, 3, 5, 6, 2, 9).unwrap();
        let strided = net.clone().with_first_stride(2).unwrap();
        assert_eq!(strided.first_stride(), 2);
        let x = Tensor2D::new(3, 10, (0..30).map(|v| (v as f32).sin()).collect()).unwrap();
        let dense = network_forward(&net, &x).unwrap();
        let sparse = network_forward(&strided, &x).unwrap();
        assert_eq!(sparse.frames(), 4);
        for i in 0..4 {
            assert_eq!(sparse.column(i), dense.column(2 * i));
        }
    }
}
