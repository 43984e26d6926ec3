use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{random_layer, ConvNet, LayerRef};
use crate::conv::{Activation, Conv1DLayer};
use crate::error::{Error, Result};

/// Bottleneck block: a `K`-wide convolution to width `w`, a pointwise
/// expansion to `e*w`, and a pointwise projection back to `w`. The block
/// input is added to the output when the shapes line up (stride 1 and
/// `c_in == w`).
#[derive(Debug, Clone, PartialEq)]
pub struct LiCoBlock {
    conv1: Conv1DLayer,
    conv2: Conv1DLayer,
    conv3: Conv1DLayer,
    residual: bool,
}

impl LiCoBlock {
    pub fn new(conv1: Conv1DLayer, conv2: Conv1DLayer, conv3: Conv1DLayer) -> Result<Self> {
        if conv1.kernel() < 2 {
            return Err(Error::config("conv1 kernel must be greater than 1"));
        }
        if conv2.kernel() != 1 || conv3.kernel() != 1 {
            return Err(Error::config("conv2 and conv3 must be pointwise"));
        }
        if conv2.stride() != 1 || conv3.stride() != 1 {
            return Err(Error::config("pointwise layers must have stride 1"));
        }
        let w = conv1.out_channels();
        if conv2.in_channels() != w || conv3.out_channels() != w {
            return Err(Error::config(format!(
                "channel plan broken: conv1 emits {w}, conv2 takes {}, conv3 emits {}",
                conv2.in_channels(),
                conv3.out_channels()
            )));
        }
        let inner = conv2.out_channels();
        if !inner.is_multiple_of(w) || inner / w < 2 || conv3.in_channels() != inner {
            return Err(Error::config(format!(
                "expanded width {inner} must be an integer multiple e >= 2 of {w} and feed conv3"
            )));
        }
        let residual = conv1.stride() == 1 && conv1.in_channels() == w;
        Ok(Self {
            conv1,
            conv2,
            conv3,
            residual,
        })
    }

    pub fn conv1(&self) -> &Conv1DLayer {
        &self.conv1
    }

    pub fn conv2(&self) -> &Conv1DLayer {
        &self.conv2
    }

    pub fn conv3(&self) -> &Conv1DLayer {
        &self.conv3
    }

    pub fn residual(&self) -> bool {
        self.residual
    }

    pub fn in_channels(&self) -> usize {
        self.conv1.in_channels()
    }

    pub fn width(&self) -> usize {
        self.conv1.out_channels()
    }

    pub fn expansion(&self) -> usize {
        self.conv2.out_channels() / self.width()
    }

    fn random(
        rng: &mut ChaCha8Rng,
        c_in: usize,
        w: usize,
        e: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        if e < 2 || kernel < 2 || stride < 1 || c_in < 1 || w < 1 {
            return Err(Error::config(format!(
                "invalid block hyperparameters (c_in={c_in}, w={w}, e={e}, K={kernel}, s={stride})"
            )));
        }
        let conv1 = random_layer(rng, w, c_in, kernel, stride, Activation::Relu)?;
        let conv2 = random_layer(rng, e * w, w, 1, 1, Activation::Relu)?;
        let conv3 = random_layer(rng, w, e * w, 1, 1, Activation::None)?;
        Self::new(conv1, conv2, conv3)
    }
}

pub fn build_lico_block(
    c_in: usize,
    w: usize,
    e: usize,
    kernel: usize,
    stride: usize,
    seed: u64,
) -> Result<LiCoBlock> {
    LiCoBlock::random(
        &mut ChaCha8Rng::seed_from_u64(seed),
        c_in,
        w,
        e,
        kernel,
        stride,
    )
}

/// A stack of [`LiCoBlock`]s followed by a pointwise linear classifier.
///
/// The type admits any block strides so that non-linearizable nets can be
/// represented and rejected by the linearizability check;
/// [`build_lico_net`] only produces stride 1 after the first block.
#[derive(Debug, Clone, PartialEq)]
pub struct LiCoNet {
    input_features: usize,
    blocks: Vec<LiCoBlock>,
    classifier: Conv1DLayer,
}

impl LiCoNet {
    pub fn new(
        input_features: usize,
        blocks: Vec<LiCoBlock>,
        classifier: Conv1DLayer,
    ) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::config("a LiCo-Net needs at least one block"));
        }
        let mut channels = input_features;
        for (i, b) in blocks.iter().enumerate() {
            if b.in_channels() != channels {
                return Err(Error::config(format!(
                    "block {} expects {} input channels, previous stage emits {channels}",
                    i + 1,
                    b.in_channels()
                )));
            }
            channels = b.width();
        }
        if classifier.in_channels() != channels
            || classifier.kernel() != 1
            || classifier.stride() != 1
            || classifier.activation() != Activation::None
        {
            return Err(Error::config(format!(
                "classifier must be a linear pointwise map from {channels} channels"
            )));
        }
        Ok(Self {
            input_features,
            blocks,
            classifier,
        })
    }

    pub fn blocks(&self) -> &[LiCoBlock] {
        &self.blocks
    }

    pub fn classifier(&self) -> &Conv1DLayer {
        &self.classifier
    }
}

impl ConvNet for LiCoNet {
    fn input_features(&self) -> usize {
        self.input_features
    }

    fn layers(&self) -> Vec<LayerRef<'_>> {
        let mut out = Vec::with_capacity(self.blocks.len() * 3 + 1);
        for (i, b) in self.blocks.iter().enumerate() {
            let first = out.len();
            for (j, layer) in [&b.conv1, &b.conv2, &b.conv3].into_iter().enumerate() {
                out.push(LayerRef {
                    name: format!("block{}.conv{}", i + 1, j + 1),
                    layer,
                    residual_from: (j == 2 && b.residual).then_some(first),
                });
            }
        }
        out.push(LayerRef {
            name: "classifier".into(),
            layer: &self.classifier,
            residual_from: None,
        });
        out
    }
}

#[allow(clippy::too_many_arguments)]
pub fn build_lico_net(
    input_features: usize,
    n_blocks: usize,
    w: usize,
    e: usize,
    kernel: usize,
    first_stride: usize,
    n_classes: usize,
    seed: u64,
) -> Result<LiCoNet> {
    if n_blocks == 0 || n_classes == 0 || input_features == 0 {
        return Err(Error::config(format!(
            "need at least one block, class and feature (L={n_blocks}, classes={n_classes}, features={input_features})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut blocks = Vec::with_capacity(n_blocks);
    for l in 0..n_blocks {
        let (c_in, stride) = if l == 0 {
            (input_features, first_stride)
        } else {
            (w, 1)
        };
        blocks.push(LiCoBlock::random(&mut rng, c_in, w, e, kernel, stride)?);
    }
    let classifier = random_layer(&mut rng, n_classes, w, 1, 1, Activation::None)?;
    LiCoNet::new(input_features, blocks, classifier)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{network_forward, output_frames, receptive_field};
    use crate::tensor::Tensor2D;

    fn shape(l: &Conv1DLayer) -> [usize; 3] {
        [l.out_channels(), l.in_channels(), l.kernel()]
    }

    #[test]
    fn block_examples() {
        let b = build_lico_block(40, 32, 6, 5, 3, 7).unwrap();
        assert_eq!(shape(b.conv1()), [32, 40, 5]);
        assert_eq!(shape(b.conv2()), [192, 32, 1]);
        assert_eq!(shape(b.conv3()), [32, 192, 1]);
        assert!(!b.residual());
        assert_eq!(b.expansion(), 6);

        assert!(build_lico_block(16, 16, 4, 4, 1, 7).unwrap().residual());
        assert!(!build_lico_block(40, 32, 6, 5, 1, 7).unwrap().residual());
        assert!(!build_lico_block(16, 16, 4, 4, 2, 7).unwrap().residual());
    }

    #[test]
    fn block_rejects_bad_hyperparameters() {
        assert!(matches!(
            build_lico_block(4, 4, 1, 3, 1, 0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            build_lico_block(4, 4, 2, 1, 1, 0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            build_lico_block(4, 4, 2, 3, 0, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn block_constructor_checks_invariants() {
        let c1 = Conv1DLayer::zeros(4, 4, 3, 1, Activation::Relu).unwrap();
        let c2 = Conv1DLayer::zeros(8, 4, 1, 1, Activation::Relu).unwrap();
        let c3 = Conv1DLayer::zeros(4, 8, 1, 1, Activation::None).unwrap();
        assert!(LiCoBlock::new(c1.clone(), c2.clone(), c3.clone()).is_ok());
        let strided = Conv1DLayer::zeros(8, 4, 1, 2, Activation::Relu).unwrap();
        assert!(LiCoBlock::new(c1.clone(), strided, c3.clone()).is_err());
        let odd = Conv1DLayer::zeros(6, 4, 1, 1, Activation::Relu).unwrap();
        assert!(LiCoBlock::new(c1.clone(), odd, c3.clone()).is_err());
        let k1 = Conv1DLayer::zeros(4, 4, 1, 1, Activation::Relu).unwrap();
        assert!(LiCoBlock::new(k1, c2, c3).is_err());
    }

    #[test]
    fn net_examples() {
        let large = build_lico_net(40, 5, 32, 6, 5, 1, 11, 1).unwrap();
        assert_eq!(large.blocks().len(), 5);
        assert!(!large.blocks()[0].residual());
        assert!(large.blocks()[1..].iter().all(|b| b.residual()));
        assert_eq!(large.n_classes(), 11);
        assert_eq!(large.layers().len(), 16);

        let small = build_lico_net(40, 5, 16, 4, 4, 3, 11, 1).unwrap();
        assert_eq!(small.first_stride(), 3);
        assert!(small.blocks()[1..].iter().all(|b| b.conv1().stride() == 1));

        let tiny = build_lico_net(40, 1, 8, 2, 2, 1, 3, 1).unwrap();
        assert_eq!(tiny.layers().len(), 4);
        assert!(build_lico_net(40, 0, 8, 2, 2, 1, 3, 1).is_err());
    }

    #[test]
    fn seeded_construction_is_deterministic() {
        let a = build_lico_net(40, 3, 8, 2, 3, 1, 5, 42).unwrap();
        let b = build_lico_net(40, 3, 8, 2, 3, 1, 5, 42).unwrap();
        let c = build_lico_net(40, 3, 8, 2, 3, 1, 5, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn init_bounds_follow_fan_in() {
        let b = build_lico_block(40, 32, 6, 5, 1, 9).unwrap();
        let bound = 1.0 / (200.0f32).sqrt();
        assert!(b.conv1().weights().iter().all(|w| w.abs() <= bound));
        let bound = 1.0 / (192.0f32).sqrt();
        assert!(b.conv3().weights().iter().all(|w| w.abs() <= bound));
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let z = |d, c, k, s, a| Conv1DLayer::zeros(d, c, k, s, a).unwrap();
        let blocks = vec![
            LiCoBlock::new(
                z(4, 3, 3, 1, Activation::Relu),
                z(8, 4, 1, 1, Activation::Relu),
                z(4, 8, 1, 1, Activation::None),
            )
            .unwrap(),
            LiCoBlock::new(
                z(4, 4, 2, 1, Activation::Relu),
                z(8, 4, 1, 1, Activation::Relu),
                z(4, 8, 1, 1, Activation::None),
            )
            .unwrap(),
        ];
        let net = LiCoNet::new(3, blocks, z(5, 4, 1, 1, Activation::None)).unwrap();
        let x = Tensor2D::new(3, 6, (0..18).map(|v| v as f32 - 9.0).collect()).unwrap();
        let y = network_forward(&net, &x).unwrap();
        assert_eq!((y.channels(), y.frames()), (5, 3));
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    /// Single block, C=1, w=2, e=2, K=2, hand-set weights; logits evaluated
    /// by hand below.
    #[test]
    fn single_block_matches_hand_evaluation() {
        let conv1 = Conv1DLayer::new(
            2,
            1,
            2,
            1,
            vec![1.0, 2.0, -1.0, 1.0], // d0: [1, 2], d1: [-1, 1]
            vec![0.0, 0.5],
            Activation::Relu,
        )
        .unwrap();
        let conv2 = Conv1DLayer::new(
            4,
            2,
            1,
            1,
            vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0, -1.0, 0.0],
            vec![0.0, 0.0, 0.0, 1.0],
            Activation::Relu,
        )
        .unwrap();
        let conv3 = Conv1DLayer::new(
            2,
            4,
            1,
            1,
            vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0],
            vec![0.0, 0.0],
            Activation::None,
        )
        .unwrap();
        let block = LiCoBlock::new(conv1, conv2, conv3).unwrap();
        assert!(!block.residual());
        let classifier =
            Conv1DLayer::new(1, 2, 1, 1, vec![1.0, -1.0], vec![0.25], Activation::None).unwrap();
        let net = LiCoNet::new(1, vec![block], classifier).unwrap();

        // x = [1, 3, 2]
        // conv1 col0: d0 = 1+6 = 7, d1 = relu(-1+3+0.5) = 2.5
        // conv1 col1: d0 = 3+4 = 7, d1 = relu(-3+2+0.5) = 0
        // conv2 col0: [7, 2.5, 9.5, relu(-7+1)=0]; col1: [7, 0, 7, 0]
        // conv3 col0: [7+9.5, 2.5+0] = [16.5, 2.5]; col1: [14, 0]
        // logits: 16.5-2.5+0.25 = 14.25; 14-0+0.25 = 14.25
        let x = Tensor2D::new(1, 3, vec![1.0, 3.0, 2.0]).unwrap();
        let y = network_forward(&net, &x).unwrap();
        assert_eq!(y.data(), &[14.25, 14.25]);
    }

    #[test]
    fn receptive_field_matches_smallest_valid_input() {
        for (l, k, s) in [
            (1, 5, 1),
            (5, 5, 1),
            (5, 4, 1),
            (3, 3, 2),
            (5, 4, 3),
            (2, 2, 3),
        ] {
            let net = build_lico_net(6, l, 4, 2, k, s, 3, 0).unwrap();
            let smallest = (1..200)
                .find(|&t| network_forward(&net, &Tensor2D::zeros(6, t)).is_ok())
                .unwrap();
            assert_eq!(output_frames(&net, smallest), Some(1));
            assert_eq!(receptive_field(&net), smallest, "L={l} K={k} s={s}");
        }
    }
}
