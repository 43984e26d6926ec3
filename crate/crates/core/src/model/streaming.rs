use super::{add_residual, zero_input_columns, ConvNet};
use crate::conv::{Conv1DLayer, StreamState};
use crate::error::{Error, Result};
use crate::tensor::Tensor2D;

#[derive(Debug, Clone)]
struct StreamingLayer {
    name: String,
    layer: Conv1DLayer,
    residual_from: Option<usize>,
    state: StreamState,
    initial: StreamState,
}

/// Whole-network streaming convolution: each layer keeps its own history
/// and consumes the previous layer's chunk output.
///
/// Histories start as the network's response to all-zero input, so the
/// concatenated step outputs equal [`super::network_forward`] on the input
/// left-padded with [`super::stream_left_context`] zero frames.
#[derive(Debug, Clone)]
pub struct StreamingNet {
    input_features: usize,
    chunk_size: usize,
    layers: Vec<StreamingLayer>,
}

impl StreamingNet {
    pub fn new(net: &(impl ConvNet + ?Sized), chunk_size: usize) -> Result<Self> {
        let zero_cols = zero_input_columns(net)?;
        let mut t = chunk_size;
        let mut layers = Vec::new();
        for (idx, l) in net.layers().into_iter().enumerate() {
            let state = StreamState::filled(l.layer, t, &zero_cols[idx])
                .map_err(|e| e.in_layer(&l.name))?;
            t /= l.layer.stride();
            layers.push(StreamingLayer {
                name: l.name,
                layer: l.layer.clone(),
                residual_from: l.residual_from,
                initial: state.clone(),
                state,
            });
        }
        Ok(Self {
            input_features: net.input_features(),
            chunk_size,
            layers,
        })
    }

    pub fn chunk_size(&self) -> usize {
        self.chunk_size
    }

    /// Restores the initial (silence) state.
    pub fn reset(&mut self) {
        for l in &mut self.layers {
            l.state = l.initial.clone();
        }
    }

    /// History of every layer, in layer order.
    pub fn histories(&self) -> Vec<&Tensor2D> {
        self.layers.iter().map(|l| l.state.history()).collect()
    }

    /// Consumes `chunk_size` input frames; returns the logit columns they
    /// complete.
    pub fn step(&mut self, chunk: &Tensor2D) -> Result<Tensor2D> {
        if chunk.channels() != self.input_features || chunk.frames() != self.chunk_size {
            return Err(Error::shape(format!(
                "chunk is {}x{}, stream expects {}x{}",
                chunk.channels(),
                chunk.frames(),
                self.input_features,
                self.chunk_size
            )));
        }
        let mut inputs: Vec<Tensor2D> = Vec::with_capacity(self.layers.len());
        let mut current = chunk.clone();
        for l in &mut self.layers {
            let mut out = l
                .state
                .step(&l.layer, &current)
                .map_err(|e| e.in_layer(&l.name))?;
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

    /// Streams `x` in consecutive chunks and concatenates the outputs.
    /// Trailing frames that do not fill a chunk are ignored.
    pub fn run(&mut self, x: &Tensor2D) -> Result<Tensor2D> {
        let mut cols = Vec::new();
        let mut n_out = 0;
        for j in 0..x.frames() / self.chunk_size {
            let y = self.step(&x.slice_frames(j * self.chunk_size, (j + 1) * self.chunk_size)?)?;
            n_out = y.channels();
            cols.extend(y.columns());
        }
        if cols.is_empty() {
            return Err(Error::shape("input shorter than one chunk"));
        }
        Tensor2D::from_columns(n_out, &cols)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_lico_net, build_mlp, network_forward, stream_left_context};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_input(seed: u64, c: usize, t: usize) -> Tensor2D {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor2D::new(
            c,
            t,
            (0..c * t).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn check(net: &impl ConvNet, chunk: usize, frames: usize) {
        let x = random_input(5, net.input_features(), frames);
        let mut s = StreamingNet::new(net, chunk).unwrap();
        let streamed = s.run(&x).unwrap();
        let batch = network_forward(net, &x.left_pad(stream_left_context(net))).unwrap();
        assert_eq!(streamed.frames(), frames / net.first_stride());
        assert!(streamed.max_abs_diff(&batch).unwrap() <= 1e-5);
    }

    #[test]
    fn matches_batch_forward() {
        check(&build_lico_net(6, 3, 4, 2, 3, 1, 3, 0).unwrap(), 1, 30);
        check(&build_lico_net(6, 3, 4, 2, 3, 1, 3, 0).unwrap(), 4, 32);
        check(&build_lico_net(6, 2, 4, 4, 5, 3, 3, 1).unwrap(), 3, 36);
        check(&build_lico_net(6, 2, 4, 4, 2, 3, 3, 1).unwrap(), 6, 36);
        check(&build_mlp(5, 4, 6, 7, 3, 2).unwrap(), 1, 20);
        check(
            &build_mlp(5, 4, 6, 7, 3, 2)
                .unwrap()
                .with_first_stride(2)
                .unwrap(),
            2,
            20,
        );
    }

    #[test]
    fn reset_restores_initial_state() {
        let net = build_lico_net(4, 2, 4, 2, 3, 1, 3, 0).unwrap();
        let x = random_input(1, 4, 10);
        let mut s = StreamingNet::new(&net, 1).unwrap();
        let first = s.run(&x).unwrap();
        s.reset();
        assert_eq!(s.run(&x).unwrap(), first);
    }

    #[test]
    fn rejects_bad_chunks() {
        let net = build_lico_net(4, 1, 4, 2, 3, 2, 3, 0).unwrap();
        assert!(matches!(StreamingNet::new(&net, 3), Err(Error::Config(_))));
        let mut s = StreamingNet::new(&net, 2).unwrap();
        assert!(matches!(
            s.step(&Tensor2D::zeros(4, 1)),
            Err(Error::Shape(_))
        ));
    }
}
