//! Single-file model format.
//!
//! ```text
//! "LCN1" | version: u16 LE | manifest_len: u32 LE | manifest (JSON) | blobs
//! ```
//!
//! The manifest lists layers (geometry, activation, residual link, quant
//! params), the frontend and decoder configs, and a tensor table. Blobs are
//! little-endian and follow the tensor table order; conv weights are
//! `[D][C][K]`, linear weights `[in][out]`. Reals in the manifest are
//! written as `f64` so every `f32` round-trips bit-exactly.
//!
//! Loading validates the whole file before returning, so a corrupt model
//! never reaches inference.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::affine::QuantParams;
use crate::conv::{Activation, Conv1DLayer};
use crate::decoder::DecoderConfig;
use crate::error::{Error, FormatError, Result};
use crate::frontend::FrontendConfig;
use crate::linearize::{LinearLayer, LinearizedNet, Stage};
use crate::model::{receptive_field, ConvNet, LiCoBlock, LiCoNet, MlpNet, Network};
use crate::quant::{QuantizedLinearLayer, QuantizedNet, QuantizedStage};

pub const MAGIC: [u8; 4] = *b"LCN1";
pub const FORMAT_VERSION: u16 = 1;

/// Any network the runtime can execute.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Float(Network),
    Linearized(LinearizedNet),
    Quantized(QuantizedNet),
}

impl Model {
    pub fn kind(&self) -> &'static str {
        match self {
            Model::Float(n) => n.arch_name(),
            Model::Linearized(_) => "linearized",
            Model::Quantized(_) => "quantized",
        }
    }

    pub fn input_features(&self) -> usize {
        match self {
            Model::Float(n) => n.input_features(),
            Model::Linearized(n) => n.input_features(),
            Model::Quantized(n) => n.input_features(),
        }
    }

    pub fn n_classes(&self) -> usize {
        match self {
            Model::Float(n) => n.n_classes(),
            Model::Linearized(n) => n.n_classes(),
            Model::Quantized(n) => n.n_classes(),
        }
    }

    /// Frames consumed per output: the first layer's stride.
    pub fn first_stride(&self) -> usize {
        match self {
            Model::Float(n) => n.first_stride(),
            Model::Linearized(n) => n.chunk_size(),
            Model::Quantized(n) => n.chunk_size(),
        }
    }

    pub fn receptive_field(&self) -> usize {
        let chain = |geom: Vec<(usize, usize)>| {
            let mut rf = 1;
            let mut jump = 1;
            for (k, s) in geom {
                rf += (k - 1) * jump;
                jump *= s;
            }
            rf
        };
        match self {
            Model::Float(n) => receptive_field(n),
            Model::Linearized(n) => chain(
                n.stages()
                    .iter()
                    .map(|s| (s.kernel(), s.stride()))
                    .collect(),
            ),
            Model::Quantized(n) => chain(
                n.stages()
                    .iter()
                    .map(|s| (s.kernel(), s.stride()))
                    .collect(),
            ),
        }
    }
}

/// A model plus the frontend and decoder settings it runs with.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile {
    pub model: Model,
    pub frontend: FrontendConfig,
    pub decoder: DecoderConfig,
}

impl ModelFile {
    /// Default 16 kHz frontend with identity normalization and the stride's
    /// default decoder.
    pub fn with_defaults(model: Model) -> Self {
        let frontend = FrontendConfig::identity(16_000, model.input_features());
        let decoder = DecoderConfig::for_stride(model.first_stride(), model.n_classes());
        Self {
            model,
            frontend,
            decoder,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.frontend.validate()?;
        if self.frontend.n_mels != self.model.input_features() {
            return Err(Error::config(format!(
                "frontend emits {} features, model expects {}",
                self.frontend.n_mels,
                self.model.input_features()
            )));
        }
        self.decoder.validate(self.model.n_classes())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Dtype {
    F32,
    I8,
    I32,
}

impl Dtype {
    fn size(self) -> usize {
        match self {
            Dtype::F32 | Dtype::I32 => 4,
            Dtype::I8 => 1,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::I8 => "i8",
            Dtype::I32 => "i32",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    dtype: Dtype,
    shape: Vec<usize>,
    bytes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct QuantEntry {
    scale: f64,
    zero_point: i32,
}

impl From<QuantParams> for QuantEntry {
    fn from(p: QuantParams) -> Self {
        Self {
            scale: p.scale() as f64,
            zero_point: p.zero_point(),
        }
    }
}

impl QuantEntry {
    fn params(&self) -> Result<QuantParams, FormatError> {
        QuantParams::new(self.scale as f32, self.zero_point).map_err(manifest_err)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum LayerOp {
    Conv1d,
    Linear,
    LinearInt8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerEntry {
    name: String,
    op: LayerOp,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    activation: Activation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    residual_from: Option<usize>,
    weight: String,
    bias: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weight_quant: Option<QuantEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    in_quant: Option<QuantEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    out_quant: Option<QuantEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FrontendEntry {
    sample_rate: u32,
    window_ms: u32,
    hop_ms: u32,
    n_mels: usize,
    norm_mean: Vec<f64>,
    norm_std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DecoderEntry {
    window: usize,
    smoothing: usize,
    keyword_ids: Vec<usize>,
    threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    kind: String,
    input_features: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    input_frames: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    chunk_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    input_quant: Option<QuantEntry>,
    frontend: FrontendEntry,
    decoder: DecoderEntry,
    layers: Vec<LayerEntry>,
    tensors: Vec<TensorEntry>,
}

fn manifest_err(e: impl std::fmt::Display) -> FormatError {
    FormatError::Manifest(e.to_string())
}

enum Blob {
    F32(Vec<f32>),
    I8(Vec<i8>),
    I32(Vec<i32>),
}

impl Blob {
    fn dtype(&self) -> Dtype {
        match self {
            Blob::F32(_) => Dtype::F32,
            Blob::I8(_) => Dtype::I8,
            Blob::I32(_) => Dtype::I32,
        }
    }

    fn write(&self, out: &mut Vec<u8>) {
        match self {
            Blob::F32(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Blob::I8(v) => out.extend(v.iter().map(|&x| x as u8)),
            Blob::I32(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }
}

struct Writer {
    layers: Vec<LayerEntry>,
    tensors: Vec<TensorEntry>,
    blobs: Vec<Blob>,
}

impl Writer {
    fn tensor(&mut self, name: String, shape: Vec<usize>, blob: Blob) -> String {
        let dtype = blob.dtype();
        self.tensors.push(TensorEntry {
            name: name.clone(),
            dtype,
            bytes: shape.iter().product::<usize>() * dtype.size(),
            shape,
        });
        self.blobs.push(blob);
        name
    }

    fn conv(&mut self, name: &str, l: &Conv1DLayer, residual_from: Option<usize>) {
        let weight = self.tensor(
            format!("{name}.weight"),
            vec![l.out_channels(), l.in_channels(), l.kernel()],
            Blob::F32(l.weights().to_vec()),
        );
        let bias = self.tensor(
            format!("{name}.bias"),
            vec![l.out_channels()],
            Blob::F32(l.bias().to_vec()),
        );
        self.layers.push(LayerEntry {
            name: name.into(),
            op: LayerOp::Conv1d,
            in_channels: l.in_channels(),
            out_channels: l.out_channels(),
            kernel: l.kernel(),
            stride: l.stride(),
            activation: l.activation(),
            residual_from,
            weight,
            bias,
            weight_quant: None,
            in_quant: None,
            out_quant: None,
        });
    }
}

fn encode(file: &ModelFile) -> Result<Vec<u8>> {
    file.validate()?;
    let mut w = Writer {
        layers: Vec::new(),
        tensors: Vec::new(),
        blobs: Vec::new(),
    };
    let mut input_frames = None;
    let mut chunk_size = None;
    let mut input_quant = None;
    match &file.model {
        Model::Float(net) => {
            if let Network::Mlp(m) = net {
                input_frames = Some(m.input_frames());
            }
            for l in net.layers() {
                w.conv(&l.name, l.layer, l.residual_from);
            }
        }
        Model::Linearized(lnet) => {
            chunk_size = Some(lnet.chunk_size());
            for st in lnet.stages() {
                let lin = st.linear();
                let weight = w.tensor(
                    format!("{}.weight", st.name()),
                    vec![lin.in_dim(), lin.out_dim()],
                    Blob::F32(lin.weights().to_vec()),
                );
                let bias = w.tensor(
                    format!("{}.bias", st.name()),
                    vec![lin.out_dim()],
                    Blob::F32(lin.bias().to_vec()),
                );
                w.layers.push(LayerEntry {
                    name: st.name().into(),
                    op: LayerOp::Linear,
                    in_channels: st.in_channels(),
                    out_channels: lin.out_dim(),
                    kernel: st.kernel(),
                    stride: st.stride(),
                    activation: lin.activation(),
                    residual_from: st.residual_from(),
                    weight,
                    bias,
                    weight_quant: None,
                    in_quant: None,
                    out_quant: None,
                });
            }
        }
        Model::Quantized(qnet) => {
            chunk_size = Some(qnet.chunk_size());
            input_quant = Some(qnet.input_params().into());
            for st in qnet.stages() {
                let l = st.layer();
                let weight = w.tensor(
                    format!("{}.weight", st.name()),
                    vec![l.in_dim(), l.out_dim()],
                    Blob::I8(l.weights().to_vec()),
                );
                let bias = w.tensor(
                    format!("{}.bias", st.name()),
                    vec![l.out_dim()],
                    Blob::I32(l.bias().to_vec()),
                );
                w.layers.push(LayerEntry {
                    name: st.name().into(),
                    op: LayerOp::LinearInt8,
                    in_channels: st.in_channels(),
                    out_channels: l.out_dim(),
                    kernel: st.kernel(),
                    stride: st.stride(),
                    activation: l.activation(),
                    residual_from: st.residual_from(),
                    weight,
                    bias,
                    weight_quant: Some(l.weight_params().into()),
                    in_quant: Some(l.in_params().into()),
                    out_quant: Some(l.out_params().into()),
                });
            }
        }
    }
    let fe = &file.frontend;
    let manifest = Manifest {
        kind: file.model.kind().into(),
        input_features: file.model.input_features(),
        input_frames,
        chunk_size,
        input_quant,
        frontend: FrontendEntry {
            sample_rate: fe.sample_rate,
            window_ms: 25,
            hop_ms: 10,
            n_mels: fe.n_mels,
            norm_mean: fe.norm_mean.iter().map(|&v| v as f64).collect(),
            norm_std: fe.norm_std.iter().map(|&v| v as f64).collect(),
        },
        decoder: DecoderEntry {
            window: file.decoder.window,
            smoothing: file.decoder.smoothing,
            keyword_ids: file.decoder.keyword_ids.clone(),
            threshold: file.decoder.threshold as f64,
        },
        layers: w.layers,
        tensors: w.tensors,
    };
    let json = serde_json::to_vec_pretty(&manifest).map_err(manifest_err)?;
    let mut out = Vec::with_capacity(json.len() + 10);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for b in &w.blobs {
        b.write(&mut out);
    }
    Ok(out)
}

pub fn to_bytes(file: &ModelFile) -> Result<Vec<u8>> {
    encode(file)
}

pub fn save_model(file: &ModelFile, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode(file)?)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelFile> {
    from_bytes(&std::fs::read(path)?)
}

fn take<'a>(bytes: &'a [u8], offset: &mut usize, n: usize) -> Result<&'a [u8], FormatError> {
    let available = bytes.len().saturating_sub(*offset);
    if available < n {
        return Err(FormatError::Truncated {
            offset: *offset,
            needed: n,
            available,
        });
    }
    let s = &bytes[*offset..*offset + n];
    *offset += n;
    Ok(s)
}

pub fn from_bytes(bytes: &[u8]) -> Result<ModelFile> {
    let mut off = 0;
    let magic = take(bytes, &mut off, 4)?;
    if magic != MAGIC {
        return Err(FormatError::BadMagic(magic.try_into().expect("4 bytes")).into());
    }
    let version = u16::from_le_bytes(take(bytes, &mut off, 2)?.try_into().expect("2 bytes"));
    if version != FORMAT_VERSION {
        return Err(FormatError::UnsupportedVersion {
            found: version,
            supported: FORMAT_VERSION,
        }
        .into());
    }
    let len = u32::from_le_bytes(take(bytes, &mut off, 4)?.try_into().expect("4 bytes")) as usize;
    let manifest: Manifest =
        serde_json::from_slice(take(bytes, &mut off, len)?).map_err(manifest_err)?;

    let mut blobs = std::collections::HashMap::new();
    for t in &manifest.tensors {
        let expected = t
            .shape
            .iter()
            .try_fold(t.dtype.size(), |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| manifest_err(format!("tensor {} is too large", t.name)))?;
        if t.bytes != expected {
            return Err(FormatError::ByteLength {
                name: t.name.clone(),
                shape: t.shape.clone(),
                dtype: t.dtype.name().into(),
                declared: t.bytes,
                expected,
            }
            .into());
        }
        let raw = take(bytes, &mut off, t.bytes)?;
        let blob = match t.dtype {
            Dtype::F32 => Blob::F32(
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            Dtype::I8 => Blob::I8(raw.iter().map(|&b| b as i8).collect()),
            Dtype::I32 => Blob::I32(
                raw.chunks_exact(4)
                    .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
        };
        if blobs
            .insert(t.name.clone(), (t.shape.clone(), blob))
            .is_some()
        {
            return Err(manifest_err(format!("tensor {} listed twice", t.name)).into());
        }
    }
    if off != bytes.len() {
        return Err(FormatError::TrailingBytes(bytes.len() - off).into());
    }
    let file = decode(&manifest, blobs).map_err(|e| match e {
        Error::Format(f) => Error::Format(f),
        other => Error::Format(manifest_err(other)),
    })?;
    Ok(file)
}

type BlobMap = std::collections::HashMap<String, (Vec<usize>, Blob)>;

fn fetch<'a>(blobs: &'a BlobMap, name: &str, shape: &[usize]) -> Result<&'a Blob, FormatError> {
    let (s, b) = blobs
        .get(name)
        .ok_or_else(|| manifest_err(format!("missing tensor {name}")))?;
    if s != shape {
        return Err(manifest_err(format!(
            "tensor {name} has shape {s:?}, layer needs {shape:?}"
        )));
    }
    Ok(b)
}

fn f32s(blobs: &BlobMap, name: &str, shape: &[usize]) -> Result<Vec<f32>, FormatError> {
    match fetch(blobs, name, shape)? {
        Blob::F32(v) => Ok(v.clone()),
        _ => Err(manifest_err(format!("tensor {name} must be f32"))),
    }
}

fn expect_op(l: &LayerEntry, op: LayerOp) -> Result<(), FormatError> {
    if l.op != op {
        return Err(manifest_err(format!(
            "{}: unexpected op {:?} in this model kind",
            l.name, l.op
        )));
    }
    Ok(())
}

fn conv_layer(l: &LayerEntry, blobs: &BlobMap) -> Result<Conv1DLayer> {
    expect_op(l, LayerOp::Conv1d)?;
    let (d, c, k) = (l.out_channels, l.in_channels, l.kernel);
    Conv1DLayer::new(
        d,
        c,
        k,
        l.stride,
        f32s(blobs, &l.weight, &[d, c, k])?,
        f32s(blobs, &l.bias, &[d])?,
        l.activation,
    )
    .map_err(|e| e.in_layer(&l.name))
}

fn need<T: Copy>(v: Option<T>, what: &str) -> Result<T, FormatError> {
    v.ok_or_else(|| manifest_err(format!("missing {what}")))
}

fn decode(m: &Manifest, blobs: BlobMap) -> Result<ModelFile> {
    if m.layers.is_empty() {
        return Err(manifest_err("no layers").into());
    }
    let model = match m.kind.as_str() {
        "lico" => {
            let n = m.layers.len();
            if n < 4 || !(n - 1).is_multiple_of(3) {
                return Err(manifest_err(format!(
                    "LiCo-Net needs 3 layers per block plus a classifier, got {n}"
                ))
                .into());
            }
            let mut blocks = Vec::new();
            for g in m.layers[..n - 1].chunks(3) {
                blocks.push(LiCoBlock::new(
                    conv_layer(&g[0], &blobs)?,
                    conv_layer(&g[1], &blobs)?,
                    conv_layer(&g[2], &blobs)?,
                )?);
            }
            let net = LiCoNet::new(
                m.input_features,
                blocks,
                conv_layer(&m.layers[n - 1], &blobs)?,
            )?;
            let links: Vec<_> = net.layers().iter().map(|l| l.residual_from).collect();
            let declared: Vec<_> = m.layers.iter().map(|l| l.residual_from).collect();
            if links != declared {
                return Err(manifest_err("residual links disagree with block shapes").into());
            }
            Model::Float(Network::LiCo(net))
        }
        "mlp" => {
            let n = m.layers.len();
            let hidden = m.layers[..n - 1]
                .iter()
                .map(|l| conv_layer(l, &blobs))
                .collect::<Result<Vec<_>>>()?;
            if m.layers.iter().any(|l| l.residual_from.is_some()) {
                return Err(manifest_err("MLP layers cannot have residual links").into());
            }
            let frames = need(m.input_frames, "input_frames")?;
            let net = MlpNet::new(
                frames,
                m.input_features,
                hidden,
                conv_layer(&m.layers[n - 1], &blobs)?,
            )?;
            Model::Float(Network::Mlp(net))
        }
        "linearized" => {
            let mut stages = Vec::new();
            for l in &m.layers {
                expect_op(l, LayerOp::Linear)?;
                let in_dim = l.in_channels * l.kernel;
                let lin = LinearLayer::new(
                    in_dim,
                    l.out_channels,
                    f32s(&blobs, &l.weight, &[in_dim, l.out_channels])?,
                    f32s(&blobs, &l.bias, &[l.out_channels])?,
                    l.activation,
                )
                .map_err(|e| e.in_layer(&l.name))?;
                stages.push(Stage::new(
                    &l.name,
                    lin,
                    l.in_channels,
                    l.kernel,
                    l.stride,
                    l.residual_from,
                )?);
            }
            Model::Linearized(LinearizedNet::new(
                m.input_features,
                need(m.chunk_size, "chunk_size")?,
                stages,
            )?)
        }
        "quantized" => {
            let mut stages = Vec::new();
            for l in &m.layers {
                expect_op(l, LayerOp::LinearInt8)?;
                let in_dim = l.in_channels * l.kernel;
                let weights = match fetch(&blobs, &l.weight, &[in_dim, l.out_channels])? {
                    Blob::I8(v) => v.clone(),
                    _ => return Err(manifest_err(format!("tensor {} must be i8", l.weight)).into()),
                };
                let bias = match fetch(&blobs, &l.bias, &[l.out_channels])? {
                    Blob::I32(v) => v.clone(),
                    _ => return Err(manifest_err(format!("tensor {} must be i32", l.bias)).into()),
                };
                let layer = QuantizedLinearLayer::new(
                    in_dim,
                    l.out_channels,
                    weights,
                    need(l.weight_quant, "weight_quant")?.params()?,
                    bias,
                    need(l.in_quant, "in_quant")?.params()?,
                    need(l.out_quant, "out_quant")?.params()?,
                    l.activation,
                )
                .map_err(|e| e.in_layer(&l.name))?;
                stages.push(QuantizedStage::new(
                    &l.name,
                    layer,
                    l.in_channels,
                    l.kernel,
                    l.stride,
                    l.residual_from,
                )?);
            }
            Model::Quantized(QuantizedNet::new(
                m.input_features,
                need(m.chunk_size, "chunk_size")?,
                need(m.input_quant, "input_quant")?.params()?,
                stages,
            )?)
        }
        other => return Err(manifest_err(format!("unknown model kind {other:?}")).into()),
    };
    if model.kind() != m.kind {
        return Err(manifest_err("model kind mismatch").into());
    }
    let fe = &m.frontend;
    if fe.window_ms != 25 || fe.hop_ms != 10 {
        return Err(manifest_err(format!(
            "only 25 ms windows and 10 ms hops are supported, got {}/{}",
            fe.window_ms, fe.hop_ms
        ))
        .into());
    }
    let file = ModelFile {
        model,
        frontend: FrontendConfig {
            sample_rate: fe.sample_rate,
            n_mels: fe.n_mels,
            norm_mean: fe.norm_mean.iter().map(|&v| v as f32).collect(),
            norm_std: fe.norm_std.iter().map(|&v| v as f32).collect(),
        },
        decoder: DecoderConfig {
            window: m.decoder.window,
            smoothing: m.decoder.smoothing,
            keyword_ids: m.decoder.keyword_ids.clone(),
            threshold: m.decoder.threshold as f32,
        },
    };
    file.validate()?;
    Ok(file)
}
