//! Declarative encoder/decoder architectures and the multimodal model built
//! from them.
//!
//! A [`ModelSpec`] lists layers once for all modalities; the first encoder
//! layer reads the modality's own channel count and the last decoder layer
//! writes it back ([`Channels::Modality`]). Each modality gets its own encoder,
//! pre-quantization 1x1 convolution and decoder; all share one codebook.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, NodeId, ParamId, ParamStore};
use crate::conv::{self, ConvGeometry};
use crate::error::{Error, Result};
use crate::tensor::{self, Element, Tensor};
use crate::vq::Codebook;

pub const ENCODER_CHANNELS: usize = 128;
pub const LATENT_CHANNELS: usize = 128;
pub const RESIDUAL_HIDDEN: usize = 32;
pub const RESIDUAL_BLOCKS: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Experiment {
    MnistSvhn,
    WifiCsi,
    CsiFeedback,
}

impl Experiment {
    pub const ALL: [Experiment; 3] = [Experiment::MnistSvhn, Experiment::WifiCsi, Experiment::CsiFeedback];

    pub fn as_str(self) -> &'static str {
        match self {
            Experiment::MnistSvhn => "mnist_svhn",
            Experiment::WifiCsi => "wifi_csi",
            Experiment::CsiFeedback => "csi_feedback",
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Experiment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Experiment::ALL
            .into_iter()
            .find(|e| e.as_str() == s)
            .ok_or_else(|| Error::Config(vec![format!("unknown experiment `{s}` (expected mnist_svhn, wifi_csi or csi_feedback)")]))
    }
}

/// Output channel count of a layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Channels {
    Fixed(usize),
    /// The channel count of the modality being reconstructed.
    Modality,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layer {
    Conv {
        out: Channels,
        geom: ConvGeometry,
        bias: bool,
    },
    ConvTranspose {
        out: Channels,
        geom: ConvGeometry,
        bias: bool,
    },
    Relu,
    /// `blocks` pre-activation residual blocks (3x3 to `hidden`, 1x1 back,
    /// both without bias) followed by a closing ReLU.
    ResidualStack { blocks: usize, hidden: usize },
}

impl Layer {
    pub fn conv(out: usize, kernel: (usize, usize), stride: (usize, usize), padding: (usize, usize)) -> Self {
        Layer::Conv {
            out: Channels::Fixed(out),
            geom: ConvGeometry::new(kernel, stride, padding),
            bias: true,
        }
    }

    pub fn conv_t(out: Channels, kernel: (usize, usize), stride: (usize, usize), padding: (usize, usize)) -> Self {
        Layer::ConvTranspose {
            out,
            geom: ConvGeometry::new(kernel, stride, padding),
            bias: true,
        }
    }

    pub fn residual_stack() -> Self {
        Layer::ResidualStack {
            blocks: RESIDUAL_BLOCKS,
            hidden: RESIDUAL_HIDDEN,
        }
    }

    /// Output `[C, H, W]` for input `shape` when the modality has `modality_channels`.
    pub fn output_shape(&self, shape: [usize; 3], modality_channels: usize) -> Result<[usize; 3]> {
        let resolve = |c: &Channels| match c {
            Channels::Fixed(n) => *n,
            Channels::Modality => modality_channels,
        };
        match self {
            Layer::Conv { out, geom, .. } => {
                let (h, w) = geom.conv_output(shape[1], shape[2])?;
                Ok([resolve(out), h, w])
            }
            Layer::ConvTranspose { out, geom, .. } => {
                let (h, w) = geom.transpose_output(shape[1], shape[2])?;
                if geom.conv_output(h, w)? != (shape[1], shape[2]) {
                    return Err(Error::contract("transposed convolution geometry is not invertible here"));
                }
                Ok([resolve(out), h, w])
            }
            Layer::Relu | Layer::ResidualStack { .. } => Ok(shape),
        }
    }
}

fn pair(s: &str, prefix: &str) -> Result<(usize, usize)> {
    let body = s
        .strip_prefix(prefix)
        .ok_or_else(|| Error::format(format!("expected `{prefix}..` in `{s}`")))?;
    let (a, b) = body
        .split_once('x')
        .ok_or_else(|| Error::format(format!("expected AxB in `{s}`")))?;
    let num = |v: &str| v.parse::<usize>().map_err(|_| Error::format(format!("bad number in `{s}`")));
    Ok((num(a)?, num(b)?))
}

impl fmt::Display for Layer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let conv_like = |f: &mut fmt::Formatter<'_>, name: &str, out: &Channels, g: &ConvGeometry, bias: bool| {
            let out = match out {
                Channels::Fixed(n) => n.to_string(),
                Channels::Modality => "in".to_string(),
            };
            write!(
                f,
                "{name} {out} {}x{} s{}x{} p{}x{}{}",
                g.kernel.0,
                g.kernel.1,
                g.stride.0,
                g.stride.1,
                g.padding.0,
                g.padding.1,
                if bias { "" } else { " nobias" }
            )
        };
        match self {
            Layer::Conv { out, geom, bias } => conv_like(f, "conv", out, geom, *bias),
            Layer::ConvTranspose { out, geom, bias } => conv_like(f, "convT", out, geom, *bias),
            Layer::Relu => f.write_str("relu"),
            Layer::ResidualStack { blocks, hidden } => write!(f, "res {blocks} {hidden}"),
        }
    }
}

impl FromStr for Layer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split_whitespace().collect();
        let bad = || Error::format(format!("unrecognised layer `{s}`"));
        match parts.as_slice() {
            ["relu"] => Ok(Layer::Relu),
            ["res", blocks, hidden] => Ok(Layer::ResidualStack {
                blocks: blocks.parse().map_err(|_| bad())?,
                hidden: hidden.parse().map_err(|_| bad())?,
            }),
            [kind @ ("conv" | "convT"), out, kernel, stride, padding, rest @ ..] => {
                let out = if *out == "in" {
                    Channels::Modality
                } else {
                    Channels::Fixed(out.parse().map_err(|_| bad())?)
                };
                let bias = match rest {
                    [] => true,
                    ["nobias"] => false,
                    _ => return Err(bad()),
                };
                let geom = ConvGeometry::new(pair(kernel, "")?, pair(stride, "s")?, pair(padding, "p")?);
                Ok(if *kind == "conv" {
                    Layer::Conv { out, geom, bias }
                } else {
                    Layer::ConvTranspose { out, geom, bias }
                })
            }
            _ => Err(bad()),
        }
    }
}

/// One experiment's architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub experiment: Experiment,
    /// Per-modality input `[C, H, W]`.
    pub inputs: Vec<[usize; 3]>,
    pub encoder: Vec<Layer>,
    pub decoder: Vec<Layer>,
    /// Codebook dimension `d`.
    pub latent_channels: usize,
    pub latent: (usize, usize),
}

/// Supported CSI latent grids, least to most compressed.
pub const CSI_LATENTS: [(usize, usize); 5] = [(28, 8), (8, 8), (4, 8), (4, 4), (2, 2)];

fn image_encoder() -> Vec<Layer> {
    vec![
        Layer::conv(64, (4, 4), (2, 2), (1, 1)),
        Layer::Relu,
        Layer::conv(ENCODER_CHANNELS, (4, 4), (2, 2), (1, 1)),
        Layer::Relu,
        Layer::conv(ENCODER_CHANNELS, (3, 3), (1, 1), (1, 1)),
        Layer::residual_stack(),
    ]
}

fn image_decoder() -> Vec<Layer> {
    vec![
        Layer::conv(ENCODER_CHANNELS, (3, 3), (1, 1), (1, 1)),
        Layer::residual_stack(),
        Layer::conv_t(Channels::Fixed(64), (4, 4), (2, 2), (1, 1)),
        Layer::Relu,
        Layer::conv_t(Channels::Modality, (4, 4), (2, 2), (1, 1)),
    ]
}

impl ModelSpec {
    pub fn mnist_svhn() -> Self {
        Self {
            experiment: Experiment::MnistSvhn,
            inputs: vec![[1, 32, 32], [3, 32, 32]],
            encoder: image_encoder(),
            decoder: image_decoder(),
            latent_channels: LATENT_CHANNELS,
            latent: (8, 8),
        }
    }

    /// Two single-channel 224x224 spectrograms (one per receiver) by default.
    pub fn wifi_csi(modalities: usize) -> Self {
        Self {
            experiment: Experiment::WifiCsi,
            inputs: vec![[1, 224, 224]; modalities],
            encoder: image_encoder(),
            decoder: image_decoder(),
            latent_channels: LATENT_CHANNELS,
            latent: (56, 56),
        }
    }

    /// One modality per receiver, each `[2, n_delay, n_tx]`, with an 8x8 latent.
    pub fn csi_feedback(receivers: usize, n_delay: usize, n_tx: usize) -> Self {
        Self {
            experiment: Experiment::CsiFeedback,
            inputs: vec![[2, n_delay, n_tx]; receivers],
            encoder: vec![
                Layer::conv(64, (4, 3), (2, 1), (1, 1)),
                Layer::Relu,
                Layer::conv(ENCODER_CHANNELS, (2, 3), (2, 1), (1, 1)),
                Layer::residual_stack(),
            ],
            decoder: vec![
                Layer::conv(ENCODER_CHANNELS, (3, 3), (1, 1), (1, 1)),
                Layer::residual_stack(),
                Layer::conv_t(Channels::Fixed(64), (3, 3), (2, 1), (1, 1)),
                Layer::Relu,
                Layer::conv_t(Channels::Modality, (2, 3), (2, 1), (1, 1)),
            ],
            latent_channels: LATENT_CHANNELS,
            latent: (8, 8),
        }
    }

    /// Default configuration of `experiment`.
    pub fn for_experiment(experiment: Experiment) -> Self {
        match experiment {
            Experiment::MnistSvhn => Self::mnist_svhn(),
            Experiment::WifiCsi => Self::wifi_csi(2),
            Experiment::CsiFeedback => Self::csi_feedback(2, 28, 8),
        }
    }

    pub fn modalities(&self) -> usize {
        self.inputs.len()
    }

    /// Shape after every encoder layer, then after the pre-quantization conv.
    pub fn trace_encoder(&self, modality: usize) -> Result<Vec<[usize; 3]>> {
        let input = self.inputs[modality];
        let mut shape = input;
        let mut out = Vec::with_capacity(self.encoder.len() + 1);
        for (i, layer) in self.encoder.iter().enumerate() {
            shape = layer.output_shape(shape, input[0]).map_err(|e| Error::Build {
                layer: format!("encoder[{i}] `{layer}` on input {shape:?}"),
                reason: e.to_string(),
            })?;
            out.push(shape);
        }
        out.push([self.latent_channels, shape[1], shape[2]]);
        Ok(out)
    }

    pub fn trace_decoder(&self, modality: usize) -> Result<Vec<[usize; 3]>> {
        let input = self.inputs[modality];
        let mut shape = [self.latent_channels, self.latent.0, self.latent.1];
        let mut out = Vec::with_capacity(self.decoder.len());
        for (i, layer) in self.decoder.iter().enumerate() {
            shape = layer.output_shape(shape, input[0]).map_err(|e| Error::Build {
                layer: format!("decoder[{i}] `{layer}` on input {shape:?}"),
                reason: e.to_string(),
            })?;
            out.push(shape);
        }
        Ok(out)
    }

    /// Checks the shape algebra end to end for every modality.
    pub fn validate(&self) -> Result<()> {
        if self.inputs.is_empty() {
            return Err(Error::Build {
                layer: "inputs".into(),
                reason: "at least one modality is required".into(),
            });
        }
        for m in 0..self.modalities() {
            let enc = self.trace_encoder(m)?;
            let last = enc[enc.len() - 1];
            if (last[1], last[2]) != self.latent {
                return Err(Error::Build {
                    layer: format!("encoder[{}] (modality {m})", self.encoder.len() - 1),
                    reason: format!("produces {}x{}, spec declares latent {}x{}", last[1], last[2], self.latent.0, self.latent.1),
                });
            }
            let dec = self.trace_decoder(m)?;
            let out = dec.last().copied().unwrap_or([self.latent_channels, self.latent.0, self.latent.1]);
            if out != self.inputs[m] {
                return Err(Error::Build {
                    layer: format!("decoder[{}] (modality {m})", self.decoder.len().saturating_sub(1)),
                    reason: format!("reconstructs {out:?}, input is {:?}", self.inputs[m]),
                });
            }
        }
        Ok(())
    }

    /// CSI architecture adjusted to emit a `target` latent grid.
    ///
    /// `(8,8)` is the reference stack; `(4,8)`, `(4,4)` and `(2,2)` append
    /// stride-2 convolutions (mirrored by transposed ones in the decoder);
    /// `(28,8)` keeps full resolution with stride-1 layers.
    pub fn variant_encoder(csi: &ModelSpec, target: (usize, usize)) -> Result<ModelSpec> {
        if csi.experiment != Experiment::CsiFeedback {
            return Err(Error::Config(vec![format!(
                "latent variants exist only for csi_feedback, not {}",
                csi.experiment
            )]));
        }
        let [_, n_delay, n_tx] = csi.inputs[0];
        let mut spec = ModelSpec::csi_feedback(csi.modalities(), n_delay, n_tx);
        spec.latent_channels = csi.latent_channels;
        let halve_h = (
            Layer::conv(ENCODER_CHANNELS, (4, 3), (2, 1), (1, 1)),
            Layer::conv_t(Channels::Fixed(ENCODER_CHANNELS), (4, 3), (2, 1), (1, 1)),
        );
        let halve_both = (
            Layer::conv(ENCODER_CHANNELS, (4, 4), (2, 2), (1, 1)),
            Layer::conv_t(Channels::Fixed(ENCODER_CHANNELS), (4, 4), (2, 2), (1, 1)),
        );
        let extra: Vec<(Layer, Layer)> = match target {
            (8, 8) => vec![],
            (4, 8) => vec![halve_h],
            (4, 4) => vec![halve_both],
            (2, 2) => vec![halve_both, halve_both],
            (28, 8) => {
                spec.encoder[0] = Layer::conv(64, (3, 3), (1, 1), (1, 1));
                spec.encoder[2] = Layer::conv(ENCODER_CHANNELS, (3, 3), (1, 1), (1, 1));
                spec.decoder[2] = Layer::conv_t(Channels::Fixed(64), (3, 3), (1, 1), (1, 1));
                spec.decoder[4] = Layer::conv_t(Channels::Modality, (3, 3), (1, 1), (1, 1));
                vec![]
            }
            other => {
                return Err(Error::Config(vec![format!(
                    "unsupported latent {}x{}; supported: {}",
                    other.0,
                    other.1,
                    CSI_LATENTS.iter().map(|(h, w)| format!("{h}x{w}")).collect::<Vec<_>>().join(", ")
                )]))
            }
        };
        // encoder: conv, relu, conv, [relu, extra]*, res
        let mut enc_tail = Vec::new();
        let mut dec_head = Vec::new();
        for (down, up) in &extra {
            enc_tail.push(Layer::Relu);
            enc_tail.push(*down);
            dec_head.push(*up);
            dec_head.push(Layer::Relu);
        }
        spec.encoder.splice(3..3, enc_tail);
        spec.decoder.splice(2..2, dec_head);
        spec.latent = target;
        spec.validate()?;
        Ok(spec)
    }

    /// `key=value` manifest; see [`ModelSpec::from_manifest`].
    pub fn to_manifest(&self) -> String {
        let join = |layers: &[Layer]| layers.iter().map(|l| l.to_string()).collect::<Vec<_>>().join("|");
        format!(
            "experiment={}\nlatent={}x{}\nlatent_channels={}\ninputs={}\nencoder={}\ndecoder={}\n",
            self.experiment,
            self.latent.0,
            self.latent.1,
            self.latent_channels,
            self.inputs
                .iter()
                .map(|[c, h, w]| format!("{c}x{h}x{w}"))
                .collect::<Vec<_>>()
                .join(";"),
            join(&self.encoder),
            join(&self.decoder),
        )
    }

    pub fn from_manifest(text: &str) -> Result<Self> {
        let kv = parse_kv(text);
        let get = |k: &str| kv.iter().find(|(key, _)| key == k).map(|(_, v)| v.as_str()).ok_or_else(|| Error::format(format!("model manifest lacks `{k}`")));
        let layers = |s: &str| -> Result<Vec<Layer>> { s.split('|').filter(|p| !p.is_empty()).map(str::parse).collect() };
        let inputs = get("inputs")?
            .split(';')
            .map(|s| {
                let v: Vec<usize> = s.split('x').map(|n| n.parse().map_err(|_| Error::format(format!("bad input shape `{s}`")))).collect::<Result<_>>()?;
                <[usize; 3]>::try_from(v).map_err(|_| Error::format(format!("bad input shape `{s}`")))
            })
            .collect::<Result<_>>()?;
        let spec = Self {
            experiment: get("experiment")?.parse()?,
            latent: pair(get("latent")?, "")?,
            latent_channels: get("latent_channels")?.parse().map_err(|_| Error::format("bad latent_channels"))?,
            inputs,
            encoder: layers(get("encoder")?)?,
            decoder: layers(get("decoder")?)?,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_kv(text: &str) -> Vec<(String, String)> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .filter_map(|l| l.split_once('=').map(|(k, v)| (k.trim().to_string(), v.trim().to_string())))
        .collect()
}

#[derive(Clone, Copy, Debug)]
struct ConvUnit {
    weight: ParamId,
    bias: Option<ParamId>,
    geom: ConvGeometry,
}

#[derive(Clone, Copy, Debug)]
enum Unit {
    Conv(ConvUnit),
    ConvTranspose(ConvUnit),
    Relu,
    Residual { expand: ConvUnit, project: ConvUnit },
}

#[derive(Clone, Debug)]
struct Network {
    units: Vec<Unit>,
}

fn init_uniform<F: Element>(shape: Vec<usize>, fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<F> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| F::from_f64(rng.random_range(-bound..bound)))
}

struct Builder<'a, F> {
    store: &'a mut ParamStore<F>,
    rng: &'a mut ChaCha8Rng,
}

impl<F: Element> Builder<'_, F> {
    fn conv(&mut self, name: &str, c_in: usize, c_out: usize, geom: ConvGeometry, bias: bool) -> ConvUnit {
        let (kh, kw) = geom.kernel;
        let fan_in = c_in * kh * kw;
        let weight = self.store.add(format!("{name}.weight"), init_uniform(vec![c_out, c_in, kh, kw], fan_in, self.rng));
        let bias = bias.then(|| self.store.add(format!("{name}.bias"), init_uniform(vec![c_out], fan_in, self.rng)));
        ConvUnit { weight, bias, geom }
    }

    fn conv_t(&mut self, name: &str, c_in: usize, c_out: usize, geom: ConvGeometry, bias: bool) -> ConvUnit {
        let (kh, kw) = geom.kernel;
        let fan_in = c_out * kh * kw;
        let weight = self.store.add(format!("{name}.weight"), init_uniform(vec![c_in, c_out, kh, kw], fan_in, self.rng));
        let bias = bias.then(|| self.store.add(format!("{name}.bias"), init_uniform(vec![c_out], fan_in, self.rng)));
        ConvUnit { weight, bias, geom }
    }

    fn network(&mut self, prefix: &str, layers: &[Layer], mut channels: usize, modality_channels: usize) -> (Network, usize) {
        let mut units = Vec::new();
        for (i, layer) in layers.iter().enumerate() {
            let name = format!("{prefix}.{i}");
            let resolve = |c: &Channels| match c {
                Channels::Fixed(n) => *n,
                Channels::Modality => modality_channels,
            };
            match layer {
                Layer::Conv { out, geom, bias } => {
                    let c_out = resolve(out);
                    units.push(Unit::Conv(self.conv(&name, channels, c_out, *geom, *bias)));
                    channels = c_out;
                }
                Layer::ConvTranspose { out, geom, bias } => {
                    let c_out = resolve(out);
                    units.push(Unit::ConvTranspose(self.conv_t(&name, channels, c_out, *geom, *bias)));
                    channels = c_out;
                }
                Layer::Relu => units.push(Unit::Relu),
                Layer::ResidualStack { blocks, hidden } => {
                    for b in 0..*blocks {
                        let expand = self.conv(&format!("{name}.block{b}.conv3"), channels, *hidden, ConvGeometry::new((3, 3), (1, 1), (1, 1)), false);
                        let project = self.conv(&format!("{name}.block{b}.conv1"), *hidden, channels, ConvGeometry::pointwise(), false);
                        units.push(Unit::Residual { expand, project });
                    }
                    units.push(Unit::Relu);
                }
            }
        }
        (Network { units }, channels)
    }
}

fn graph_conv<F: Element>(g: &mut Graph<F>, store: &ParamStore<F>, x: NodeId, u: &ConvUnit, transpose: bool) -> Result<NodeId> {
    let w = g.param(store, u.weight)?;
    let b = u.bias.map(|b| g.param(store, b)).transpose()?;
    if transpose {
        g.conv_transpose2d(x, w, b, u.geom)
    } else {
        g.conv2d(x, w, b, u.geom)
    }
}

fn eval_conv<F: Element>(store: &ParamStore<F>, x: &Tensor<F>, u: &ConvUnit, transpose: bool) -> Result<Tensor<F>> {
    let b = u.bias.map(|b| store.value(b));
    if transpose {
        conv::conv_transpose2d(x, store.value(u.weight), b, u.geom)
    } else {
        conv::conv2d(x, store.value(u.weight), b, u.geom)
    }
}

impl Network {
    fn forward_graph<F: Element>(&self, g: &mut Graph<F>, store: &ParamStore<F>, mut x: NodeId) -> Result<NodeId> {
        for unit in &self.units {
            x = match unit {
                Unit::Conv(u) => graph_conv(g, store, x, u, false)?,
                Unit::ConvTranspose(u) => graph_conv(g, store, x, u, true)?,
                Unit::Relu => g.relu(x)?,
                Unit::Residual { expand, project } => {
                    let h = g.relu(x)?;
                    let h = graph_conv(g, store, h, expand, false)?;
                    let h = g.relu(h)?;
                    let h = graph_conv(g, store, h, project, false)?;
                    g.add(x, h)?
                }
            };
        }
        Ok(x)
    }

    fn forward<F: Element>(&self, store: &ParamStore<F>, x: &Tensor<F>) -> Result<Tensor<F>> {
        let mut x = x.clone();
        for unit in &self.units {
            x = match unit {
                Unit::Conv(u) => eval_conv(store, &x, u, false)?,
                Unit::ConvTranspose(u) => eval_conv(store, &x, u, true)?,
                Unit::Relu => conv::relu(&x),
                Unit::Residual { expand, project } => {
                    let h = eval_conv(store, &conv::relu(&x), expand, false)?;
                    let h = eval_conv(store, &conv::relu(&h), project, false)?;
                    x.zip_map(&h, |a, b| a + b)?
                }
            };
            x.ensure_finite("forward")?;
        }
        Ok(x)
    }
}

/// Encoders, pre-quantization convolutions, decoders and the shared codebook.
#[derive(Clone, Debug)]
pub struct MultimodalVqVae<F> {
    spec: ModelSpec,
    params: ParamStore<F>,
    encoders: Vec<Network>,
    pre_vq: Vec<ConvUnit>,
    decoders: Vec<Network>,
    pub codebook: Codebook<F>,
}

impl<F: Element> MultimodalVqVae<F> {
    /// Allocates and initialises every parameter after checking the shape algebra.
    pub fn build(spec: ModelSpec, k: usize, seed: u64) -> Result<Self> {
        spec.validate()?;
        if k == 0 {
            return Err(Error::Config(vec!["codebook size k must be at least 1".into()]));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let (mut encoders, mut pre_vq, mut decoders) = (Vec::new(), Vec::new(), Vec::new());
        {
            let mut b = Builder { store: &mut params, rng: &mut rng };
            for (m, input) in spec.inputs.iter().enumerate() {
                let (enc, c) = b.network(&format!("enc{m}"), &spec.encoder, input[0], input[0]);
                encoders.push(enc);
                pre_vq.push(b.conv(&format!("pre_vq{m}"), c, spec.latent_channels, ConvGeometry::pointwise(), true));
                let (dec, _) = b.network(&format!("dec{m}"), &spec.decoder, spec.latent_channels, input[0]);
                decoders.push(dec);
            }
        }
        let codebook = Codebook::random(k, spec.latent_channels, &mut rng)?;
        Ok(Self {
            spec,
            params,
            encoders,
            pre_vq,
            decoders,
            codebook,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.params
    }

    pub fn modalities(&self) -> usize {
        self.spec.modalities()
    }

    fn check_input(&self, modality: usize, x: &Tensor<F>) -> Result<()> {
        if modality >= self.modalities() {
            return Err(Error::contract(format!("modality {modality} out of range ({} modalities)", self.modalities())));
        }
        let [_, c, h, w] = x.dims4("encode")?;
        let want = self.spec.inputs[modality];
        if [c, h, w] != want {
            return Err(Error::Shape {
                op: "encode",
                lhs: want.to_vec(),
                rhs: vec![c, h, w],
            });
        }
        Ok(())
    }

    fn check_latent(&self, modality: usize, q: &Tensor<F>) -> Result<()> {
        if modality >= self.modalities() {
            return Err(Error::contract(format!("modality {modality} out of range")));
        }
        let [_, c, h, w] = q.dims4("decode")?;
        if (c, (h, w)) != (self.spec.latent_channels, self.spec.latent) {
            return Err(Error::Shape {
                op: "decode",
                lhs: vec![self.spec.latent_channels, self.spec.latent.0, self.spec.latent.1],
                rhs: vec![c, h, w],
            });
        }
        Ok(())
    }

    /// Encoder plus pre-quantization conv, recorded on `g`.
    pub fn encode_node(&self, g: &mut Graph<F>, modality: usize, x: NodeId) -> Result<NodeId> {
        self.check_input(modality, g.value(x))?;
        let h = self.encoders[modality].forward_graph(g, &self.params, x)?;
        graph_conv(g, &self.params, h, &self.pre_vq[modality], false)
    }

    pub fn decode_node(&self, g: &mut Graph<F>, modality: usize, q: NodeId) -> Result<NodeId> {
        self.check_latent(modality, g.value(q))?;
        self.decoders[modality].forward_graph(g, &self.params, q)
    }

    /// `[B, C, H, W]` to `[B, d, h_e, w_e]` without recording a graph.
    pub fn encode(&self, modality: usize, x: &Tensor<F>) -> Result<Tensor<F>> {
        self.check_input(modality, x)?;
        let h = self.encoders[modality].forward(&self.params, x)?;
        eval_conv(&self.params, &h, &self.pre_vq[modality], false)
    }

    pub fn decode(&self, modality: usize, q: &Tensor<F>) -> Result<Tensor<F>> {
        self.check_latent(modality, q)?;
        self.decoders[modality].forward(&self.params, q)
    }

    /// Replaces parameters and codebook with ones loaded elsewhere.
    pub fn assign(&mut self, named: Vec<(String, Tensor<F>)>, codebook: Codebook<F>) -> Result<()> {
        if named.len() != self.params.len() {
            return Err(Error::format(format!(
                "checkpoint has {} parameters, model expects {}",
                named.len(),
                self.params.len()
            )));
        }
        for (name, t) in named {
            let id = self
                .params
                .find(&name)
                .ok_or_else(|| Error::format(format!("unexpected parameter `{name}`")))?;
            self.params.set_value(id, t)?;
        }
        if codebook.d() != self.spec.latent_channels {
            return Err(Error::format("codebook dimension disagrees with the model"));
        }
        self.codebook = codebook;
        Ok(())
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MVQK";
pub const CHECKPOINT_VERSION: u8 = 1;

/// Writes the model as: magic `MVQK`, version u8, u32 LE manifest length,
/// the text manifest (architecture, codebook settings, then `extra`
/// entries), u32 LE entry count, and per entry a u16 LE name length, the
/// name and one tensor container.
pub fn write_checkpoint<F: Element, W: Write>(mut w: W, model: &MultimodalVqVae<F>, extra: &[(String, String)]) -> Result<()> {
    let mut manifest = model.spec.to_manifest();
    manifest.push_str(&format!(
        "k={}\ndecay={}\nlaplace_eps={}\ndtype={}\n",
        model.codebook.k(),
        model.codebook.decay(),
        model.codebook.laplace_eps(),
        F::DTYPE.name()
    ));
    for (key, value) in extra {
        if key.contains('=') || key.contains('\n') || value.contains('\n') {
            return Err(Error::contract(format!("metadata entry `{key}` cannot be stored in a manifest")));
        }
        manifest.push_str(&format!("{key}={value}\n"));
    }
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&[CHECKPOINT_VERSION])?;
    w.write_all(&(manifest.len() as u32).to_le_bytes())?;
    w.write_all(manifest.as_bytes())?;
    let cb = &model.codebook;
    let mut entries: Vec<(&str, &Tensor<F>)> = model.params.ids().map(|id| (model.params.name(id), model.params.value(id))).collect();
    entries.push(("codebook.embeddings", cb.embeddings()));
    entries.push(("codebook.ema_cluster_size", cb.cluster_size()));
    entries.push(("codebook.ema_embed_sum", cb.embed_sum()));
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, t) in entries {
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        tensor::write_container(&mut w, t)?;
    }
    Ok(())
}

/// Reads a checkpoint; returns the model and the full manifest entries.
pub fn read_checkpoint<F: Element, R: Read>(mut r: R) -> Result<(MultimodalVqVae<F>, Vec<(String, String)>)> {
    let mut head = [0u8; 9];
    r.read_exact(&mut head).map_err(|_| Error::format("truncated checkpoint header"))?;
    if &head[..4] != CHECKPOINT_MAGIC {
        return Err(Error::format("not a checkpoint (bad magic)"));
    }
    if head[4] != CHECKPOINT_VERSION {
        return Err(Error::format(format!("unsupported checkpoint version {}", head[4])));
    }
    let len = u32::from_le_bytes(head[5..9].try_into().expect("4 bytes")) as usize;
    let mut text = vec![0u8; len];
    r.read_exact(&mut text).map_err(|_| Error::format("truncated checkpoint manifest"))?;
    let text = String::from_utf8(text).map_err(|_| Error::format("checkpoint manifest is not UTF-8"))?;
    let kv = parse_kv(&text);
    let get = |key: &str| -> Result<&str> {
        kv.iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::format(format!("checkpoint manifest lacks `{key}`")))
    };
    let num = |key: &str| -> Result<f64> { get(key)?.parse().map_err(|_| Error::format(format!("bad `{key}` in checkpoint"))) };
    let spec = ModelSpec::from_manifest(&text)?;
    let k = num("k")? as usize;
    let mut model = MultimodalVqVae::<F>::build(spec, k, 0)?;

    let mut count = [0u8; 4];
    r.read_exact(&mut count).map_err(|_| Error::format("truncated checkpoint"))?;
    let mut named = Vec::new();
    let mut codebook = [None, None, None];
    for _ in 0..u32::from_le_bytes(count) {
        let mut nl = [0u8; 2];
        r.read_exact(&mut nl).map_err(|_| Error::format("truncated checkpoint entry"))?;
        let mut name = vec![0u8; u16::from_le_bytes(nl) as usize];
        r.read_exact(&mut name).map_err(|_| Error::format("truncated checkpoint entry"))?;
        let name = String::from_utf8(name).map_err(|_| Error::format("entry name is not UTF-8"))?;
        let t: Tensor<F> = tensor::read_container(&mut r)?.into_tensor();
        match name.as_str() {
            "codebook.embeddings" => codebook[0] = Some(t),
            "codebook.ema_cluster_size" => codebook[1] = Some(t),
            "codebook.ema_embed_sum" => codebook[2] = Some(t),
            _ => named.push((name, t)),
        }
    }
    let [Some(e), Some(c), Some(s)] = codebook else {
        return Err(Error::format("checkpoint lacks codebook tensors"));
    };
    let codebook = Codebook::from_parts(e, c, s, num("decay")?, num("laplace_eps")?)?;
    if codebook.k() != k {
        return Err(Error::format("codebook size disagrees with manifest"));
    }
    model.assign(named, codebook)?;
    Ok((model, kv))
}

pub fn save_checkpoint<F: Element>(path: &Path, model: &MultimodalVqVae<F>, extra: &[(String, String)]) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, model, extra)?;
    // write-then-rename so an interrupted save never clobbers the previous file
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, buf)?;
    std::fs::rename(tmp, path)?;
    Ok(())
}

pub fn load_checkpoint<F: Element>(path: &Path) -> Result<(MultimodalVqVae<F>, Vec<(String, String)>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::data(format!("cannot read checkpoint {}: {e}", path.display())))?;
    read_checkpoint(bytes.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_encoder_shapes() {
        let csi = ModelSpec::csi_feedback(2, 28, 8);
        let trace = csi.trace_encoder(0).unwrap();
        assert_eq!(trace[0], [64, 14, 8]);
        assert_eq!(trace[2], [128, 8, 8]);
        assert_eq!(*trace.last().unwrap(), [128, 8, 8]);

        let wifi = ModelSpec::wifi_csi(2);
        let trace = wifi.trace_encoder(1).unwrap();
        assert_eq!(trace[0], [64, 112, 112]);
        assert_eq!(trace[2], [128, 56, 56]);
        assert_eq!(*trace.last().unwrap(), [128, 56, 56]);

        let ms = ModelSpec::mnist_svhn();
        for m in 0..2 {
            let trace = ms.trace_encoder(m).unwrap();
            assert_eq!(trace[0], [64, 16, 16]);
            assert_eq!(*trace.last().unwrap(), [128, 8, 8]);
        }
    }

    #[test]
    fn reference_decoder_shapes() {
        let csi = ModelSpec::csi_feedback(2, 28, 8);
        let trace = csi.trace_decoder(0).unwrap();
        assert_eq!(trace[2], [64, 15, 8]);
        assert_eq!(*trace.last().unwrap(), [2, 28, 8]);
        let ms = ModelSpec::mnist_svhn();
        assert_eq!(*ms.trace_decoder(0).unwrap().last().unwrap(), [1, 32, 32]);
        assert_eq!(*ms.trace_decoder(1).unwrap().last().unwrap(), [3, 32, 32]);
        for e in Experiment::ALL {
            ModelSpec::for_experiment(e).validate().unwrap();
        }
    }

    #[test]
    fn variants_hit_their_latents() {
        let base = ModelSpec::csi_feedback(2, 28, 8);
        assert_eq!(ModelSpec::variant_encoder(&base, (8, 8)).unwrap(), base);
        for target in CSI_LATENTS {
            let v = ModelSpec::variant_encoder(&base, target).unwrap();
            let last = *v.trace_encoder(0).unwrap().last().unwrap();
            assert_eq!(last, [128, target.0, target.1]);
            assert_eq!(*v.trace_decoder(1).unwrap().last().unwrap(), [2, 28, 8]);
        }
        let err = ModelSpec::variant_encoder(&base, (3, 5)).unwrap_err();
        assert!(err.to_string().contains("28x8, 8x8, 4x8, 4x4, 2x2"), "{err}");
    }

    #[test]
    fn build_error_names_layer() {
        let mut spec = ModelSpec::csi_feedback(1, 28, 8);
        spec.inputs = vec![[2, 1, 8]];
        let err = spec.validate().unwrap_err();
        assert!(matches!(err, Error::Build { .. }));
        assert!(err.to_string().contains("encoder[0]"), "{err}");
    }

    #[test]
    fn layer_text_round_trip() {
        for e in Experiment::ALL {
            let spec = ModelSpec::for_experiment(e);
            assert_eq!(ModelSpec::from_manifest(&spec.to_manifest()).unwrap(), spec);
        }
        let l: Layer = "conv 128 1x1 s1x1 p0x0 nobias".parse().unwrap();
        assert_eq!(l, Layer::Conv { out: Channels::Fixed(128), geom: ConvGeometry::pointwise(), bias: false });
        assert!("conv 12".parse::<Layer>().is_err());
    }

    #[test]
    fn zero_input_gives_finite_declared_shapes() {
        let spec = ModelSpec::csi_feedback(2, 28, 8);
        let model = MultimodalVqVae::<f32>::build(spec, 16, 1).unwrap();
        let x = Tensor::zeros(vec![3, 2, 28, 8]);
        let z = model.encode(0, &x).unwrap();
        assert_eq!(z.shape(), [3, 128, 8, 8]);
        let y = model.decode(1, &z).unwrap();
        assert_eq!(y.shape(), [3, 2, 28, 8]);
        assert!(model.encode(0, &Tensor::zeros(vec![1, 2, 27, 8])).is_err());
    }

    #[test]
    fn residual_blocks_are_shape_preserving_and_non_trivial() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut b = Builder { store: &mut store, rng: &mut rng };
        let (net, c) = b.network("r", &[Layer::residual_stack()], 8, 8);
        assert_eq!(c, 8);
        let x = Tensor::from_fn(vec![2, 8, 5, 4], |i| ((i * 37 % 11) as f64 - 5.0) / 5.0);
        let y = net.forward(&store, &x).unwrap();
        assert_eq!(y.shape(), x.shape());
        // without the skip, the block output is just the branch
        let Unit::Residual { expand, project } = net.units[0] else { panic!() };
        let branch = eval_conv(&store, &conv::relu(&eval_conv(&store, &conv::relu(&x), &expand, false).unwrap()), &project, false).unwrap();
        let with_skip = x.zip_map(&branch, |a, b| a + b).unwrap();
        assert_ne!(branch, with_skip);
    }

    #[test]
    fn graph_and_eval_paths_agree() {
        let spec = ModelSpec::csi_feedback(1, 28, 8);
        let model = MultimodalVqVae::<f64>::build(spec, 8, 2).unwrap();
        let x = Tensor::from_fn(vec![2, 2, 28, 8], |i| (i as f64 * 0.01).sin());
        let mut g = Graph::new();
        let xi = g.input(x.clone()).unwrap();
        let z = model.encode_node(&mut g, 0, xi).unwrap();
        let y = model.decode_node(&mut g, 0, z).unwrap();
        let direct = model.decode(0, &model.encode(0, &x).unwrap()).unwrap();
        assert_eq!(g.value(y), &direct);
    }

    #[test]
    fn build_is_seed_deterministic() {
        let a = MultimodalVqVae::<f32>::build(ModelSpec::mnist_svhn(), 32, 9).unwrap();
        let b = MultimodalVqVae::<f32>::build(ModelSpec::mnist_svhn(), 32, 9).unwrap();
        for id in a.params().ids() {
            assert_eq!(a.params().value(id), b.params().value(id));
        }
        assert_eq!(a.codebook, b.codebook);
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let spec = ModelSpec::variant_encoder(&ModelSpec::csi_feedback(2, 28, 8), (4, 4)).unwrap();
        let mut model = MultimodalVqVae::<f32>::build(spec, 64, 3).unwrap();
        let rows = Tensor::from_fn(vec![10, 128], |i| (i as f32 * 0.1).cos());
        model.codebook.ema_update(rows.data(), &[1, 2, 3, 4, 5, 6, 7, 8, 9, 0]).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &model, &[("epoch".into(), "7".into())]).unwrap();
        let (loaded, meta) = read_checkpoint::<f32, _>(buf.as_slice()).unwrap();
        assert_eq!(loaded.spec(), model.spec());
        assert_eq!(loaded.codebook, model.codebook);
        for id in model.params().ids() {
            assert_eq!(loaded.params().value(id), model.params().value(id));
        }
        assert!(meta.contains(&("epoch".into(), "7".into())));
        assert!(read_checkpoint::<f32, _>(&buf[..buf.len() - 3]).is_err());
    }
}
