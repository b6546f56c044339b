//! Network building blocks and the teacher/student architectures.
//!
//! A [`ModelSpec`] is split into a mobile side (`encoder`) and a server side
//! (`decoder` followed by `tail`). For a teacher the decoder is empty and the
//! encoder output is the feature `h` that students learn to reproduce.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::optim::Params;
use crate::autodiff::{softplus, softplus_inverse, ConvGeometry, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

mod checkpoint;
mod model;

pub use checkpoint::{Checkpoint, CheckpointMeta, Stage, FORMAT_VERSION};
pub use model::{argmax_rows, build_student, expected_params, Model};

/// Lower bound added to every GDN `beta`.
pub const BETA_MIN: f64 = 1e-6;

/// Effective off-diagonal `gamma` at initialization; softplus cannot reach exactly zero.
const GAMMA_OFF_DIAGONAL_INIT: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv { in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize },
    Relu,
    Gdn { channels: usize },
    Igdn { channels: usize },
    Upsample2,
    /// Two 3x3 convs with an identity shortcut, followed by ReLU.
    Residual { channels: usize },
    /// Strided residual block with a 1x1 projection shortcut.
    DownResidual { in_ch: usize, out_ch: usize },
    GlobalAvgPool,
    Linear { in_features: usize, out_features: usize },
}

/// Shape of an activation for a single sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ActShape {
    Map { c: usize, h: usize, w: usize },
    Flat(usize),
}

impl ActShape {
    pub fn numel(&self) -> usize {
        match *self {
            ActShape::Map { c, h, w } => c * h * w,
            ActShape::Flat(n) => n,
        }
    }

    pub fn batched(&self, n: usize) -> Vec<usize> {
        match *self {
            ActShape::Map { c, h, w } => vec![n, c, h, w],
            ActShape::Flat(f) => vec![n, f],
        }
    }

    pub fn from_dims(dims: &[usize]) -> Result<Self> {
        match dims {
            [c, h, w] => Ok(ActShape::Map { c: *c, h: *h, w: *w }),
            [n] => Ok(ActShape::Flat(*n)),
            _ => Err(Error::Shape(format!("unsupported activation dims {dims:?}"))),
        }
    }
}

fn conv_out(shape: ActShape, in_ch: usize, out_ch: usize, k: usize, s: usize, p: usize) -> Result<(ActShape, u64)> {
    let ActShape::Map { c, h, w } = shape else {
        return Err(Error::Shape(format!("conv expects a feature map, got {shape:?}")));
    };
    if c != in_ch {
        return Err(Error::Shape(format!("conv expects {in_ch} channels, got {c}")));
    }
    let geo = ConvGeometry::new(&[1, c, h, w], &[out_ch, in_ch, k, k], s, p, 1)?;
    Ok((ActShape::Map { c: out_ch, h: geo.out_height, w: geo.out_width }, geo.macs()))
}

impl LayerSpec {
    /// Output shape and multiply-accumulate count for one sample.
    pub fn infer(&self, input: ActShape) -> Result<(ActShape, u64)> {
        match *self {
            LayerSpec::Conv { in_ch, out_ch, kernel, stride, pad } => conv_out(input, in_ch, out_ch, kernel, stride, pad),
            LayerSpec::Relu => Ok((input, 0)),
            LayerSpec::Gdn { channels } | LayerSpec::Igdn { channels } => match input {
                ActShape::Map { c, h, w } if c == channels => Ok((input, (c * c * h * w) as u64)),
                _ => Err(Error::Shape(format!("GDN over {channels} channels got {input:?}"))),
            },
            LayerSpec::Upsample2 => match input {
                ActShape::Map { c, h, w } => Ok((ActShape::Map { c, h: 2 * h, w: 2 * w }, 0)),
                _ => Err(Error::Shape("upsample expects a feature map".into())),
            },
            LayerSpec::Residual { channels } => {
                let (a, m1) = conv_out(input, channels, channels, 3, 1, 1)?;
                let (b, m2) = conv_out(a, channels, channels, 3, 1, 1)?;
                Ok((b, m1 + m2))
            }
            LayerSpec::DownResidual { in_ch, out_ch } => {
                let (a, m1) = conv_out(input, in_ch, out_ch, 3, 2, 1)?;
                let (b, m2) = conv_out(a, out_ch, out_ch, 3, 1, 1)?;
                let (s, m3) = conv_out(input, in_ch, out_ch, 1, 2, 0)?;
                if s != b {
                    return Err(Error::Shape(format!("shortcut {s:?} does not match main path {b:?}")));
                }
                Ok((b, m1 + m2 + m3))
            }
            LayerSpec::GlobalAvgPool => match input {
                ActShape::Map { c, .. } => Ok((ActShape::Flat(c), 0)),
                _ => Err(Error::Shape("global pooling expects a feature map".into())),
            },
            LayerSpec::Linear { in_features, out_features } => {
                if input != ActShape::Flat(in_features) {
                    return Err(Error::Shape(format!("linear expects {in_features} features, got {input:?}")));
                }
                Ok((ActShape::Flat(out_features), (in_features * out_features) as u64))
            }
        }
    }

    /// `(suffix, shape)` of every parameter this layer owns.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let conv = |name: &str, i: usize, o: usize, k: usize| {
            vec![(format!("{name}weight"), vec![o, i, k, k]), (format!("{name}bias"), vec![o])]
        };
        match *self {
            LayerSpec::Conv { in_ch, out_ch, kernel, .. } => conv("", in_ch, out_ch, kernel),
            LayerSpec::Gdn { channels } | LayerSpec::Igdn { channels } => vec![
                ("beta".to_string(), vec![channels]),
                ("gamma".to_string(), vec![channels, channels]),
            ],
            LayerSpec::Residual { channels } => {
                let mut v = conv("conv1.", channels, channels, 3);
                v.extend(conv("conv2.", channels, channels, 3));
                v
            }
            LayerSpec::DownResidual { in_ch, out_ch } => {
                let mut v = conv("conv1.", in_ch, out_ch, 3);
                v.extend(conv("conv2.", out_ch, out_ch, 3));
                v.extend(conv("shortcut.", in_ch, out_ch, 1));
                v
            }
            LayerSpec::Linear { in_features, out_features } => vec![
                ("weight".to_string(), vec![out_features, in_features]),
                ("bias".to_string(), vec![out_features]),
            ],
            LayerSpec::Relu | LayerSpec::Upsample2 | LayerSpec::GlobalAvgPool => Vec::new(),
        }
    }
}

/// What sits between the mobile and the server side.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Bottleneck {
    /// Teacher: no compression, features pass through.
    Identity,
    /// Rounded latents entropy-coded under a learned factorized prior.
    Entropic { channels: usize },
    /// Post-training 8-bit affine quantization of the bottleneck activation.
    AffineU8 { channels: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_shape: [usize; 3],
    pub encoder: Vec<LayerSpec>,
    pub bottleneck: Bottleneck,
    pub decoder: Vec<LayerSpec>,
    pub tail: Vec<LayerSpec>,
    pub num_classes: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Mobile,
    Server,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Section {
    Encoder,
    Decoder,
    Tail,
}

impl Section {
    pub fn prefix(self) -> &'static str {
        match self {
            Section::Encoder => "encoder",
            Section::Decoder => "decoder",
            Section::Tail => "tail",
        }
    }
}

/// Channel widths of the desk-scale teacher.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TeacherWidths {
    pub stage1: usize,
    pub stage2: usize,
}

impl Default for TeacherWidths {
    fn default() -> Self {
        Self { stage1: 8, stage2: 16 }
    }
}

impl ModelSpec {
    /// Small residual CNN: stem and first residual stage on the mobile side,
    /// second stage and classifier on the server side.
    pub fn teacher(input_shape: [usize; 3], widths: TeacherWidths, num_classes: usize) -> Self {
        Self {
            input_shape,
            encoder: vec![
                LayerSpec::Conv { in_ch: input_shape[0], out_ch: widths.stage1, kernel: 3, stride: 2, pad: 1 },
                LayerSpec::Relu,
                LayerSpec::Residual { channels: widths.stage1 },
            ],
            bottleneck: Bottleneck::Identity,
            decoder: Vec::new(),
            tail: Self::classifier_tail(widths, num_classes),
            num_classes,
        }
    }

    pub fn classifier_tail(widths: TeacherWidths, num_classes: usize) -> Vec<LayerSpec> {
        vec![
            LayerSpec::DownResidual { in_ch: widths.stage1, out_ch: widths.stage2 },
            LayerSpec::GlobalAvgPool,
            LayerSpec::Linear { in_features: widths.stage2, out_features: num_classes },
        ]
    }

    /// Entropic student: GDN encoder down to `latent_channels` at 1/4 resolution,
    /// IGDN decoder back to the teacher's split feature, then the teacher tail.
    pub fn entropic_student(teacher: &ModelSpec, latent_channels: usize, hidden: usize) -> Result<Self> {
        let c_in = teacher.input_shape[0];
        let h = teacher.split_feature_shape()?;
        let ActShape::Map { c: h_ch, .. } = h else {
            return Err(Error::Shape("teacher split feature must be a map".into()));
        };
        let spec = Self {
            input_shape: teacher.input_shape,
            encoder: vec![
                LayerSpec::Conv { in_ch: c_in, out_ch: hidden, kernel: 3, stride: 2, pad: 1 },
                LayerSpec::Gdn { channels: hidden },
                LayerSpec::Conv { in_ch: hidden, out_ch: hidden, kernel: 3, stride: 2, pad: 1 },
                LayerSpec::Gdn { channels: hidden },
                LayerSpec::Conv { in_ch: hidden, out_ch: latent_channels, kernel: 3, stride: 1, pad: 1 },
            ],
            bottleneck: Bottleneck::Entropic { channels: latent_channels },
            decoder: vec![
                LayerSpec::Conv { in_ch: latent_channels, out_ch: hidden, kernel: 3, stride: 1, pad: 1 },
                LayerSpec::Igdn { channels: hidden },
                LayerSpec::Upsample2,
                LayerSpec::Conv { in_ch: hidden, out_ch: hidden, kernel: 3, stride: 1, pad: 1 },
                LayerSpec::Igdn { channels: hidden },
                LayerSpec::Conv { in_ch: hidden, out_ch: h_ch, kernel: 1, stride: 1, pad: 0 },
            ],
            tail: teacher.tail.clone(),
            num_classes: teacher.num_classes,
        };
        spec.validate()?;
        if spec.decoder_output_shape()? != h {
            return Err(Error::Shape(format!(
                "student decoder produces {:?}, teacher split feature is {h:?}",
                spec.decoder_output_shape()?
            )));
        }
        Ok(spec)
    }

    /// Channel-reduction baseline: ReLU conv encoder/decoder, 8-bit bottleneck.
    pub fn channel_reduced_student(teacher: &ModelSpec, bottleneck_channels: usize, hidden: usize) -> Result<Self> {
        let c_in = teacher.input_shape[0];
        let ActShape::Map { c: h_ch, .. } = teacher.split_feature_shape()? else {
            return Err(Error::Shape("teacher split feature must be a map".into()));
        };
        let spec = Self {
            input_shape: teacher.input_shape,
            encoder: vec![
                LayerSpec::Conv { in_ch: c_in, out_ch: hidden, kernel: 3, stride: 2, pad: 1 },
                LayerSpec::Relu,
                LayerSpec::Conv { in_ch: hidden, out_ch: hidden, kernel: 3, stride: 2, pad: 1 },
                LayerSpec::Relu,
                LayerSpec::Conv { in_ch: hidden, out_ch: bottleneck_channels, kernel: 3, stride: 1, pad: 1 },
            ],
            bottleneck: Bottleneck::AffineU8 { channels: bottleneck_channels },
            decoder: vec![
                LayerSpec::Conv { in_ch: bottleneck_channels, out_ch: hidden, kernel: 3, stride: 1, pad: 1 },
                LayerSpec::Relu,
                LayerSpec::Upsample2,
                LayerSpec::Conv { in_ch: hidden, out_ch: hidden, kernel: 3, stride: 1, pad: 1 },
                LayerSpec::Relu,
                LayerSpec::Conv { in_ch: hidden, out_ch: h_ch, kernel: 1, stride: 1, pad: 0 },
            ],
            tail: teacher.tail.clone(),
            num_classes: teacher.num_classes,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Same model with the final linear layer resized to `num_classes` outputs.
    pub fn with_num_classes(&self, num_classes: usize) -> Result<Self> {
        let mut spec = self.clone();
        match spec.tail.last_mut() {
            Some(LayerSpec::Linear { out_features, .. }) => *out_features = num_classes,
            _ => return Err(Error::Shape("tail does not end in a linear layer".into())),
        }
        spec.num_classes = num_classes;
        spec.validate()?;
        Ok(spec)
    }

    fn input_act(&self) -> ActShape {
        let [c, h, w] = self.input_shape;
        ActShape::Map { c, h, w }
    }

    fn run_shapes(layers: &[LayerSpec], mut shape: ActShape) -> Result<(ActShape, u64)> {
        let mut macs = 0;
        for (i, l) in layers.iter().enumerate() {
            let (s, m) = l.infer(shape).map_err(|e| Error::Shape(format!("layer {i} ({l:?}): {e}")))?;
            shape = s;
            macs += m;
        }
        Ok((shape, macs))
    }

    /// Output of the mobile side (the bottleneck for students, `h` for teachers).
    pub fn encoder_output_shape(&self) -> Result<ActShape> {
        Ok(Self::run_shapes(&self.encoder, self.input_act())?.0)
    }

    /// Shape of `h`/`ĥ`: the tensor entering the tail.
    pub fn decoder_output_shape(&self) -> Result<ActShape> {
        Ok(Self::run_shapes(&self.decoder, self.encoder_output_shape()?)?.0)
    }

    pub fn split_feature_shape(&self) -> Result<ActShape> {
        self.decoder_output_shape()
    }

    pub fn validate(&self) -> Result<()> {
        let enc = self.encoder_output_shape()?;
        match self.bottleneck {
            Bottleneck::Identity => {}
            Bottleneck::Entropic { channels } | Bottleneck::AffineU8 { channels } => match enc {
                ActShape::Map { c, .. } if c == channels => {}
                _ => {
                    return Err(Error::Shape(format!(
                        "bottleneck declares {channels} channels, encoder produces {enc:?}"
                    )))
                }
            },
        }
        let (out, _) = Self::run_shapes(&self.tail, self.decoder_output_shape()?)?;
        if out != ActShape::Flat(self.num_classes) {
            return Err(Error::Shape(format!("tail produces {out:?}, expected {} classes", self.num_classes)));
        }
        Ok(())
    }

    pub fn section(&self, s: Section) -> &[LayerSpec] {
        match s {
            Section::Encoder => &self.encoder,
            Section::Decoder => &self.decoder,
            Section::Tail => &self.tail,
        }
    }

    /// Every parameter name and shape, in a fixed order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for section in [Section::Encoder, Section::Decoder, Section::Tail] {
            for (i, layer) in self.section(section).iter().enumerate() {
                for (suffix, shape) in layer.param_shapes() {
                    out.push((format!("{}.{i}.{suffix}", section.prefix()), shape));
                }
            }
        }
        out
    }

    /// Exact parameter count on one side of the split.
    pub fn count_params(&self, side: Side) -> usize {
        let sections: &[Section] = match side {
            Side::Mobile => &[Section::Encoder],
            Side::Server => &[Section::Decoder, Section::Tail],
        };
        sections
            .iter()
            .flat_map(|s| self.section(*s).iter())
            .flat_map(|l| l.param_shapes())
            .map(|(_, shape)| shape.iter().product::<usize>())
            .sum()
    }

    /// Multiply-accumulates per sample on each side.
    pub fn macs(&self, side: Side) -> Result<u64> {
        let (enc_shape, enc) = Self::run_shapes(&self.encoder, self.input_act())?;
        match side {
            Side::Mobile => Ok(enc),
            Side::Server => {
                let (dec_shape, dec) = Self::run_shapes(&self.decoder, enc_shape)?;
                let (_, tail) = Self::run_shapes(&self.tail, dec_shape)?;
                Ok(dec + tail)
            }
        }
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("spec serializes");
        hex::encode(Sha256::digest(json))
    }
}

/// Positive-constrained GDN parameters after reparameterization.
#[derive(Clone, Debug, PartialEq)]
pub struct GdnParams {
    pub beta: Vec<f64>,
    /// Row-major `channels x channels`.
    pub gamma: Vec<f64>,
}

impl GdnParams {
    pub fn channels(&self) -> usize {
        self.beta.len()
    }

    /// Maps stored unconstrained values through softplus (plus the beta floor).
    pub fn from_raw(beta_raw: &Tensor, gamma_raw: &Tensor) -> Self {
        Self {
            beta: beta_raw.data().iter().map(|&v| softplus(v) + BETA_MIN).collect(),
            gamma: gamma_raw.data().iter().map(|&v| softplus(v)).collect(),
        }
    }

    /// Unconstrained tensors that map back onto these parameters.
    pub fn to_raw(&self) -> (Tensor, Tensor) {
        let c = self.channels();
        let beta = self.beta.iter().map(|&b| softplus_inverse((b - BETA_MIN).max(1e-300))).collect();
        let gamma = self.gamma.iter().map(|&g| softplus_inverse(g.max(1e-300))).collect();
        (Tensor::from_parts(vec![c], beta), Tensor::from_parts(vec![c, c], gamma))
    }

    fn denominators(&self, x: &Tensor) -> Result<Vec<f64>> {
        let c = self.channels();
        if x.rank() != 3 || x.shape()[0] != c {
            return Err(Error::Shape(format!("GDN over {c} channels got input {:?}", x.shape())));
        }
        let plane = x.shape()[1] * x.shape()[2];
        let mut den = vec![0.0; c * plane];
        for i in 0..c {
            for p in 0..plane {
                let mut s = self.beta[i];
                for j in 0..c {
                    s += self.gamma[i * c + j] * x.data()[j * plane + p].abs();
                }
                den[i * plane + p] = s;
            }
        }
        Ok(den)
    }
}

/// Simplified GDN on a single `[C, H, W]` sample: `y_i = x_i / (β_i + Σ_j γ_ij |x_j|)`.
pub fn gdn_forward(x: &Tensor, params: &GdnParams) -> Result<Tensor> {
    let den = params.denominators(x)?;
    Ok(Tensor::from_parts(x.shape().to_vec(), x.data().iter().zip(&den).map(|(v, d)| v / d).collect()))
}

/// Inverse simplified GDN: `y_i = x_i · (β_i + Σ_j γ_ij |x_j|)`.
pub fn igdn_forward(x: &Tensor, params: &GdnParams) -> Result<Tensor> {
    let den = params.denominators(x)?;
    Ok(Tensor::from_parts(x.shape().to_vec(), x.data().iter().zip(&den).map(|(v, d)| v * d).collect()))
}

/// Decides which parameters become trainable graph leaves.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Trainable {
    All,
    Nothing,
    Prefixes(Vec<String>),
}

impl Trainable {
    pub fn prefixes(p: &[&str]) -> Self {
        Trainable::Prefixes(p.iter().map(|s| s.to_string()).collect())
    }

    pub fn contains(&self, name: &str) -> bool {
        match self {
            Trainable::All => true,
            Trainable::Nothing => false,
            Trainable::Prefixes(p) => p.iter().any(|pre| name.starts_with(pre.as_str())),
        }
    }
}

/// Binds named parameters into a graph once each.
pub struct Binder<'a> {
    params: &'a Params,
    trainable: Trainable,
    bound: BTreeMap<String, Var>,
}

impl<'a> Binder<'a> {
    pub fn new(params: &'a Params, trainable: Trainable) -> Self {
        Self { params, trainable, bound: BTreeMap::new() }
    }

    pub fn get(&mut self, g: &mut Graph, name: &str) -> Result<Var> {
        if let Some(v) = self.bound.get(name) {
            return Ok(*v);
        }
        let t = self
            .params
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?
            .clone();
        let v = if self.trainable.contains(name) { g.param(name, t)? } else { g.constant(t)? };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }
}

fn gdn_graph(g: &mut Graph, b: &mut Binder, prefix: &str, channels: usize, x: Var, inverse: bool) -> Result<Var> {
    let beta_raw = b.get(g, &format!("{prefix}beta"))?;
    let gamma_raw = b.get(g, &format!("{prefix}gamma"))?;
    let beta = g.softplus(beta_raw);
    let beta = g.offset(beta, BETA_MIN);
    let gamma = g.softplus(gamma_raw);
    let gamma = g.reshape(gamma, &[channels, channels, 1, 1])?;
    let mag = g.abs(x);
    let den = g.conv2d(mag, gamma, Some(beta), 1, 0, 1)?;
    if inverse {
        g.mul(x, den)
    } else {
        g.div(x, den)
    }
}

fn conv_graph(g: &mut Graph, b: &mut Binder, prefix: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
    let w = b.get(g, &format!("{prefix}weight"))?;
    let bias = b.get(g, &format!("{prefix}bias"))?;
    g.conv2d(x, w, Some(bias), stride, pad, 1)
}

/// Appends one layer to the graph.
pub fn layer_graph(g: &mut Graph, b: &mut Binder, layer: &LayerSpec, prefix: &str, x: Var) -> Result<Var> {
    match *layer {
        LayerSpec::Conv { stride, pad, .. } => conv_graph(g, b, prefix, x, stride, pad),
        LayerSpec::Relu => Ok(g.relu(x)),
        LayerSpec::Gdn { channels } => gdn_graph(g, b, prefix, channels, x, false),
        LayerSpec::Igdn { channels } => gdn_graph(g, b, prefix, channels, x, true),
        LayerSpec::Upsample2 => g.upsample2(x),
        LayerSpec::Residual { .. } => {
            let a = conv_graph(g, b, &format!("{prefix}conv1."), x, 1, 1)?;
            let a = g.relu(a);
            let a = conv_graph(g, b, &format!("{prefix}conv2."), a, 1, 1)?;
            let s = g.add(a, x)?;
            Ok(g.relu(s))
        }
        LayerSpec::DownResidual { .. } => {
            let a = conv_graph(g, b, &format!("{prefix}conv1."), x, 2, 1)?;
            let a = g.relu(a);
            let a = conv_graph(g, b, &format!("{prefix}conv2."), a, 1, 1)?;
            let s = conv_graph(g, b, &format!("{prefix}shortcut."), x, 2, 0)?;
            let y = g.add(a, s)?;
            Ok(g.relu(y))
        }
        LayerSpec::GlobalAvgPool => {
            let s = g.value(x).shape().to_vec();
            if s.len() != 4 || s[2] != s[3] {
                return Err(Error::Shape(format!("global pooling expects square maps, got {s:?}")));
            }
            let p = g.avgpool2d(x, s[2])?;
            g.reshape(p, &[s[0], s[1]])
        }
        LayerSpec::Linear { .. } => {
            let w = b.get(g, &format!("{prefix}weight"))?;
            let bias = b.get(g, &format!("{prefix}bias"))?;
            g.linear(x, w, Some(bias))
        }
    }
}

/// Runs one section of a model on a batched input.
pub fn section_graph(g: &mut Graph, b: &mut Binder, spec: &ModelSpec, section: Section, mut x: Var) -> Result<Var> {
    for (i, layer) in spec.section(section).iter().enumerate() {
        x = layer_graph(g, b, layer, &format!("{}.{i}.", section.prefix()), x)?;
    }
    Ok(x)
}

/// Fresh parameters for one section: He-scaled convs, GDN β=1 and γ≈0.1·I.
pub fn init_section(spec: &ModelSpec, section: Section, seed: u64) -> Params {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Params::new();
    for (i, layer) in spec.section(section).iter().enumerate() {
        let prefix = format!("{}.{i}.", section.prefix());
        match *layer {
            LayerSpec::Gdn { channels } | LayerSpec::Igdn { channels } => {
                let mut gamma = vec![GAMMA_OFF_DIAGONAL_INIT; channels * channels];
                for c in 0..channels {
                    gamma[c * channels + c] = 0.1;
                }
                let (beta, gamma) = GdnParams { beta: vec![1.0; channels], gamma }.to_raw();
                params.insert(format!("{prefix}beta"), beta);
                params.insert(format!("{prefix}gamma"), gamma);
            }
            _ => {
                for (suffix, shape) in layer.param_shapes() {
                    let t = if suffix.ends_with("bias") {
                        Tensor::zeros(shape)
                    } else {
                        let fan_in: usize = shape[1..].iter().product();
                        let std = (2.0 / fan_in as f64).sqrt();
                        let normal = Normal::new(0.0, std).expect("valid std");
                        let n: usize = shape.iter().product();
                        Tensor::from_parts(shape, (0..n).map(|_| normal.sample(&mut rng)).collect())
                    };
                    params.insert(format!("{prefix}{suffix}"), t);
                }
            }
        }
    }
    params
}

/// Fresh parameters for a whole model (all sections).
pub fn init_params(spec: &ModelSpec, seed: u64) -> Params {
    let mut p = init_section(spec, Section::Encoder, seed);
    p.extend(init_section(spec, Section::Decoder, seed.wrapping_add(1)));
    p.extend(init_section(spec, Section::Tail, seed.wrapping_add(2)));
    p
}

/// Uniform draw used by the entropy-model bias initialization.
pub(crate) fn uniform_tensor(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let u = Uniform::new(lo, hi);
    Tensor::from_parts(shape, (0..n).map(|_| u.sample(rng)).collect())
}

/// Hash over a group of parameters, used to assert freeze contracts.
pub fn params_hash(params: &Params, prefix: &str) -> String {
    let mut h = Sha256::new();
    for (name, t) in params.range(prefix.to_string()..) {
        if !name.starts_with(prefix) {
            break;
        }
        h.update(name.as_bytes());
        t.hash_into(&mut h);
    }
    hex::encode(h.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_teacher() -> ModelSpec {
        ModelSpec::teacher([3, 32, 32], TeacherWidths::default(), 10)
    }

    #[test]
    fn gdn_identity_when_gamma_zero() {
        let p = GdnParams { beta: vec![1.0, 1.0], gamma: vec![0.0; 4] };
        let x = Tensor::new(vec![2, 1, 2], vec![1.0, -2.0, 3.0, 0.5]).unwrap();
        assert_eq!(gdn_forward(&x, &p).unwrap(), x);
        assert_eq!(igdn_forward(&x, &p).unwrap(), x);
    }

    #[test]
    fn gdn_hand_evaluation() {
        let p = GdnParams { beta: vec![1.0, 1.0], gamma: vec![0.5; 4] };
        let x = Tensor::new(vec![2, 1, 1], vec![2.0, -1.0]).unwrap();
        let y = gdn_forward(&x, &p).unwrap();
        assert!((y.data()[0] - 0.8).abs() < 1e-15);
        assert!((y.data()[1] + 0.4).abs() < 1e-15);
    }

    #[test]
    fn igdn_hand_evaluation() {
        let p = GdnParams { beta: vec![1.0], gamma: vec![0.5] };
        let x = Tensor::new(vec![1, 1, 1], vec![3.0]).unwrap();
        assert_eq!(igdn_forward(&x, &p).unwrap().data(), &[7.5]);
    }

    #[test]
    fn gdn_zero_in_zero_out() {
        let p = GdnParams { beta: vec![0.3, 2.0], gamma: vec![0.1, 0.2, 0.3, 0.4] };
        let x = Tensor::zeros(vec![2, 3, 3]);
        assert_eq!(gdn_forward(&x, &p).unwrap(), x);
    }

    #[test]
    fn gdn_channel_mismatch() {
        let p = GdnParams { beta: vec![1.0], gamma: vec![0.0] };
        assert!(gdn_forward(&Tensor::zeros(vec![2, 1, 1]), &p).is_err());
    }

    #[test]
    fn graph_gdn_matches_direct_formula() {
        let p = GdnParams { beta: vec![0.7, 1.3], gamma: vec![0.2, 0.05, 0.4, 0.1] };
        let (br, gr) = p.to_raw();
        let params = Params::from([("l.beta".to_string(), br.clone()), ("l.gamma".to_string(), gr.clone())]);
        let x = Tensor::new(vec![2, 2, 2], vec![0.3, -1.2, 2.0, 0.1, -0.4, 0.9, 1.5, -2.2]).unwrap();
        let p = GdnParams::from_raw(&br, &gr);
        for inverse in [false, true] {
            let mut g = Graph::new();
            let mut b = Binder::new(&params, Trainable::Nothing);
            let xv = g.constant(x.reshape(vec![1, 2, 2, 2]).unwrap()).unwrap();
            let y = gdn_graph(&mut g, &mut b, "l.", 2, xv, inverse).unwrap();
            let direct = if inverse { igdn_forward(&x, &p) } else { gdn_forward(&x, &p) }.unwrap();
            for (a, d) in g.value(y).data().iter().zip(direct.data()) {
                assert!((a - d).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_param_count() {
        let l = LayerSpec::Conv { in_ch: 3, out_ch: 16, kernel: 3, stride: 1, pad: 1 };
        let n: usize = l.param_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum();
        assert_eq!(n, 448);
    }

    #[test]
    fn sides_sum_to_total() {
        let t = toy_teacher();
        let s = ModelSpec::entropic_student(&t, 16, 16).unwrap();
        let total: usize = s.param_shapes().iter().map(|(_, sh)| sh.iter().product::<usize>()).sum();
        assert_eq!(s.count_params(Side::Mobile) + s.count_params(Side::Server), total);
    }

    #[test]
    fn student_bottleneck_is_smaller_than_input() {
        let t = toy_teacher();
        let s = ModelSpec::entropic_student(&t, 16, 16).unwrap();
        let z = s.encoder_output_shape().unwrap();
        assert_eq!(z, ActShape::Map { c: 16, h: 8, w: 8 });
        assert!(z.numel() < 3 * 32 * 32);
        assert_eq!(s.decoder_output_shape().unwrap(), t.split_feature_shape().unwrap());
    }

    #[test]
    fn init_gdn_values() {
        let s = ModelSpec::entropic_student(&toy_teacher(), 16, 16).unwrap();
        let p = init_section(&s, Section::Encoder, 0);
        let gdn = GdnParams::from_raw(&p["encoder.1.beta"], &p["encoder.1.gamma"]);
        assert!(gdn.beta.iter().all(|b| (b - 1.0).abs() < 1e-9));
        assert!((gdn.gamma[0] - 0.1).abs() < 1e-9);
        assert!(gdn.gamma[1] < 0.01);
    }

    #[test]
    fn spec_hash_is_stable_and_sensitive() {
        let t = toy_teacher();
        assert_eq!(t.hash(), toy_teacher().hash());
        let s = ModelSpec::entropic_student(&t, 16, 16).unwrap();
        assert_ne!(t.hash(), s.hash());
    }
}
