//! The embedding encoder and the two baselines: a mirrored convolutional
//! autoencoder and a parametric softmax classifier head.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use ufl_autodiff::{ParamSet, Real, Tape, Tensor, Var};

use crate::data::{chips_to_tensor, Chip};
use crate::error::{Error, Result};
use crate::seed::mix;
use crate::ClassId;

/// One hidden layer; every hidden layer is followed by a ReLU.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Linear {
        out_features: usize,
    },
}

impl LayerSpec {
    pub fn conv(out_channels: usize) -> Self {
        LayerSpec::Conv {
            out_channels,
            kernel: 3,
            stride: 2,
            padding: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub input_height: usize,
    pub input_width: usize,
    pub input_channels: usize,
    /// Hidden layers; convolutions must precede any linear layer. A final
    /// linear projection to `embedding_dim` is always appended.
    pub layers: Vec<LayerSpec>,
    /// Average the last feature map over its spatial positions before the
    /// projection. Requires the last hidden layer to be a convolution.
    #[serde(default)]
    pub global_pool: bool,
    pub embedding_dim: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::with_channels(32, &[16, 32, 64], 128)
    }
}

impl EncoderConfig {
    /// Square RGB input and stride-2 3×3 convolutions with the given widths.
    pub fn with_channels(side: usize, channels: &[usize], embedding_dim: usize) -> Self {
        Self {
            input_height: side,
            input_width: side,
            input_channels: 3,
            layers: channels.iter().map(|&c| LayerSpec::conv(c)).collect(),
            global_pool: true,
            embedding_dim,
            seed: 0,
        }
    }

    /// Input edge length when the input is square.
    pub fn side(&self) -> Option<usize> {
        (self.input_height == self.input_width).then_some(self.input_height)
    }

    /// Activation shape `[channels, height, width]` (or `[features]` after a
    /// linear layer) following each hidden layer.
    fn plan(&self) -> Result<Vec<Vec<usize>>> {
        if self.embedding_dim < 2 {
            return Err(Error::Config("embedding_dim must be at least 2".into()));
        }
        if self.input_height == 0 || self.input_width == 0 || self.input_channels == 0 {
            return Err(Error::Config("input dimensions must be positive".into()));
        }
        let mut shape = vec![self.input_channels, self.input_height, self.input_width];
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            shape = match (*layer, shape.as_slice()) {
                (
                    LayerSpec::Conv {
                        out_channels,
                        kernel,
                        stride,
                        padding,
                    },
                    &[_, h, w],
                ) => {
                    if out_channels == 0 || kernel == 0 || stride == 0 {
                        return Err(Error::Config(format!("layer {i}: sizes must be positive")));
                    }
                    if h + 2 * padding < kernel || w + 2 * padding < kernel {
                        return Err(Error::Config(format!(
                            "layer {i}: kernel {kernel} larger than padded {h}x{w} input"
                        )));
                    }
                    let oh = (h + 2 * padding - kernel) / stride + 1;
                    let ow = (w + 2 * padding - kernel) / stride + 1;
                    vec![out_channels, oh, ow]
                }
                (LayerSpec::Conv { .. }, _) => {
                    return Err(Error::Config(format!(
                        "layer {i}: convolution after a linear layer"
                    )))
                }
                (LayerSpec::Linear { out_features: 0 }, _) => {
                    return Err(Error::Config(format!("layer {i}: zero out_features")))
                }
                (LayerSpec::Linear { out_features }, _) => vec![out_features],
            };
            out.push(shape.clone());
        }
        if self.global_pool && shape.len() != 3 {
            return Err(Error::Config(
                "global pooling needs a convolutional last layer".into(),
            ));
        }
        Ok(out)
    }

    /// Length of the vector fed to the embedding projection.
    fn code_input_len(&self, plan: &[Vec<usize>]) -> usize {
        let last = plan
            .last()
            .cloned()
            .unwrap_or_else(|| self.input_shape().to_vec());
        if self.global_pool {
            last[0]
        } else {
            last.iter().product()
        }
    }

    fn input_shape(&self) -> [usize; 3] {
        [self.input_channels, self.input_height, self.input_width]
    }
}

/// Per-sample, per-channel zero mean and unit variance over pixels of a
/// `[batch, C, H, W]` tensor. Flat channels become zero.
pub fn standardize_channels(x: &Tensor) -> Tensor {
    let area = x.shape()[2] * x.shape()[3];
    let mut out = x.clone();
    for plane in out.data_mut().chunks_mut(area) {
        let mean = plane.iter().map(|&v| v as f64).sum::<f64>() / area as f64;
        let var = plane
            .iter()
            .map(|&v| (v as f64 - mean).powi(2))
            .sum::<f64>()
            / area as f64;
        let inv = 1.0 / (var + 1e-6).sqrt();
        plane
            .iter_mut()
            .for_each(|v| *v = ((*v as f64 - mean) * inv) as Real);
    }
    out
}

/// `[channels, channels·area]` matrix averaging each channel's block.
fn average_pool_matrix(channels: usize, area: usize) -> Tensor {
    let mut data = vec![0.0; channels * channels * area];
    for c in 0..channels {
        data[c * channels * area + c * area..c * channels * area + (c + 1) * area]
            .fill(1.0 / area as Real);
    }
    Tensor::new(vec![channels, channels * area], data).expect("consistent shape")
}

/// Uniform weights with variance `2 / fan_in`, for layers followed by ReLU.
fn he(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let a = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-a..a) as Real).collect();
    Tensor::new(shape, data).expect("consistent shape")
}

fn glorot(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-a..a) as Real).collect();
    Tensor::new(shape, data).expect("length matches shape")
}

/// `f_θ`: hidden layers, a linear projection and L2 normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    config: EncoderConfig,
    params: ParamSet,
}

impl Encoder {
    /// Seeded He-uniform weights for hidden layers, Glorot-uniform for the
    /// projection, zero biases.
    pub fn new(config: EncoderConfig) -> Result<Self> {
        let plan = config.plan()?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix(config.seed, &[0x656e63]));
        let mut params = ParamSet::new();
        let mut prev: Vec<usize> = config.input_shape().to_vec();
        for (i, (layer, shape)) in config.layers.iter().zip(&plan).enumerate() {
            match *layer {
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    ..
                } => {
                    let area = kernel * kernel;
                    let w = he(
                        &mut rng,
                        vec![out_channels, prev[0], kernel, kernel],
                        prev[0] * area,
                    );
                    params.push(format!("conv{i}.weight"), w);
                    params.push(format!("conv{i}.bias"), Tensor::zeros(vec![out_channels]));
                }
                LayerSpec::Linear { out_features } => {
                    let fan_in = prev.iter().product();
                    let w = he(&mut rng, vec![out_features, fan_in], fan_in);
                    params.push(format!("fc{i}.weight"), w);
                    params.push(format!("fc{i}.bias"), Tensor::zeros(vec![out_features]));
                }
            }
            prev = shape.clone();
        }
        let fan_in = config.code_input_len(&plan);
        let d = config.embedding_dim;
        params.push("embed.weight", glorot(&mut rng, vec![d, fan_in], fan_in, d));
        params.push("embed.bias", Tensor::zeros(vec![d]));
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn embedding_dim(&self) -> usize {
        self.config.embedding_dim
    }

    /// Unnormalized code `[batch, d]` for `x: [batch, C, H, W]`.
    pub fn forward_code(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let xs = tape.value(x).shape().to_vec();
        if xs.len() != 4 || xs[1..] != self.config.input_shape() {
            return Err(Error::Invalid(format!(
                "encoder expects [batch, {}, {}, {}] input, got {xs:?}",
                self.config.input_channels, self.config.input_height, self.config.input_width
            )));
        }
        let batch = xs[0];
        // Each chip is standardized per channel. The input is data, so no
        // gradient flows back through this step.
        let mut h = tape.constant(standardize_channels(tape.value(x)));
        let mut flat = false;
        for (i, layer) in self.config.layers.iter().enumerate() {
            let (w, b) = (vars[2 * i], vars[2 * i + 1]);
            h = match *layer {
                LayerSpec::Conv {
                    stride, padding, ..
                } => tape.conv2d(w, Some(b), h, stride, padding)?,
                LayerSpec::Linear { .. } => {
                    if !flat {
                        let n = tape.value(h).len() / batch;
                        h = tape.reshape(h, vec![batch, n])?;
                        flat = true;
                    }
                    tape.linear(w, Some(b), h)?
                }
            };
            h = tape.relu(h);
        }
        if !flat {
            let shape = tape.value(h).shape().to_vec();
            let n = tape.value(h).len() / batch;
            h = tape.reshape(h, vec![batch, n])?;
            if self.config.global_pool {
                let pool = tape.constant(average_pool_matrix(shape[1], shape[2] * shape[3]));
                h = tape.linear(pool, None, h)?;
            }
        }
        let k = 2 * self.config.layers.len();
        Ok(tape.linear(vars[k], Some(vars[k + 1]), h)?)
    }

    /// Unit-norm embeddings `[batch, d]`.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let code = self.forward_code(tape, vars, x)?;
        Ok(tape.l2_normalize(code, 1)?)
    }

    /// Embeds a `[batch, C, H, W]` tensor without recording gradients.
    pub fn embed_tensor(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = self
            .params
            .tensors()
            .iter()
            .map(|t| tape.constant(t.clone()))
            .collect();
        let xv = tape.constant(x.clone());
        let v = self.forward(&mut tape, &vars, xv)?;
        Ok(tape.value(v).clone())
    }

    /// Embeds chips in parallel chunks; returns `[chips.len(), d]`.
    pub fn embed(&self, chips: &[Chip]) -> Result<Tensor> {
        const CHUNK: usize = 64;
        let side = self.config.side().ok_or_else(|| {
            Error::Config("chip embedding requires a square encoder input".into())
        })?;
        if self.config.input_channels != 3 {
            return Err(Error::Config(
                "chip embedding requires 3 input channels".into(),
            ));
        }
        let parts = chips
            .par_chunks(CHUNK)
            .map(|chunk| self.embed_tensor(&chips_to_tensor(chunk, side)?))
            .collect::<Result<Vec<Tensor>>>()?;
        let d = self.embedding_dim();
        let data: Vec<Real> = parts.into_iter().flat_map(Tensor::into_data).collect();
        Ok(Tensor::new(vec![chips.len(), d], data)?)
    }
}

/// Mirror of an all-convolutional encoder: linear expansion, then a stride-1
/// 3×3 convolution and nearest upsampling per stage back to the input shape.
/// The last stage upsamples first so its convolution sees full resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    /// Activation shapes visited in reverse, starting at the encoder's last
    /// feature map and ending at the input.
    stages: Vec<[usize; 3]>,
    factors: Vec<usize>,
    params: ParamSet,
}

impl Decoder {
    pub fn new(encoder: &EncoderConfig) -> Result<Self> {
        let plan = encoder.plan()?;
        let mut stages = vec![encoder.input_shape()];
        let mut factors = Vec::new();
        for (layer, shape) in encoder.layers.iter().zip(&plan) {
            let &LayerSpec::Conv { stride, .. } = layer else {
                return Err(Error::Config(
                    "the decoder mirrors convolutional encoders only".into(),
                ));
            };
            let prev = stages.last().expect("nonempty");
            if shape[1] * stride != prev[1] || shape[2] * stride != prev[2] {
                return Err(Error::Config(format!(
                    "cannot mirror {:?} -> {:?} with stride {stride} upsampling",
                    prev, shape
                )));
            }
            factors.push(stride);
            stages.push([shape[0], shape[1], shape[2]]);
        }
        stages.reverse();
        factors.reverse();

        let mut rng = ChaCha8Rng::seed_from_u64(mix(encoder.seed, &[0x646563]));
        let mut params = ParamSet::new();
        let d = encoder.embedding_dim;
        let top: usize = stages[0].iter().product();
        params.push("expand.weight", glorot(&mut rng, vec![top, d], d, top));
        params.push("expand.bias", Tensor::zeros(vec![top]));
        for (i, pair) in stages.windows(2).enumerate() {
            let (cin, cout) = (pair[0][0], pair[1][0]);
            params.push(
                format!("deconv{i}.weight"),
                glorot(&mut rng, vec![cout, cin, 3, 3], cin * 9, cout * 9),
            );
            params.push(format!("deconv{i}.bias"), Tensor::zeros(vec![cout]));
        }
        Ok(Self {
            stages,
            factors,
            params,
        })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Reconstruction `[batch, C, H, W]` from codes `[batch, d]`.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], code: Var) -> Result<Var> {
        let batch = tape.value(code).shape()[0];
        let h = tape.linear(vars[0], Some(vars[1]), code)?;
        let h = tape.relu(h);
        let [c, hh, ww] = self.stages[0];
        let mut h = tape.reshape(h, vec![batch, c, hh, ww])?;
        let last = self.factors.len();
        for (i, &f) in self.factors.iter().enumerate() {
            let (w, b) = (vars[2 + 2 * i], vars[3 + 2 * i]);
            if i + 1 < last {
                // Convolve before upsampling to keep the cost near the encoder's.
                h = tape.conv2d(w, Some(b), h, 1, 1)?;
                h = tape.relu(h);
                h = tape.upsample_nearest(h, f)?;
            } else {
                h = tape.upsample_nearest(h, f)?;
                h = tape.conv2d(w, Some(b), h, 1, 1)?;
            }
        }
        Ok(h)
    }
}

/// Class weight vectors `w_j` stored as a `[C, d]` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SupervisedHead {
    params: ParamSet,
}

impl SupervisedHead {
    pub fn new(num_classes: usize, dim: usize, seed: u64) -> Result<Self> {
        if num_classes == 0 || dim == 0 {
            return Err(Error::Config(
                "head needs at least one class and dimension".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, &[0x68656164]));
        let mut params = ParamSet::new();
        params.push(
            "head.weight",
            glorot(&mut rng, vec![num_classes, dim], dim, num_classes),
        );
        Ok(Self { params })
    }

    pub fn from_weights(weights: Tensor) -> Result<Self> {
        if weights.rank() != 2 {
            return Err(Error::Invalid(format!(
                "head weights must be [C, d], got {:?}",
                weights.shape()
            )));
        }
        let mut params = ParamSet::new();
        params.push("head.weight", weights);
        Ok(Self { params })
    }

    pub fn num_classes(&self) -> usize {
        self.params.get(0).shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.params.get(0).shape()[1]
    }

    pub fn weights(&self) -> &Tensor {
        self.params.get(0)
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }
}

/// `P(j|v) = exp(w_jᵀv) / Σ_k exp(w_kᵀv)`.
pub fn parametric_softmax(head: &SupervisedHead, v: &[Real]) -> Result<Vec<Real>> {
    if v.len() != head.dim() {
        return Err(Error::Invalid(format!(
            "vector of length {} for a head of dimension {}",
            v.len(),
            head.dim()
        )));
    }
    let logits: Vec<f64> = (0..head.num_classes())
        .map(|j| {
            head.weights()
                .row(j)
                .iter()
                .zip(v)
                .map(|(&w, &x)| w as f64 * x as f64)
                .sum()
        })
        .collect();
    Ok(softmax(&logits).into_iter().map(|p| p as Real).collect())
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Mean squared error between a reconstruction and its target.
pub fn reconstruction_loss(tape: &mut Tape, reconstruction: Var, target: Var) -> Result<Var> {
    Ok(tape.mse(reconstruction, target)?)
}

/// Reconstruction loss of `decoder(encoder(x))`; `enc_vars` and `dec_vars`
/// are the registered parameters of each network.
pub fn autoencoder_loss(
    tape: &mut Tape,
    encoder: &Encoder,
    enc_vars: &[Var],
    decoder: &Decoder,
    dec_vars: &[Var],
    x: Var,
) -> Result<Var> {
    let code = encoder.forward(tape, enc_vars, x)?;
    let recon = decoder.forward(tape, dec_vars, code)?;
    reconstruction_loss(tape, recon, x)
}

/// `−mean log P(label | v)` over a batch of embeddings `v: [batch, d]`.
pub fn head_loss(tape: &mut Tape, head_var: Var, v: Var, labels: &[ClassId]) -> Result<Var> {
    let logits = tape.linear(head_var, None, v)?;
    let lp = tape.log_softmax(logits)?;
    let picked = tape.pick(lp, labels)?;
    let m = tape.mean(picked)?;
    Ok(tape.neg(m))
}

/// Cross-entropy of the head's parametric softmax over the encoder's
/// unnormalized code, as in a conventional classifier.
pub fn supervised_loss(
    tape: &mut Tape,
    encoder: &Encoder,
    enc_vars: &[Var],
    head_var: Var,
    x: Var,
    labels: &[ClassId],
) -> Result<Var> {
    let v = encoder.forward_code(tape, enc_vars, x)?;
    head_loss(tape, head_var, v, labels)
}

/// Draws a class uniformly, then an instance of that class uniformly.
#[derive(Debug, Clone)]
pub struct ClassBalancedSampler {
    by_class: Vec<Vec<usize>>,
    rng: ChaCha8Rng,
}

impl ClassBalancedSampler {
    /// `labels[i]` is the class of instance `i`; classes are `0..num_classes`.
    pub fn new(labels: &[ClassId], num_classes: usize, seed: u64) -> Result<Self> {
        let mut by_class = vec![Vec::new(); num_classes];
        for (i, &c) in labels.iter().enumerate() {
            by_class
                .get_mut(c)
                .ok_or(Error::IndexOutOfRange {
                    index: c,
                    len: num_classes,
                })?
                .push(i);
        }
        if let Some(class) = by_class.iter().position(Vec::is_empty) {
            return Err(Error::EmptyClass { class });
        }
        Ok(Self {
            by_class,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn next_batch(&mut self, batch_size: usize) -> Vec<usize> {
        (0..batch_size).map(|_| self.draw()).collect()
    }

    fn draw(&mut self) -> usize {
        let members = &self.by_class[self.rng.random_range(0..self.by_class.len())];
        members[self.rng.random_range(0..members.len())]
    }
}

impl Iterator for ClassBalancedSampler {
    type Item = usize;

    fn next(&mut self) -> Option<usize> {
        Some(self.draw())
    }
}

const MODEL_MAGIC: &[u8; 4] = b"UFLM";
const MODEL_VERSION: u16 = 1;

/// Which networks a checkpoint carries.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct CheckpointHeader {
    encoder: EncoderConfig,
    decoder: bool,
    head_classes: Option<usize>,
    params: Vec<ParamEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

/// An encoder plus whichever baseline networks were trained with it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub encoder: Encoder,
    pub decoder: Option<Decoder>,
    pub head: Option<SupervisedHead>,
}

impl Checkpoint {
    pub fn encoder_only(encoder: Encoder) -> Self {
        Self {
            encoder,
            decoder: None,
            head: None,
        }
    }

    fn param_sets(&self) -> Vec<&ParamSet> {
        let mut sets = vec![self.encoder.params()];
        sets.extend(self.decoder.as_ref().map(Decoder::params));
        sets.extend(self.head.as_ref().map(SupervisedHead::params));
        sets
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let sets = self.param_sets();
        let header = CheckpointHeader {
            encoder: self.encoder.config().clone(),
            decoder: self.decoder.is_some(),
            head_classes: self.head.as_ref().map(SupervisedHead::num_classes),
            params: sets
                .iter()
                .flat_map(|s| s.names().iter().zip(s.tensors()))
                .map(|(name, t)| ParamEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in sets.iter().flat_map(|s| s.tensors()) {
            out.extend_from_slice(&(t.len() as u64).to_le_bytes());
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "model checkpoint");
        if r.take(4)? != MODEL_MAGIC {
            return Err(r.error(0, "bad magic, expected UFLM"));
        }
        let version = r.u16()?;
        if version != MODEL_VERSION {
            return Err(r.error(4, format!("unsupported version {version}")));
        }
        let json_len = r.u64()? as usize;
        let at = r.pos;
        let header: CheckpointHeader = serde_json::from_slice(r.take(json_len)?)
            .map_err(|e| r.error(at, format!("bad config: {e}")))?;

        let mut encoder = Encoder::new(header.encoder.clone())?;
        let mut decoder = header
            .decoder
            .then(|| Decoder::new(&header.encoder))
            .transpose()?;
        let mut head = header
            .head_classes
            .map(|c| SupervisedHead::new(c, header.encoder.embedding_dim, 0))
            .transpose()?;

        let mut sets: Vec<&mut ParamSet> = vec![encoder.params_mut()];
        sets.extend(decoder.as_mut().map(Decoder::params_mut));
        sets.extend(head.as_mut().map(SupervisedHead::params_mut));
        let expected: usize = sets.iter().map(|s| s.len()).sum();
        if header.params.len() != expected {
            return Err(r.error(
                at,
                format!(
                    "{} parameters listed, {expected} expected",
                    header.params.len()
                ),
            ));
        }
        let mut entries = header.params.iter();
        for set in sets {
            for i in 0..set.len() {
                let entry = entries.next().expect("count checked");
                let at = r.pos;
                let tensor = &mut set.tensors_mut()[i];
                if entry.shape != tensor.shape() {
                    return Err(r.error(
                        at,
                        format!(
                            "{}: shape {:?}, expected {:?}",
                            entry.name,
                            entry.shape,
                            tensor.shape()
                        ),
                    ));
                }
                let len = r.u64()? as usize;
                if len != tensor.len() {
                    return Err(r.error(
                        at,
                        format!("{}: {len} values, expected {}", entry.name, tensor.len()),
                    ));
                }
                for v in tensor.data_mut() {
                    *v = r.f32()? as Real;
                }
            }
        }
        if r.pos != bytes.len() {
            return Err(r.error(r.pos as u64, "trailing bytes"));
        }
        Ok(Self {
            encoder,
            decoder,
            head,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Little-endian cursor that reports truncation with the byte offset.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pub(crate) pos: usize,
    what: &'static str,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8], what: &'static str) -> Self {
        Self {
            bytes,
            pos: 0,
            what,
        }
    }

    pub(crate) fn error(&self, offset: impl TryInto<u64>, reason: impl Into<String>) -> Error {
        Error::Format {
            what: self.what,
            offset: offset.try_into().unwrap_or(u64::MAX),
            reason: reason.into(),
        }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.error(
                self.bytes.len() as u64,
                format!("truncated: needed {n} bytes at offset {}", self.pos),
            )),
        }
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    pub(crate) fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}
