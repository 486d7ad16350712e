//! The attention-bottleneck classifier: backbone, variational attention head,
//! anchor quantizer, variational encoder and decoder.

use std::path::Path;

use crate::checkpoint;
use crate::error::{AibError, Result};
use crate::gaussian::{reparam_sample, DiagonalGaussian};
use crate::noise::{NoiseDraw, NoiseSource, NoiseStream, StreamId};
use crate::quantizer::{self, init_anchors, AnchorSet, AttentionMaps};
use crate::tape::{softmax_rows, Tape, Var};
use crate::tensor::{fan_in_bound, Tensor};

/// Added to the softplus output of the attention scale head.
pub const ATTENTION_SIGMA_FLOOR: f64 = 1e-6;

/// One `conv3x3 -> relu -> [max-pool 2]` stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvBlock {
    pub channels: usize,
    pub pool: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub beta: f64,
    pub lambda_q: f64,
    pub lambda_c: f64,
    /// Latent dimension `K`.
    pub latent_dim: usize,
    /// Anchor count `Q`.
    pub anchors: usize,
    pub att_samples: usize,
    pub z_samples: usize,
    pub num_classes: usize,
    /// `(channels, height, width)` of one input image.
    pub input_shape: [usize; 3],
    pub backbone: Vec<ConvBlock>,
    /// Conv blocks applied to the modulated feature before the encoder FC layer.
    pub encoder: Vec<ConvBlock>,
}

impl ModelConfig {
    pub fn new(num_classes: usize, input_shape: [usize; 3]) -> Self {
        ModelConfig {
            beta: 0.01,
            lambda_q: 0.4,
            lambda_c: 0.1,
            latent_dim: 256,
            anchors: 20,
            att_samples: 4,
            z_samples: 12,
            num_classes,
            input_shape,
            backbone: vec![
                ConvBlock {
                    channels: 32,
                    pool: true,
                },
                ConvBlock {
                    channels: 64,
                    pool: true,
                },
            ],
            encoder: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(AibError::Config(msg));
        if !(self.beta >= 0.0) || !(self.lambda_q >= 0.0) || !(self.lambda_c >= 0.0) {
            return fail(format!(
                "loss weights must be non-negative (beta={}, lambda_q={}, lambda_c={})",
                self.beta, self.lambda_q, self.lambda_c
            ));
        }
        for (name, v) in [
            ("latent_dim", self.latent_dim),
            ("anchors", self.anchors),
            ("att_samples", self.att_samples),
            ("z_samples", self.z_samples),
        ] {
            if v == 0 {
                return fail(format!("{name} must be at least 1"));
            }
        }
        if self.num_classes < 2 {
            return fail(format!("num_classes must be at least 2, got {}", self.num_classes));
        }
        if self.input_shape.contains(&0) {
            return fail(format!("input shape {:?} has a zero extent", self.input_shape));
        }
        if self.backbone.is_empty() {
            return fail("backbone needs at least one block".into());
        }
        if self.backbone.iter().chain(&self.encoder).any(|b| b.channels == 0) {
            return fail("conv block widths must be positive".into());
        }
        let mut hw = (self.input_shape[1], self.input_shape[2]);
        for block in self.backbone.iter().chain(&self.encoder) {
            if block.pool {
                if hw.0 < 2 || hw.1 < 2 {
                    return fail(format!("pooling a {}x{} map leaves nothing", hw.0, hw.1));
                }
                hw = (hw.0 / 2, hw.1 / 2);
            }
        }
        Ok(())
    }

    fn after(blocks: &[ConvBlock], (c, h, w): (usize, usize, usize)) -> (usize, usize, usize) {
        blocks.iter().fold((c, h, w), |(_, h, w), b| {
            if b.pool {
                (b.channels, h / 2, w / 2)
            } else {
                (b.channels, h, w)
            }
        })
    }

    /// `(C_f, H_a, W_a)` of the backbone output, which is also the attention grid.
    pub fn feature_shape(&self) -> [usize; 3] {
        let [c, h, w] = self.input_shape;
        let (c, h, w) = Self::after(&self.backbone, (c, h, w));
        [c, h, w]
    }

    pub fn encoder_input_dim(&self) -> usize {
        let [c, h, w] = self.feature_shape();
        let (c, h, w) = Self::after(&self.encoder, (c, h, w));
        c * h * w
    }
}

/// How a parameter is treated by the optimizer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    Weight,
    Bias,
    /// Bias feeding the attention scale; not weight-decayed.
    SigmaBias,
    Anchors,
}

impl ParamRole {
    pub fn decays(self) -> bool {
        matches!(self, ParamRole::Weight | ParamRole::Bias)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub role: ParamRole,
    pub value: Tensor,
}

/// Ordered named parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    fn push(&mut self, name: impl Into<String>, role: ParamRole, value: Tensor) -> usize {
        self.params.push(Param {
            name: name.into(),
            role,
            value,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let arrays: Vec<(&str, &Tensor)> = self.params.iter().map(|p| (p.name.as_str(), &p.value)).collect();
        checkpoint::save(path, &arrays)
    }

    /// Replaces every value from a checkpoint whose names and shapes match this store.
    pub fn load(&mut self, path: &Path) -> Result<()> {
        let arrays = checkpoint::load(path)?;
        self.assign(arrays)
    }

    pub fn assign(&mut self, arrays: Vec<(String, Tensor)>) -> Result<()> {
        for p in &self.params {
            if !arrays.iter().any(|(n, _)| n == &p.name) {
                return Err(AibError::Shape {
                    name: p.name.clone(),
                    expected: p.value.shape().to_vec(),
                    found: Vec::new(),
                });
            }
        }
        for (name, tensor) in arrays {
            let Some(p) = self.get_mut(&name) else {
                return Err(AibError::Shape {
                    name,
                    expected: Vec::new(),
                    found: tensor.shape().to_vec(),
                });
            };
            if p.value.shape() != tensor.shape() {
                return Err(AibError::Shape {
                    name,
                    expected: p.value.shape().to_vec(),
                    found: tensor.shape().to_vec(),
                });
            }
            p.value = tensor;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Layer {
    weight: usize,
    bias: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    backbone: Vec<Layer>,
    att_mu: Layer,
    att_sigma: Layer,
    encoder: Vec<Layer>,
    enc_fc: Layer,
    dec_fc1: Layer,
    dec_fc2: Layer,
    anchors: usize,
}

/// Parameters bound to a tape for one forward pass.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn layer(&self, l: Layer) -> (Var, Var) {
        (self.vars[l.weight], self.vars[l.bias])
    }
}

/// Noise for one stochastic forward pass: `att_samples` attention draws and,
/// per attention draw, `z_samples` latent draws.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardNoise {
    pub attention: Vec<NoiseDraw>,
    pub latent: Vec<Vec<NoiseDraw>>,
}

impl ForwardNoise {
    pub fn draw(
        config: &ModelConfig,
        batch: usize,
        attention: &mut NoiseStream,
        latent: &mut NoiseStream,
    ) -> Self {
        let [_, h, w] = config.feature_shape();
        let att = (0..config.att_samples)
            .map(|_| attention.draw(&[batch, 1, h, w]))
            .collect();
        let lat = (0..config.att_samples)
            .map(|_| {
                (0..config.z_samples)
                    .map(|_| latent.draw(&[batch, config.latent_dim]))
                    .collect()
            })
            .collect();
        ForwardNoise {
            attention: att,
            latent: lat,
        }
    }

    /// Draws from fresh attention and latent streams of `source`.
    pub fn from_source(config: &ModelConfig, batch: usize, source: &NoiseSource) -> Self {
        let mut att = source.stream(StreamId::Attention);
        let mut lat = source.stream(StreamId::Latent);
        Self::draw(config, batch, &mut att, &mut lat)
    }
}

/// How the attention sample reaches the encoder.
#[derive(Clone, Copy, Debug)]
pub enum QuantizerMode<'a> {
    /// Nearest-anchor lookup with straight-through gradients.
    Anchors,
    /// The continuous sample is used as is (ablation).
    Bypass,
    /// Reuse previously computed maps. The encoder sees
    /// `a + (a_q0 - a0)`, which equals `a_q0` at the snapshot point and has an
    /// identity Jacobian: a differentiable surrogate of the straight-through path.
    Frozen(&'a [AttentionMaps]),
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions<'a> {
    /// `None` runs in mean mode: `mu` replaces every sample.
    pub noise: Option<&'a ForwardNoise>,
    pub quantizer: QuantizerMode<'a>,
}

impl ForwardOptions<'_> {
    pub fn mean() -> Self {
        ForwardOptions {
            noise: None,
            quantizer: QuantizerMode::Anchors,
        }
    }
}

/// Everything produced for one attention draw.
#[derive(Clone, Debug)]
pub struct AttentionBranch {
    pub a: Var,
    pub maps: AttentionMaps,
    pub latent: DiagonalGaussian,
    /// One logit matrix per latent draw.
    pub logits: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub features: Var,
    pub attention: DiagonalGaussian,
    pub branches: Vec<AttentionBranch>,
}

impl ForwardOutput {
    pub fn logit_count(&self) -> usize {
        self.branches.iter().map(|b| b.logits.len()).sum()
    }

    pub fn maps(&self) -> Vec<AttentionMaps> {
        self.branches.iter().map(|b| b.maps.clone()).collect()
    }
}

/// Mean-mode predictions for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    /// `[N, C]` class probabilities.
    pub probs: Tensor,
    /// `[N, 1, H_a, W_a]` continuous attention means.
    pub attention_mean: Tensor,
}

impl Inference {
    pub fn predictions(&self) -> Vec<usize> {
        argmax_rows(self.probs.data(), self.probs.shape()[1])
    }
}

pub fn argmax_rows(values: &[f64], cols: usize) -> Vec<usize> {
    values
        .chunks(cols)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct AibModel {
    config: ModelConfig,
    params: ParamStore,
    layout: Layout,
}

impl AibModel {
    /// Fan-in uniform weights (`±sqrt(6 / fan_in)`), zero biases, anchors evenly
    /// spread over `[0, 1]`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = NoiseSource::new(seed).stream(StreamId::Init);
        let rng = init.rng();
        let mut store = ParamStore::default();
        let mut conv = |store: &mut ParamStore, name: &str, out: usize, inp: usize, k: usize, role: ParamRole| {
            let fan_in = inp * k * k;
            let weight = store.push(
                format!("{name}.weight"),
                ParamRole::Weight,
                Tensor::uniform([out, inp, k, k], fan_in_bound(fan_in), rng),
            );
            let bias = store.push(format!("{name}.bias"), role, Tensor::zeros([out]));
            Layer { weight, bias }
        };

        let mut channels = config.input_shape[0];
        let mut backbone = Vec::new();
        for (i, block) in config.backbone.iter().enumerate() {
            backbone.push(conv(&mut store, &format!("backbone.{i}"), block.channels, channels, 3, ParamRole::Bias));
            channels = block.channels;
        }
        let att_mu = conv(&mut store, "att.mu", 1, channels, 3, ParamRole::Bias);
        let att_sigma = conv(&mut store, "att.sigma", 1, 1, 1, ParamRole::SigmaBias);
        let mut encoder = Vec::new();
        for (i, block) in config.encoder.iter().enumerate() {
            encoder.push(conv(&mut store, &format!("encoder.{i}"), block.channels, channels, 3, ParamRole::Bias));
            channels = block.channels;
        }
        let mut fc = |store: &mut ParamStore, name: &str, inp: usize, out: usize| {
            let weight = store.push(
                format!("{name}.weight"),
                ParamRole::Weight,
                Tensor::uniform([inp, out], fan_in_bound(inp), rng),
            );
            let bias = store.push(format!("{name}.bias"), ParamRole::Bias, Tensor::zeros([out]));
            Layer { weight, bias }
        };
        let k = config.latent_dim;
        let enc_fc = fc(&mut store, "encoder.fc", config.encoder_input_dim(), 2 * k);
        let dec_fc1 = fc(&mut store, "decoder.fc1", k, k);
        let dec_fc2 = fc(&mut store, "decoder.fc2", k, config.num_classes);
        let anchors = store.push("anchors", ParamRole::Anchors, init_anchors(config.anchors)?.to_tensor());

        Ok(AibModel {
            config,
            params: store,
            layout: Layout {
                backbone,
                att_mu,
                att_sigma,
                encoder,
                enc_fc,
                dec_fc1,
                dec_fc2,
                anchors,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn anchor_set(&self) -> AnchorSet {
        AnchorSet::new(self.params.params[self.layout.anchors].value.data().to_vec())
            .expect("anchor count validated at construction")
    }

    /// Index of the anchor tensor inside [`ParamStore`] / [`Bound::vars`].
    pub fn anchor_index(&self) -> usize {
        self.layout.anchors
    }

    /// Records every parameter on `tape`; `trainable = false` records constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    tape.param(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    pub fn anchors_var(&self, bound: &Bound) -> Var {
        bound.vars[self.layout.anchors]
    }

    fn conv_blocks(&self, tape: &mut Tape, bound: &Bound, mut x: Var, blocks: &[ConvBlock], layers: &[Layer]) -> Result<Var> {
        for (block, &layer) in blocks.iter().zip(layers) {
            let (w, b) = bound.layer(layer);
            let y = tape.conv2d(x, w, b, 1, 1)?;
            x = tape.relu(y);
            if block.pool {
                x = tape.max_pool2d(x, 2)?;
            }
        }
        Ok(x)
    }

    /// Backbone features `[N, C_f, H_a, W_a]`.
    pub fn extract_features(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let [c, h, w] = self.config.input_shape;
        let shape = tape.shape(x);
        if shape.len() != 4 || shape[1..] != [c, h, w] {
            return Err(AibError::Dimension(format!(
                "input {:?} does not match configured [N, {c}, {h}, {w}]",
                shape
            )));
        }
        self.conv_blocks(tape, bound, x, &self.config.backbone, &self.layout.backbone)
    }

    /// `mu_a = sigmoid(conv3x3(f))`, `sigma_a = softplus(conv1x1(mu_a)) + 1e-6`.
    pub fn attention_forward(&self, tape: &mut Tape, bound: &Bound, f: Var) -> Result<DiagonalGaussian> {
        let (w, b) = bound.layer(self.layout.att_mu);
        let pre = tape.conv2d(f, w, b, 1, 1)?;
        let mu = tape.sigmoid(pre);
        let (w, b) = bound.layer(self.layout.att_sigma);
        let pre = tape.conv2d(mu, w, b, 1, 0)?;
        let soft = tape.softplus(pre);
        let sigma = tape.add_scalar(soft, ATTENTION_SIGMA_FLOOR);
        DiagonalGaussian::new(tape, mu, sigma)
    }

    /// Channel-broadcast product of features and a single-channel map.
    pub fn modulate(&self, tape: &mut Tape, f: Var, map: Var) -> Result<Var> {
        tape.channel_mul(f, map)
    }

    /// Encoder conv blocks, flatten, FC to `2K`; `mu` is the first half and
    /// `sigma = softplus(second half)`.
    pub fn encode(&self, tape: &mut Tape, bound: &Bound, masked: Var) -> Result<DiagonalGaussian> {
        let h = self.conv_blocks(tape, bound, masked, &self.config.encoder, &self.layout.encoder)?;
        let flat = tape.flatten(h)?;
        let (w, b) = bound.layer(self.layout.enc_fc);
        let stats = tape.linear(flat, w, b)?;
        let k = self.config.latent_dim;
        let mu = tape.slice_cols(stats, 0, k)?;
        let raw = tape.slice_cols(stats, k, k)?;
        let sigma = tape.softplus(raw);
        DiagonalGaussian::new(tape, mu, sigma)
    }

    /// `FC(K x K) -> relu -> FC(K x C)`.
    pub fn decode(&self, tape: &mut Tape, bound: &Bound, z: Var) -> Result<Var> {
        let (w, b) = bound.layer(self.layout.dec_fc1);
        let h = tape.linear(z, w, b)?;
        let h = tape.relu(h);
        let (w, b) = bound.layer(self.layout.dec_fc2);
        tape.linear(h, w, b)
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var, opts: ForwardOptions<'_>) -> Result<ForwardOutput> {
        let features = self.extract_features(tape, bound, x)?;
        let attention = self.attention_forward(tape, bound, features)?;
        let anchors = self.anchor_set();
        let draws = match opts.noise {
            Some(noise) => {
                if noise.attention.len() != noise.latent.len() {
                    return Err(AibError::Dimension("noise: attention/latent draw counts differ".into()));
                }
                noise.attention.len()
            }
            None => 1,
        };
        if let QuantizerMode::Frozen(maps) = opts.quantizer {
            if maps.len() != draws {
                return Err(AibError::Dimension(format!(
                    "frozen quantizer holds {} maps for {draws} attention draws",
                    maps.len()
                )));
            }
        }

        let mut branches = Vec::with_capacity(draws);
        for i in 0..draws {
            let a = match opts.noise {
                Some(noise) => reparam_sample(tape, &attention, &noise.attention[i])?,
                None => attention.mu,
            };
            let (maps, encoder_input) = match opts.quantizer {
                QuantizerMode::Anchors => {
                    let maps = quantizer::quantize(tape.value(a), &anchors)?;
                    let st = quantizer::straight_through(tape, a, &maps)?;
                    (maps, st)
                }
                QuantizerMode::Bypass => {
                    let maps = quantizer::quantize(tape.value(a), &anchors)?;
                    (maps, a)
                }
                QuantizerMode::Frozen(frozen) => {
                    let maps = frozen[i].clone();
                    let offset = Tensor::new(
                        maps.quantized.shape(),
                        maps.quantized
                            .data()
                            .iter()
                            .zip(maps.continuous.data())
                            .map(|(q, c)| q - c)
                            .collect(),
                    )?;
                    let offset = tape.constant(offset);
                    let shifted = tape.add(a, offset)?;
                    (maps, shifted)
                }
            };
            let masked = self.modulate(tape, features, encoder_input)?;
            let latent = self.encode(tape, bound, masked)?;
            let logits = match opts.noise {
                Some(noise) => noise.latent[i]
                    .iter()
                    .map(|eps| {
                        let z = reparam_sample(tape, &latent, eps)?;
                        self.decode(tape, bound, z)
                    })
                    .collect::<Result<Vec<_>>>()?,
                None => vec![self.decode(tape, bound, latent.mu)?],
            };
            branches.push(AttentionBranch {
                a,
                maps,
                latent,
                logits,
            });
        }
        Ok(ForwardOutput {
            features,
            attention,
            branches,
        })
    }

    /// Mean-mode class probabilities and continuous attention means.
    pub fn infer(&self, x: &Tensor) -> Result<Inference> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, &bound, xv, ForwardOptions::mean())?;
        let logits = tape.value(out.branches[0].logits[0]);
        Ok(Inference {
            probs: Tensor::new(logits.shape(), softmax_rows(logits.data(), self.config.num_classes))?,
            attention_mean: tape.value(out.attention.mu).clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ModelConfig {
        let mut c = ModelConfig::new(3, [2, 8, 8]);
        c.backbone = vec![
            ConvBlock { channels: 3, pool: true },
            ConvBlock { channels: 4, pool: false },
        ];
        c.latent_dim = 5;
        c.anchors = 4;
        c.att_samples = 2;
        c.z_samples = 3;
        c
    }

    #[test]
    fn default_backbone_maps_32_to_8() {
        let c = ModelConfig::new(10, [3, 32, 32]);
        assert_eq!(c.feature_shape(), [64, 8, 8]);
        assert_eq!(c.encoder_input_dim(), 64 * 64);
        let m = ModelConfig::new(2, [1, 28, 28]);
        assert_eq!(m.feature_shape(), [64, 7, 7]);
    }

    #[test]
    fn validate_rejects_bad_values() {
        let mut c = tiny_config();
        c.anchors = 0;
        assert!(matches!(c.validate(), Err(AibError::Config(_))));
        let mut c = tiny_config();
        c.lambda_q = -1.0;
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.z_samples = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn zero_input_gives_zero_features() {
        let model = AibModel::new(tiny_config(), 1).unwrap();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false);
        let x = tape.constant(Tensor::zeros([2, 2, 8, 8]));
        let f = model.extract_features(&mut tape, &bound, x).unwrap();
        assert_eq!(tape.shape(f), &[2, 4, 4, 4]);
        assert!(tape.value(f).data().iter().all(|&v| v == 0.0));
        let wrong = tape.constant(Tensor::zeros([2, 1, 8, 8]));
        assert!(model.extract_features(&mut tape, &bound, wrong).is_err());
    }

    #[test]
    fn zero_head_gives_half_attention() {
        let mut model = AibModel::new(tiny_config(), 1).unwrap();
        for name in ["att.mu.weight", "att.sigma.weight"] {
            let p = model.params_mut().get_mut(name).unwrap();
            p.value = Tensor::zeros(p.value.shape());
        }
        let x = Tensor::from_fn([2, 2, 8, 8], |i| (i % 7) as f64 / 7.0);
        let inf = model.infer(&x).unwrap();
        assert!(inf.attention_mean.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn modulate_identity_and_suppression() {
        let model = AibModel::new(tiny_config(), 1).unwrap();
        let mut tape = Tape::new();
        let f = tape.constant(Tensor::from_fn([1, 3, 2, 2], |i| i as f64 + 1.0));
        let ones = tape.constant(Tensor::full([1, 1, 2, 2], 1.0));
        let zeros = tape.constant(Tensor::zeros([1, 1, 2, 2]));
        let single = tape.constant(Tensor::new([1, 1, 2, 2], vec![0.0, 0.0, 1.0, 0.0]).unwrap());
        let out = model.modulate(&mut tape, f, ones).unwrap();
        assert_eq!(tape.value(out), tape.value(f));
        let out = model.modulate(&mut tape, f, zeros).unwrap();
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
        let out = model.modulate(&mut tape, f, single).unwrap();
        for (i, &v) in tape.value(out).data().iter().enumerate() {
            assert_eq!(v != 0.0, i % 4 == 2);
        }
        let bad = tape.constant(Tensor::zeros([1, 1, 3, 2]));
        assert!(model.modulate(&mut tape, f, bad).is_err());
    }

    #[test]
    fn encoder_and_decoder_shapes() {
        let model = AibModel::new(tiny_config(), 2).unwrap();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, true);
        let x = tape.constant(Tensor::from_fn([2, 2, 8, 8], |i| ((i * 31) % 17) as f64 / 17.0));
        let out = model.forward(&mut tape, &bound, x, ForwardOptions::mean()).unwrap();
        let latent = &out.branches[0].latent;
        assert_eq!(tape.shape(latent.mu), &[2, 5]);
        assert!(tape.value(latent.sigma).data().iter().all(|&s| s > 0.0));
        assert_eq!(tape.shape(out.branches[0].logits[0]), &[2, 3]);
        assert!(tape.value(out.attention.sigma).data().iter().all(|&s| s > 0.0));
    }

    #[test]
    fn zero_decoder_gives_uniform_prediction() {
        let mut model = AibModel::new(tiny_config(), 2).unwrap();
        for p in model.params_mut().iter_mut().filter(|p| p.name.starts_with("decoder")) {
            p.value = Tensor::zeros(p.value.shape());
        }
        let x = Tensor::from_fn([2, 2, 8, 8], |i| (i % 5) as f64);
        let inf = model.infer(&x).unwrap();
        for &p in inf.probs.data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn stochastic_draw_count_and_mean_determinism() {
        let model = AibModel::new(tiny_config(), 3).unwrap();
        let x = Tensor::from_fn([2, 2, 8, 8], |i| (i % 9) as f64 / 9.0);
        let noise = ForwardNoise::from_source(model.config(), 2, &NoiseSource::new(4));
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, true);
        let xv = tape.constant(x.clone());
        let out = model
            .forward(&mut tape, &bound, xv, ForwardOptions { noise: Some(&noise), quantizer: QuantizerMode::Anchors })
            .unwrap();
        assert_eq!(out.logit_count(), 2 * 3);
        assert_eq!(model.infer(&x).unwrap(), model.infer(&x).unwrap());

        let defaults = ModelConfig::new(2, [1, 8, 8]);
        assert_eq!(defaults.att_samples * defaults.z_samples, 48);
    }

    #[test]
    fn checkpoint_round_trip_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.aib");
        let model = AibModel::new(tiny_config(), 5).unwrap();
        model.params().save(&path).unwrap();
        let mut other = AibModel::new(tiny_config(), 6).unwrap();
        assert_ne!(other.params(), model.params());
        other.params_mut().load(&path).unwrap();
        assert_eq!(other.params(), model.params());

        let mut bigger = tiny_config();
        bigger.latent_dim = 6;
        let mut mismatched = AibModel::new(bigger, 5).unwrap();
        let err = mismatched.params_mut().load(&path).unwrap_err();
        assert!(matches!(err, AibError::Shape { .. }));
    }
}
