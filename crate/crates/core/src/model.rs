//! Patch encoder, pre-norm transformer and per-token regression head.
//!
//! Weights live in a flat list of named sections whose order is fixed by
//! [`ModelConfig::layout`]; the checkpoint format and the optimizer both rely
//! on that order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoding::{superpose, EncodingConfig, EncodingError};
use crate::synth::render::CHANNELS;
use crate::synth::SequenceSample;
use crate::tensor::{Graph, Mode, Real, Tensor, TensorError, Var};

pub const LN_EPS: f64 = 1e-5;
/// Additive logit used to block attention between two tokens.
pub const MASKED: f64 = -1e9;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("bad model input: {0}")]
    Input(String),
    #[error("non-finite activations after {stage}")]
    NonFinite { stage: String },
    #[error("weights do not match config: {0}")]
    Weights(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Encoding(#[from] EncodingError),
}

/// Which tokens a token may attend to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionScope {
    /// Every patch of the sequence.
    #[default]
    Joint,
    /// Only itself: each patch is estimated independently.
    PerPatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub patch_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_mlp: usize,
    pub dropout: f64,
    /// Width of the hidden layer of the patch encoder.
    pub encoder_hidden: usize,
    #[serde(default)]
    pub attention: AttentionScope,
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self {
            patch_size: 16,
            d_model: 66,
            n_layers: 2,
            n_heads: 2,
            d_mlp: 128,
            dropout: 0.2,
            encoder_hidden: 128,
            attention: AttentionScope::Joint,
        }
    }

    /// Full-size network; `d_model` splits into three angle encodings and four heads.
    pub fn paper() -> Self {
        Self {
            patch_size: 224,
            d_model: 516,
            n_layers: 4,
            n_heads: 4,
            d_mlp: 1024,
            dropout: 0.2,
            encoder_hidden: 512,
            attention: AttentionScope::Joint,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    pub fn input_width(&self) -> usize {
        self.patch_size * self.patch_size * CHANNELS
    }

    pub fn validate(&self, enc: &EncodingConfig) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.patch_size == 0 || self.n_layers == 0 || self.n_heads == 0 || self.d_mlp == 0 || self.encoder_hidden == 0 {
            return bad("sizes must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!("d_model {} not divisible by {} heads", self.d_model, self.n_heads));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        enc.validate()?;
        if enc.d_model() != self.d_model {
            return bad(format!(
                "d_model {} but encoding gives 3 x d_angle = {}",
                self.d_model,
                enc.d_model()
            ));
        }
        Ok(())
    }

    /// Names and shapes of every weight section, in storage order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let (d, h, m) = (self.d_model, self.encoder_hidden, self.d_mlp);
        let mut out = vec![
            ("encoder.w1".to_string(), vec![self.input_width(), h]),
            ("encoder.b1".to_string(), vec![h]),
            ("encoder.w2".to_string(), vec![h, d]),
            ("encoder.b2".to_string(), vec![d]),
        ];
        for l in 0..self.n_layers {
            for (name, shape) in [
                ("ln1.gain", vec![d]),
                ("ln1.bias", vec![d]),
                ("attn.wq", vec![d, d]),
                ("attn.bq", vec![d]),
                ("attn.wk", vec![d, d]),
                ("attn.bk", vec![d]),
                ("attn.wv", vec![d, d]),
                ("attn.bv", vec![d]),
                ("attn.wo", vec![d, d]),
                ("attn.bo", vec![d]),
                ("ln2.gain", vec![d]),
                ("ln2.bias", vec![d]),
                ("mlp.w1", vec![d, m]),
                ("mlp.b1", vec![m]),
                ("mlp.w2", vec![m, d]),
                ("mlp.b2", vec![d]),
            ] {
                out.push((format!("layer{l}.{name}"), shape));
            }
        }
        out.push(("final_ln.gain".into(), vec![d]));
        out.push(("final_ln.bias".into(), vec![d]));
        out.push(("head.w".into(), vec![d, 3]));
        out.push(("head.b".into(), vec![3]));
        out
    }
}

const ENCODER_SECTIONS: usize = 4;
const LAYER_SECTIONS: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> ModelWeights<T> {
    /// Xavier-uniform matrices, unit layer-norm gains, zero biases.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape) in cfg.layout() {
            let t = if shape.len() == 2 {
                let limit = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                let data = (0..shape[0] * shape[1])
                    .map(|_| T::of(rng.random_range(-limit..=limit)))
                    .collect();
                Tensor::new(shape, data).expect("layout shapes are consistent")
            } else if name.ends_with(".gain") {
                Tensor::filled(&shape, T::one())
            } else {
                Tensor::zeros(&shape)
            };
            names.push(name);
            tensors.push(t);
        }
        Self { names, tensors }
    }

    pub fn from_sections(cfg: &ModelConfig, sections: Vec<(String, Tensor<T>)>) -> Result<Self, ModelError> {
        let layout = cfg.layout();
        if layout.len() != sections.len() {
            return Err(ModelError::Weights(format!(
                "{} sections, config needs {}",
                sections.len(),
                layout.len()
            )));
        }
        for ((name, shape), (got_name, t)) in layout.iter().zip(&sections) {
            if name != got_name || t.shape() != shape.as_slice() {
                return Err(ModelError::Weights(format!(
                    "section {got_name} {:?}, expected {name} {shape:?}",
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(ModelError::Weights(format!("section {name} is not finite")));
            }
        }
        let (names, tensors) = sections.into_iter().unzip();
        Ok(Self { names, tensors })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    pub fn cast<U: Real>(&self) -> ModelWeights<U> {
        ModelWeights {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Puts every section on the graph, as parameters when `track` is set.
    pub fn register(&self, g: &mut Graph<T>, track: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| if track { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect()
    }
}

/// Graph handles of one transformer layer, in layout order.
struct LayerVars<'a>(&'a [Var]);

impl LayerVars<'_> {
    fn ln1(&self) -> (Var, Var) {
        (self.0[0], self.0[1])
    }
    fn q(&self) -> (Var, Var) {
        (self.0[2], self.0[3])
    }
    fn k(&self) -> (Var, Var) {
        (self.0[4], self.0[5])
    }
    fn v(&self) -> (Var, Var) {
        (self.0[6], self.0[7])
    }
    fn o(&self) -> (Var, Var) {
        (self.0[8], self.0[9])
    }
    fn ln2(&self) -> (Var, Var) {
        (self.0[10], self.0[11])
    }
    fn mlp(&self) -> (Var, Var, Var, Var) {
        (self.0[12], self.0[13], self.0[14], self.0[15])
    }
}

fn affine<T: Real>(g: &mut Graph<T>, x: Var, (w, b): (Var, Var)) -> Result<Var, TensorError> {
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

fn check_finite<T: Real>(g: &Graph<T>, v: Var, stage: impl FnOnce() -> String) -> Result<(), ModelError> {
    if g.value(v).is_finite() {
        Ok(())
    } else {
        Err(ModelError::NonFinite { stage: stage() })
    }
}

/// Encodes an `N × patch_size²·3` pixel matrix into `N × d_model` embeddings.
pub fn encode_patches<T: Real>(g: &mut Graph<T>, pixels: Var, w: &[Var]) -> Result<Var, ModelError> {
    let h = affine(g, pixels, (w[0], w[1]))?;
    let h = g.relu(h);
    Ok(affine(g, h, (w[2], w[3]))?)
}

/// Embedding of a single patch, evaluated without recording gradients.
pub fn encode_patch<T: Real>(pixels: &[f32], cfg: &ModelConfig, weights: &ModelWeights<T>) -> Result<Vec<T>, ModelError> {
    if pixels.len() != cfg.input_width() {
        return Err(ModelError::Input(format!(
            "patch has {} values, expected {} ({}x{}x{CHANNELS})",
            pixels.len(),
            cfg.input_width(),
            cfg.patch_size,
            cfg.patch_size
        )));
    }
    let mut g = Graph::new();
    let x = g.constant(Tensor::matrix(1, pixels.len(), pixels.iter().map(|&p| T::of(p as f64)).collect())?);
    let w: Vec<Var> = weights.tensors()[..ENCODER_SECTIONS]
        .iter()
        .map(|t| g.constant(t.clone()))
        .collect();
    let e = encode_patches(&mut g, x, &w)?;
    Ok(g.value(e).data().to_vec())
}

/// Additive attention logits for the configured scope, combined with an
/// optional extra mask.
fn attention_bias<T: Real>(scope: AttentionScope, n: usize, extra: Option<&Tensor<T>>) -> Result<Option<Tensor<T>>, ModelError> {
    if let Some(m) = extra {
        if m.shape() != [n, n] {
            return Err(ModelError::Input(format!("mask {:?} for {n} tokens", m.shape())));
        }
    }
    let mut bias = match scope {
        AttentionScope::Joint => match extra {
            Some(m) => m.clone(),
            None => return Ok(None),
        },
        AttentionScope::PerPatch => {
            let mut b = Tensor::filled(&[n, n], T::of(MASKED));
            for i in 0..n {
                b.data_mut()[i * n + i] = T::zero();
            }
            if let Some(m) = extra {
                b.add_assign(m);
            }
            b
        }
    };
    // keep blocked logits finite so the softmax guard stays meaningful
    for v in bias.data_mut() {
        *v = v.max(T::of(2.0 * MASKED));
    }
    Ok(Some(bias))
}

pub struct BlockOutput {
    pub out: Var,
    /// Attention probabilities per head, `N × N` each.
    pub attention: Vec<Var>,
}

/// Pre-norm residual block: `x + MHA(LN(x))`, then `+ MLP(LN(·))`.
#[allow(clippy::too_many_arguments)]
pub fn attention_block<T: Real, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    x: Var,
    layer: &[Var],
    cfg: &ModelConfig,
    bias: Option<&Tensor<T>>,
    mode: Mode,
    rng: &mut R,
) -> Result<BlockOutput, ModelError> {
    if layer.len() != LAYER_SECTIONS {
        return Err(ModelError::Weights(format!("{} layer sections, expected {LAYER_SECTIONS}", layer.len())));
    }
    if g.value(x).rows() == 0 {
        return Err(ModelError::Input("empty token sequence".into()));
    }
    let lw = LayerVars(layer);
    let dh = cfg.head_dim();
    let inv_sqrt = T::of(1.0 / (dh as f64).sqrt());

    let (g1, b1) = lw.ln1();
    let h = g.layer_norm(x, g1, b1, T::of(LN_EPS))?;
    let q = affine(g, h, lw.q())?;
    let k = affine(g, h, lw.k())?;
    let v = affine(g, h, lw.v())?;
    let mut heads = Vec::with_capacity(cfg.n_heads);
    let mut attention = Vec::with_capacity(cfg.n_heads);
    for head in 0..cfg.n_heads {
        let qh = g.slice_cols(q, head * dh, dh)?;
        let kh = g.slice_cols(k, head * dh, dh)?;
        let vh = g.slice_cols(v, head * dh, dh)?;
        let kt = g.transpose(kh);
        let scores = g.matmul(qh, kt)?;
        let mut scores = g.scale(scores, inv_sqrt);
        if let Some(b) = bias {
            scores = g.add_const(scores, b)?;
        }
        let a = g.softmax_rows(scores).map_err(|e| match e {
            TensorError::NonFinite { .. } => ModelError::NonFinite {
                stage: format!("attention logits, head {head}"),
            },
            other => other.into(),
        })?;
        attention.push(a);
        heads.push(g.matmul(a, vh)?);
    }
    let cat = g.concat_cols(&heads)?;
    let attn = affine(g, cat, lw.o())?;
    let attn = g.dropout(attn, cfg.dropout, rng, mode)?;
    let x = g.add(x, attn)?;

    let (g2, b2) = lw.ln2();
    let h = g.layer_norm(x, g2, b2, T::of(LN_EPS))?;
    let (w1, c1, w2, c2) = lw.mlp();
    let h = affine(g, h, (w1, c1))?;
    let h = g.relu(h);
    let h = affine(g, h, (w2, c2))?;
    let h = g.dropout(h, cfg.dropout, rng, mode)?;
    let out = g.add(x, h)?;
    Ok(BlockOutput { out, attention })
}

pub struct ForwardTrace {
    /// `N × 3` raw camera-frame estimates.
    pub output: Var,
    pub attention: Vec<Vec<Var>>,
}

/// Full network on graph handles: encoder, positional superposition, blocks,
/// final layer norm and head. `weights` are the registered sections in layout
/// order; `mask` adds to the attention logits of every head and layer.
#[allow(clippy::too_many_arguments)]
pub fn forward_vars<T: Real, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    enc: &EncodingConfig,
    weights: &[Var],
    pixels: Var,
    positions: &[(f64, f64, f64)],
    mask: Option<&Tensor<T>>,
    mode: Mode,
    rng: &mut R,
) -> Result<ForwardTrace, ModelError> {
    let expected = cfg.layout().len();
    if weights.len() != expected {
        return Err(ModelError::Weights(format!("{} sections, expected {expected}", weights.len())));
    }
    let n = g.value(pixels).rows();
    if n != positions.len() || n == 0 {
        return Err(ModelError::Input(format!("{n} patches but {} positions", positions.len())));
    }
    let bias = attention_bias(cfg.attention, n, mask)?;

    let e = encode_patches(g, pixels, &weights[..ENCODER_SECTIONS])?;
    check_finite(g, e, || "patch encoder".into())?;
    let mut x = superpose(g, e, positions, enc)?;
    let mut attention = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let start = ENCODER_SECTIONS + l * LAYER_SECTIONS;
        let block = attention_block(g, x, &weights[start..start + LAYER_SECTIONS], cfg, bias.as_ref(), mode, rng)?;
        check_finite(g, block.out, || format!("layer {l}"))?;
        x = block.out;
        attention.push(block.attention);
    }
    let tail = ENCODER_SECTIONS + cfg.n_layers * LAYER_SECTIONS;
    let h = g.layer_norm(x, weights[tail], weights[tail + 1], T::of(LN_EPS))?;
    let output = affine(g, h, (weights[tail + 2], weights[tail + 3]))?;
    check_finite(g, output, || "output head".into())?;
    Ok(ForwardTrace { output, attention })
}

/// Pixel matrix of a sequence, one row per patch.
pub fn pixel_matrix<T: Real>(sample: &SequenceSample, cfg: &ModelConfig) -> Result<Tensor<T>, ModelError> {
    if sample.patch_size != cfg.patch_size {
        return Err(ModelError::Input(format!(
            "sequence has {0}x{0} patches, model expects {1}x{1}",
            sample.patch_size, cfg.patch_size
        )));
    }
    if sample.patches.is_empty() {
        return Err(ModelError::Input("sequence has no patches".into()));
    }
    let width = cfg.input_width();
    let mut data = Vec::with_capacity(sample.patches.len() * width);
    for p in &sample.patches {
        if p.pixels.len() != width {
            return Err(ModelError::Input(format!("patch {} has {} values, expected {width}", p.patch_id, p.pixels.len())));
        }
        if (p.frame_id as usize) >= sample.frames.len() {
            return Err(ModelError::Input(format!("patch {} references missing frame {}", p.patch_id, p.frame_id)));
        }
        if p.pixels.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(ModelError::Input(format!("patch {} has pixel values outside [0, 1]", p.patch_id)));
        }
        data.extend(p.pixels.iter().map(|&v| T::of(v as f64)));
    }
    Ok(Tensor::matrix(sample.patches.len(), width, data)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub encoding: EncodingConfig,
    pub weights: ModelWeights<T>,
}

pub struct SequenceForward {
    pub trace: ForwardTrace,
    /// Registered weight sections, for collecting gradients.
    pub params: Vec<Var>,
}

impl<T: Real> Model<T> {
    pub fn new(config: ModelConfig, encoding: EncodingConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate(&encoding)?;
        let weights = ModelWeights::init(&config, seed);
        Ok(Self { config, encoding, weights })
    }

    /// Forward pass over one sequence. Weights are tracked when `track` is set.
    pub fn forward_sequence<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        sample: &SequenceSample,
        mode: Mode,
        rng: &mut R,
        track: bool,
    ) -> Result<SequenceForward, ModelError> {
        let pixels = g.constant(pixel_matrix(sample, &self.config)?);
        let params = self.weights.register(g, track);
        let trace = forward_vars(
            g,
            &self.config,
            &self.encoding,
            &params,
            pixels,
            &sample.positions(),
            None,
            mode,
            rng,
        )?;
        Ok(SequenceForward { trace, params })
    }

    /// Eval-mode per-patch camera-frame estimates.
    pub fn predict(&self, sample: &SequenceSample) -> Result<Vec<[f64; 3]>, ModelError> {
        let mut g = Graph::new();
        // eval mode never draws from the rng
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = self.forward_sequence(&mut g, sample, Mode::Eval, &mut rng, false)?;
        Ok(g.value(f.trace.output)
            .data()
            .chunks(3)
            .map(|r| [r[0].f64(), r[1].f64(), r[2].f64()])
            .collect())
    }
}
