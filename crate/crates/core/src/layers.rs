//! Layer operators of the white-box transformer and the full forward pass.
//!
//! Each layer compresses tokens against a bank of subspaces (multi-head
//! subspace self-attention) and then sparsifies them in a dictionary with
//! one ISTA step:
//!
//! ```text
//! Z_mid = Z + MSSA(LN1(Z) | U)
//! Z_out = ISTA(LN2(Z_mid) | D)
//! ```
//!
//! Tokens are matrix columns throughout.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{random_orthonormal, softmax_columns, Matrix};
use crate::rate::{grad_coding_rate_projected, RateConfig, SubspaceBank};
use crate::rng::Rng;

pub const LAYER_NORM_EPS: f64 = 1e-6;
const DICTIONARY_ORTHO_TOL: f64 = 1e-8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    /// Heads aggregated by `γ [U_1, …, U_K]`.
    Tied,
    /// Heads aggregated by a learned `W ∈ R^{d x pK}`.
    #[default]
    TrainableW,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerVariant {
    /// MSSA with residual, then ISTA.
    #[default]
    Default,
    /// Exact gradient step on `R^c` in place of MSSA, then ISTA.
    ExactGrad,
    /// MSSA with residual, then the proximal majorization-minimization step.
    MmProx,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CompressionGrad {
    Approx,
    Exact,
}

/// Per-feature affine layer norm applied to each token column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gain: Matrix,
    pub bias: Matrix,
}

impl LayerNorm {
    pub fn identity(d: usize) -> Self {
        Self {
            gain: Matrix::filled(d, 1, 1.0),
            bias: Matrix::zeros(d, 1),
        }
    }

    pub fn dim(&self) -> usize {
        self.gain.rows()
    }

    pub fn apply(&self, z: &Matrix) -> Result<Matrix> {
        let d = z.rows();
        if self.gain.shape() != (d, 1) || self.bias.shape() != (d, 1) {
            return Err(Error::shape(
                "layer_norm",
                format!("norm of width {} applied to {} rows", self.gain.rows(), d),
            ));
        }
        let mut out = Matrix::zeros(d, z.cols());
        for c in 0..z.cols() {
            let col = z.column(c);
            let mean = col.iter().sum::<f64>() / d as f64;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (r, v) in col.iter().enumerate() {
                out[(r, c)] = (v - mean) * inv * self.gain[(r, 0)] + self.bias[(r, 0)];
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub subspaces: SubspaceBank,
    pub head_mixer: Option<Matrix>,
    pub dictionary: Matrix,
    pub ln1: LayerNorm,
    pub ln2: LayerNorm,
}

impl LayerParams {
    /// Orthonormal subspaces and dictionary, identity norms. The head mixer
    /// (trainable-W mode only) starts at `γ [U_1, …, U_K]`, so both modes
    /// compute the same function at initialization.
    pub fn init(rate: &RateConfig, mode: AttentionMode, rng: &mut Rng) -> Result<Self> {
        let subspaces = SubspaceBank::random(rate.d, rate.p, rate.k, rng)?;
        let head_mixer = match mode {
            AttentionMode::Tied => None,
            AttentionMode::TrainableW => Some(subspaces.concatenated().scale(rate.gamma())),
        };
        let dictionary = random_orthonormal(rate.d, rate.d, rng)?;
        Ok(Self {
            subspaces,
            head_mixer,
            dictionary,
            ln1: LayerNorm::identity(rate.d),
            ln2: LayerNorm::identity(rate.d),
        })
    }
}

/// How the attention logits are scaled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Temperature {
    /// `1/√p`.
    #[default]
    InvSqrtHeadDim,
    /// Unscaled Gram matrix.
    Unit,
    Fixed(f64),
}

impl Temperature {
    pub fn value(&self, p: usize) -> f64 {
        match self {
            Temperature::InvSqrtHeadDim => 1.0 / (p as f64).sqrt(),
            Temperature::Unit => 1.0,
            Temperature::Fixed(t) => *t,
        }
    }
}

fn default_kappa() -> f64 {
    1.0
}
fn default_eta() -> f64 {
    0.1
}
fn default_lambda() -> f64 {
    0.1
}
fn default_eps() -> f64 {
    0.5
}

/// Architecture of an `L`-layer model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Raw token (patch) dimension.
    pub input_dim: usize,
    /// Input tokens per sample, excluding the CLS token.
    pub tokens: usize,
    pub classes: usize,
    /// Embedding dimension `d`.
    pub dim: usize,
    /// Number of heads `K`.
    pub heads: usize,
    /// Subspace dimension `p`.
    pub head_dim: usize,
    pub layers: usize,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default = "default_kappa")]
    pub kappa: f64,
    #[serde(default)]
    pub attention: AttentionMode,
    #[serde(default)]
    pub variant: LayerVariant,
    #[serde(default)]
    pub temperature: Temperature,
}

impl ModelConfig {
    /// The 4-layer desk-scale model: `d = 32`, `K = 4`, `p = 8`.
    pub fn micro(input_dim: usize, tokens: usize, classes: usize) -> Self {
        Self {
            input_dim,
            tokens,
            classes,
            dim: 32,
            heads: 4,
            head_dim: 8,
            layers: 4,
            eps: default_eps(),
            lambda: default_lambda(),
            eta: default_eta(),
            kappa: default_kappa(),
            attention: AttentionMode::default(),
            variant: LayerVariant::default(),
            temperature: Temperature::default(),
        }
    }

    /// The rate configuration seen inside the layers (`N` includes CLS).
    pub fn rate(&self) -> RateConfig {
        RateConfig {
            d: self.dim,
            n: self.tokens + 1,
            p: self.head_dim,
            k: self.heads,
            eps: self.eps,
            lambda: self.lambda,
            kappa: self.kappa,
            eta: self.eta,
        }
    }

    pub fn options(&self) -> LayerOptions {
        LayerOptions {
            variant: self.variant,
            attention: self.attention,
            temperature: self.temperature.value(self.head_dim),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.tokens == 0 || self.classes == 0 {
            return Err(Error::Invalid(
                "input_dim, tokens and classes must be positive".into(),
            ));
        }
        if !(self.options().temperature > 0.0) {
            return Err(Error::Invalid("attention temperature must be positive".into()));
        }
        self.rate().validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerOptions {
    pub variant: LayerVariant,
    pub attention: AttentionMode,
    pub temperature: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrateParams {
    /// `d x input_dim`.
    pub patch_embed: Matrix,
    /// `d x 1`.
    pub patch_bias: Matrix,
    /// `d x (tokens + 1)`, column 0 belongs to CLS.
    pub pos_embed: Matrix,
    /// `d x 1`.
    pub cls_token: Matrix,
    pub layers: Vec<LayerParams>,
    pub final_norm: LayerNorm,
    /// `classes x d`.
    pub head: Matrix,
    /// `classes x 1`.
    pub head_bias: Matrix,
}

impl CrateParams {
    pub fn init(cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let rate = cfg.rate();
        let d = cfg.dim;
        let embed_scale = 1.0 / (cfg.input_dim as f64).sqrt();
        let patch_embed = rng.normal_matrix(d, cfg.input_dim).scale(embed_scale);
        let pos_embed = rng.normal_matrix(d, cfg.tokens + 1).scale(0.02);
        let cls_token = rng.normal_matrix(d, 1).scale(0.02);
        let layers = (0..cfg.layers)
            .map(|_| LayerParams::init(&rate, cfg.attention, rng))
            .collect::<Result<Vec<_>>>()?;
        let head = rng.normal_matrix(cfg.classes, d).scale(0.02);
        Ok(Self {
            patch_embed,
            patch_bias: Matrix::zeros(d, 1),
            pos_embed,
            cls_token,
            layers,
            final_norm: LayerNorm::identity(d),
            head,
            head_bias: Matrix::zeros(cfg.classes, 1),
        })
    }

    /// Every learnable tensor in a fixed canonical order.
    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out: Vec<(String, &Matrix)> = vec![
            ("patch_embed".into(), &self.patch_embed),
            ("patch_bias".into(), &self.patch_bias),
            ("pos_embed".into(), &self.pos_embed),
            ("cls_token".into(), &self.cls_token),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            for (h, u) in layer.subspaces.bases().iter().enumerate() {
                out.push((format!("layers.{l}.subspace.{h}"), u));
            }
            if let Some(w) = &layer.head_mixer {
                out.push((format!("layers.{l}.head_mixer"), w));
            }
            out.push((format!("layers.{l}.dictionary"), &layer.dictionary));
            out.push((format!("layers.{l}.ln1.gain"), &layer.ln1.gain));
            out.push((format!("layers.{l}.ln1.bias"), &layer.ln1.bias));
            out.push((format!("layers.{l}.ln2.gain"), &layer.ln2.gain));
            out.push((format!("layers.{l}.ln2.bias"), &layer.ln2.bias));
        }
        out.push(("final_norm.gain".into(), &self.final_norm.gain));
        out.push(("final_norm.bias".into(), &self.final_norm.bias));
        out.push(("head".into(), &self.head));
        out.push(("head_bias".into(), &self.head_bias));
        out
    }

    /// Mutable view in the same order as [`CrateParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = vec![
            &mut self.patch_embed,
            &mut self.patch_bias,
            &mut self.pos_embed,
            &mut self.cls_token,
        ];
        for layer in &mut self.layers {
            for u in layer.subspaces.bases_mut() {
                out.push(u);
            }
            if let Some(w) = &mut layer.head_mixer {
                out.push(w);
            }
            out.push(&mut layer.dictionary);
            out.push(&mut layer.ln1.gain);
            out.push(&mut layer.ln1.bias);
            out.push(&mut layer.ln2.gain);
            out.push(&mut layer.ln2.bias);
        }
        out.push(&mut self.final_norm.gain);
        out.push(&mut self.final_norm.bias);
        out.push(&mut self.head);
        out.push(&mut self.head_bias);
        out
    }

    /// Whether weight decay applies to each tensor: projection weights yes;
    /// biases, norms, positional embedding and CLS no.
    pub fn decay_mask(&self) -> Vec<bool> {
        self.tensors()
            .iter()
            .map(|(name, _)| {
                !(name.ends_with("bias")
                    || name.ends_with("gain")
                    || name == "pos_embed"
                    || name == "cls_token")
            })
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, m)| m.len()).sum()
    }
}

/// A batch of per-sample token matrices (`input_dim x tokens` each).
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    pub samples: Vec<Matrix>,
    pub labels: Option<Vec<usize>>,
}

impl TokenBatch {
    pub fn new(samples: Vec<Matrix>, labels: Option<Vec<usize>>) -> Result<Self> {
        if let Some(labels) = &labels {
            if labels.len() != samples.len() {
                return Err(Error::CountMismatch {
                    images: samples.len(),
                    labels: labels.len(),
                });
            }
        }
        Ok(Self { samples, labels })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Snapshots of one layer's input, post-attention, and output tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerTrace {
    pub z_in: Matrix,
    pub z_mid: Matrix,
    pub z_out: Matrix,
}

/// Subspace self-attention `(UᵀZ) softmax_columns(t (UᵀZ)ᵀ(UᵀZ))`, `p x N`.
pub fn ssa(z: &Matrix, u_k: &Matrix, temperature: f64) -> Result<Matrix> {
    if u_k.rows() != z.rows() {
        return Err(Error::shape(
            "ssa",
            format!("basis {:?} against tokens {:?}", u_k.shape(), z.shape()),
        ));
    }
    if !(temperature > 0.0) {
        return Err(Error::Invalid(format!("ssa temperature must be positive, got {temperature}")));
    }
    let proj = u_k.t_matmul(z)?;
    let gram = proj.t_matmul(&proj)?.scale(temperature);
    proj.matmul(&softmax_columns(&gram)?)
}

fn stacked_heads(z: &Matrix, bank: &SubspaceBank, temperature: f64) -> Result<Matrix> {
    let heads = bank
        .bases()
        .iter()
        .map(|u| ssa(z, u, temperature))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Matrix> = heads.iter().collect();
    Matrix::vcat(&refs)
}

/// Multi-head subspace self-attention, `d x N`.
pub fn mssa(
    z: &Matrix,
    params: &LayerParams,
    cfg: &RateConfig,
    mode: AttentionMode,
    temperature: f64,
) -> Result<Matrix> {
    let stacked = stacked_heads(z, &params.subspaces, temperature)?;
    match mode {
        AttentionMode::Tied => params
            .subspaces
            .concatenated()
            .matmul(&stacked)
            .map(|m| m.scale(cfg.gamma())),
        AttentionMode::TrainableW => params
            .head_mixer
            .as_ref()
            .ok_or_else(|| Error::Invalid("trainable_w attention requires a head mixer W".into()))?
            .matmul(&stacked),
    }
}

/// One compression step on `R^c` with step size `κ`.
///
/// `Approx` is the softmax surrogate
/// `(1 − κγ) Z + κγ² [U_1, …, U_K] stack_k(SSA(Z | U_k))` (unit temperature);
/// `Exact` is `Z − κ ∇R^c(Z)`.
pub fn compression_step(
    z: &Matrix,
    params: &LayerParams,
    cfg: &RateConfig,
    grad: CompressionGrad,
) -> Result<Matrix> {
    let kappa = cfg.kappa;
    match grad {
        CompressionGrad::Approx => {
            let gamma = cfg.gamma();
            let stacked = stacked_heads(z, &params.subspaces, 1.0)?;
            let update = params.subspaces.concatenated().matmul(&stacked)?;
            let mut out = z.scale(1.0 - kappa * gamma);
            out.axpy(kappa * gamma * gamma, &update)?;
            Ok(out)
        }
        CompressionGrad::Exact => {
            let g = grad_coding_rate_projected(z, &params.subspaces, cfg)?;
            let mut out = z.clone();
            out.axpy(-kappa, &g)?;
            Ok(out)
        }
    }
}

/// `ReLU(Z + η Dᵀ(Z − D Z) − ηλ 1)`.
pub fn ista_step(z_mid: &Matrix, dictionary: &Matrix, eta: f64, lambda: f64) -> Result<Matrix> {
    if dictionary.rows() != dictionary.cols() || dictionary.rows() != z_mid.rows() {
        return Err(Error::shape(
            "ista_step",
            format!("dictionary {:?} against tokens {:?}", dictionary.shape(), z_mid.shape()),
        ));
    }
    if !(eta > 0.0) || !(lambda >= 0.0) {
        return Err(Error::Invalid(format!(
            "ista_step needs eta > 0 and lambda >= 0 (eta={eta}, lambda={lambda})"
        )));
    }
    let residual = z_mid.sub(&dictionary.matmul(z_mid)?)?;
    let mut pre = z_mid.clone();
    pre.axpy(eta, &dictionary.t_matmul(&residual)?)?;
    Ok(pre.shift(-eta * lambda).relu())
}

/// `ReLU((1 + 4/(9(1+α))) DᵀZ − (4λ/(9α)) 1)`; the dictionary must be
/// orthogonal to within 1e-8.
pub fn mm_prox_step(z_mid: &Matrix, dictionary: &Matrix, cfg: &RateConfig) -> Result<Matrix> {
    if dictionary.rows() != dictionary.cols() {
        return Err(Error::shape("mm_prox_step", "dictionary must be square"));
    }
    let gram = dictionary.t_matmul(dictionary)?;
    let err = gram.max_abs_diff(&Matrix::identity(dictionary.cols()))?;
    if err > DICTIONARY_ORTHO_TOL {
        return Err(Error::Precondition(format!(
            "mm_prox_step needs an orthogonal dictionary (DᵀD − I max error {err:e})"
        )));
    }
    mm_prox_apply(z_mid, dictionary, cfg)
}

/// [`mm_prox_step`] without the orthogonality check, as used inside a
/// trained network whose dictionary has drifted.
pub fn mm_prox_apply(z_mid: &Matrix, dictionary: &Matrix, cfg: &RateConfig) -> Result<Matrix> {
    if dictionary.rows() != z_mid.rows() {
        return Err(Error::shape(
            "mm_prox_step",
            format!("dictionary {:?} against tokens {:?}", dictionary.shape(), z_mid.shape()),
        ));
    }
    let (gain, shift) = mm_prox_coefficients(cfg);
    Ok(dictionary.t_matmul(z_mid)?.scale(gain).shift(-shift).relu())
}

/// `(1 + 4/(9(1+α)), 4λ/(9α))`.
pub fn mm_prox_coefficients(cfg: &RateConfig) -> (f64, f64) {
    let alpha = cfg.alpha();
    (1.0 + 4.0 / (9.0 * (1.0 + alpha)), 4.0 * cfg.lambda / (9.0 * alpha))
}

pub fn layer_forward(
    z: &Matrix,
    params: &LayerParams,
    cfg: &RateConfig,
    opts: &LayerOptions,
) -> Result<LayerTrace> {
    let normed = params.ln1.apply(z)?;
    let z_mid = match opts.variant {
        LayerVariant::Default | LayerVariant::MmProx => {
            z.add(&mssa(&normed, params, cfg, opts.attention, opts.temperature)?)?
        }
        LayerVariant::ExactGrad => {
            let g = grad_coding_rate_projected(&normed, &params.subspaces, cfg)?;
            let mut out = z.clone();
            out.axpy(-cfg.kappa, &g)?;
            out
        }
    };
    let normed_mid = params.ln2.apply(&z_mid)?;
    let z_out = match opts.variant {
        LayerVariant::Default | LayerVariant::ExactGrad => {
            ista_step(&normed_mid, &params.dictionary, cfg.eta, cfg.lambda)?
        }
        LayerVariant::MmProx => mm_prox_apply(&normed_mid, &params.dictionary, cfg)?,
    };
    Ok(LayerTrace {
        z_in: z.clone(),
        z_mid,
        z_out,
    })
}

/// Patch embedding, CLS prepend and positional embedding: the layer-0 tokens.
pub fn embed(x: &Matrix, params: &CrateParams) -> Result<Matrix> {
    if x.rows() != params.patch_embed.cols() {
        return Err(Error::shape(
            "embed",
            format!(
                "sample has token dimension {}, patch embedding expects {}",
                x.rows(),
                params.patch_embed.cols()
            ),
        ));
    }
    if x.cols() + 1 != params.pos_embed.cols() {
        return Err(Error::shape(
            "embed",
            format!(
                "sample has {} tokens, positional embedding covers {}",
                x.cols(),
                params.pos_embed.cols() - 1
            ),
        ));
    }
    let mut tokens = params.patch_embed.matmul(x)?;
    for c in 0..tokens.cols() {
        for r in 0..tokens.rows() {
            tokens[(r, c)] += params.patch_bias[(r, 0)];
        }
    }
    Matrix::hcat(&[&params.cls_token, &tokens])?.add(&params.pos_embed)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    /// `batch x classes`, one row per sample in batch order.
    pub logits: Matrix,
    /// `traces[sample][layer]`; empty unless tracing was requested.
    pub traces: Vec<Vec<LayerTrace>>,
}

/// Logits for one sample as a `classes x 1` column, plus the layer traces.
pub fn sample_forward(
    x: &Matrix,
    params: &CrateParams,
    cfg: &ModelConfig,
) -> Result<(Matrix, Vec<LayerTrace>)> {
    let rate = cfg.rate();
    let opts = cfg.options();
    let mut z = embed(x, params)?;
    let mut traces = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let trace = layer_forward(&z, layer, &rate, &opts)?;
        z = trace.z_out.clone();
        traces.push(trace);
    }
    let normed = params.final_norm.apply(&z)?;
    let cls = normed.select_columns(&[0])?;
    let logits = params.head.matmul(&cls)?.add(&params.head_bias)?;
    Ok((logits, traces))
}

pub fn crate_forward(
    batch: &TokenBatch,
    params: &CrateParams,
    cfg: &ModelConfig,
    trace: bool,
) -> Result<ForwardOutput> {
    let mut logits = Matrix::zeros(batch.len(), cfg.classes);
    let mut traces = Vec::new();
    for (i, x) in batch.samples.iter().enumerate() {
        let (out, layer_traces) = sample_forward(x, params, cfg)?;
        if out.rows() != cfg.classes {
            return Err(Error::shape("crate_forward", "head width differs from class count"));
        }
        for c in 0..cfg.classes {
            logits[(i, c)] = out[(c, 0)];
        }
        if trace {
            traces.push(layer_traces);
        }
    }
    Ok(ForwardOutput { logits, traces })
}
