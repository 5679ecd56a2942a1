//! The CRATE forward pass rebuilt on a [`Tape`], and batched gradients.

use rayon::prelude::*;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{mm_prox_coefficients, AttentionMode, CrateParams, LayerVariant, ModelConfig, TokenBatch};
use crate::linalg::Matrix;

/// Tape handles for one layer's parameters.
#[derive(Clone, Debug)]
pub struct LayerVars {
    pub subspaces: Vec<Var>,
    pub head_mixer: Option<Var>,
    pub dictionary: Var,
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
}

/// Tape handles for every parameter tensor of a [`CrateParams`].
#[derive(Clone, Debug)]
pub struct ParamVars {
    pub patch_embed: Var,
    pub patch_bias: Var,
    pub pos_embed: Var,
    pub cls_token: Var,
    pub layers: Vec<LayerVars>,
    pub final_gain: Var,
    pub final_bias: Var,
    pub head: Var,
    pub head_bias: Var,
    /// All of the above in [`CrateParams::tensors`] order.
    pub all: Vec<Var>,
}

impl ParamVars {
    /// Registers every tensor of `params` as a leaf.
    pub fn register(tape: &mut Tape, params: &CrateParams) -> Self {
        let mut all = Vec::new();
        let mut leaf = |tape: &mut Tape, m: &Matrix| {
            let v = tape.leaf(m.clone());
            all.push(v);
            v
        };
        let patch_embed = leaf(tape, &params.patch_embed);
        let patch_bias = leaf(tape, &params.patch_bias);
        let pos_embed = leaf(tape, &params.pos_embed);
        let cls_token = leaf(tape, &params.cls_token);
        let mut layers = Vec::with_capacity(params.layers.len());
        for layer in &params.layers {
            let subspaces = layer.subspaces.bases().iter().map(|u| leaf(tape, u)).collect();
            let head_mixer = layer.head_mixer.as_ref().map(|w| leaf(tape, w));
            let dictionary = leaf(tape, &layer.dictionary);
            let ln1_gain = leaf(tape, &layer.ln1.gain);
            let ln1_bias = leaf(tape, &layer.ln1.bias);
            let ln2_gain = leaf(tape, &layer.ln2.gain);
            let ln2_bias = leaf(tape, &layer.ln2.bias);
            layers.push(LayerVars {
                subspaces,
                head_mixer,
                dictionary,
                ln1_gain,
                ln1_bias,
                ln2_gain,
                ln2_bias,
            });
        }
        let final_gain = leaf(tape, &params.final_norm.gain);
        let final_bias = leaf(tape, &params.final_norm.bias);
        let head = leaf(tape, &params.head);
        let head_bias = leaf(tape, &params.head_bias);
        Self {
            patch_embed,
            patch_bias,
            pos_embed,
            cls_token,
            layers,
            final_gain,
            final_bias,
            head,
            head_bias,
            all,
        }
    }
}

fn layer_graph(tape: &mut Tape, z: Var, lv: &LayerVars, cfg: &ModelConfig) -> Result<Var> {
    let rate = cfg.rate();
    let opts = cfg.options();
    let normed = tape.layer_norm(z, lv.ln1_gain, lv.ln1_bias)?;
    let z_mid = match opts.variant {
        LayerVariant::Default | LayerVariant::MmProx => {
            let mut heads = Vec::with_capacity(lv.subspaces.len());
            for &u in &lv.subspaces {
                let proj = tape.t_matmul(u, normed)?;
                let gram = tape.t_matmul(proj, proj)?;
                let logits = tape.scale(gram, opts.temperature)?;
                let attn = tape.softmax_columns(logits)?;
                heads.push(tape.matmul(proj, attn)?);
            }
            let stacked = tape.concat_rows(&heads)?;
            let mixed = match opts.attention {
                AttentionMode::Tied => {
                    let bank = tape.concat_columns(&lv.subspaces)?;
                    let out = tape.matmul(bank, stacked)?;
                    tape.scale(out, rate.gamma())?
                }
                AttentionMode::TrainableW => {
                    let w = lv.head_mixer.ok_or_else(|| {
                        Error::Invalid("trainable_w attention requires a head mixer W".into())
                    })?;
                    tape.matmul(w, stacked)?
                }
            };
            tape.add(z, mixed)?
        }
        LayerVariant::ExactGrad => {
            // ∇R^c = γ Σ_k U_k (U_kᵀZ)(I + γ (U_kᵀZ)ᵀ(U_kᵀZ))⁻¹
            let gamma = rate.gamma();
            let n = tape.value(z).cols();
            let eye = tape.constant(Matrix::identity(n));
            let mut total: Option<Var> = None;
            for &u in &lv.subspaces {
                let proj = tape.t_matmul(u, normed)?;
                let gram = tape.t_matmul(proj, proj)?;
                let scaled = tape.scale(gram, gamma)?;
                let a = tape.add(scaled, eye)?;
                let solved = tape.spd_solve_right(proj, a)?;
                let lifted = tape.matmul(u, solved)?;
                let term = tape.scale(lifted, gamma)?;
                total = Some(match total {
                    Some(t) => tape.add(t, term)?,
                    None => term,
                });
            }
            let g = total.ok_or_else(|| Error::Invalid("layer has no subspaces".into()))?;
            let step = tape.scale(g, rate.kappa)?;
            tape.sub(z, step)?
        }
    };
    let normed_mid = tape.layer_norm(z_mid, lv.ln2_gain, lv.ln2_bias)?;
    match opts.variant {
        LayerVariant::Default | LayerVariant::ExactGrad => {
            let dz = tape.matmul(lv.dictionary, normed_mid)?;
            let residual = tape.sub(normed_mid, dz)?;
            let corr = tape.t_matmul(lv.dictionary, residual)?;
            let corr = tape.scale(corr, rate.eta)?;
            let pre = tape.add(normed_mid, corr)?;
            let shifted = tape.shift(pre, -rate.eta * rate.lambda)?;
            tape.relu(shifted)
        }
        LayerVariant::MmProx => {
            let (gain, shift) = mm_prox_coefficients(&rate);
            let t = tape.t_matmul(lv.dictionary, normed_mid)?;
            let t = tape.scale(t, gain)?;
            let t = tape.shift(t, -shift)?;
            tape.relu(t)
        }
    }
}

/// Builds the logits (`classes x 1`) for one `input_dim x tokens` sample.
pub fn logits_graph(tape: &mut Tape, vars: &ParamVars, x: &Matrix, cfg: &ModelConfig) -> Result<Var> {
    let x = tape.constant(x.clone());
    let embedded = tape.matmul(vars.patch_embed, x)?;
    let embedded = tape.add_column(embedded, vars.patch_bias)?;
    let with_cls = tape.concat_columns(&[vars.cls_token, embedded])?;
    let mut z = tape.add(with_cls, vars.pos_embed)?;
    for lv in &vars.layers {
        z = layer_graph(tape, z, lv, cfg)?;
    }
    let normed = tape.layer_norm(z, vars.final_gain, vars.final_bias)?;
    let cls = tape.select_columns(normed, &[0])?;
    let out = tape.matmul(vars.head, cls)?;
    tape.add(out, vars.head_bias)
}

/// Loss value, mean gradients in [`CrateParams::tensors`] order, and the
/// per-sample logits (`batch x classes`).
#[derive(Clone, Debug)]
pub struct GradientSet {
    pub loss: f64,
    pub grads: Vec<Matrix>,
    pub logits: Matrix,
}

/// Mean of a per-sample scalar loss and its gradient with respect to every
/// parameter tensor.
///
/// `loss_fn(tape, vars, sample, label)` must return a `1 x 1` node. Samples
/// run on independent tapes (possibly in parallel); gradients are summed in
/// sample order so the result does not depend on the worker count.
pub fn grad<F>(params: &CrateParams, batch: &TokenBatch, loss_fn: F) -> Result<GradientSet>
where
    F: Fn(&mut Tape, &ParamVars, &Matrix, Option<usize>) -> Result<(Var, Var)> + Sync,
{
    if batch.is_empty() {
        return Err(Error::Invalid("gradient of an empty batch".into()));
    }
    let per_sample: Vec<(f64, Vec<Matrix>, Matrix)> = batch
        .samples
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let mut tape = Tape::new();
            let vars = ParamVars::register(&mut tape, params);
            let label = batch.labels.as_ref().map(|l| l[i]);
            let (loss, logits) = loss_fn(&mut tape, &vars, x, label)?;
            let mut grads = tape.backward(loss)?;
            let tensors = vars.all.iter().map(|&v| grads.take(v)).collect();
            Ok((tape.value(loss)[(0, 0)], tensors, tape.value(logits).clone()))
        })
        .collect::<Result<_>>()?;

    let inv = 1.0 / batch.len() as f64;
    let classes = per_sample[0].2.rows();
    let mut logits = Matrix::zeros(batch.len(), classes);
    let mut loss = 0.0;
    let mut grads: Vec<Matrix> = per_sample[0].1.iter().map(|g| Matrix::zeros(g.rows(), g.cols())).collect();
    for (i, (l, g, out)) in per_sample.iter().enumerate() {
        loss += l;
        for (acc, gi) in grads.iter_mut().zip(g) {
            acc.axpy(1.0, gi)?;
        }
        for c in 0..classes {
            logits[(i, c)] = out[(c, 0)];
        }
    }
    for g in &mut grads {
        *g = g.scale(inv);
    }
    Ok(GradientSet {
        loss: loss * inv,
        grads,
        logits,
    })
}

/// Mean label-smoothed cross-entropy of the model on a labelled batch.
pub fn classification_grad(
    params: &CrateParams,
    batch: &TokenBatch,
    cfg: &ModelConfig,
    smoothing: f64,
) -> Result<GradientSet> {
    if batch.labels.is_none() {
        return Err(Error::Invalid("classification loss needs labels".into()));
    }
    grad(params, batch, |tape, vars, x, label| {
        let logits = logits_graph(tape, vars, x, cfg)?;
        let label = label.expect("labels checked above");
        let loss = tape.cross_entropy(logits, &[label], smoothing)?;
        Ok((loss, logits))
    })
}
