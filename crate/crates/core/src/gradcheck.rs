//! Central finite-difference checks for the tape primitives and for full
//! model gradients.

use serde::Serialize;

use crate::autodiff::{cross_entropy_smoothed, Tape, Var};
use crate::error::{Error, Result};
use crate::graph::classification_grad;
use crate::layers::{crate_forward, CrateParams, ModelConfig, TokenBatch};
use crate::linalg::Matrix;
use crate::rng::Rng;

pub const DEFAULT_STEP: f64 = 1e-5;

fn rel_diff(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Compares `⟨Jᵀu, v⟩` from the tape with the central difference
/// `⟨u, f(x + hv) − f(x − hv)⟩ / 2h` for a random cotangent `u`.
/// Returns the relative error.
pub fn vjp_check<F>(inputs: &[Matrix], directions: &[Matrix], step: f64, rng: &mut Rng, build: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if inputs.len() != directions.len() {
        return Err(Error::Invalid("one direction per input is required".into()));
    }
    let run = |xs: &[Matrix]| -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = build(&mut tape, &vars)?;
        Ok((tape, vars, out))
    };
    let (tape, vars, out) = run(inputs)?;
    let (r, c) = tape.value(out).shape();
    let u = rng.normal_matrix(r, c);
    let grads = tape.backward_with(out, u.clone())?;
    let mut analytic = 0.0;
    for (v, dir) in vars.iter().zip(directions) {
        analytic += grads.wrt(*v).dot(dir)?;
    }

    let shifted = |sign: f64| -> Result<f64> {
        let xs = inputs
            .iter()
            .zip(directions)
            .map(|(x, d)| {
                let mut y = x.clone();
                y.axpy(sign * step, d)?;
                Ok(y)
            })
            .collect::<Result<Vec<_>>>()?;
        let (tape, _, out) = run(&xs)?;
        tape.value(out).dot(&u)
    };
    let numeric = (shifted(1.0)? - shifted(-1.0)?) / (2.0 * step);
    Ok(rel_diff(analytic, numeric))
}

/// A matrix with entries bounded away from zero, for kinked primitives.
fn away_from_zero(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    rng.normal_matrix(rows, cols)
        .map(|v| if v >= 0.0 { v + 0.2 } else { v - 0.2 })
}

/// Relative VJP error of every tape primitive on random inputs.
pub fn primitive_vjp_checks(seed: u64, step: f64) -> Result<Vec<(&'static str, f64)>> {
    let mut rng = Rng::new(seed);
    let mut out = Vec::new();
    let dir = |rng: &mut Rng, shapes: &[(usize, usize)]| -> Vec<Matrix> {
        shapes.iter().map(|&(r, c)| rng.normal_matrix(r, c)).collect()
    };

    let a = rng.normal_matrix(3, 4);
    let b = rng.normal_matrix(4, 5);
    let d = dir(&mut rng, &[(3, 4), (4, 5)]);
    out.push(("matmul", vjp_check(&[a, b], &d, step, &mut rng, |t, v| t.matmul(v[0], v[1]))?));

    let a = rng.normal_matrix(4, 3);
    let b = rng.normal_matrix(4, 5);
    let d = dir(&mut rng, &[(4, 3), (4, 5)]);
    out.push(("t_matmul", vjp_check(&[a, b], &d, step, &mut rng, |t, v| t.t_matmul(v[0], v[1]))?));

    let a = rng.normal_matrix(3, 4);
    let b = rng.normal_matrix(3, 4);
    let d = dir(&mut rng, &[(3, 4), (3, 4)]);
    out.push(("add", vjp_check(&[a.clone(), b.clone()], &d, step, &mut rng, |t, v| t.add(v[0], v[1]))?));
    out.push(("sub", vjp_check(&[a.clone(), b], &d, step, &mut rng, |t, v| t.sub(v[0], v[1]))?));
    let d1 = dir(&mut rng, &[(3, 4)]);
    out.push(("scale", vjp_check(std::slice::from_ref(&a), &d1, step, &mut rng, |t, v| t.scale(v[0], -1.7))?));
    out.push(("shift", vjp_check(std::slice::from_ref(&a), &d1, step, &mut rng, |t, v| t.shift(v[0], 0.3))?));
    out.push(("transpose", vjp_check(std::slice::from_ref(&a), &d1, step, &mut rng, |t, v| t.transpose(v[0]))?));

    let col = rng.normal_matrix(3, 1);
    let d = dir(&mut rng, &[(3, 4), (3, 1)]);
    out.push(("add_column", vjp_check(&[a.clone(), col], &d, step, &mut rng, |t, v| t.add_column(v[0], v[1]))?));

    let s = rng.normal_matrix(5, 4).scale(2.0);
    let d = dir(&mut rng, &[(5, 4)]);
    out.push(("softmax_columns", vjp_check(&[s], &d, step, &mut rng, |t, v| t.softmax_columns(v[0]))?));

    let r = away_from_zero(4, 3, &mut rng);
    let d = dir(&mut rng, &[(4, 3)]);
    out.push(("relu", vjp_check(&[r], &d, step, &mut rng, |t, v| t.relu(v[0]))?));

    let x = rng.normal_matrix(6, 4);
    let g = rng.normal_matrix(6, 1);
    let bias = rng.normal_matrix(6, 1);
    let d = dir(&mut rng, &[(6, 4), (6, 1), (6, 1)]);
    out.push((
        "layer_norm",
        vjp_check(&[x, g, bias], &d, step, &mut rng, |t, v| t.layer_norm(v[0], v[1], v[2]))?,
    ));

    let d1 = dir(&mut rng, &[(3, 4)]);
    out.push((
        "select_columns",
        vjp_check(std::slice::from_ref(&a), &d1, step, &mut rng, |t, v| t.select_columns(v[0], &[2, 0, 2]))?,
    ));

    let b2 = rng.normal_matrix(3, 2);
    let d = dir(&mut rng, &[(3, 4), (3, 2)]);
    out.push((
        "concat_columns",
        vjp_check(&[a.clone(), b2], &d, step, &mut rng, |t, v| t.concat_columns(&[v[0], v[1]]))?,
    ));
    let b3 = rng.normal_matrix(2, 4);
    let d = dir(&mut rng, &[(3, 4), (2, 4)]);
    out.push((
        "concat_rows",
        vjp_check(&[a, b3], &d, step, &mut rng, |t, v| t.concat_rows(&[v[0], v[1]]))?,
    ));

    let logits = rng.normal_matrix(4, 5);
    let d = dir(&mut rng, &[(4, 5)]);
    out.push((
        "cross_entropy",
        vjp_check(&[logits], &d, step, &mut rng, |t, v| t.cross_entropy(v[0], &[0, 3, 1, 1, 2], 0.1))?,
    ));

    // A = I + GᵀG; only symmetric perturbations of A are meaningful.
    let gm = rng.normal_matrix(4, 4);
    let spd = Matrix::identity(4).add(&gm.t_matmul(&gm)?)?;
    let rhs = rng.normal_matrix(3, 4);
    let sym_dir = rng.normal_matrix(4, 4).symmetric_part();
    let d = vec![rng.normal_matrix(3, 4), sym_dir];
    out.push((
        "spd_solve_right",
        vjp_check(&[rhs, spd], &d, step, &mut rng, |t, v| t.spd_solve_right(v[0], v[1]))?,
    ));
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TensorCheck {
    pub tensor: String,
    /// Sampled entry indices (row-major).
    pub indices: Vec<usize>,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` over the sample.
    pub rel_error: f64,
}

fn batch_loss(params: &CrateParams, batch: &TokenBatch, model: &ModelConfig, smoothing: f64) -> Result<f64> {
    let out = crate_forward(batch, params, model, false)?;
    let labels = batch
        .labels
        .as_ref()
        .ok_or_else(|| Error::Invalid("gradient check needs labels".into()))?;
    cross_entropy_smoothed(&out.logits, labels, smoothing)
}

/// Tape gradients of the smoothed cross-entropy against central differences
/// of the plain forward pass, on `per_tensor` random entries of every
/// parameter tensor.
pub fn model_gradient_check(
    params: &CrateParams,
    model: &ModelConfig,
    batch: &TokenBatch,
    smoothing: f64,
    per_tensor: usize,
    step: f64,
    rng: &mut Rng,
) -> Result<Vec<TensorCheck>> {
    let analytic = classification_grad(params, batch, model, smoothing)?;
    let names: Vec<(String, usize)> = params.tensors().into_iter().map(|(n, m)| (n, m.len())).collect();
    let mut probe = params.clone();
    let mut out = Vec::with_capacity(names.len());
    for (t, (name, len)) in names.into_iter().enumerate() {
        let mut indices: Vec<usize> = rng.permutation(len).into_iter().take(per_tensor).collect();
        indices.sort_unstable();
        let mut a = Vec::with_capacity(indices.len());
        let mut n = Vec::with_capacity(indices.len());
        for &i in &indices {
            let original = probe.tensors_mut()[t].as_slice()[i];
            probe.tensors_mut()[t].as_mut_slice()[i] = original + step;
            let plus = batch_loss(&probe, batch, model, smoothing)?;
            probe.tensors_mut()[t].as_mut_slice()[i] = original - step;
            let minus = batch_loss(&probe, batch, model, smoothing)?;
            probe.tensors_mut()[t].as_mut_slice()[i] = original;
            n.push((plus - minus) / (2.0 * step));
            a.push(analytic.grads[t].as_slice()[i]);
        }
        let diff: f64 = a.iter().zip(&n).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let scale = norm(&a).max(norm(&n));
        out.push(TensorCheck {
            tensor: name,
            indices,
            analytic: a,
            numeric: n,
            rel_error: if scale == 0.0 { 0.0 } else { diff / scale },
        });
    }
    Ok(out)
}
