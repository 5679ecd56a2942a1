//! Layer-wise measurements on traced forward passes: compression, sparsity,
//! subspace coherence and token heatmaps.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::layers::{sample_forward, CrateParams, LayerTrace, ModelConfig};
use crate::linalg::Matrix;
use crate::rate::{coding_rate_projected, RateConfig, SubspaceBank};
use crate::rng::Rng;

fn check_traces(traces: &[Vec<LayerTrace>]) -> Result<usize> {
    let layers = traces
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::Invalid("no traces to measure".into()))?;
    if traces.iter().any(|t| t.len() != layers) {
        return Err(Error::shape("diagnostics", "samples traced through differing layer counts"));
    }
    Ok(layers)
}

/// `R^c(z_mid)` per layer under that layer's subspaces, averaged over
/// samples. `traces[sample][layer]`.
pub fn measure_compression(traces: &[Vec<LayerTrace>], banks: &[&SubspaceBank], cfg: &RateConfig) -> Result<Vec<f64>> {
    let layers = check_traces(traces)?;
    if banks.len() != layers {
        return Err(Error::shape(
            "measure_compression",
            format!("{} subspace banks for {layers} layers", banks.len()),
        ));
    }
    let per_sample: Vec<Vec<f64>> = traces
        .par_iter()
        .map(|sample| {
            sample
                .iter()
                .zip(banks)
                .map(|(t, bank)| coding_rate_projected(&t.z_mid, bank, cfg))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    Ok(ordered_mean(&per_sample, layers))
}

/// Fraction of `z_out` entries with magnitude above `threshold`, per
/// layer, averaged over samples.
pub fn measure_sparsity(traces: &[Vec<LayerTrace>], threshold: f64) -> Result<Vec<f64>> {
    if !(threshold >= 0.0) {
        return Err(Error::Invalid(format!("sparsity threshold must be nonnegative, got {threshold}")));
    }
    let layers = check_traces(traces)?;
    let per_sample: Vec<Vec<f64>> = traces
        .iter()
        .map(|sample| {
            sample
                .iter()
                .map(|t| t.z_out.count_nonzero(threshold) as f64 / t.z_out.len().max(1) as f64)
                .collect()
        })
        .collect();
    Ok(ordered_mean(&per_sample, layers))
}

fn ordered_mean(per_sample: &[Vec<f64>], layers: usize) -> Vec<f64> {
    let mut out = vec![0.0; layers];
    for row in per_sample {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    let n = per_sample.len() as f64;
    out.iter().map(|v| v / n).collect()
}

/// Gram matrix of the column-normalized concatenated bases, `pK x pK`.
pub fn subspace_coherence(bank: &SubspaceBank) -> Result<Matrix> {
    let all = bank.concatenated();
    if all.cols() == 0 {
        return Err(Error::Invalid("empty subspace bank".into()));
    }
    let mut normalized = all.clone();
    for c in 0..all.cols() {
        let col = all.column(c);
        let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::RankDeficient { column: c });
        }
        let scaled: Vec<f64> = col.iter().map(|v| v / norm).collect();
        normalized.set_column(c, &scaled);
    }
    normalized.t_matmul(&normalized)
}

/// Largest magnitude outside the `p x p` diagonal blocks.
pub fn off_diagonal_block_max(coherence: &Matrix, p: usize) -> f64 {
    let mut worst: f64 = 0.0;
    for r in 0..coherence.rows() {
        for c in 0..coherence.cols() {
            if r / p != c / p {
                worst = worst.max(coherence[(r, c)].abs());
            }
        }
    }
    worst
}

/// A random `rows x cols` submatrix of `z_out`; the chosen indices are kept
/// in ascending order.
pub fn export_token_heatmap(trace: &LayerTrace, rows: usize, cols: usize, rng: &mut Rng) -> Result<Matrix> {
    let z = &trace.z_out;
    if rows > z.rows() || cols > z.cols() {
        return Err(Error::Invalid(format!(
            "heatmap {rows}x{cols} does not fit tokens of shape {:?}",
            z.shape()
        )));
    }
    let mut r: Vec<usize> = rng.permutation(z.rows()).into_iter().take(rows).collect();
    let mut c: Vec<usize> = rng.permutation(z.cols()).into_iter().take(cols).collect();
    r.sort_unstable();
    c.sort_unstable();
    z.select_rows(&r)?.select_columns(&c)
}

/// Transitions `v[i] → v[i+1]` with `v[i+1] ≤ v[i]`.
pub fn count_non_increasing(values: &[f64]) -> usize {
    values.windows(2).filter(|w| w[1] <= w[0]).count()
}

/// At most one of the `L − 1` layer transitions goes up.
pub fn mostly_non_increasing(values: &[f64]) -> bool {
    values.len() < 2 || count_non_increasing(values) + 1 >= values.len() - 1
}

pub fn write_layer_values(path: &Path, values: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["layer", "value"])?;
    for (l, v) in values.iter().enumerate() {
        w.write_record([(l + 1).to_string(), v.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_matrix(path: &Path, m: &Matrix) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    for r in 0..m.rows() {
        w.write_record(m.row(r).iter().map(|v| v.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Summary of the layer-wise measurements of a model on an evaluation set.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DiagnosticsReport {
    pub samples: usize,
    pub compression: Vec<f64>,
    pub sparsity: Vec<f64>,
    /// Off-diagonal block maximum of each layer's coherence matrix.
    pub coherence_off_diagonal: Vec<f64>,
    pub compression_trend_holds: bool,
    pub sparsity_trend_holds: bool,
}

/// Traces `samples` through the model and computes every measurement.
/// When `out_dir` is given, writes `compression.csv`, `sparsity.csv`,
/// `coherence_l<ℓ>.csv` and `tokens_l<ℓ>.csv` there.
pub fn diagnose(
    params: &CrateParams,
    model: &ModelConfig,
    samples: &[Matrix],
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<DiagnosticsReport> {
    if samples.is_empty() {
        return Err(Error::Invalid("diagnostics need at least one sample".into()));
    }
    let traces: Vec<Vec<LayerTrace>> = samples
        .par_iter()
        .map(|x| sample_forward(x, params, model).map(|(_, t)| t))
        .collect::<Result<_>>()?;
    let banks: Vec<&SubspaceBank> = params.layers.iter().map(|l| &l.subspaces).collect();
    let rate = model.rate();
    let compression = measure_compression(&traces, &banks, &rate)?;
    let sparsity = measure_sparsity(&traces, 0.0)?;
    let coherence = banks
        .iter()
        .map(|b| subspace_coherence(b))
        .collect::<Result<Vec<_>>>()?;
    let coherence_off_diagonal = coherence
        .iter()
        .map(|c| off_diagonal_block_max(c, model.head_dim))
        .collect();

    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_layer_values(&dir.join("compression.csv"), &compression)?;
        write_layer_values(&dir.join("sparsity.csv"), &sparsity)?;
        let mut rng = Rng::new(seed);
        for (l, c) in coherence.iter().enumerate() {
            write_matrix(&dir.join(format!("coherence_l{}.csv", l + 1)), c)?;
            let trace = &traces[0][l];
            let (rows, cols) = (trace.z_out.rows().min(50), trace.z_out.cols().min(50));
            let heat = export_token_heatmap(trace, rows, cols, &mut rng)?;
            write_matrix(&dir.join(format!("tokens_l{}.csv", l + 1)), &heat)?;
        }
    }

    Ok(DiagnosticsReport {
        samples: samples.len(),
        compression_trend_holds: mostly_non_increasing(&compression),
        sparsity_trend_holds: mostly_non_increasing(&sparsity),
        compression,
        sparsity,
        coherence_off_diagonal,
    })
}
