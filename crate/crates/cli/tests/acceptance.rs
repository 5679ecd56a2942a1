//! Acceptance run. Prints one PASS/FAIL line per criterion and exits non-zero
//! if any fails. Criterion numbers given as arguments select a subset, e.g.
//! `cargo test -p whitebox-cli --test acceptance -- 1 2 3`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use anyhow::{bail, ensure, Context, Result};
use nalgebra::DMatrix;
use whitebox_core::checkpoint::{load_checkpoint, save_checkpoint};
use whitebox_core::denoise::{attention_denoise, posterior_mean, relative_error, squared_error, tweedie_denoise, MixtureModel};
use whitebox_core::gradcheck::{primitive_vjp_checks, DEFAULT_STEP};
use whitebox_core::layers::{compression_step, ista_step, AttentionMode, CompressionGrad, LayerParams};
use whitebox_core::linalg::random_orthonormal;
use whitebox_core::rate::{
    grad_coding_rate, grad_coding_rate_projected, hessian_norm_bound_check, hessian_vec_coding_rate, ColumnNormCheck,
    RateConfig, SubspaceBank,
};
use whitebox_core::{Matrix, Rng};

type Criterion<'a> = (usize, &'static str, Box<dyn Fn() -> Result<Verdict> + 'a>);

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Result<Verdict> {
    Ok(Verdict { pass, detail })
}

// ------------------------------------------------------------------ helpers

fn whitebox(args: &[&str]) -> Result<String> {
    let out = Command::new(env!("CARGO_BIN_EXE_whitebox"))
        .args(args)
        .output()
        .context("launching whitebox")?;
    if !out.status.success() {
        bail!(
            "whitebox {} exited with {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        );
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn write_config(path: &Path, value: serde_json::Value) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(&value)?)?;
    Ok(())
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

/// Last-epoch (train, val) accuracy from a metrics.csv.
fn final_accuracy(metrics: &Path) -> Result<(f64, f64)> {
    let mut reader = csv::Reader::from_path(metrics)?;
    let mut last = BTreeMap::new();
    for row in reader.records() {
        let row = row?;
        last.insert(row[1].to_string(), row[3].parse::<f64>()?);
    }
    Ok((last["train"], last["val"]))
}

fn to_na(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

fn na_rate(z: &DMatrix<f64>, scale: f64) -> f64 {
    let n = z.ncols();
    0.5 * (DMatrix::identity(n, n) + z.transpose() * z * scale).determinant().ln()
}

fn central_difference(z: &Matrix, f: impl Fn(&Matrix) -> f64) -> Matrix {
    let h = 1e-6;
    Matrix::from_fn(z.rows(), z.cols(), |r, c| {
        let mut plus = z.clone();
        plus[(r, c)] += h;
        let mut minus = z.clone();
        minus[(r, c)] -= h;
        (f(&plus) - f(&minus)) / (2.0 * h)
    })
}

fn unit_columns(mut z: Matrix) -> Matrix {
    for c in 0..z.cols() {
        let col = z.column(c);
        let n = col.iter().map(|v| v * v).sum::<f64>().sqrt();
        z.set_column(c, &col.iter().map(|v| v / n).collect::<Vec<_>>());
    }
    z
}

/// `k` mutually orthogonal `d x p` bases cut from one orthonormal frame.
fn orthogonal_bases(d: usize, p: usize, k: usize, rng: &mut Rng) -> Result<Vec<Matrix>> {
    let frame = random_orthonormal(d, p * k, rng)?;
    Ok((0..k)
        .map(|i| frame.select_columns(&(i * p..(i + 1) * p).collect::<Vec<_>>()))
        .collect::<whitebox_core::Result<_>>()?)
}

fn uniform_weights(k: usize) -> Vec<f64> {
    let mut pi = vec![1.0 / k as f64; k];
    pi[k - 1] = 1.0 - pi[..k - 1].iter().sum::<f64>();
    pi
}

// ---------------------------------------------------------------- criteria

fn gradient_oracles() -> Result<Verdict> {
    let started = Instant::now();
    let mut rng = Rng::new(1);
    let cfg = RateConfig::new(8, 6, 2, 3).with_eps(0.5);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let z = rng.normal_matrix(8, 6);
        let bank = SubspaceBank::random(8, 2, 3, &mut rng)?;
        let fd = central_difference(&z, |m| na_rate(&to_na(m), cfg.alpha()));
        worst = worst.max(grad_coding_rate(&z, &cfg)?.rel_error(&fd)?);
        let fdc = central_difference(&z, |m| {
            bank.bases().iter().map(|u| na_rate(&(to_na(u).transpose() * to_na(m)), cfg.gamma())).sum()
        });
        worst = worst.max(grad_coding_rate_projected(&z, &bank, &cfg)?.rel_error(&fdc)?);
    }
    let elapsed = started.elapsed();
    verdict(
        worst <= 1e-6 && elapsed < Duration::from_secs(5),
        format!("max rel error {worst:.2e} over 20 instances in {:.2}s", elapsed.as_secs_f64()),
    )
}

fn hessian_check() -> Result<Verdict> {
    let mut rng = Rng::new(2);
    let cfg = RateConfig::new(8, 6, 2, 3).with_eps(0.5);
    let h = 1e-6;
    let mut worst_hv: f64 = 0.0;
    for _ in 0..10 {
        let z = rng.normal_matrix(8, 6);
        let delta = rng.normal_matrix(8, 6);
        let mut plus = z.clone();
        plus.axpy(h, &delta)?;
        let mut minus = z.clone();
        minus.axpy(-h, &delta)?;
        let fd = grad_coding_rate(&plus, &cfg)?
            .sub(&grad_coding_rate(&minus, &cfg)?)?
            .scale(1.0 / (2.0 * h));
        worst_hv = worst_hv.max(hessian_vec_coding_rate(&z, &delta, &cfg)?.rel_error(&fd)?);
    }
    let mut worst_ratio: f64 = 0.0;
    for _ in 0..100 {
        let z = unit_columns(rng.normal_matrix(8, 6));
        let report = hessian_norm_bound_check(&z, &cfg, 10, &mut rng, ColumnNormCheck::Enforce)?;
        worst_ratio = worst_ratio.max(report.max_ratio);
    }
    verdict(
        worst_hv <= 1e-5 && worst_ratio <= 2.25,
        format!("HVP max rel error {worst_hv:.2e}; max ‖H‖/α {worst_ratio:.4} over 100 unit-column instances"),
    )
}

fn tweedie_identity() -> Result<Verdict> {
    let mut rng = Rng::new(3);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let k = 1 + rng.below(4);
        let d = 4 + rng.below(13);
        let raw: Vec<f64> = (0..k).map(|_| 0.2 + rng.uniform()).collect();
        let total: f64 = raw.iter().sum();
        let mut pi: Vec<f64> = raw.iter().map(|w| w / total).collect();
        pi[k - 1] = 1.0 - pi[..k - 1].iter().sum::<f64>();
        let mut bases = Vec::new();
        let mut lambdas = Vec::new();
        for _ in 0..k {
            let p = 1 + rng.below(3);
            bases.push(random_orthonormal(d, p, &mut rng)?);
            lambdas.push((0..p).map(|_| 0.5 + 2.5 * rng.uniform()).collect());
        }
        let sigma = 0.1 + 0.9 * rng.uniform();
        let model = MixtureModel::new(pi, bases, lambdas, sigma)?;
        for sample in model.sample(100, &mut rng)? {
            let t = tweedie_denoise(&model, &sample.x)?;
            let m = posterior_mean(&model, &sample.x)?;
            worst = worst.max(relative_error(&t, &m));
        }
    }
    verdict(worst <= 1e-10, format!("max rel error {worst:.2e} over 50 models x 100 points"))
}

fn mmse_property() -> Result<Verdict> {
    let mut rng = Rng::new(4);
    let mut pass = true;
    let mut lines = Vec::new();
    for m in 0..5 {
        let (d, k, p) = (16, 3, 2);
        let bases = orthogonal_bases(d, p, k, &mut rng)?;
        let lambdas = (0..k).map(|_| (0..p).map(|_| 1.0 + 3.0 * rng.uniform()).collect()).collect();
        let model = MixtureModel::new(uniform_weights(k), bases.clone(), lambdas, 0.25)?;
        let samples = model.sample_parallel(10_000, 40 + m, 8)?;
        let (mut post, mut ident, mut oracle, mut nearest) = (0.0, 0.0, 0.0, 0.0);
        for sample in &samples {
            let z = sample.z_true.as_ref().expect("model samples carry the clean signal");
            let x = Matrix::column_vector(&sample.x);
            let project = |u: &Matrix| -> Result<Matrix> { Ok(u.matmul(&u.t_matmul(&x)?)?) };
            let truth = &bases[sample.component.expect("model samples carry the component")];
            // Informational only: the best single subspace judged from x itself.
            let mut best = (f64::NEG_INFINITY, &bases[0]);
            for u in &bases {
                let energy = u.t_matmul(&x)?.frobenius_norm();
                if energy > best.0 {
                    best = (energy, u);
                }
            }
            post += squared_error(&posterior_mean(&model, &sample.x)?, z);
            ident += squared_error(&sample.x, z);
            oracle += squared_error(project(truth)?.as_slice(), z);
            nearest += squared_error(project(best.1)?.as_slice(), z);
        }
        let n = samples.len() as f64;
        let (post, ident, oracle, nearest) = (post / n, ident / n, oracle / n, nearest / n);
        pass &= post < ident && post < oracle;
        lines.push(format!("{post:.4}/{ident:.4}/{oracle:.4} (nearest-subspace {nearest:.4})"));
    }
    verdict(pass, format!("MSE posterior/identity/oracle-projection: {}", lines.join(", ")))
}

fn attention_asymptotics() -> Result<Verdict> {
    let mut rng = Rng::new(5);
    let (d, k, p) = (16, 3, 2);
    let bases = orthogonal_bases(d, p, k, &mut rng)?;
    let base = MixtureModel::new(uniform_weights(k), bases, vec![vec![1.0; p]; k], 1.0)?;
    let mut medians = Vec::new();
    for (i, sigma) in [0.2, 0.1, 0.05].into_iter().enumerate() {
        let model = base.with_sigma(sigma)?;
        let mut errs = model
            .sample(100, &mut Rng::stream(50, i))?
            .iter()
            .map(|s| Ok(relative_error(&attention_denoise(&model, &s.x)?, &posterior_mean(&model, &s.x)?)))
            .collect::<Result<Vec<f64>>>()?;
        errs.sort_by(f64::total_cmp);
        medians.push(0.5 * (errs[49] + errs[50]));
    }
    let monotone = medians.windows(2).all(|w| w[1] <= w[0]);
    verdict(
        monotone && medians[2] <= 0.05,
        format!("median rel error at σ = 0.2/0.1/0.05: {:.4}/{:.4}/{:.4}", medians[0], medians[1], medians[2]),
    )
}

fn compression_surrogate() -> Result<Verdict> {
    let mut rng = Rng::new(6);
    let (d, n, p, k) = (16, 8, 2, 4);
    let mut pass = true;
    let mut example = Vec::new();
    for instance in 0..10 {
        let bank = SubspaceBank::new(orthogonal_bases(d, p, k, &mut rng)?)?;
        let mut z = Matrix::zeros(d, n);
        for c in 0..n {
            let u = &bank.bases()[rng.below(k)];
            let coeffs = Matrix::column_vector(&[rng.normal(), rng.normal()]);
            z.set_column(c, u.matmul(&coeffs)?.as_slice());
        }
        let z = unit_columns(z);
        let mut errs = Vec::new();
        for eps in [0.25, 0.5, 1.0] {
            let cfg = RateConfig::new(d, n, p, k).with_eps(eps);
            let mut params = LayerParams::init(&cfg, AttentionMode::Tied, &mut rng)?;
            params.subspaces = bank.clone();
            let exact = compression_step(&z, &params, &cfg, CompressionGrad::Exact)?;
            let approx = compression_step(&z, &params, &cfg, CompressionGrad::Approx)?;
            errs.push(approx.rel_error(&exact)?);
        }
        pass &= errs.windows(2).all(|w| w[1] <= w[0]);
        if instance == 0 {
            example = errs;
        }
    }
    verdict(
        pass,
        format!(
            "rel error non-increasing in ε on 10/10 instances required; first at ε = 0.25/0.5/1: {:.4}/{:.4}/{:.4}",
            example[0], example[1], example[2]
        ),
    )
}

fn ista_descent() -> Result<Verdict> {
    let mut rng = Rng::new(7);
    let (eta, lambda) = (0.1, 0.1);
    let objective = |z: &Matrix, z_mid: &Matrix, dict: &Matrix| -> Result<f64> {
        let l1: f64 = z.as_slice().iter().map(|v| v.abs()).sum();
        let fit = z_mid.sub(&dict.matmul(z)?)?.frobenius_norm().powi(2);
        Ok(lambda * l1 + fit)
    };
    let mut increases = 0;
    let mut smallest_drop = f64::INFINITY;
    for _ in 0..100 {
        let dict = random_orthonormal(8, 8, &mut rng)?;
        let z_mid = rng.normal_matrix(8, 6).map(f64::abs);
        let next = ista_step(&z_mid, &dict, eta, lambda)?;
        let before = objective(&z_mid, &z_mid, &dict)?;
        let after = objective(&next, &z_mid, &dict)?;
        if after > before {
            increases += 1;
        }
        smallest_drop = smallest_drop.min(before - after);
    }
    verdict(
        increases == 0,
        format!("{increases}/100 instances increased the objective; smallest decrease {smallest_drop:.3e}"),
    )
}

fn vjp_harness(dir: &Path) -> Result<Verdict> {
    let mut worst: (f64, &str) = (0.0, "");
    for seed in 0..5 {
        for (name, err) in primitive_vjp_checks(seed, DEFAULT_STEP)? {
            if err > worst.0 {
                worst = (err, name);
            }
        }
    }
    let cfg = dir.join("gradcheck.json");
    write_config(&cfg, serde_json::json!({}))?;
    let cli = Command::new(env!("CARGO_BIN_EXE_whitebox"))
        .args(["gradcheck", "--config", s(&cfg)])
        .output()?;
    verdict(
        worst.0 <= 1e-5 && cli.status.success(),
        format!(
            "primitives max rel error {:.2e} ({}); gradcheck subcommand: {}",
            worst.0,
            worst.1,
            String::from_utf8_lossy(&cli.stdout).trim()
        ),
    )
}

/// Generates the default synthetic preset once for the training criteria.
fn default_dataset(dir: &Path) -> Result<PathBuf> {
    let data = dir.join("data");
    let path = data.join("dataset.json");
    if !path.exists() {
        let cfg = dir.join("gen.json");
        write_config(&cfg, serde_json::json!({ "synthetic": {} }))?;
        whitebox(&["gen-data", "--config", s(&cfg), "--out", s(&data)])?;
    }
    Ok(path)
}

fn end_to_end(dir: &Path) -> Result<Verdict> {
    let dataset = default_dataset(dir)?;
    let cfg = dir.join("train.json");
    write_config(&cfg, serde_json::json!({ "dataset": dataset }))?;
    let run = dir.join("run");
    let started = Instant::now();
    whitebox(&["train", "--config", s(&cfg), "--out", s(&run)])?;
    let elapsed = started.elapsed();
    let (train_acc, val_acc) = final_accuracy(&run.join("metrics.csv"))?;

    let echo: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("config.json"))?)?;
    let model = &echo["model"];
    let micro = model["dim"] == 32 && model["heads"] == 4 && model["head_dim"] == 8 && model["layers"] == 4;
    let data_summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("data/summary.json"))?)?;
    ensure!(data_summary["samples"] == 4000 && data_summary["classes"] == 4, "unexpected preset {data_summary}");

    let diag_cfg = dir.join("diagnose.json");
    write_config(
        &diag_cfg,
        serde_json::json!({ "checkpoint": run.join("model.json"), "dataset": dataset }),
    )?;
    let diag = dir.join("diag");
    whitebox(&["diagnose", "--config", s(&diag_cfg), "--out", s(&diag)])?;
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(diag.join("report.json"))?)?;
    let compression = report["compression_trend_holds"] == true;
    let sparsity = report["sparsity_trend_holds"] == true;
    verdict(
        micro && train_acc >= 0.90 && val_acc >= 0.85 && elapsed < Duration::from_secs(600) && compression && sparsity,
        format!(
            "train acc {train_acc:.4}, val acc {val_acc:.4}, {:.0}s; compression {} sparsity {}",
            elapsed.as_secs_f64(),
            report["compression"],
            report["sparsity"]
        ),
    )
}

fn ablation_parity(dir: &Path) -> Result<Verdict> {
    let dataset = default_dataset(dir)?;
    let cfg = dir.join("ablation.json");
    write_config(&cfg, serde_json::json!({ "dataset": dataset, "train": { "epochs": 10, "warmup_epochs": 1 } }))?;
    let mut pass = true;
    let mut parts = Vec::new();
    for variant in ["mm_prox", "exact_grad"] {
        let run = dir.join(format!("ablation_{variant}"));
        whitebox(&["train", "--config", s(&cfg), "--out", s(&run), "--variant", variant])?;
        let (_, val) = final_accuracy(&run.join("metrics.csv"))?;
        pass &= val >= 0.80;
        parts.push(format!("{variant} val acc {val:.4}"));
    }
    verdict(pass, format!("{} after 10 epochs", parts.join(", ")))
}

/// Every file under `dir` except run_info.json, keyed by relative path.
fn snapshot(dir: &Path) -> Result<BTreeMap<PathBuf, Vec<u8>>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().is_some_and(|n| n != "run_info.json") {
                out.insert(path.strip_prefix(dir)?.to_path_buf(), fs::read(&path)?);
            }
        }
    }
    Ok(out)
}

fn determinism(dir: &Path) -> Result<Verdict> {
    let root = dir.join("determinism");
    let cfgs = root.join("configs");
    fs::create_dir_all(&cfgs)?;
    let shared = root.join("shared");
    let dataset = shared.join("data/dataset.json");
    let checkpoint = shared.join("train/model.json");
    let configs = [
        (
            "gen-data",
            serde_json::json!({ "synthetic": {
                "classes": 3, "tokens": 4, "input_dim": 12, "subspaces_per_class": 1,
                "subspace_dim": 2, "samples_per_class": 30, "seed": 9 } }),
        ),
        (
            "train",
            serde_json::json!({
                "dataset": dataset,
                "model": { "dim": 8, "heads": 2, "head_dim": 4, "layers": 2 },
                "train": { "epochs": 2, "warmup_epochs": 1, "batch_size": 16, "checkpoint_every": 1, "seed": 3 } }),
        ),
        ("eval", serde_json::json!({ "checkpoint": checkpoint, "dataset": dataset, "split": "all" })),
        ("diagnose", serde_json::json!({ "checkpoint": checkpoint, "dataset": dataset, "seed": 2 })),
        ("denoise-demo", serde_json::json!({ "points": 50, "seed": 4 })),
        ("gradcheck", serde_json::json!({ "seed": 5 })),
        ("export-checkpoint-info", serde_json::json!({ "checkpoint": checkpoint })),
    ];
    let mut mismatched = Vec::new();
    let mut files = 0;
    for (name, value) in configs {
        let cfg = cfgs.join(format!("{name}.json"));
        write_config(&cfg, value)?;
        let first = root.join(format!("a/{name}"));
        let second = root.join(format!("b/{name}"));
        whitebox(&[name, "--config", s(&cfg), "--out", s(&first)])?;
        whitebox(&["--threads", "2", name, "--config", s(&cfg), "--out", s(&second)])?;
        match name {
            "gen-data" => copy_dir(&first, &shared.join("data"))?,
            "train" => copy_dir(&first, &shared.join("train"))?,
            _ => {}
        }
        let (a, b) = (snapshot(&first)?, snapshot(&second)?);
        files += a.len();
        if a != b {
            mismatched.push(name);
        }
    }

    let (params, meta) = load_checkpoint(&checkpoint)?;
    let again = root.join("resaved/model.json");
    save_checkpoint(&again, &params, &meta)?;
    let (back, _) = load_checkpoint(&again)?;
    let bit_exact = fs::read(checkpoint.with_extension("bin"))? == fs::read(again.with_extension("bin"))?
        && params.tensors().iter().zip(back.tensors()).all(|((_, a), (_, b))| {
            a.as_slice().iter().zip(b.as_slice()).all(|(x, y)| x.to_bits() == y.to_bits())
        });
    verdict(
        mismatched.is_empty() && bit_exact,
        format!(
            "{files} output files compared across 7 subcommands, 1 vs 2 threads; mismatched: {mismatched:?}; checkpoint round-trip bit-exact: {bit_exact}"
        ),
    )
}

fn copy_dir(from: &Path, to: &Path) -> Result<()> {
    for (rel, bytes) in snapshot(from)? {
        let target = to.join(rel);
        fs::create_dir_all(target.parent().expect("file has a parent"))?;
        fs::write(target, bytes)?;
    }
    Ok(())
}

fn main() {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let dir = tempfile::tempdir().expect("temp dir");
    let dir = dir.path();
    let criteria: Vec<Criterion> = vec![
        (1, "gradient oracles", Box::new(gradient_oracles)),
        (2, "Hessian products and norm bound", Box::new(hessian_check)),
        (3, "Tweedie identity", Box::new(tweedie_identity)),
        (4, "MMSE property", Box::new(mmse_property)),
        (5, "attention denoiser asymptotics", Box::new(attention_asymptotics)),
        (6, "compression surrogate", Box::new(compression_surrogate)),
        (7, "ISTA descent", Box::new(ista_descent)),
        (8, "VJP harness", Box::new(|| vjp_harness(dir))),
        (9, "desk-scale end-to-end", Box::new(|| end_to_end(dir))),
        (10, "ablation parity", Box::new(|| ablation_parity(dir))),
        (11, "determinism", Box::new(|| determinism(dir))),
    ];
    let mut failed = 0;
    let mut stderr = std::io::stderr();
    for (id, name, check) in criteria {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let (pass, detail) = match check() {
            Ok(v) => (v.pass, v.detail),
            Err(e) => (false, format!("error: {e:#}")),
        };
        if !pass {
            failed += 1;
        }
        let tag = if pass { "PASS" } else { "FAIL" };
        writeln!(stderr, "[{tag}] {id:>2}. {name}: {detail}").expect("stderr");
    }
    if failed > 0 {
        writeln!(stderr, "{failed} acceptance criteria failed").expect("stderr");
        std::process::exit(1);
    }
}
