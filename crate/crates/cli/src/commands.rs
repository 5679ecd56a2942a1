use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, Context};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use whitebox_core::checkpoint::{checkpoint_info, load_checkpoint, save_checkpoint, CheckpointMeta};
use whitebox_core::data::{gen_synthetic, load_idx, random_hflip, Dataset, PatchSpec, SyntheticSpec};
use whitebox_core::denoise::{attention_denoise, posterior_mean, relative_error, squared_error, tweedie_denoise, MixtureModel};
use whitebox_core::gradcheck::{model_gradient_check, primitive_vjp_checks, DEFAULT_STEP};
use whitebox_core::layers::{AttentionMode, CrateParams, LayerVariant, ModelConfig, Temperature, TokenBatch};
use whitebox_core::linalg::random_orthonormal;
use whitebox_core::train::{evaluate, write_metrics, TrainConfig, TrainOutputs};
use whitebox_core::{diagnostics, Error, Rng};

use crate::{AttentionArg, Common, VariantArg};

/// An error with the process exit code it maps to.
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn validation(error: anyhow::Error) -> Self {
        Self { code: 1, error }
    }

    pub fn runtime(error: anyhow::Error) -> Self {
        Self { code: 2, error }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Invalid(_) => Failure::validation(e.into()),
            _ => Failure::runtime(e.into()),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::runtime(e)
    }
}

type Outcome = Result<(), Failure>;

fn read_config<T: DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read config file {}", path.display()))
        .map_err(Failure::validation)?;
    serde_json::from_str(&text)
        .with_context(|| format!("invalid config file {}", path.display()))
        .map_err(Failure::validation)
}

fn out_dir(common: &Common) -> Result<PathBuf, Failure> {
    let dir = common
        .out
        .clone()
        .ok_or_else(|| Failure::validation(anyhow!("--out <dir> is required for this subcommand")))?;
    fs::create_dir_all(&dir).with_context(|| format!("cannot create output directory {}", dir.display()))?;
    Ok(dir)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value).context("serializing output")?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

/// Timestamps live only here so every other output is reproducible.
fn write_run_info(dir: &Path, command: &str, started: Instant, threads: usize) -> Outcome {
    let unix = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    write_json(
        &dir.join("run_info.json"),
        &serde_json::json!({
            "command": command,
            "version": env!("CARGO_PKG_VERSION"),
            "finished_unix": unix,
            "elapsed_secs": started.elapsed().as_secs_f64(),
            "threads": threads,
        }),
    )
}

fn threads() -> usize {
    rayon::current_num_threads()
}

// ---------------------------------------------------------------- gen-data

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IdxSource {
    images: PathBuf,
    labels: PathBuf,
    patch: PatchSpec,
    #[serde(default)]
    hflip: bool,
    #[serde(default)]
    seed: u64,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GenDataConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    synthetic: Option<SyntheticSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    idx: Option<IdxSource>,
}

pub fn gen_data(common: &Common) -> Outcome {
    let started = Instant::now();
    let mut cfg: GenDataConfig = read_config(&common.config)?;
    let out = out_dir(common)?;
    let dataset = match (&mut cfg.synthetic, &mut cfg.idx) {
        (Some(spec), None) => {
            if let Some(seed) = common.seed {
                spec.seed = seed;
            }
            gen_synthetic(spec)?
        }
        (None, Some(src)) => {
            if let Some(seed) = common.seed {
                src.seed = seed;
            }
            let mut images = load_idx(&src.images, &src.labels)?;
            if src.hflip {
                images = random_hflip(&images, &mut Rng::new(src.seed));
            }
            Dataset::from_images(&images, &src.patch)?
        }
        _ => {
            return Err(Failure::validation(anyhow!(
                "gen-data config needs exactly one of \"synthetic\" or \"idx\""
            )))
        }
    };
    dataset.save(&out.join("dataset.json"))?;
    write_json(&out.join("config.json"), &cfg)?;
    let coherence = dataset.cross_class_coherence()?;
    write_json(
        &out.join("summary.json"),
        &serde_json::json!({
            "samples": dataset.len(),
            "classes": dataset.classes,
            "input_dim": dataset.input_dim(),
            "tokens": dataset.tokens(),
            "cross_class_coherence": coherence,
        }),
    )?;
    println!("wrote {} samples to {}", dataset.len(), out.join("dataset.json").display());
    write_run_info(&out, "gen-data", started, threads())
}

// ------------------------------------------------------------------- train

/// Architecture knobs; input size, token count and classes come from the dataset.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct ArchConfig {
    dim: usize,
    heads: usize,
    head_dim: usize,
    layers: usize,
    eps: f64,
    lambda: f64,
    eta: f64,
    kappa: f64,
    attention: AttentionMode,
    variant: LayerVariant,
    temperature: Temperature,
}

impl Default for ArchConfig {
    fn default() -> Self {
        let m = ModelConfig::micro(1, 1, 1);
        Self {
            dim: m.dim,
            heads: m.heads,
            head_dim: m.head_dim,
            layers: m.layers,
            eps: m.eps,
            lambda: m.lambda,
            eta: m.eta,
            kappa: m.kappa,
            attention: m.attention,
            variant: m.variant,
            temperature: m.temperature,
        }
    }
}

impl ArchConfig {
    fn model(&self, data: &Dataset) -> ModelConfig {
        ModelConfig {
            input_dim: data.input_dim(),
            tokens: data.tokens(),
            classes: data.classes,
            dim: self.dim,
            heads: self.heads,
            head_dim: self.head_dim,
            layers: self.layers,
            eps: self.eps,
            lambda: self.lambda,
            eta: self.eta,
            kappa: self.kappa,
            attention: self.attention,
            variant: self.variant,
            temperature: self.temperature,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainCommandConfig {
    dataset: PathBuf,
    #[serde(default)]
    model: ArchConfig,
    #[serde(default)]
    train: TrainConfig,
}

#[derive(Serialize)]
struct TrainEcho<'a> {
    dataset: &'a Path,
    model: &'a ModelConfig,
    train: &'a TrainConfig,
}

pub fn train(common: &Common, variant: Option<VariantArg>, attention: Option<AttentionArg>) -> Outcome {
    let started = Instant::now();
    let mut cfg: TrainCommandConfig = read_config(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    cfg.train.validate()?;
    let out = out_dir(common)?;
    let data = Dataset::load(&cfg.dataset)?;
    let mut model = cfg.model.model(&data);
    if let Some(v) = variant {
        model.variant = match v {
            VariantArg::Default => LayerVariant::Default,
            VariantArg::ExactGrad => LayerVariant::ExactGrad,
            VariantArg::MmProx => LayerVariant::MmProx,
        };
    }
    if let Some(a) = attention {
        model.attention = match a {
            AttentionArg::Tied => AttentionMode::Tied,
            AttentionArg::TrainableW => AttentionMode::TrainableW,
        };
    }
    model.validate()?;
    write_json(
        &out.join("config.json"),
        &TrainEcho {
            dataset: &cfg.dataset,
            model: &model,
            train: &cfg.train,
        },
    )?;

    // Epoch shuffles use streams 1.., so stream 0 is free for initialization.
    let params = CrateParams::init(&model, &mut Rng::stream(cfg.train.seed, 0))?;
    let outputs = TrainOutputs {
        checkpoint_dir: Some(out.join("checkpoints")),
    };
    let (params, metrics) = whitebox_core::train::train(params, &data, &cfg.train, &model, &outputs)?;
    write_metrics(&out.join("metrics.csv"), &metrics)?;
    let meta = CheckpointMeta {
        model: model.clone(),
        epoch: cfg.train.epochs,
    };
    save_checkpoint(&out.join("model.json"), &params, &meta)?;
    for row in metrics.iter().rev().take(2).rev() {
        println!(
            "epoch {} {}: loss {:.6} accuracy {:.4}",
            row.epoch, row.split, row.loss, row.accuracy
        );
    }
    write_run_info(&out, "train", started, threads())
}

// -------------------------------------------------------------------- eval

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Split {
    Train,
    #[default]
    Val,
    All,
}

impl Split {
    fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::All => "all",
        }
    }
}

fn default_val_fraction() -> f64 {
    TrainConfig::default().val_fraction
}

fn split_indices(data: &Dataset, split: Split, val_fraction: f64) -> Result<Vec<usize>, Failure> {
    let (train, val) = data.split(val_fraction)?;
    let idx: Vec<usize> = match split {
        Split::Train => train.collect(),
        Split::Val => val.collect(),
        Split::All => (0..data.len()).collect(),
    };
    if idx.is_empty() {
        return Err(Failure::validation(anyhow!("the {} split is empty", split.name())));
    }
    Ok(idx)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EvalConfig {
    checkpoint: PathBuf,
    dataset: PathBuf,
    #[serde(default)]
    split: Split,
    #[serde(default = "default_val_fraction")]
    val_fraction: f64,
}

pub fn eval(common: &Common) -> Outcome {
    let started = Instant::now();
    let cfg: EvalConfig = read_config(&common.config)?;
    let out = out_dir(common)?;
    let (params, meta) = load_checkpoint(&cfg.checkpoint)?;
    let data = Dataset::load(&cfg.dataset)?;
    let idx = split_indices(&data, cfg.split, cfg.val_fraction)?;
    let (loss, accuracy) = evaluate(&params, &meta.model, &data, &idx)?;
    write_json(&out.join("config.json"), &cfg)?;
    let path = out.join("eval.csv");
    let mut w = csv::Writer::from_path(&path).with_context(|| format!("cannot write {}", path.display()))?;
    w.write_record(["split", "samples", "loss", "accuracy"]).context("writing eval.csv")?;
    w.write_record([
        cfg.split.name().to_string(),
        idx.len().to_string(),
        loss.to_string(),
        accuracy.to_string(),
    ])
    .context("writing eval.csv")?;
    w.flush().context("writing eval.csv")?;
    println!("{} split: {} samples, loss {loss:.6}, accuracy {accuracy}", cfg.split.name(), idx.len());
    write_run_info(&out, "eval", started, threads())
}

// ---------------------------------------------------------------- diagnose

fn default_max_samples() -> usize {
    1000
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DiagnoseConfig {
    checkpoint: PathBuf,
    dataset: PathBuf,
    #[serde(default)]
    split: Split,
    #[serde(default = "default_val_fraction")]
    val_fraction: f64,
    #[serde(default = "default_max_samples")]
    max_samples: usize,
    #[serde(default)]
    seed: u64,
}

pub fn diagnose(common: &Common) -> Outcome {
    let started = Instant::now();
    let mut cfg: DiagnoseConfig = read_config(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if cfg.max_samples == 0 {
        return Err(Failure::validation(anyhow!("max_samples must be at least 1")));
    }
    let out = out_dir(common)?;
    let (params, meta) = load_checkpoint(&cfg.checkpoint)?;
    let data = Dataset::load(&cfg.dataset)?;
    let idx = split_indices(&data, cfg.split, cfg.val_fraction)?;
    let samples: Vec<_> = idx
        .iter()
        .take(cfg.max_samples)
        .map(|&i| data.samples[i].clone())
        .collect();
    let report = diagnostics::diagnose(&params, &meta.model, &samples, cfg.seed, Some(&out))?;
    write_json(&out.join("config.json"), &cfg)?;
    write_json(&out.join("report.json"), &report)?;
    println!("compression per layer: {:?}", report.compression);
    println!("sparsity per layer:    {:?}", report.sparsity);
    write_run_info(&out, "diagnose", started, threads())
}

// ------------------------------------------------------------ denoise-demo

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct DenoiseConfig {
    dim: usize,
    components: usize,
    subspace_dim: usize,
    sigmas: Vec<f64>,
    points: usize,
    seed: u64,
}

impl Default for DenoiseConfig {
    fn default() -> Self {
        Self {
            dim: 16,
            components: 3,
            subspace_dim: 2,
            sigmas: vec![0.2, 0.1, 0.05],
            points: 100,
            seed: 0,
        }
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

pub fn denoise_demo(common: &Common) -> Outcome {
    let started = Instant::now();
    let mut cfg: DenoiseConfig = read_config(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if cfg.components * cfg.subspace_dim > cfg.dim || cfg.components == 0 || cfg.subspace_dim == 0 {
        return Err(Failure::validation(anyhow!(
            "need 0 < components·subspace_dim ≤ dim for orthogonal subspaces"
        )));
    }
    if cfg.points == 0 || cfg.sigmas.iter().any(|s| s.is_nan() || *s <= 0.0) {
        return Err(Failure::validation(anyhow!("points must be positive and every sigma > 0")));
    }
    let out = out_dir(common)?;
    let mut rng = Rng::new(cfg.seed);
    let frame = random_orthonormal(cfg.dim, cfg.components * cfg.subspace_dim, &mut rng)?;
    let bases = (0..cfg.components)
        .map(|k| frame.select_columns(&(k * cfg.subspace_dim..(k + 1) * cfg.subspace_dim).collect::<Vec<_>>()))
        .collect::<Result<Vec<_>, _>>()?;
    let pi = vec![1.0 / cfg.components as f64; cfg.components];
    let lambdas = vec![vec![1.0; cfg.subspace_dim]; cfg.components];

    let path = out.join("denoise.csv");
    let mut w = csv::Writer::from_path(&path).with_context(|| format!("cannot write {}", path.display()))?;
    w.write_record(["sigma", "method", "median_rel_err", "mse"]).context("writing denoise.csv")?;
    for &sigma in &cfg.sigmas {
        let model = MixtureModel::new(pi.clone(), bases.clone(), lambdas.clone(), sigma)?;
        let samples = model.sample(cfg.points, &mut rng)?;
        type Method = fn(&MixtureModel, &[f64]) -> whitebox_core::Result<Vec<f64>>;
        let identity: Method = |_, x| Ok(x.to_vec());
        let methods: [(&str, Method); 4] = [
            ("identity", identity),
            ("posterior_mean", posterior_mean),
            ("tweedie", tweedie_denoise),
            ("attention", attention_denoise),
        ];
        for (name, f) in methods {
            let mut rel = Vec::with_capacity(samples.len());
            let mut mse = 0.0;
            for s in &samples {
                let est = f(&model, &s.x)?;
                let reference = posterior_mean(&model, &s.x)?;
                rel.push(relative_error(&est, &reference));
                let clean = s.z_true.as_ref().expect("model samples carry the clean signal");
                mse += squared_error(&est, clean) / cfg.dim as f64;
            }
            mse /= samples.len() as f64;
            w.write_record([sigma.to_string(), name.to_string(), median(&mut rel).to_string(), mse.to_string()])
                .context("writing denoise.csv")?;
        }
    }
    w.flush().context("writing denoise.csv")?;
    write_json(&out.join("config.json"), &cfg)?;
    println!("wrote {}", path.display());
    write_run_info(&out, "denoise-demo", started, threads())
}

// --------------------------------------------------------------- gradcheck

fn default_gradcheck_model() -> ModelConfig {
    ModelConfig {
        input_dim: 6,
        tokens: 4,
        classes: 3,
        dim: 8,
        heads: 2,
        head_dim: 4,
        layers: 2,
        ..ModelConfig::micro(6, 4, 3)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct GradcheckConfig {
    model: ModelConfig,
    samples: usize,
    per_tensor: usize,
    step: f64,
    tolerance: f64,
    label_smoothing: f64,
    seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            model: default_gradcheck_model(),
            samples: 2,
            per_tensor: 10,
            step: DEFAULT_STEP,
            tolerance: 1e-5,
            label_smoothing: 0.1,
            seed: 0,
        }
    }
}

pub fn gradcheck(common: &Common) -> Outcome {
    let started = Instant::now();
    let mut cfg: GradcheckConfig = read_config(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.model.validate()?;
    if cfg.samples == 0 || cfg.per_tensor == 0 || cfg.step.is_nan() || cfg.step <= 0.0 {
        return Err(Failure::validation(anyhow!("samples, per_tensor and step must be positive")));
    }
    let mut rows: Vec<(String, String, f64)> = Vec::new();
    for (name, err) in primitive_vjp_checks(cfg.seed, cfg.step)? {
        rows.push(("primitive".into(), name.into(), err));
    }
    let mut rng = Rng::new(cfg.seed);
    let params = CrateParams::init(&cfg.model, &mut rng)?;
    let samples = (0..cfg.samples)
        .map(|_| rng.normal_matrix(cfg.model.input_dim, cfg.model.tokens))
        .collect();
    let labels = (0..cfg.samples).map(|_| rng.below(cfg.model.classes)).collect();
    let batch = TokenBatch::new(samples, Some(labels))?;
    let checks = model_gradient_check(
        &params,
        &cfg.model,
        &batch,
        cfg.label_smoothing,
        cfg.per_tensor,
        cfg.step,
        &mut rng,
    )?;
    for c in checks {
        rows.push(("tensor".into(), c.tensor, c.rel_error));
    }
    let worst = rows.iter().map(|r| r.2).fold(0.0, f64::max);

    if let Some(dir) = &common.out {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
        let path = dir.join("gradcheck.csv");
        let mut w = csv::Writer::from_path(&path).with_context(|| format!("cannot write {}", path.display()))?;
        w.write_record(["kind", "name", "rel_error"]).context("writing gradcheck.csv")?;
        for (kind, name, err) in &rows {
            w.write_record([kind.clone(), name.clone(), err.to_string()])
                .context("writing gradcheck.csv")?;
        }
        w.flush().context("writing gradcheck.csv")?;
        write_json(&dir.join("config.json"), &cfg)?;
        write_run_info(dir, "gradcheck", started, threads())?;
    }
    println!("max relative error: {worst:e} over {} checks", rows.len());
    if worst <= cfg.tolerance {
        Ok(())
    } else {
        let (_, name, err) = rows
            .iter()
            .max_by(|a, b| a.2.total_cmp(&b.2))
            .expect("at least one check ran");
        Err(Failure::runtime(anyhow!(
            "gradient check failed: {name} has relative error {err:e} > {:e}",
            cfg.tolerance
        )))
    }
}

// --------------------------------------------------- export-checkpoint-info

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointInfoConfig {
    checkpoint: PathBuf,
}

pub fn export_checkpoint_info(common: &Common) -> Outcome {
    let started = Instant::now();
    let cfg: CheckpointInfoConfig = read_config(&common.config)?;
    let (params, meta) = load_checkpoint(&cfg.checkpoint)?;
    let info = serde_json::json!({
        "model": meta.model,
        "epoch": meta.epoch,
        "parameter_count": params.parameter_count(),
        "tensors": checkpoint_info(&params),
    });
    match &common.out {
        Some(dir) => {
            fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
            write_json(&dir.join("checkpoint_info.json"), &info)?;
            write_json(&dir.join("config.json"), &cfg)?;
            write_run_info(dir, "export-checkpoint-info", started, threads())
        }
        None => {
            println!("{}", serde_json::to_string_pretty(&info).context("serializing info")?);
            Ok(())
        }
    }
}
