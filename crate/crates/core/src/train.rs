//! Mini-batch training with warmup, per-epoch evaluation and checkpoints.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::cross_entropy_smoothed;
use crate::checkpoint::{save_checkpoint, CheckpointMeta};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::classification_grad;
use crate::layers::{sample_forward, CrateParams, ModelConfig};
use crate::linalg::Matrix;
use crate::optim::{adamw_step, learning_rate, lion_step, AdamWState, LionState, Schedule, StepConfig, ADAM_EPS};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adamw,
    #[default]
    Lion,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub epochs: usize,
    pub batch_size: usize,
    pub label_smoothing: f64,
    pub warmup_epochs: usize,
    pub schedule: Schedule,
    pub seed: u64,
    /// Trailing fraction of the dataset held out for validation.
    pub val_fraction: f64,
    /// Write a checkpoint every this many epochs (0: only the final one).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::Lion,
            lr: 1e-3,
            weight_decay: 0.5,
            betas: (0.9, 0.99),
            epochs: 50,
            batch_size: 64,
            label_smoothing: 0.1,
            warmup_epochs: 5,
            schedule: Schedule::Cosine,
            seed: 0,
            val_fraction: 0.2,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Invalid(format!("train config: {msg}")));
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.batch_size < 1 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be nonnegative, got {}", self.weight_decay));
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return bad(format!("betas must lie in [0, 1), got ({b1}, {b2})"));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad(format!("label_smoothing must be in [0, 1), got {}", self.label_smoothing));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!("val_fraction must be in [0, 1), got {}", self.val_fraction));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
    pub lr: f64,
}

/// Unsmoothed mean cross-entropy and accuracy of `params` on `indices`.
pub fn evaluate(params: &CrateParams, model: &ModelConfig, data: &Dataset, indices: &[usize]) -> Result<(f64, f64)> {
    if indices.is_empty() {
        return Err(Error::Invalid("evaluation on an empty split".into()));
    }
    let logits: Vec<Matrix> = indices
        .par_iter()
        .map(|&i| sample_forward(&data.samples[i], params, model).map(|(l, _)| l.transpose()))
        .collect::<Result<_>>()?;
    let refs: Vec<&Matrix> = logits.iter().collect();
    let stacked = Matrix::vcat(&refs)?;
    let labels: Vec<usize> = indices.iter().map(|&i| data.labels[i]).collect();
    let loss = cross_entropy_smoothed(&stacked, &labels, 0.0)?;
    Ok((loss, accuracy(&stacked, &labels)))
}

/// Fraction of rows whose argmax (first on ties) equals the label.
pub fn accuracy(logits: &Matrix, labels: &[usize]) -> f64 {
    let correct = labels
        .iter()
        .enumerate()
        .filter(|(i, &y)| {
            let row = logits.row(*i);
            let mut best = 0;
            for (c, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = c;
                }
            }
            best == y
        })
        .count();
    correct as f64 / labels.len() as f64
}

enum OptState {
    AdamW(AdamWState),
    Lion(LionState),
}

/// Where [`train`] writes checkpoints, if anywhere.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    pub checkpoint_dir: Option<PathBuf>,
}

pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("checkpoint_e{epoch:03}.json"))
}

/// Trains on the leading split of `data`, evaluating both splits after every
/// epoch. Returns the final parameters and the metrics log.
pub fn train(
    mut params: CrateParams,
    data: &Dataset,
    cfg: &TrainConfig,
    model: &ModelConfig,
    outputs: &TrainOutputs,
) -> Result<(CrateParams, Vec<MetricRow>)> {
    cfg.validate()?;
    model.validate()?;
    if data.is_empty() {
        return Err(Error::Invalid("training needs a nonempty dataset".into()));
    }
    if data.classes > model.classes {
        return Err(Error::Invalid(format!(
            "dataset has {} classes but the model head has {}",
            data.classes, model.classes
        )));
    }
    let (train_range, val_range) = data.split(cfg.val_fraction)?;
    let train_idx: Vec<usize> = train_range.collect();
    let val_idx: Vec<usize> = val_range.collect();
    if train_idx.is_empty() {
        return Err(Error::Invalid("training split is empty".into()));
    }

    let steps_per_epoch = train_idx.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let warmup_steps = steps_per_epoch * cfg.warmup_epochs;
    let decay = params.decay_mask();
    let mut state = {
        let tensors: Vec<&Matrix> = params.tensors().into_iter().map(|(_, m)| m).collect();
        match cfg.optimizer {
            OptimizerKind::Adamw => OptState::AdamW(AdamWState::zeros_like(&tensors)),
            OptimizerKind::Lion => OptState::Lion(LionState::zeros_like(&tensors)),
        }
    };

    let mut metrics = Vec::new();
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let order = Rng::stream(cfg.seed, epoch).permutation(train_idx.len());
        let mut lr = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let indices: Vec<usize> = chunk.iter().map(|&j| train_idx[j]).collect();
            let batch = data.batch(&indices)?;
            let gs = classification_grad(&params, &batch, model, cfg.label_smoothing)?;
            if !gs.loss.is_finite() {
                return Err(Error::NonFinite("training loss"));
            }
            lr = learning_rate(cfg.lr, step, warmup_steps, total_steps, cfg.schedule);
            let step_cfg = StepConfig {
                lr,
                weight_decay: cfg.weight_decay,
                beta1: cfg.betas.0,
                beta2: cfg.betas.1,
                eps: ADAM_EPS,
            };
            let mut tensors = params.tensors_mut();
            match &mut state {
                OptState::AdamW(s) => adamw_step(&mut tensors, &gs.grads, &decay, s, &step_cfg)?,
                OptState::Lion(s) => lion_step(&mut tensors, &gs.grads, &decay, s, &step_cfg)?,
            }
            step += 1;
        }

        let (loss, acc) = evaluate(&params, model, data, &train_idx)?;
        metrics.push(MetricRow {
            epoch,
            split: "train".into(),
            loss,
            accuracy: acc,
            lr,
        });
        if !val_idx.is_empty() {
            let (loss, acc) = evaluate(&params, model, data, &val_idx)?;
            metrics.push(MetricRow {
                epoch,
                split: "val".into(),
                loss,
                accuracy: acc,
                lr,
            });
        }
        log::info!(
            "epoch {epoch}/{}: {}",
            cfg.epochs,
            metrics
                .iter()
                .rev()
                .take(2)
                .rev()
                .filter(|m| m.epoch == epoch)
                .map(|m| format!("{} loss {:.4} acc {:.4}", m.split, m.loss, m.accuracy))
                .collect::<Vec<_>>()
                .join(", ")
        );

        if let Some(dir) = &outputs.checkpoint_dir {
            let periodic = cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0;
            if periodic || epoch == cfg.epochs {
                let meta = CheckpointMeta {
                    model: model.clone(),
                    epoch,
                };
                save_checkpoint(&checkpoint_path(dir, epoch), &params, &meta)?;
            }
        }
    }
    Ok((params, metrics))
}

pub fn write_metrics(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "split", "loss", "accuracy", "lr"])?;
    for r in rows {
        w.write_record([
            r.epoch.to_string(),
            r.split.clone(),
            r.loss.to_string(),
            r.accuracy.to_string(),
            r.lr.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_accuracy_breaks_ties_low() {
        let logits = Matrix::from_rows(&[&[1.0, 1.0], &[0.0, 2.0], &[3.0, -1.0]]).unwrap();
        assert!((accuracy(&logits, &[0, 1, 1]) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = [
            TrainConfig { lr: 0.0, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
            TrainConfig { label_smoothing: 1.0, ..Default::default() },
            TrainConfig { betas: (1.0, 0.9), ..Default::default() },
        ];
        for c in bad {
            assert!(c.validate().is_err());
        }
    }

    #[test]
    fn config_rejects_unknown_keys() {
        let parsed: std::result::Result<TrainConfig, _> = serde_json::from_str(r#"{"lr": 0.1, "lrr": 2}"#);
        assert!(parsed.is_err());
        let parsed: TrainConfig = serde_json::from_str(r#"{"lr": 0.1, "betas": [0.8, 0.9]}"#).unwrap();
        assert_eq!(parsed.betas, (0.8, 0.9));
        assert_eq!(parsed.batch_size, TrainConfig::default().batch_size);
    }
}
