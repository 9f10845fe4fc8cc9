//! Mini-batch training with best-validation checkpoint selection.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::optim::{adamw_step, clip_grad_norm, cosine_warmup_lr, AdamState};
use crate::autodiff::{Tape, TensorFile};
use crate::error::{CgtError, Result};
use crate::graph::{Dataset, Split, TaskKind};
use crate::model::{prepare_inputs, CgtModel, GraphInputs, ModelConfig, Phase};
use crate::precompute::Sidecar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 300,
            warmup_epochs: 10,
            lr: 1e-3,
            weight_decay: 1e-5,
            batch_size: 32,
            seed: 0,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CgtError::Config(m));
        if self.epochs > 0 && self.warmup_epochs >= self.epochs {
            return bad(format!(
                "warmup_epochs {} must be below epochs {}",
                self.warmup_epochs, self.epochs
            ));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {} must be finite and non-negative", self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight decay {} must be finite and non-negative", self.weight_decay));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad(format!("grad_clip {c} must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Learning rate of the last step in the epoch.
    pub lr: f64,
    /// Mean training loss over the epoch's batches, weighted by graphs.
    pub train_loss: f64,
    pub val_metric: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub task: TaskKind,
    /// Validation metric of the untrained model.
    pub initial_val: Option<f64>,
    pub epochs: Vec<EpochRecord>,
    /// 0 when no epoch improved on the untrained model.
    pub best_epoch: usize,
    pub best_val: Option<f64>,
    pub test_at_best: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: History,
    pub best_checkpoint: TensorFile,
}

/// Whether `candidate` beats `best`: lower MAE, or higher accuracy.
pub fn metric_improves(task: TaskKind, candidate: f64, best: f64) -> bool {
    match task {
        TaskKind::GraphRegression => candidate < best,
        TaskKind::NodeClassification => candidate > best,
    }
}

/// Model inputs for every graph of `dataset`, in dataset order.
pub fn prepare_dataset(
    config: &ModelConfig,
    dataset: &Dataset,
    sidecar: Option<&Sidecar>,
) -> Result<Vec<GraphInputs>> {
    if let Some(s) = sidecar {
        s.check_matches(dataset)?;
    }
    dataset
        .graphs()
        .par_iter()
        .enumerate()
        .map(|(i, g)| {
            prepare_inputs(config, g, sidecar.map(|s| &s.graphs[i])).map_err(|e| match e {
                CgtError::Config(m) => CgtError::Config(format!("graph {i}: {m}")),
                CgtError::Encoding(m) => CgtError::Encoding(format!("graph {i}: {m}")),
                other => other,
            })
        })
        .collect()
}

fn at_epoch(epoch: usize, e: CgtError) -> CgtError {
    match e {
        CgtError::Numerical(m) => CgtError::Numerical(format!("training diverged at epoch {epoch}: {m}")),
        other => other,
    }
}

/// Trains `model` in place. On return the model holds the parameters of the
/// best validation epoch (the final epoch when there is no validation split).
pub fn train(
    model: &mut CgtModel,
    inputs: &[GraphInputs],
    dataset: &Dataset,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if inputs.len() != dataset.len() {
        return Err(CgtError::Config(format!(
            "{} prepared inputs for {} graphs",
            inputs.len(),
            dataset.len()
        )));
    }
    let task = model.config.task;
    let train_idx = dataset.indices(Split::Train);
    let val_idx = dataset.indices(Split::Val);
    let test_idx = dataset.indices(Split::Test);
    if train_idx.is_empty() {
        return Err(CgtError::Config("training split is empty".into()));
    }
    let evaluate = |m: &CgtModel, idx: &[usize]| -> Result<Option<f64>> {
        if idx.is_empty() {
            Ok(None)
        } else {
            m.evaluate(inputs, idx).map(Some)
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = AdamState::new(&model.store);
    let per_epoch = train_idx.len().div_ceil(config.batch_size);
    let total_steps = per_epoch * config.epochs;
    let warmup_steps = per_epoch * config.warmup_epochs;

    let initial_val = evaluate(model, &val_idx)?;
    let snapshot = |m: &CgtModel, epoch: usize, val: Option<f64>| {
        m.to_checkpoint(serde_json::json!({ "epoch": epoch, "val_metric": val }))
    };
    let mut best_checkpoint = snapshot(model, 0, initial_val)?;
    let (mut best_epoch, mut best_val) = (0, initial_val);
    let mut records = Vec::with_capacity(config.epochs);
    let mut step = 0;

    for epoch in 1..=config.epochs {
        let mut order = train_idx.clone();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let mut chunk = chunk.to_vec();
            chunk.sort_unstable();
            let batch: Vec<&GraphInputs> = chunk.iter().map(|&i| &inputs[i]).collect();
            let mut tape = Tape::new();
            let fwd = model
                .forward(&mut tape, &batch, Phase::Train(&mut rng))
                .map_err(|e| at_epoch(epoch, e))?;
            let loss = model.loss(&mut tape, fwd.output, &batch)?;
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(at_epoch(epoch, CgtError::Numerical("non-finite loss".into())));
            }
            tape.backward(loss, &mut model.store)?;
            model.update_running(&fwd.stats);
            if let Some(c) = config.grad_clip {
                clip_grad_norm(&mut model.store, c);
            }
            step += 1;
            lr = cosine_warmup_lr(step, total_steps, warmup_steps, config.lr);
            adamw_step(&mut model.store, lr, config.weight_decay, &mut adam)
                .map_err(|e| at_epoch(epoch, e))?;
            loss_sum += value * batch.len() as f64;
        }
        let val = evaluate(model, &val_idx).map_err(|e| at_epoch(epoch, e))?;
        let improved = match (val, best_val) {
            (Some(v), Some(b)) => metric_improves(task, v, b),
            (Some(_), None) => true,
            // Without a validation split the latest epoch is kept.
            (None, _) => true,
        };
        if improved {
            best_checkpoint = snapshot(model, epoch, val)?;
            best_epoch = epoch;
            best_val = val;
        }
        records.push(EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / train_idx.len() as f64,
            val_metric: val,
        });
    }

    *model = CgtModel::from_checkpoint(&best_checkpoint)?;
    let test_at_best = evaluate(model, &test_idx)?;
    Ok(TrainOutcome {
        history: History {
            task,
            initial_val,
            epochs: records,
            best_epoch,
            best_val,
            test_at_best,
        },
        best_checkpoint,
    })
}
