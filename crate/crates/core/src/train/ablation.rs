//! Grids of configuration deltas trained over shared seeds.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::trainer::{prepare_dataset, train, TrainConfig};
use crate::error::{CgtError, Result};
use crate::graph::Dataset;
use crate::model::{CgtModel, ModelConfig};

/// Seeds per cell unless the caller asks otherwise.
pub const DEFAULT_SEEDS: [u64; 4] = [0, 1, 2, 3];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub id: String,
    /// Partial model configuration merged over the base.
    pub delta: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub config_id: String,
    pub seed: u64,
    pub best_val: f64,
    pub test_metric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub config_id: String,
    pub seeds: usize,
    pub best_val_mean: f64,
    pub best_val_std: f64,
    pub test_mean: f64,
    pub test_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub summary: Vec<CellSummary>,
}

impl AblationReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("config_id,seed,best_val,test_metric\n");
        for r in &self.rows {
            writeln!(out, "{},{},{},{}", r.config_id, r.seed, r.best_val, r.test_metric).unwrap();
        }
        out
    }

    pub fn summary_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.summary)?)
    }

    pub fn cell(&self, id: &str) -> Option<&CellSummary> {
        self.summary.iter().find(|s| s.config_id == id)
    }
}

/// Recursively overlays the objects of `delta` onto `base`.
fn merge(base: &mut Value, delta: &Value) {
    match (base, delta) {
        (Value::Object(b), Value::Object(d)) => {
            for (k, v) in d {
                merge(b.entry(k.clone()).or_insert(Value::Null), v);
            }
        }
        (slot, v) => *slot = v.clone(),
    }
}

pub fn apply_delta(base: &ModelConfig, delta: &Value) -> Result<ModelConfig> {
    let mut v = serde_json::to_value(base)?;
    merge(&mut v, delta);
    let config: ModelConfig = serde_json::from_value(v)?;
    config.validate()?;
    Ok(config)
}

/// Sample mean and standard deviation (`n − 1` denominator; 0 for one value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Trains every (cell, seed) pair in parallel. The seed drives both the
/// parameter initialization and the training order.
pub fn run_ablation(
    base: &ModelConfig,
    train_config: &TrainConfig,
    cells: &[AblationCell],
    seeds: &[u64],
    dataset: &Dataset,
) -> Result<AblationReport> {
    if cells.is_empty() || seeds.is_empty() {
        return Err(CgtError::Config("ablation needs at least one cell and one seed".into()));
    }
    let mut seen = BTreeMap::new();
    for c in cells {
        if seen.insert(c.id.clone(), ()).is_some() {
            return Err(CgtError::Config(format!("duplicate ablation cell {}", c.id)));
        }
    }
    let configs = cells
        .iter()
        .map(|c| {
            apply_delta(base, &c.delta)
                .map_err(|e| CgtError::Config(format!("cell {}: {e}", c.id)))
        })
        .collect::<Result<Vec<_>>>()?;
    let inputs = configs
        .iter()
        .map(|c| prepare_dataset(c, dataset, None))
        .collect::<Result<Vec<_>>>()?;

    let jobs: Vec<(usize, u64)> = (0..cells.len())
        .flat_map(|c| seeds.iter().map(move |&s| (c, s)))
        .collect();
    let rows = jobs
        .par_iter()
        .map(|&(c, seed)| {
            let mut model = CgtModel::new(configs[c].clone(), seed)?;
            let tc = TrainConfig {
                seed,
                ..train_config.clone()
            };
            let out = train(&mut model, &inputs[c], dataset, &tc)?;
            let h = out.history;
            match (h.best_val, h.test_at_best) {
                (Some(best_val), Some(test_metric)) => Ok(AblationRow {
                    config_id: cells[c].id.clone(),
                    seed,
                    best_val,
                    test_metric,
                }),
                _ => Err(CgtError::Config("ablation needs validation and test splits".into())),
            }
        })
        .collect::<Result<Vec<_>>>()?;

    let summary = cells
        .iter()
        .map(|cell| {
            let mine: Vec<&AblationRow> = rows.iter().filter(|r| r.config_id == cell.id).collect();
            let vals: Vec<f64> = mine.iter().map(|r| r.best_val).collect();
            let tests: Vec<f64> = mine.iter().map(|r| r.test_metric).collect();
            let (best_val_mean, best_val_std) = mean_std(&vals);
            let (test_mean, test_std) = mean_std(&tests);
            CellSummary {
                config_id: cell.id.clone(),
                seeds: mine.len(),
                best_val_mean,
                best_val_std,
                test_mean,
                test_std,
            }
        })
        .collect();
    Ok(AblationReport { rows, summary })
}

/// Named grids: `color-edge-value` (2×2), `rpe-rings` (2×2) and `heads`
/// (`{1, d/8, d}` in both attention modes).
pub fn preset_grid(name: &str, width: usize) -> Result<Vec<AblationCell>> {
    let cell = |id: String, delta: Value| AblationCell { id, delta };
    match name {
        "color-edge-value" => Ok([true, false]
            .iter()
            .flat_map(|&color| {
                [true, false].into_iter().map(move |ev| {
                    let variant = if color { "chromatic" } else { "monochrome" };
                    cell(
                        format!("color={}_edge-value={}", on(color), on(ev)),
                        json!({ "attention": { "variant": variant }, "edge_value": ev }),
                    )
                })
            })
            .collect()),
        "rpe-rings" => Ok(["rwse", "spde"]
            .iter()
            .flat_map(|&rpe| {
                [true, false].into_iter().map(move |rings| {
                    cell(
                        format!("rpe={rpe}_rings={}", on(rings)),
                        json!({ "rpe": { "kind": rpe }, "rings": { "enabled": rings } }),
                    )
                })
            })
            .collect()),
        "heads" => {
            let mut counts = vec![1, (width / 8).max(1), width];
            counts.dedup();
            Ok(counts
                .iter()
                .flat_map(|&h| {
                    ["chromatic", "monochrome"].into_iter().map(move |variant| {
                        cell(
                            format!("heads={h}_{variant}"),
                            json!({ "heads": h, "attention": { "variant": variant } }),
                        )
                    })
                })
                .collect())
        }
        other => Err(CgtError::Config(format!(
            "unknown grid {other:?}; expected color-edge-value, rpe-rings or heads"
        ))),
    }
}

fn on(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}
