use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cgt_core::graph::{load_dataset, Dataset, DatasetSchema, Split, TaskKind};
use cgt_core::model::{CgtModel, ModelConfig, Phase};
use cgt_core::precompute::{PreprocessConfig, Sidecar};
use cgt_core::train::{
    generate_synthetic, prepare_dataset, preset_grid, run_ablation, train, AblationCell,
    SyntheticKind, SyntheticTaskSpec, TrainConfig,
};
use cgt_core::autodiff::Tape;
use serde::Serialize;
use serde_json::json;

use crate::{Cli, Command, SplitArg};

/// A check that ran to completion but failed its numerical tolerance.
#[derive(Debug)]
pub struct NumericalFailure(pub String);

impl std::fmt::Display for NumericalFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for NumericalFailure {}

#[derive(Debug, Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    config_path: Option<String>,
    dataset_path: Option<String>,
    output_directory: String,
    seed: Option<u64>,
    tool_version: &'static str,
    args: Vec<String>,
}

fn show(p: &Path) -> String {
    p.display().to_string()
}

fn write_manifest(
    out: &Path,
    command: &str,
    config: Option<&Path>,
    dataset: Option<&Path>,
    seed: Option<u64>,
) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating run directory {}", out.display()))?;
    let manifest = RunManifest {
        command,
        config_path: config.map(show),
        dataset_path: dataset.map(show),
        output_directory: show(out),
        seed,
        tool_version: env!("CARGO_PKG_VERSION"),
        args: std::env::args().collect(),
    };
    write_json(&out.join(format!("manifest-{command}.json")), &manifest)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {what} {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {what} {}", path.display()))
}

fn load_model_config(path: &Path) -> Result<ModelConfig> {
    let c: ModelConfig = read_json(path, "model config")?;
    c.validate()?;
    Ok(c)
}

fn load_train_config(path: Option<&Path>) -> Result<TrainConfig> {
    let c = match path {
        Some(p) => read_json(p, "training config")?,
        None => TrainConfig::default(),
    };
    c.validate()?;
    Ok(c)
}

fn schema_of(config: &ModelConfig) -> DatasetSchema {
    DatasetSchema {
        task: config.task,
        num_bond_types: config.num_bond_types,
    }
}

fn load_sidecar(path: Option<&PathBuf>) -> Result<Option<Sidecar>> {
    path.map(|p| Sidecar::load(p).with_context(|| format!("loading sidecar {}", p.display())))
        .transpose()
}

fn load(path: &Path, schema: &DatasetSchema) -> Result<Dataset> {
    load_dataset(path, schema).with_context(|| format!("loading dataset {}", path.display()))
}

pub fn run(cli: &Cli) -> Result<()> {
    let out = cli.out_dir.as_path();
    match &cli.command {
        Command::Preprocess {
            dataset,
            rpe,
            steps,
            rings,
            task,
            bond_types,
        } => {
            write_manifest(out, "preprocess", None, Some(dataset), None)?;
            let schema = DatasetSchema {
                task: (*task).into(),
                num_bond_types: *bond_types,
            };
            let ds = load(dataset, &schema)?;
            let config = PreprocessConfig {
                rpe: (*rpe).into(),
                steps: *steps,
                rings: rings.0,
            };
            let sidecar = Sidecar::build(&ds, config)?;
            let path = out.join("sidecar.json");
            sidecar.save(&path)?;
            println!("wrote {} ({} graphs)", path.display(), ds.len());
        }
        Command::Train {
            config,
            dataset,
            train_config,
            sidecar,
            seed,
        } => {
            let mut tc = load_train_config(train_config.as_deref())?;
            if let Some(s) = seed {
                tc.seed = *s;
            }
            write_manifest(out, "train", Some(config), Some(dataset), Some(tc.seed))?;
            let mc = load_model_config(config)?;
            let ds = load(dataset, &schema_of(&mc))?;
            let sc = load_sidecar(sidecar.as_ref())?;
            let inputs = prepare_dataset(&mc, &ds, sc.as_ref())?;
            let mut model = CgtModel::new(mc, tc.seed)?;
            let outcome = train(&mut model, &inputs, &ds, &tc)?;
            outcome.best_checkpoint.save(out.join("checkpoint.json"))?;
            write_json(&out.join("history.json"), &outcome.history)?;
            write_json(&out.join("train-config.json"), &tc)?;
            let h = &outcome.history;
            println!(
                "best epoch {} best_val {} test {}",
                h.best_epoch,
                fmt_opt(h.best_val),
                fmt_opt(h.test_at_best)
            );
        }
        Command::Eval {
            checkpoint,
            dataset,
            split,
            sidecar,
        } => {
            write_manifest(out, "eval", Some(checkpoint), Some(dataset), None)?;
            let model = CgtModel::load(checkpoint)
                .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
            let ds = load(dataset, &schema_of(&model.config))?;
            let sc = load_sidecar(sidecar.as_ref())?;
            let inputs = prepare_dataset(&model.config, &ds, sc.as_ref())?;
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Val => Split::Val,
                SplitArg::Test => Split::Test,
            };
            let idx = ds.indices(split);
            let metric = model.evaluate(&inputs, &idx)?;
            let name = match model.config.task {
                TaskKind::GraphRegression => "mae",
                TaskKind::NodeClassification => "accuracy",
            };
            write_json(
                &out.join("eval.json"),
                &json!({ "split": split, "metric": name, "value": metric, "graphs": idx.len() }),
            )?;
            println!("{name} {metric}");
        }
        Command::Gradcheck {
            config,
            eps,
            dataset,
            graph,
            seed,
            tol,
        } => {
            write_manifest(out, "gradcheck", config.as_deref(), dataset.as_deref(), Some(*seed))?;
            let mc = match config {
                Some(p) => load_model_config(p)?,
                None => ModelConfig::default(),
            };
            let ds = match dataset {
                Some(p) => load(p, &schema_of(&mc))?,
                None => {
                    let kind = match mc.task {
                        TaskKind::GraphRegression => SyntheticKind::RingRegression,
                        TaskKind::NodeClassification => SyntheticKind::SbmCluster,
                    };
                    generate_synthetic(&SyntheticTaskSpec {
                        kind,
                        num_graphs: 1,
                        min_nodes: 6,
                        max_nodes: 6,
                        seed: *seed,
                    })?
                }
            };
            let g = ds
                .graphs()
                .get(*graph)
                .with_context(|| format!("graph {graph} out of range for {} graphs", ds.len()))?;
            let model = CgtModel::new(mc, *seed)?;
            let inputs = model.prepare(g, None)?;
            let report = model.grad_check_loss(&[&inputs], *eps, *seed)?;
            let max = report.max_rel_error();
            write_json(&out.join("gradcheck.json"), &report)?;
            let worst = report.worst().map(|w| w.name.as_str()).unwrap_or("-");
            println!("max relative error {max:.3e} (worst parameter {worst}) at eps {eps}");
            if max >= *tol {
                return Err(NumericalFailure(format!(
                    "gradient check failed: {max:.3e} >= tolerance {tol:.1e}"
                ))
                .into());
            }
        }
        Command::DumpAttention {
            checkpoint,
            graph,
            layer,
            dataset,
            sidecar,
        } => {
            write_manifest(out, "dump-attention", Some(checkpoint), Some(dataset), None)?;
            let model = CgtModel::load(checkpoint)
                .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
            if *layer >= model.num_layers() {
                bail!("layer {layer} out of range for {} layers", model.num_layers());
            }
            let ds = load(dataset, &schema_of(&model.config))?;
            let g = ds
                .graphs()
                .get(*graph)
                .with_context(|| format!("graph {graph} out of range for {} graphs", ds.len()))?;
            let sc = load_sidecar(sidecar.as_ref())?;
            if let Some(s) = &sc {
                s.check_matches(&ds)?;
            }
            let inputs = model.prepare(g, sc.as_ref().map(|s| &s.graphs[*graph]))?;
            let mut tape = Tape::new();
            let f = model.forward(&mut tape, &[&inputs], Phase::Eval)?;
            let values = tape.value(f.filters[*layer][0]);
            let (n, d) = (inputs.n, model.config.width);
            let channels: Vec<_> = (0..d)
                .map(|c| {
                    let rows: Vec<Vec<f64>> = (0..n)
                        .map(|i| (0..n).map(|j| values[(i * n + j) * d + c]).collect())
                        .collect();
                    json!({ "c": c, "rows": rows })
                })
                .collect();
            let path = out.join(format!("attention-g{graph}-l{layer}.json"));
            write_json(
                &path,
                &json!({ "graph_id": graph, "layer": layer, "channels": channels }),
            )?;
            println!("wrote {}", path.display());
        }
        Command::Generate {
            kind,
            graphs,
            min_nodes,
            max_nodes,
            seed,
        } => {
            write_manifest(out, "generate", None, None, Some(*seed))?;
            let spec = SyntheticTaskSpec {
                kind: (*kind).into(),
                num_graphs: *graphs,
                min_nodes: *min_nodes,
                max_nodes: *max_nodes,
                seed: *seed,
            };
            let ds = generate_synthetic(&spec)?;
            let config = spec.desk_config();
            fs::write(out.join("dataset.jsonl"), ds.to_jsonl()?)?;
            write_json(&out.join("model-config.json"), &config)?;
            write_json(&out.join("spec.json"), &spec)?;
            println!("wrote {} graphs to {}", ds.len(), out.join("dataset.jsonl").display());
        }
        Command::Ablate {
            config,
            dataset,
            train_config,
            grid,
            cells,
            seeds,
        } => {
            write_manifest(out, "ablate", Some(config), Some(dataset), None)?;
            let mc = load_model_config(config)?;
            let tc = load_train_config(train_config.as_deref())?;
            let cells: Vec<AblationCell> = match (grid, cells) {
                (Some(name), None) => preset_grid(name, mc.width)?,
                (None, Some(p)) => read_json(p, "ablation cells")?,
                _ => bail!("pass exactly one of --grid or --cells"),
            };
            let ds = load(dataset, &schema_of(&mc))?;
            let seeds: Vec<u64> = (0..*seeds).collect();
            let report = run_ablation(&mc, &tc, &cells, &seeds, &ds)?;
            fs::write(out.join("ablation.csv"), report.to_csv())?;
            fs::write(out.join("ablation-summary.json"), report.summary_json()?)?;
            for s in &report.summary {
                println!(
                    "{} test {:.4} ± {:.4} (val {:.4} ± {:.4}, {} seeds)",
                    s.config_id, s.test_mean, s.test_std, s.best_val_mean, s.best_val_std, s.seeds
                );
            }
        }
    }
    Ok(())
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "-".into(), |v| v.to_string())
}
