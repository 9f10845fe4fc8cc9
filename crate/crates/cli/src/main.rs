//! `cgt`: preprocessing, training, evaluation and diagnostics for the
//! chromatic graph transformer.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use cgt_core::graph::TaskKind;
use cgt_core::rpe::RpeKind;
use cgt_core::train::SyntheticKind;
use clap::{Parser, Subcommand, ValueEnum};

pub const EXIT_NUMERICAL: u8 = 1;
pub const EXIT_USAGE: u8 = 2;

#[derive(Debug, Parser)]
#[command(name = "cgt", version, about = "Chromatic graph transformer toolkit")]
pub struct Cli {
    /// Run directory receiving the manifest and every output file.
    #[arg(long, global = true, env = "CGT_OUT_DIR", default_value = "cgt-run")]
    pub out_dir: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum RpeArg {
    Rwse,
    Spde,
    None,
}

impl From<RpeArg> for RpeKind {
    fn from(a: RpeArg) -> Self {
        match a {
            RpeArg::Rwse => RpeKind::Rwse,
            RpeArg::Spde => RpeKind::Spde,
            RpeArg::None => RpeKind::None,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum TaskArg {
    GraphRegression,
    NodeClassification,
}

impl From<TaskArg> for TaskKind {
    fn from(a: TaskArg) -> Self {
        match a {
            TaskArg::GraphRegression => TaskKind::GraphRegression,
            TaskArg::NodeClassification => TaskKind::NodeClassification,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum KindArg {
    RingRegression,
    TriangleRegression,
    SbmCluster,
}

impl From<KindArg> for SyntheticKind {
    fn from(a: KindArg) -> Self {
        match a {
            KindArg::RingRegression => SyntheticKind::RingRegression,
            KindArg::TriangleRegression => SyntheticKind::TriangleRegression,
            KindArg::SbmCluster => SyntheticKind::SbmCluster,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

/// Ring size cap from `--rings 6`; `--rings off` disables enumeration.
#[derive(Debug, Clone, Copy)]
pub struct RingCap(pub Option<usize>);

fn parse_rings(s: &str) -> Result<RingCap, String> {
    if s == "off" {
        return Ok(RingCap(None));
    }
    s.parse::<usize>()
        .map(|k| RingCap(Some(k)))
        .map_err(|_| format!("expected a ring size or `off`, got {s:?}"))
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Precompute random-walk powers, distances and rings into a sidecar.
    Preprocess {
        dataset: PathBuf,
        #[arg(long, value_enum, default_value = "rwse")]
        rpe: RpeArg,
        #[arg(long, default_value_t = 16)]
        steps: usize,
        #[arg(long, default_value = "off", value_parser = parse_rings)]
        rings: RingCap,
        #[arg(long, value_enum, default_value = "graph-regression")]
        task: TaskArg,
        #[arg(long, default_value_t = 4)]
        bond_types: usize,
    },
    /// Train a model; writes the best-validation checkpoint and metric history.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Training hyperparameters (JSON); defaults apply when omitted.
        #[arg(long)]
        train_config: Option<PathBuf>,
        #[arg(long)]
        sidecar: Option<PathBuf>,
        /// Overrides the training seed; also seeds parameter initialization.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Metric of a checkpoint on one split of a dataset.
    Eval {
        checkpoint: PathBuf,
        dataset: PathBuf,
        #[arg(long, value_enum, default_value = "val")]
        split: SplitArg,
        #[arg(long)]
        sidecar: Option<PathBuf>,
    },
    /// Finite-difference check of every parameter's gradient.
    Gradcheck {
        /// Model configuration; the built-in default when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1e-3)]
        eps: f64,
        /// Graphs to check on; a generated 6-node graph when omitted.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        graph: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Exit with a numerical failure when the worst error exceeds this.
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Write the normalized attention filters of one graph and layer as JSON.
    DumpAttention {
        checkpoint: PathBuf,
        graph: usize,
        layer: usize,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        sidecar: Option<PathBuf>,
    },
    /// Generate a synthetic dataset and a matching model configuration.
    Generate {
        #[arg(long, value_enum, default_value = "ring-regression")]
        kind: KindArg,
        #[arg(long, default_value_t = 300)]
        graphs: usize,
        #[arg(long, default_value_t = 8)]
        min_nodes: usize,
        #[arg(long, default_value_t = 24)]
        max_nodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a grid of configuration deltas over several seeds.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        train_config: Option<PathBuf>,
        /// Preset grid: color-edge-value, rpe-rings or heads.
        #[arg(long, conflicts_with = "cells")]
        grid: Option<String>,
        /// JSON list of `{"id": ..., "delta": {...}}` cells.
        #[arg(long)]
        cells: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        seeds: u64,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let numerical = e
                .chain()
                .any(|c| c.downcast_ref::<cgt_core::CgtError>().is_some_and(|c| c.is_numerical()))
                || e.downcast_ref::<commands::NumericalFailure>().is_some();
            ExitCode::from(if numerical { EXIT_NUMERICAL } else { EXIT_USAGE })
        }
    }
}
