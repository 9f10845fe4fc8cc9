//! The full model: node encoder, stacked chromatic attention blocks, and the
//! task heads with their losses.

use std::path::Path;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{grad_check, BatchStats, GradCheckReport, ParamId, ParameterStore, Tape, TensorFile, Var};
use crate::csa::{
    sample_attention_mask, AttentionMask, AttentionMode, AttentionVariant, CsaLayer, DropoutKind,
    EdgeEncoder, EdgeEncoderConfig, EdgeInputs, EdgeProjection, EdgeVars, GraphSlot, LayerConfig,
    NormChoice, RpeInput, RunningStats,
};
use crate::error::{CgtError, Result};
use crate::graph::{Graph, TaskKind, Target};
use crate::init;
use crate::precompute::GraphStructure;
use crate::rings::{
    completed_bond_matrix, enumerate_rings, ring_edge_encoding, s_bound_matrix, BoundDiagonal,
    BondMatrix, RingEncoding, RingMode, MAX_RING, MIN_RING,
};
use crate::rpe::{
    all_pairs_spd, node_rwse, random_walk_matrix, rw_power_stack, RpeConfig, RpeKind,
};

/// Graphs per forward pass when evaluating.
pub const EVAL_CHUNK: usize = 32;

fn yes() -> bool {
    true
}

fn two() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RingConfig {
    pub enabled: bool,
    pub k_max: usize,
    pub mode: RingMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub attention: AttentionMode,
    /// Per-head `1/√d_h` factor on the dot products.
    #[serde(default = "yes")]
    pub scaled: bool,
    #[serde(default = "yes")]
    pub edge_value: bool,
    pub rpe: RpeConfig,
    /// Return-probability steps of the node encoding; 0 disables it.
    pub node_pe_steps: usize,
    pub node_pe_dim: usize,
    pub rings: RingConfig,
    /// One edge projection reused by every layer.
    pub edge_sharing: bool,
    /// Dropout on the feed-forward hidden units.
    pub dropout: f64,
    #[serde(default)]
    pub norm: NormChoice,
    pub task: TaskKind,
    #[serde(default)]
    pub num_classes: usize,
    /// Vocabulary size of each categorical node-feature field.
    pub node_vocab: Vec<usize>,
    pub num_bond_types: usize,
    pub bond_dim: usize,
    #[serde(default = "two")]
    pub ffn_mult: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 2,
            width: 16,
            heads: 4,
            attention: AttentionMode::new(AttentionVariant::Chromatic),
            scaled: true,
            edge_value: true,
            rpe: RpeConfig {
                kind: RpeKind::Rwse,
                steps: 8,
                nonneg_rwse: false,
                dim: 8,
            },
            node_pe_steps: 8,
            node_pe_dim: 8,
            rings: RingConfig {
                enabled: true,
                k_max: 6,
                mode: RingMode::Additive,
            },
            edge_sharing: false,
            dropout: 0.0,
            norm: NormChoice::Batch,
            task: TaskKind::GraphRegression,
            num_classes: 0,
            node_vocab: vec![4],
            num_bond_types: 3,
            bond_dim: 8,
            ffn_mult: 2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CgtError::Config(m));
        if self.width == 0 || self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return bad(format!("width {} not divisible by {} heads", self.width, self.heads));
        }
        if self.rpe.kind != RpeKind::None {
            self.rpe.validate()?;
        }
        if self.node_pe_steps > 0 && self.node_pe_dim == 0 {
            return bad("node_pe_dim must be positive when node_pe_steps is".into());
        }
        if self.rings.enabled && !(MIN_RING..=MAX_RING).contains(&self.rings.k_max) {
            return bad(format!("ring k_max {} outside [{MIN_RING}, {MAX_RING}]", self.rings.k_max));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        self.attention.validate()?;
        if self.task == TaskKind::NodeClassification && self.num_classes < 2 {
            return bad("node classification needs num_classes >= 2".into());
        }
        if self.node_vocab.is_empty() || self.node_vocab.contains(&0) {
            return bad("node_vocab needs at least one non-empty field".into());
        }
        if self.bond_dim == 0 || self.ffn_mult == 0 {
            return bad("bond_dim and ffn_mult must be positive".into());
        }
        Ok(())
    }

    fn layer_config(&self) -> LayerConfig {
        LayerConfig {
            width: self.width,
            heads: self.heads,
            variant: self.attention.variant,
            scaled: self.scaled,
            norm: self.norm,
            ffn_mult: self.ffn_mult,
        }
    }

    fn edge_config(&self) -> EdgeEncoderConfig {
        let categories = self.num_bond_types + 2;
        let paired = self.rings.enabled && self.rings.mode == RingMode::Categorical;
        EdgeEncoderConfig {
            bond_vocab: if paired { 2 * categories } else { categories },
            bond_dim: self.bond_dim,
            rpe: self.rpe.clone(),
            additive_rings: self.rings.enabled && self.rings.mode == RingMode::Additive,
        }
    }
}

/// Everything the model reads for one graph, ready for the tape.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphInputs {
    pub n: usize,
    pub node_feats: Vec<Vec<usize>>,
    /// Return probabilities, row-major `N×node_pe_steps`.
    pub node_pe: Option<Vec<f64>>,
    pub edges: EdgeInputs,
    pub target: Option<Target>,
}

/// Builds model inputs for `g`, reusing `structure` from a sidecar when
/// given. A sidecar that lacks what the config asks for is refused rather
/// than silently recomputed.
pub fn prepare_inputs(
    config: &ModelConfig,
    g: &Graph,
    structure: Option<&GraphStructure>,
) -> Result<GraphInputs> {
    let n = g.num_nodes();
    for (i, feats) in g.node_feats().iter().enumerate() {
        if feats.len() != config.node_vocab.len() {
            return Err(CgtError::Encoding(format!(
                "node {i} has {} feature fields, model expects {}",
                feats.len(),
                config.node_vocab.len()
            )));
        }
        for (f, (&id, &vocab)) in feats.iter().zip(&config.node_vocab).enumerate() {
            if id >= vocab {
                return Err(CgtError::Encoding(format!(
                    "node {i} field {f}: id {id} outside vocabulary of {vocab}"
                )));
            }
        }
    }
    if let Some(s) = structure {
        if s.num_nodes != n {
            return Err(CgtError::Config(format!(
                "precomputed structure has {} nodes, graph has {n}",
                s.num_nodes
            )));
        }
    }
    let missing = |what: &str| CgtError::Config(format!("sidecar lacks {what} required by the model"));

    let steps = config.rpe.steps;
    let rpe = match config.rpe.kind {
        RpeKind::None => RpeInput::None,
        RpeKind::Rwse => {
            let stack = match structure {
                Some(s) => s.rw.clone().ok_or_else(|| missing("random-walk powers"))?,
                None => rw_power_stack(&random_walk_matrix(g), n, steps),
            };
            if stack.steps() != steps {
                return Err(CgtError::Config(format!(
                    "sidecar has {} random-walk steps, model expects {steps}",
                    stack.steps()
                )));
            }
            RpeInput::Rwse {
                feats: stack.pair_features(),
                steps,
            }
        }
        RpeKind::Spde => {
            let spd = match structure {
                Some(s) => s.spd.clone().ok_or_else(|| missing("shortest-path distances"))?,
                None => all_pairs_spd(g, steps),
            };
            if spd.cap != steps {
                return Err(CgtError::Config(format!(
                    "sidecar distance cap {}, model expects {steps}",
                    spd.cap
                )));
            }
            RpeInput::Spde {
                indices: spd.embedding_indices(),
                vocab: spd.vocab_size(),
            }
        }
    };

    let node_pe = (config.node_pe_steps > 0).then(|| {
        node_rwse(&rw_power_stack(&random_walk_matrix(g), n, config.node_pe_steps))
    });

    let bonds = completed_bond_matrix(g, config.num_bond_types);
    let BondMatrix::Categorical { ids, .. } = &bonds else {
        unreachable!("graph bonds are categorical")
    };
    let (bond_ids, ring_bits) = if config.rings.enabled {
        let rings = match structure {
            Some(s) => s.rings.clone().ok_or_else(|| missing("rings"))?,
            None => enumerate_rings(g, config.rings.k_max),
        };
        if rings.k_max != config.rings.k_max {
            return Err(CgtError::Config(format!(
                "sidecar rings up to size {}, model expects {}",
                rings.k_max, config.rings.k_max
            )));
        }
        let bound = s_bound_matrix(&rings, n, BoundDiagonal::default());
        match ring_edge_encoding(&bonds, &bound, config.rings.mode)? {
            RingEncoding::Additive { bits } => (ids.clone(), Some(bits)),
            RingEncoding::Categorical { ids, .. } => (ids, None),
        }
    } else {
        (ids.clone(), None)
    };

    Ok(GraphInputs {
        n,
        node_feats: g.node_feats().to_vec(),
        node_pe,
        edges: EdgeInputs {
            n,
            bond_ids,
            rpe,
            ring_bits,
        },
        target: g.target().cloned(),
    })
}

/// Training draws dropout masks from the given generator and normalizes with
/// batch statistics; evaluation uses running statistics and no dropout.
pub enum Phase<'a> {
    Train(&'a mut ChaCha8Rng),
    Eval,
}

#[derive(Debug)]
pub struct Forward {
    /// `[B]` graph predictions or `[ΣN, classes]` node logits.
    pub output: Var,
    /// Attention filters per layer, per graph.
    pub filters: Vec<Vec<Var>>,
    /// Batch statistics per layer (training-mode batch norm only).
    pub stats: Vec<[BatchStats; 2]>,
}

#[derive(Debug, Clone)]
enum Head {
    Graph {
        w1: ParamId,
        b1: ParamId,
        w2: ParamId,
        b2: ParamId,
    },
    Node {
        w: ParamId,
        b: ParamId,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointMeta {
    config: ModelConfig,
    running: Vec<[RunningStats; 2]>,
    #[serde(default)]
    extra: serde_json::Value,
}

#[derive(Debug, Clone)]
pub struct CgtModel {
    pub config: ModelConfig,
    pub store: ParameterStore,
    /// Batch-norm running statistics, two sites per layer.
    pub running: Vec<[RunningStats; 2]>,
    node_tables: Vec<ParamId>,
    pe_proj: Option<ParamId>,
    input_proj: ParamId,
    edge_encoder: EdgeEncoder,
    /// One projection when edges are shared, else one per layer.
    projections: Vec<EdgeProjection>,
    layers: Vec<CsaLayer>,
    head: Head,
}

impl CgtModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        let d = config.width;

        let node_tables = config
            .node_vocab
            .iter()
            .enumerate()
            .map(|(f, &v)| store.insert(format!("node.emb{f}"), init::embedding(&mut rng, v, d)))
            .collect::<Result<Vec<_>>>()?;
        let pe_proj = if config.node_pe_steps > 0 {
            let w = init::xavier_uniform(&mut rng, config.node_pe_steps, config.node_pe_dim);
            Some(store.insert("node.pe", w)?)
        } else {
            None
        };
        let in_dim = d + if pe_proj.is_some() { config.node_pe_dim } else { 0 };
        let input_proj = store.insert("node.proj", init::xavier_uniform(&mut rng, in_dim, d))?;

        let edge_cfg = config.edge_config();
        let e0_dim = edge_cfg.feature_dim();
        let edge_encoder = EdgeEncoder::new(&mut store, "edge", edge_cfg, &mut rng)?;
        let projections = if config.edge_sharing {
            vec![EdgeProjection::new(&mut store, "edge", e0_dim, d, config.edge_value, &mut rng)?]
        } else {
            (0..config.layers)
                .map(|l| {
                    EdgeProjection::new(
                        &mut store,
                        &format!("layer{l}.edge"),
                        e0_dim,
                        d,
                        config.edge_value,
                        &mut rng,
                    )
                })
                .collect::<Result<Vec<_>>>()?
        };
        let layers = (0..config.layers)
            .map(|l| CsaLayer::new(&mut store, &format!("layer{l}"), config.layer_config(), &mut rng))
            .collect::<Result<Vec<_>>>()?;

        let head = match config.task {
            TaskKind::GraphRegression => Head::Graph {
                w1: store.insert("head.w1", init::xavier_uniform(&mut rng, d, d))?,
                b1: store.insert("head.b1", init::constant(vec![d], 0.0))?,
                w2: store.insert("head.w2", init::xavier_uniform(&mut rng, d, 1))?,
                b2: store.insert("head.b2", init::constant(vec![1], 0.0))?,
            },
            TaskKind::NodeClassification => Head::Node {
                w: store.insert("head.w", init::xavier_uniform(&mut rng, d, config.num_classes))?,
                b: store.insert("head.b", init::constant(vec![config.num_classes], 0.0))?,
            },
        };
        let running = (0..config.layers)
            .map(|_| [RunningStats::new(d), RunningStats::new(d)])
            .collect();
        Ok(CgtModel {
            config,
            store,
            running,
            node_tables,
            pe_proj,
            input_proj,
            edge_encoder,
            projections,
            layers,
            head,
        })
    }

    pub fn prepare(&self, g: &Graph, structure: Option<&GraphStructure>) -> Result<GraphInputs> {
        prepare_inputs(&self.config, g, structure)
    }

    /// `h⁰`: summed field embeddings, joined with the projected node encoding
    /// when configured, then mapped to the model width.
    pub fn node_encoder(&self, tape: &mut Tape, store: &ParameterStore, batch: &[&GraphInputs]) -> Result<Var> {
        let mut sum: Option<Var> = None;
        for (f, &table) in self.node_tables.iter().enumerate() {
            let ids: Vec<usize> = batch
                .iter()
                .flat_map(|g| g.node_feats.iter().map(move |x| x[f]))
                .collect();
            let t = tape.param(store, table);
            let e = tape.gather(t, &ids)?;
            sum = Some(match sum {
                Some(s) => tape.add(s, e)?,
                None => e,
            });
        }
        let mut h = sum.expect("at least one feature field");
        if let Some(pe) = self.pe_proj {
            let p = self.config.node_pe_steps;
            let mut data = Vec::new();
            for g in batch {
                let pe = g.node_pe.as_ref().ok_or_else(|| {
                    CgtError::Config("model expects a node encoding but none was prepared".into())
                })?;
                data.extend_from_slice(pe);
            }
            let rows = data.len() / p;
            let x = tape.constant(vec![rows, p], data)?;
            let w = tape.param(store, pe);
            let proj = tape.matmul(x, w)?;
            h = tape.concat_last(&[h, proj])?;
        }
        let w = tape.param(store, self.input_proj);
        tape.matmul(h, w)
    }

    pub fn forward(&self, tape: &mut Tape, batch: &[&GraphInputs], phase: Phase) -> Result<Forward> {
        self.forward_with(tape, &self.store, batch, phase)
    }

    /// Forward pass with an explicit parameter store (used by gradient checks).
    pub fn forward_with(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        batch: &[&GraphInputs],
        phase: Phase,
    ) -> Result<Forward> {
        if batch.is_empty() {
            return Err(CgtError::Config("empty batch".into()));
        }
        let d = self.config.width;
        let train = matches!(phase, Phase::Train(_));
        let mut rng = match phase {
            Phase::Train(r) => Some(r),
            Phase::Eval => None,
        };
        let total: usize = batch.iter().map(|g| g.n).sum();
        let mut h = self.node_encoder(tape, store, batch)?;

        let e0: Vec<Var> = batch
            .iter()
            .map(|g| self.edge_encoder.encode(tape, store, &g.edges))
            .collect::<Result<_>>()?;
        let project = |tape: &mut Tape, p: &EdgeProjection| -> Result<Vec<EdgeVars>> {
            e0.iter()
                .zip(batch)
                .map(|(&e, g)| p.project(tape, store, e, g.n))
                .collect()
        };
        let shared = match (self.config.edge_sharing, self.projections.first()) {
            (true, Some(p)) => Some(project(tape, p)?),
            _ => None,
        };

        let attn = self.config.attention;
        let hidden = d * self.config.ffn_mult;
        let mut filters = Vec::with_capacity(self.layers.len());
        let mut stats = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            let edges = match &shared {
                Some(s) => s.clone(),
                None => project(tape, &self.projections[l])?,
            };
            let masks: Vec<AttentionMask> = batch
                .iter()
                .map(|g| match rng.as_deref_mut() {
                    Some(r) if attn.dropout != DropoutKind::None && attn.p_drop > 0.0 => {
                        sample_attention_mask(g.n, d, attn.dropout, attn.p_drop, r)
                    }
                    _ => AttentionMask::none(),
                })
                .collect();
            let hidden_mask = match rng.as_deref_mut() {
                Some(r) if self.config.dropout > 0.0 => {
                    let p = self.config.dropout;
                    let keep = 1.0 / (1.0 - p);
                    let m: Vec<f64> = (0..total * hidden)
                        .map(|_| if r.gen::<f64>() < p { 0.0 } else { keep })
                        .collect();
                    Some(Rc::<[f64]>::from(m))
                }
                _ => None,
            };
            let mut offset = 0;
            let slots: Vec<GraphSlot> = batch
                .iter()
                .zip(&edges)
                .zip(&masks)
                .map(|((g, &e), mask)| {
                    let slot = GraphSlot {
                        offset,
                        n: g.n,
                        edges: e,
                        mask,
                    };
                    offset += g.n;
                    slot
                })
                .collect();
            let running = if train {
                None
            } else {
                Some([&self.running[l][0], &self.running[l][1]])
            };
            let out = layer.forward(tape, store, h, &slots, running, hidden_mask)?;
            h = out.h;
            filters.push(out.filters);
            if let Some(s) = out.stats {
                stats.push(s);
            }
        }

        let output = match &self.head {
            Head::Graph { w1, b1, w2, b2 } => {
                let mut pooled = Vec::with_capacity(batch.len());
                let mut offset = 0;
                for g in batch {
                    let rows = tape.slice_rows(h, offset, g.n)?;
                    let m = tape.mean_rows(rows)?;
                    pooled.push(tape.reshape(m, &[1, d])?);
                    offset += g.n;
                }
                let x = tape.concat_rows(&pooled)?;
                let w1 = tape.param(store, *w1);
                let b1 = tape.param(store, *b1);
                let w2 = tape.param(store, *w2);
                let b2 = tape.param(store, *b2);
                let z = tape.matmul(x, w1)?;
                let z = tape.add_trailing(z, b1)?;
                let z = tape.gelu(z);
                let y = tape.matmul(z, w2)?;
                let y = tape.add_trailing(y, b2)?;
                tape.reshape(y, &[batch.len()])?
            }
            Head::Node { w, b } => {
                let w = tape.param(store, *w);
                let b = tape.param(store, *b);
                let y = tape.matmul(h, w)?;
                tape.add_trailing(y, b)?
            }
        };
        if !tape.value(output).iter().all(|x| x.is_finite()) {
            return Err(CgtError::Numerical("non-finite predictions from the task head".into()));
        }
        Ok(Forward {
            output,
            filters,
            stats,
        })
    }

    /// MAE for graph regression, mean cross-entropy over nodes for node
    /// classification.
    pub fn loss(&self, tape: &mut Tape, output: Var, batch: &[&GraphInputs]) -> Result<Var> {
        match self.config.task {
            TaskKind::GraphRegression => {
                let y = regression_targets(batch)?;
                let t = tape.constant(vec![y.len()], y)?;
                let diff = tape.sub(output, t)?;
                let a = tape.abs(diff);
                Ok(tape.mean(a))
            }
            TaskKind::NodeClassification => {
                let labels = node_labels(batch, self.config.num_classes)?;
                tape.cross_entropy(output, &labels)
            }
        }
    }

    /// Folds training-mode batch statistics into the running averages.
    pub fn update_running(&mut self, stats: &[[BatchStats; 2]]) {
        for (run, s) in self.running.iter_mut().zip(stats) {
            run[0].update(&s[0]);
            run[1].update(&s[1]);
        }
    }

    /// Eval-mode outputs: one value per graph, or row-major node logits.
    pub fn predict(&self, batch: &[&GraphInputs]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let f = self.forward(&mut tape, batch, Phase::Eval)?;
        Ok(tape.value(f.output).to_vec())
    }

    /// Eval-mode metric over `indices`: MAE for regression, node accuracy for
    /// classification.
    pub fn evaluate(&self, inputs: &[GraphInputs], indices: &[usize]) -> Result<f64> {
        if indices.is_empty() {
            return Err(CgtError::Config("cannot evaluate an empty split".into()));
        }
        let (mut total, mut count) = (0.0, 0usize);
        for chunk in indices.chunks(EVAL_CHUNK) {
            let batch: Vec<&GraphInputs> = chunk.iter().map(|&i| &inputs[i]).collect();
            let out = self.predict(&batch)?;
            match self.config.task {
                TaskKind::GraphRegression => {
                    let y = regression_targets(&batch)?;
                    for (p, t) in out.iter().zip(&y) {
                        total += (p - t).abs();
                    }
                    count += y.len();
                }
                TaskKind::NodeClassification => {
                    let c = self.config.num_classes;
                    let labels = node_labels(&batch, c)?;
                    for (row, &label) in out.chunks(c).zip(&labels) {
                        if argmax(row) == label {
                            total += 1.0;
                        }
                    }
                    count += labels.len();
                }
            }
        }
        Ok(total / count as f64)
    }

    pub fn to_checkpoint(&self, extra: serde_json::Value) -> Result<TensorFile> {
        let meta = CheckpointMeta {
            config: self.config.clone(),
            running: self.running.clone(),
            extra,
        };
        TensorFile::from_store(serde_json::to_value(meta)?, &self.store)
    }

    pub fn from_checkpoint(file: &TensorFile) -> Result<Self> {
        let meta: CheckpointMeta = serde_json::from_value(file.meta.clone())?;
        let mut model = CgtModel::new(meta.config, 0)?;
        file.load_into(&mut model.store)?;
        if meta.running.len() != model.running.len() {
            return Err(CgtError::Config("checkpoint running statistics do not match layers".into()));
        }
        model.running = meta.running;
        Ok(model)
    }

    /// Free-form metadata stored alongside the weights.
    pub fn checkpoint_extra(file: &TensorFile) -> serde_json::Value {
        file.meta.get("extra").cloned().unwrap_or(serde_json::Value::Null)
    }

    pub fn save(&self, path: impl AsRef<Path>, extra: serde_json::Value) -> Result<()> {
        self.to_checkpoint(extra)?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&TensorFile::load(path)?)
    }

    /// Gradient check of the training loss with dropout off and batch norm on
    /// its fixed running statistics, so the loss is deterministic.
    pub fn grad_check_loss(&self, batch: &[&GraphInputs], eps: f64, seed: u64) -> Result<GradCheckReport> {
        grad_check(
            |tape, store| {
                let f = self.forward_with(tape, store, batch, Phase::Eval)?;
                self.loss(tape, f.output, batch)
            },
            &self.store,
            eps,
            seed,
        )
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }
}

fn regression_targets(batch: &[&GraphInputs]) -> Result<Vec<f64>> {
    batch
        .iter()
        .map(|g| match &g.target {
            Some(Target::Regression(y)) => Ok(*y),
            _ => Err(CgtError::Config(
                "graph-regression model needs a real-valued target per graph".into(),
            )),
        })
        .collect()
}

fn node_labels(batch: &[&GraphInputs], classes: usize) -> Result<Vec<usize>> {
    let mut labels = Vec::new();
    for g in batch {
        match &g.target {
            Some(Target::NodeClasses(ls)) if ls.len() == g.n => {
                if let Some(&bad) = ls.iter().find(|&&c| c >= classes) {
                    return Err(CgtError::Config(format!(
                        "class {bad} outside the model's {classes} classes"
                    )));
                }
                labels.extend_from_slice(ls);
            }
            _ => {
                return Err(CgtError::Config(
                    "node-classification model needs one class id per node".into(),
                ))
            }
        }
    }
    Ok(labels)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p3(y: f64) -> Graph {
        Graph::new(
            3,
            vec![vec![0], vec![1], vec![0]],
            vec![(0, 1, 0), (1, 2, 1)],
            Some(Target::Regression(y)),
            3,
        )
        .unwrap()
    }

    #[test]
    fn default_config_round_trips_through_json() {
        let c = ModelConfig::default();
        let text = serde_json::to_string_pretty(&c).unwrap();
        let back: ModelConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, c);
        assert!(serde_json::from_str::<ModelConfig>(&text.replacen("\"layers\"", "\"depth\"", 1)).is_err());
    }

    #[test]
    fn out_of_vocabulary_feature_is_an_encoding_error() {
        let g = Graph::new(2, vec![vec![0], vec![7]], vec![(0, 1, 0)], None, 3).unwrap();
        let err = prepare_inputs(&ModelConfig::default(), &g, None).unwrap_err();
        assert!(matches!(err, CgtError::Encoding(_)));
    }

    #[test]
    fn mae_example() {
        let model = CgtModel::new(ModelConfig::default(), 0).unwrap();
        let a = model.prepare(&p3(2.0), None).unwrap();
        let b = model.prepare(&p3(1.0), None).unwrap();
        let mut tape = Tape::new();
        let out = tape.constant(vec![2], vec![1.0, 3.0]).unwrap();
        let loss = model.loss(&mut tape, out, &[&a, &b]).unwrap();
        assert_eq!(tape.scalar(loss), 1.5);
        let same = tape.constant(vec![2], vec![2.0, 1.0]).unwrap();
        let zero = model.loss(&mut tape, same, &[&a, &b]).unwrap();
        assert_eq!(tape.scalar(zero), 0.0);
    }

    #[test]
    fn uniform_logits_give_log_classes() {
        let config = ModelConfig {
            task: TaskKind::NodeClassification,
            num_classes: 6,
            ..ModelConfig::default()
        };
        let model = CgtModel::new(config, 0).unwrap();
        let g = p3(0.0).with_target(Some(Target::NodeClasses(vec![0, 3, 5])));
        let inp = model.prepare(&g, None).unwrap();
        let mut tape = Tape::new();
        let logits = tape.constant(vec![3, 6], vec![0.25; 18]).unwrap();
        let loss = model.loss(&mut tape, logits, &[&inp]).unwrap();
        assert!((tape.scalar(loss) - 6f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn task_target_mismatch_is_a_config_error() {
        let model = CgtModel::new(ModelConfig::default(), 0).unwrap();
        let g = p3(0.0).with_target(Some(Target::NodeClasses(vec![0, 1, 0])));
        let inp = model.prepare(&g, None).unwrap();
        let mut tape = Tape::new();
        let f = model.forward(&mut tape, &[&inp], Phase::Eval).unwrap();
        assert!(matches!(model.loss(&mut tape, f.output, &[&inp]), Err(CgtError::Config(_))));
    }

    #[test]
    fn zero_embeddings_without_encoding_give_zero_h0() {
        let config = ModelConfig {
            node_pe_steps: 0,
            ..ModelConfig::default()
        };
        let mut model = CgtModel::new(config, 1).unwrap();
        let id = model.store.id("node.emb0").unwrap();
        let len = model.store.get(id).len();
        model.store.assign(id, &vec![0.0; len]).unwrap();
        let inp = model.prepare(&p3(0.0), None).unwrap();
        let mut tape = Tape::new();
        let h = model.node_encoder(&mut tape, &model.store, &[&inp]).unwrap();
        assert!(tape.value(h).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn zero_layers_apply_head_to_h0() {
        let config = ModelConfig {
            layers: 0,
            ..ModelConfig::default()
        };
        let model = CgtModel::new(config, 2).unwrap();
        let inp = model.prepare(&p3(0.0), None).unwrap();
        let mut tape = Tape::new();
        let f = model.forward(&mut tape, &[&inp], Phase::Eval).unwrap();
        assert!(f.filters.is_empty());
        assert!(tape.scalar(f.output).is_finite());
    }

    #[test]
    fn eval_is_deterministic_and_checkpoint_exact() {
        let model = CgtModel::new(ModelConfig::default(), 5).unwrap();
        let inp = model.prepare(&p3(0.5), None).unwrap();
        let a = model.predict(&[&inp]).unwrap();
        let b = model.predict(&[&inp]).unwrap();
        assert_eq!(a, b);
        let file = model.to_checkpoint(serde_json::json!({"epoch": 3})).unwrap();
        let text = file.to_json().unwrap();
        let back = CgtModel::from_checkpoint(&TensorFile::from_json(&text).unwrap()).unwrap();
        assert_eq!(back.predict(&[&inp]).unwrap(), a);
        assert_eq!(CgtModel::checkpoint_extra(&file)["epoch"], 3);
    }

    #[test]
    fn sidecar_missing_rings_is_refused() {
        let config = ModelConfig::default();
        let g = p3(0.0);
        let s = GraphStructure {
            num_nodes: 3,
            rw: Some(rw_power_stack(&random_walk_matrix(&g), 3, config.rpe.steps)),
            spd: None,
            rings: None,
        };
        assert!(matches!(prepare_inputs(&config, &g, Some(&s)), Err(CgtError::Config(_))));
    }
}
