//! Graph data model and JSON-lines dataset ingestion.
//!
//! Edges are stored once with `u < v` and symmetrized on demand. Node features
//! are lists of categorical ids, one per feature field.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CgtError, Result};

/// Seed of the default split permutation.
pub const DEFAULT_SPLIT_SEED: u64 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    GraphRegression,
    NodeClassification,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Target {
    Regression(f64),
    NodeClasses(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    num_nodes: usize,
    node_feats: Vec<Vec<usize>>,
    edges: Vec<(usize, usize, usize)>,
    target: Option<Target>,
}

impl Graph {
    /// Builds a validated graph. Edges may be given in either orientation;
    /// they are stored as `(min, max, bond)` in input order.
    pub fn new(
        num_nodes: usize,
        node_feats: Vec<Vec<usize>>,
        edges: Vec<(usize, usize, usize)>,
        target: Option<Target>,
        num_bond_types: usize,
    ) -> Result<Self> {
        Self::validated(0, num_nodes, node_feats, edges, target, num_bond_types)
    }

    fn validated(
        index: usize,
        num_nodes: usize,
        node_feats: Vec<Vec<usize>>,
        edges: Vec<(usize, usize, usize)>,
        target: Option<Target>,
        num_bond_types: usize,
    ) -> Result<Self> {
        let invalid = |field: &'static str, message: String| CgtError::Validation {
            graph: index,
            field,
            message,
        };
        if node_feats.len() != num_nodes {
            return Err(invalid(
                "node_feats",
                format!("{} rows for {} nodes", node_feats.len(), num_nodes),
            ));
        }
        let mut seen = HashSet::with_capacity(edges.len());
        let mut canonical = Vec::with_capacity(edges.len());
        for &(a, b, bond) in &edges {
            if a >= num_nodes || b >= num_nodes {
                return Err(invalid(
                    "edges",
                    format!("edge ({a}, {b}) out of range for {num_nodes} nodes"),
                ));
            }
            if a == b {
                return Err(invalid("edges", format!("self-loop on node {a}")));
            }
            if bond >= num_bond_types {
                return Err(invalid(
                    "edges",
                    format!("bond type {bond} outside [0, {num_bond_types})"),
                ));
            }
            let (u, v) = if a < b { (a, b) } else { (b, a) };
            if !seen.insert((u, v)) {
                return Err(invalid("edges", format!("duplicate edge ({u}, {v})")));
            }
            canonical.push((u, v, bond));
        }
        if let Some(Target::NodeClasses(labels)) = &target {
            if labels.len() != num_nodes {
                return Err(invalid(
                    "y",
                    format!("{} labels for {} nodes", labels.len(), num_nodes),
                ));
            }
        }
        if let Some(Target::Regression(y)) = &target {
            if !y.is_finite() {
                return Err(invalid("y", "non-finite regression target".into()));
            }
        }
        Ok(Graph {
            num_nodes,
            node_feats,
            edges: canonical,
            target,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn node_feats(&self) -> &[Vec<usize>] {
        &self.node_feats
    }

    pub fn edges(&self) -> &[(usize, usize, usize)] {
        &self.edges
    }

    pub fn target(&self) -> Option<&Target> {
        self.target.as_ref()
    }

    pub fn with_target(mut self, target: Option<Target>) -> Self {
        self.target = target;
        self
    }

    /// Row-major `N×N` 0/1 matrix.
    pub fn adjacency_matrix(&self) -> Vec<Vec<u8>> {
        let n = self.num_nodes;
        let mut adj = vec![vec![0u8; n]; n];
        for &(u, v, _) in &self.edges {
            adj[u][v] = 1;
            adj[v][u] = 1;
        }
        adj
    }

    pub fn degree_vector(&self) -> Vec<usize> {
        let mut deg = vec![0; self.num_nodes];
        for &(u, v, _) in &self.edges {
            deg[u] += 1;
            deg[v] += 1;
        }
        deg
    }

    /// Sorted neighbor lists.
    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut nbrs = vec![Vec::new(); self.num_nodes];
        for &(u, v, _) in &self.edges {
            nbrs[u].push(v);
            nbrs[v].push(u);
        }
        for list in &mut nbrs {
            list.sort_unstable();
        }
        nbrs
    }

    /// Bond type per ordered pair, `None` where no edge exists.
    pub fn bond_matrix(&self) -> Vec<Vec<Option<usize>>> {
        let n = self.num_nodes;
        let mut bonds = vec![vec![None; n]; n];
        for &(u, v, b) in &self.edges {
            bonds[u][v] = Some(b);
            bonds[v][u] = Some(b);
        }
        bonds
    }

    /// Relabels nodes so that old node `i` becomes `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Graph {
        assert_eq!(perm.len(), self.num_nodes, "permutation length");
        let mut node_feats = vec![Vec::new(); self.num_nodes];
        for (old, feats) in self.node_feats.iter().enumerate() {
            node_feats[perm[old]] = feats.clone();
        }
        let edges = self
            .edges
            .iter()
            .map(|&(u, v, b)| {
                let (a, c) = (perm[u], perm[v]);
                (a.min(c), a.max(c), b)
            })
            .collect();
        let target = self.target.as_ref().map(|t| match t {
            Target::Regression(y) => Target::Regression(*y),
            Target::NodeClasses(labels) => {
                let mut out = vec![0; labels.len()];
                for (old, &l) in labels.iter().enumerate() {
                    out[perm[old]] = l;
                }
                Target::NodeClasses(out)
            }
        });
        Graph {
            num_nodes: self.num_nodes,
            node_feats,
            edges,
            target,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Everything the loader needs to know to validate records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSchema {
    pub task: TaskKind,
    pub num_bond_types: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub schema: DatasetSchema,
    graphs: Vec<Graph>,
    splits: Vec<Split>,
}

impl Dataset {
    /// Builds a dataset, assigning the default split to every `None` tag.
    pub fn new(schema: DatasetSchema, graphs: Vec<Graph>, tags: Vec<Option<Split>>) -> Self {
        assert_eq!(graphs.len(), tags.len());
        let splits = assign_splits(&tags, DEFAULT_SPLIT_SEED);
        Dataset {
            schema,
            graphs,
            splits,
        }
    }

    pub fn graphs(&self) -> &[Graph] {
        &self.graphs
    }

    pub fn splits(&self) -> &[Split] {
        &self.splits
    }

    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.graphs.len())
            .filter(|&i| self.splits[i] == split)
            .collect()
    }

    pub fn split_sizes(&self) -> (usize, usize, usize) {
        let count = |s| self.splits.iter().filter(|&&x| x == s).count();
        (count(Split::Train), count(Split::Val), count(Split::Test))
    }

    /// Serializes the dataset back to the JSON-lines format, one record per
    /// graph with its split tag.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for (g, split) in self.graphs.iter().zip(&self.splits) {
            let record = Record {
                num_nodes: g.num_nodes,
                node_feats: g.node_feats.clone(),
                edges: g.edges.iter().map(|&(u, v, b)| [u, v, b]).collect(),
                y: g.target.clone(),
                split: Some(*split),
            };
            out.push_str(&serde_json::to_string(&record)?);
            out.push('\n');
        }
        Ok(out)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    num_nodes: usize,
    node_feats: Vec<Vec<usize>>,
    edges: Vec<[usize; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    y: Option<Target>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split: Option<Split>,
}

/// Split rule: explicit tags are kept; untagged graphs fill whatever remains
/// of the 80/10/10 quota (val and test each get `n / 10`, train the rest),
/// in a seeded permutation of their line indices.
pub fn assign_splits(tags: &[Option<Split>], seed: u64) -> Vec<Split> {
    let n = tags.len();
    let quota_val = n / 10;
    let quota_test = n / 10;
    let tagged = |s| tags.iter().filter(|&&t| t == Some(s)).count();
    let mut need_val = quota_val.saturating_sub(tagged(Split::Val));
    let mut need_test = quota_test.saturating_sub(tagged(Split::Test));

    let mut untagged: Vec<usize> = (0..n).filter(|&i| tags[i].is_none()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    untagged.shuffle(&mut rng);

    let mut out: Vec<Split> = tags.iter().map(|t| t.unwrap_or(Split::Train)).collect();
    for i in untagged {
        out[i] = if need_val > 0 {
            need_val -= 1;
            Split::Val
        } else if need_test > 0 {
            need_test -= 1;
            Split::Test
        } else {
            Split::Train
        };
    }
    out
}

fn check_target(index: usize, task: TaskKind, target: &Option<Target>) -> Result<()> {
    let ok = match (task, target) {
        (_, None) => true,
        (TaskKind::GraphRegression, Some(Target::Regression(_))) => true,
        (TaskKind::NodeClassification, Some(Target::NodeClasses(_))) => true,
        _ => false,
    };
    if ok {
        Ok(())
    } else {
        Err(CgtError::Validation {
            graph: index,
            field: "y",
            message: format!("target kind does not match task {task:?}"),
        })
    }
}

pub fn parse_dataset(text: &str, schema: &DatasetSchema) -> Result<Dataset> {
    let mut graphs = Vec::new();
    let mut tags = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(line).map_err(|e| CgtError::Parse {
            line: lineno + 1,
            message: e.to_string(),
        })?;
        let index = graphs.len();
        check_target(index, schema.task, &record.y)?;
        let edges = record.edges.iter().map(|e| (e[0], e[1], e[2])).collect();
        graphs.push(Graph::validated(
            index,
            record.num_nodes,
            record.node_feats,
            edges,
            record.y,
            schema.num_bond_types,
        )?);
        tags.push(record.split);
    }
    Ok(Dataset::new(schema.clone(), graphs, tags))
}

pub fn load_dataset(path: impl AsRef<Path>, schema: &DatasetSchema) -> Result<Dataset> {
    let text = fs::read_to_string(path)?;
    parse_dataset(&text, schema)
}
