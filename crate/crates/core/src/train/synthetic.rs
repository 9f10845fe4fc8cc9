//! Small seeded synthetic tasks standing in for molecular regression and
//! community classification benchmarks.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CgtError, Result};
use crate::graph::{Dataset, DatasetSchema, Graph, TaskKind, Target};
use crate::model::ModelConfig;
use crate::rings::brute_force_rings;
use crate::rpe::bfs_distances;

/// Rings up to this size count towards the ring-regression target.
pub const TARGET_RING_SIZE: usize = 6;
/// Model width and depth of the configuration written next to a generated task.
pub const DESK_WIDTH: usize = 32;
pub const DESK_LAYERS: usize = 4;
const MAX_DEGREE: usize = 4;
const RING_BOND_TYPES: usize = 3;
const ATOM_TYPES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SyntheticKind {
    RingRegression,
    TriangleRegression,
    SbmCluster,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticTaskSpec {
    pub kind: SyntheticKind,
    pub num_graphs: usize,
    pub min_nodes: usize,
    pub max_nodes: usize,
    pub seed: u64,
}

impl SyntheticTaskSpec {
    pub fn schema(&self) -> DatasetSchema {
        match self.kind {
            SyntheticKind::RingRegression => DatasetSchema {
                task: TaskKind::GraphRegression,
                num_bond_types: RING_BOND_TYPES,
            },
            SyntheticKind::TriangleRegression => DatasetSchema {
                task: TaskKind::GraphRegression,
                num_bond_types: 1,
            },
            SyntheticKind::SbmCluster => DatasetSchema {
                task: TaskKind::NodeClassification,
                num_bond_types: 1,
            },
        }
    }

    /// Vocabulary per node-feature field.
    pub fn node_vocab(&self) -> Vec<usize> {
        match self.kind {
            SyntheticKind::RingRegression => vec![ATOM_TYPES],
            SyntheticKind::TriangleRegression => vec![1],
            // Unrevealed, then one seed marker per block.
            SyntheticKind::SbmCluster => vec![3],
        }
    }

    pub fn num_classes(&self) -> usize {
        match self.kind {
            SyntheticKind::SbmCluster => 2,
            _ => 0,
        }
    }

    /// Desk-scale model configuration matching this task's schema.
    pub fn desk_config(&self) -> ModelConfig {
        let schema = self.schema();
        ModelConfig {
            layers: DESK_LAYERS,
            width: DESK_WIDTH,
            task: schema.task,
            num_bond_types: schema.num_bond_types,
            node_vocab: self.node_vocab(),
            num_classes: self.num_classes(),
            ..ModelConfig::default()
        }
    }
}

/// Number of rings of size at most 6 plus half the mean degree.
pub fn ring_regression_target(g: &Graph) -> f64 {
    let rings = brute_force_rings(g, TARGET_RING_SIZE).rings.len();
    let degrees = g.degree_vector();
    let mean = degrees.iter().sum::<usize>() as f64 / g.num_nodes().max(1) as f64;
    rings as f64 + 0.5 * mean
}

pub fn triangle_count(g: &Graph) -> usize {
    let adj = g.adjacency_matrix();
    let n = g.num_nodes();
    let mut count = 0;
    for a in 0..n {
        for b in a + 1..n {
            if adj[a][b] == 0 {
                continue;
            }
            count += (b + 1..n).filter(|&c| adj[a][c] == 1 && adj[b][c] == 1).count();
        }
    }
    count
}

pub fn generate_synthetic(spec: &SyntheticTaskSpec) -> Result<Dataset> {
    if spec.min_nodes < 2 || spec.min_nodes > spec.max_nodes {
        return Err(CgtError::Config(format!(
            "node range {}..={} must start at 2 or more and be non-empty",
            spec.min_nodes, spec.max_nodes
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let schema = spec.schema();
    let graphs = (0..spec.num_graphs)
        .map(|_| {
            let n = rng.gen_range(spec.min_nodes..=spec.max_nodes);
            match spec.kind {
                SyntheticKind::RingRegression => molecule_like(&mut rng, n),
                SyntheticKind::TriangleRegression => triangle_graph(&mut rng, n),
                SyntheticKind::SbmCluster => sbm_graph(&mut rng, n),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let tags = vec![None; graphs.len()];
    Ok(Dataset::new(schema, graphs, tags))
}

/// Random tree with degree at most 4, closed into rings by a few chords
/// between nodes 2 to 5 hops apart.
fn molecule_like(rng: &mut ChaCha8Rng, n: usize) -> Result<Graph> {
    let mut adj = vec![Vec::<usize>::new(); n];
    let mut edges = Vec::with_capacity(n + 3);
    for v in 1..n {
        let open: Vec<usize> = (0..v).filter(|&u| adj[u].len() < MAX_DEGREE).collect();
        let u = *open.choose(rng).expect("a tree with max degree 4 always has room");
        adj[u].push(v);
        adj[v].push(u);
        edges.push((u, v));
    }
    let chords = rng.gen_range(0..=3);
    for _ in 0..chords {
        let u = rng.gen_range(0..n);
        if adj[u].len() >= MAX_DEGREE {
            continue;
        }
        let dist = bfs_distances(&adj, u);
        let candidates: Vec<usize> = (0..n)
            .filter(|&v| {
                adj[v].len() < MAX_DEGREE && matches!(dist[v], Some(d) if (2..=5).contains(&d))
            })
            .collect();
        if let Some(&v) = candidates.choose(rng) {
            adj[u].push(v);
            adj[v].push(u);
            edges.push((u.min(v), u.max(v)));
        }
    }
    let typed = edges
        .into_iter()
        .map(|(u, v)| {
            // Mostly single bonds.
            let b = if rng.gen_bool(0.7) { 0 } else { rng.gen_range(1..RING_BOND_TYPES) };
            (u, v, b)
        })
        .collect();
    let feats = (0..n).map(|_| vec![rng.gen_range(0..ATOM_TYPES)]).collect();
    let g = Graph::new(n, feats, typed, None, RING_BOND_TYPES)?;
    let y = ring_regression_target(&g);
    Ok(g.with_target(Some(Target::Regression(y))))
}

fn triangle_graph(rng: &mut ChaCha8Rng, n: usize) -> Result<Graph> {
    let p = (3.0 / n as f64).min(1.0);
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            if rng.gen_bool(p) {
                edges.push((u, v, 0));
            }
        }
    }
    let g = Graph::new(n, vec![vec![0]; n], edges, None, 1)?;
    let y = triangle_count(&g) as f64;
    Ok(g.with_target(Some(Target::Regression(y))))
}

/// Two-block stochastic block model; one node per block reveals its block.
fn sbm_graph(rng: &mut ChaCha8Rng, n: usize) -> Result<Graph> {
    let (p_in, p_out) = (0.5, 0.05);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let split = n / 2;
    let mut labels = vec![0; n];
    for &v in &order[split..] {
        labels[v] = 1;
    }
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            let p = if labels[u] == labels[v] { p_in } else { p_out };
            if rng.gen_bool(p) {
                edges.push((u, v, 0));
            }
        }
    }
    let mut feats = vec![vec![0]; n];
    feats[order[0]] = vec![1];
    feats[order[split]] = vec![2];
    let g = Graph::new(n, feats, edges, None, 1)?;
    Ok(g.with_target(Some(Target::NodeClasses(labels))))
}
