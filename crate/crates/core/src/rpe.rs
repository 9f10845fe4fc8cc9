//! Pairwise structural descriptors and the relative positional encodings
//! built from them.
//!
//! `RW = D⁻¹A` is computed in f64 and raised to successive powers by plain
//! repeated multiplication. Isolated nodes get all-zero rows. Shortest path
//! distances come from one BFS per node.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{CgtError, Result};
use crate::graph::Graph;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RpeKind {
    Rwse,
    Spde,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RpeConfig {
    pub kind: RpeKind,
    pub steps: usize,
    #[serde(default)]
    pub nonneg_rwse: bool,
    pub dim: usize,
}

impl RpeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.dim == 0 {
            return Err(CgtError::Config(
                "rpe steps and dim must both be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Successive powers `RW¹ … RWᵖ`, each stored row-major `N×N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RwStack {
    pub num_nodes: usize,
    pub powers: Vec<Vec<f64>>,
}

impl RwStack {
    pub fn steps(&self) -> usize {
        self.powers.len()
    }

    /// `RWᵏ[i][j]` for `k` in `1..=p`.
    pub fn get(&self, k: usize, i: usize, j: usize) -> f64 {
        self.powers[k - 1][i * self.num_nodes + j]
    }

    /// `[RW¹_ij, …, RWᵖ_ij]`.
    pub fn pair_vector(&self, i: usize, j: usize) -> Vec<f64> {
        let n = self.num_nodes;
        self.powers.iter().map(|m| m[i * n + j]).collect()
    }

    /// Pair vectors for all `(i, j)`, row-major as an `N²×p` buffer.
    pub fn pair_features(&self) -> Vec<f64> {
        let n = self.num_nodes;
        let p = self.steps();
        let mut out = vec![0.0; n * n * p];
        for (k, m) in self.powers.iter().enumerate() {
            for (ij, &x) in m.iter().enumerate() {
                out[ij * p + k] = x;
            }
        }
        out
    }
}

/// Row-major `N×N` random-walk transition matrix `D⁻¹A`.
pub fn random_walk_matrix(g: &Graph) -> Vec<f64> {
    let n = g.num_nodes();
    let deg = g.degree_vector();
    let mut rw = vec![0.0; n * n];
    for &(u, v, _) in g.edges() {
        rw[u * n + v] = 1.0 / deg[u] as f64;
        rw[v * n + u] = 1.0 / deg[v] as f64;
    }
    rw
}

fn square_matmul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            if aik == 0.0 {
                continue;
            }
            let row = &b[k * n..(k + 1) * n];
            let dst = &mut out[i * n..(i + 1) * n];
            for (d, &x) in dst.iter_mut().zip(row) {
                *d += aik * x;
            }
        }
    }
    out
}

pub fn rw_power_stack(rw: &[f64], num_nodes: usize, steps: usize) -> RwStack {
    assert_eq!(rw.len(), num_nodes * num_nodes, "rw must be N×N");
    let mut powers = Vec::with_capacity(steps);
    if steps > 0 {
        powers.push(rw.to_vec());
    }
    for _ in 1..steps {
        let next = square_matmul(powers.last().unwrap(), rw, num_nodes);
        powers.push(next);
    }
    RwStack { num_nodes, powers }
}

/// Diagonal return probabilities, row-major `N×p`.
pub fn node_rwse(stack: &RwStack) -> Vec<f64> {
    let n = stack.num_nodes;
    let p = stack.steps();
    let mut out = vec![0.0; n * p];
    for i in 0..n {
        for k in 0..p {
            out[i * p + k] = stack.powers[k][i * n + i];
        }
    }
    out
}

/// Shortest path distances with the two special categories.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpdMatrix {
    pub num_nodes: usize,
    pub cap: usize,
    /// Row-major; `SELF` on the diagonal, `UNREACHABLE` past the cap.
    pub spd: Vec<u32>,
}

impl SpdMatrix {
    pub const SELF: u32 = 0;
    pub const UNREACHABLE: u32 = u32::MAX;

    pub fn get(&self, i: usize, j: usize) -> u32 {
        self.spd[i * self.num_nodes + j]
    }

    /// Vocabulary size of the SPDE embedding table: distances `1..=cap`,
    /// then unreachable, then self.
    pub fn vocab_size(&self) -> usize {
        self.cap + 2
    }

    /// Table row for a stored entry.
    pub fn embedding_index(&self, entry: u32) -> usize {
        match entry {
            Self::SELF => self.cap + 1,
            Self::UNREACHABLE => self.cap,
            d => d as usize - 1,
        }
    }

    pub fn embedding_indices(&self) -> Vec<usize> {
        self.spd.iter().map(|&e| self.embedding_index(e)).collect()
    }
}

/// Unbounded BFS distances from `source`; `None` when unreachable.
pub fn bfs_distances(neighbors: &[Vec<usize>], source: usize) -> Vec<Option<usize>> {
    let mut dist = vec![None; neighbors.len()];
    dist[source] = Some(0);
    let mut queue = VecDeque::from([source]);
    while let Some(u) = queue.pop_front() {
        let du = dist[u].unwrap();
        for &w in &neighbors[u] {
            if dist[w].is_none() {
                dist[w] = Some(du + 1);
                queue.push_back(w);
            }
        }
    }
    dist
}

pub fn all_pairs_spd(g: &Graph, cap: usize) -> SpdMatrix {
    let n = g.num_nodes();
    let nbrs = g.neighbors();
    let mut spd = vec![SpdMatrix::UNREACHABLE; n * n];
    for s in 0..n {
        for (t, d) in bfs_distances(&nbrs, s).into_iter().enumerate() {
            spd[s * n + t] = match d {
                Some(0) => SpdMatrix::SELF,
                Some(d) if d <= cap => d as u32,
                _ => SpdMatrix::UNREACHABLE,
            };
        }
    }
    SpdMatrix {
        num_nodes: n,
        cap,
        spd,
    }
}

/// SPDE pair tensor as a plain `N×N×d` buffer: each entry is the table row
/// selected by the stored distance. `table` is row-major `(cap+2)×d`.
pub fn spde_pair_tensor(spd: &SpdMatrix, table: &[f64], dim: usize) -> Result<Vec<f64>> {
    if table.len() != spd.vocab_size() * dim {
        return Err(CgtError::dim(
            "spde_pair_tensor",
            format!(
                "table has {} values, expected {}×{}",
                table.len(),
                spd.vocab_size(),
                dim
            ),
        ));
    }
    let mut out = Vec::with_capacity(spd.spd.len() * dim);
    for &e in &spd.spd {
        let r = spd.embedding_index(e);
        out.extend_from_slice(&table[r * dim..(r + 1) * dim]);
    }
    Ok(out)
}

/// Effective RWSE weights: squared when non-negativity is requested.
pub fn rwse_effective_weights(weights: &[f64], nonneg: bool) -> Vec<f64> {
    if nonneg {
        weights.iter().map(|w| w * w).collect()
    } else {
        weights.to_vec()
    }
}

/// `output[i][j] = W · [RW¹_ij, …, RWᵖ_ij]` with `weights` row-major `d×p`.
pub fn rwse_pair_tensor(stack: &RwStack, weights: &[f64], dim: usize, nonneg: bool) -> Result<Vec<f64>> {
    let p = stack.steps();
    if weights.len() != dim * p {
        return Err(CgtError::dim(
            "rwse_pair_tensor",
            format!("weights have {} values, expected {dim}×{p}", weights.len()),
        ));
    }
    let w = rwse_effective_weights(weights, nonneg);
    let feats = stack.pair_features();
    let pairs = stack.num_nodes * stack.num_nodes;
    let mut out = vec![0.0; pairs * dim];
    for ij in 0..pairs {
        let x = &feats[ij * p..(ij + 1) * p];
        for c in 0..dim {
            let row = &w[c * p..(c + 1) * p];
            out[ij * dim + c] = row.iter().zip(x).map(|(a, b)| a * b).sum();
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn graph(n: usize, edges: &[(usize, usize)]) -> Graph {
        Graph::new(
            n,
            vec![vec![0]; n],
            edges.iter().map(|&(u, v)| (u, v, 0)).collect(),
            None,
            1,
        )
        .unwrap()
    }

    fn p3() -> Graph {
        graph(3, &[(0, 1), (1, 2)])
    }

    fn k3() -> Graph {
        graph(3, &[(0, 1), (1, 2), (0, 2)])
    }

    #[test]
    fn random_walk_examples() {
        assert_eq!(
            random_walk_matrix(&p3()),
            vec![0.0, 1.0, 0.0, 0.5, 0.0, 0.5, 0.0, 1.0, 0.0]
        );
        assert_eq!(
            random_walk_matrix(&k3()),
            vec![0.0, 0.5, 0.5, 0.5, 0.0, 0.5, 0.5, 0.5, 0.0]
        );
        let iso = graph(3, &[(0, 1)]);
        let rw = random_walk_matrix(&iso);
        assert_eq!(&rw[6..9], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn power_stack_examples() {
        let s = rw_power_stack(&random_walk_matrix(&p3()), 3, 2);
        assert_eq!(s.get(1, 0, 2), 0.0);
        assert_eq!(s.get(2, 0, 2), 0.5);
        assert_eq!(s.powers[0], random_walk_matrix(&p3()));

        // (3J - I) / 8 for K3 cubed.
        let s = rw_power_stack(&random_walk_matrix(&k3()), 3, 3);
        for i in 0..3 {
            assert!((s.get(3, i, i) - 0.25).abs() < 1e-15);
            for j in 0..3 {
                if i != j {
                    assert!((s.get(3, i, j) - 0.375).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn node_rwse_examples() {
        let s = rw_power_stack(&random_walk_matrix(&k3()), 3, 3);
        let pe = node_rwse(&s);
        assert_eq!(&pe[0..3], &[0.0, 0.5, 0.25]);

        let s = rw_power_stack(&random_walk_matrix(&p3()), 3, 2);
        let pe = node_rwse(&s);
        assert_eq!(&pe[2..4], &[0.0, 1.0]);
        for i in 0..3 {
            assert_eq!(pe[i * 2], 0.0);
        }
    }

    #[test]
    fn spd_examples() {
        let spd = all_pairs_spd(&p3(), 4);
        assert_eq!(spd.get(0, 2), 2);
        assert_eq!(spd.get(1, 1), SpdMatrix::SELF);

        let spd = all_pairs_spd(&graph(2, &[]), 4);
        assert_eq!(spd.get(0, 1), SpdMatrix::UNREACHABLE);

        let c6 = graph(6, &[(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (0, 5)]);
        let spd = all_pairs_spd(&c6, 2);
        assert_eq!(spd.get(0, 3), SpdMatrix::UNREACHABLE);
        assert_eq!(spd.get(1, 4), SpdMatrix::UNREACHABLE);
        assert_eq!(spd.get(0, 2), 2);
        assert_eq!(spd.get(0, 5), 1);
    }

    #[test]
    fn spde_identity_table_gives_one_hot() {
        let spd = all_pairs_spd(&p3(), 2);
        let v = spd.vocab_size();
        let mut table = vec![0.0; v * v];
        for r in 0..v {
            table[r * v + r] = 1.0;
        }
        let out = spde_pair_tensor(&spd, &table, v).unwrap();
        let at = |i: usize, j: usize| &out[(i * 3 + j) * v..(i * 3 + j + 1) * v];
        assert_eq!(at(0, 2), &[0.0, 1.0, 0.0, 0.0]); // distance 2
        assert_eq!(at(0, 1), &[1.0, 0.0, 0.0, 0.0]); // distance 1
        for i in 0..3 {
            assert_eq!(at(i, i), &[0.0, 0.0, 0.0, 1.0]); // self
        }
        assert!(spde_pair_tensor(&spd, &table[1..], v).is_err());
    }

    #[test]
    fn rwse_examples() {
        let s = rw_power_stack(&random_walk_matrix(&p3()), 3, 2);
        let out = rwse_pair_tensor(&s, &[1.0, 1.0], 1, false).unwrap();
        assert_eq!(out[2], 0.5);

        let ident = rwse_pair_tensor(&s, &[1.0, 0.0, 0.0, 1.0], 2, false).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(&ident[(i * 3 + j) * 2..(i * 3 + j + 1) * 2], &s.pair_vector(i, j)[..]);
            }
        }
        let zero = rwse_pair_tensor(&s, &[0.0; 4], 2, false).unwrap();
        assert!(zero.iter().all(|&x| x == 0.0));

        let signed = rwse_pair_tensor(&s, &[-1.0, -1.0], 1, true).unwrap();
        assert_eq!(signed[2], 0.5);
    }

    #[test]
    fn rwse_is_not_symmetric_in_general() {
        let s = rw_power_stack(&random_walk_matrix(&p3()), 3, 1);
        // RW[0][1] = 1 while RW[1][0] = 0.5.
        assert_ne!(s.get(1, 0, 1), s.get(1, 1, 0));
    }
}
