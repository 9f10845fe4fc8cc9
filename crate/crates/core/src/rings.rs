//! Rings (chordless cycles), the ring-bound relation between nodes, and the
//! two ways of folding that relation into the edge categories.

use serde::{Deserialize, Serialize};

use crate::error::{CgtError, Result};
use crate::graph::Graph;

pub const MIN_RING: usize = 3;
pub const MAX_RING: usize = 24;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RingSet {
    /// Each ring starts at its smallest node id and continues towards the
    /// smaller of that node's two ring neighbours.
    pub rings: Vec<Vec<usize>>,
    pub k_max: usize,
}

/// Depth-first enumeration of induced cycles rooted at their smallest node.
/// A path is only extended by nodes that are not adjacent to any interior
/// path node, so every closed path is chordless.
pub fn enumerate_rings(g: &Graph, k_max: usize) -> RingSet {
    assert!(
        (MIN_RING..=MAX_RING).contains(&k_max),
        "k_max must lie in [{MIN_RING}, {MAX_RING}]"
    );
    let n = g.num_nodes();
    let nbrs = g.neighbors();
    let adj = g.adjacency_matrix();
    let mut rings = Vec::new();
    let mut path = Vec::with_capacity(k_max);
    let mut on_path = vec![false; n];

    for root in 0..n {
        path.push(root);
        on_path[root] = true;
        for &first in nbrs[root].iter().filter(|&&w| w > root) {
            path.push(first);
            on_path[first] = true;
            extend(&nbrs, &adj, k_max, &mut path, &mut on_path, &mut rings);
            on_path[first] = false;
            path.pop();
        }
        on_path[root] = false;
        path.pop();
    }
    rings.sort();
    RingSet { rings, k_max }
}

fn extend(
    nbrs: &[Vec<usize>],
    adj: &[Vec<u8>],
    k_max: usize,
    path: &mut Vec<usize>,
    on_path: &mut [bool],
    rings: &mut Vec<Vec<usize>>,
) {
    let root = path[0];
    let last = *path.last().unwrap();
    let depth = path.len();
    for &w in &nbrs[last] {
        if w <= root || on_path[w] {
            continue;
        }
        if path[1..depth - 1].iter().any(|&x| adj[x][w] == 1) {
            continue;
        }
        if adj[root][w] == 1 {
            // Closing edge: keep one of the two traversal directions.
            if path.len() < k_max && path[1] < w {
                let mut ring = path.clone();
                ring.push(w);
                rings.push(ring);
            }
            continue;
        }
        if path.len() + 1 < k_max {
            path.push(w);
            on_path[w] = true;
            extend(nbrs, adj, k_max, path, on_path, rings);
            on_path[w] = false;
            path.pop();
        }
    }
}

/// Induced cycles found by checking every vertex subset of size
/// `3..=k_max`. Exponential in `k_max`; meant for small graphs and as a check
/// on [`enumerate_rings`]. Output uses the same canonical ordering.
pub fn brute_force_rings(g: &Graph, k_max: usize) -> RingSet {
    let n = g.num_nodes();
    let adj = g.adjacency_matrix();
    let mut rings = Vec::new();
    let mut subset = Vec::with_capacity(k_max);
    subsets(n, k_max, 0, &mut subset, &mut |s| {
        if let Some(ring) = induced_cycle(&adj, s) {
            rings.push(ring);
        }
    });
    rings.sort();
    RingSet { rings, k_max }
}

fn subsets(n: usize, k_max: usize, start: usize, cur: &mut Vec<usize>, f: &mut dyn FnMut(&[usize])) {
    if cur.len() >= MIN_RING {
        f(cur);
    }
    if cur.len() == k_max {
        return;
    }
    for v in start..n {
        cur.push(v);
        subsets(n, k_max, v + 1, cur, f);
        cur.pop();
    }
}

/// The canonical ring through `s` if the subgraph induced by `s` is a single
/// cycle. `s` is sorted ascending.
fn induced_cycle(adj: &[Vec<u8>], s: &[usize]) -> Option<Vec<usize>> {
    let inner = |v: usize| s.iter().filter(|&&w| adj[v][w] == 1).copied().collect::<Vec<_>>();
    if s.iter().any(|&v| inner(v).len() != 2) {
        return None;
    }
    let root = s[0];
    let mut ring = vec![root];
    let mut prev = root;
    let mut cur = *inner(root).iter().min().unwrap();
    while cur != root {
        ring.push(cur);
        let next = inner(cur).into_iter().find(|&w| w != prev).unwrap();
        prev = cur;
        cur = next;
    }
    // A 2-regular induced subgraph may be several disjoint cycles.
    (ring.len() == s.len()).then_some(ring)
}

/// Whether the diagonal of the bound matrix marks ring membership.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundDiagonal {
    #[default]
    RingMembership,
    Zero,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SBoundMatrix {
    pub num_nodes: usize,
    pub bound: Vec<bool>,
}

impl SBoundMatrix {
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bound[i * self.num_nodes + j]
    }

    pub fn is_symmetric(&self) -> bool {
        let n = self.num_nodes;
        (0..n).all(|i| (0..n).all(|j| self.get(i, j) == self.get(j, i)))
    }
}

pub fn s_bound_matrix(rings: &RingSet, n: usize, diagonal: BoundDiagonal) -> SBoundMatrix {
    let mut bound = vec![false; n * n];
    for ring in &rings.rings {
        for &i in ring {
            assert!(i < n, "ring node {i} out of range for {n} nodes");
            for &j in ring {
                if i != j || diagonal == BoundDiagonal::RingMembership {
                    bound[i * n + j] = true;
                }
            }
        }
    }
    SBoundMatrix {
        num_nodes: n,
        bound,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RingMode {
    Additive,
    Categorical,
}

/// Per-pair edge categories after completion with the self and
/// non-connected categories.
#[derive(Debug, Clone, PartialEq)]
pub enum BondMatrix {
    Categorical {
        ids: Vec<usize>,
        num_categories: usize,
    },
    /// Continuous edge features; only the additive ring mode applies.
    Dense { values: Vec<f64>, dim: usize },
}

/// Completes the bond categories of `g`: bond types keep their ids, the
/// diagonal gets `num_bond_types` (self) and every other non-edge
/// `num_bond_types + 1` (non-connected).
pub fn completed_bond_matrix(g: &Graph, num_bond_types: usize) -> BondMatrix {
    let n = g.num_nodes();
    let self_id = num_bond_types;
    let nc_id = num_bond_types + 1;
    let mut ids = vec![nc_id; n * n];
    for i in 0..n {
        ids[i * n + i] = self_id;
    }
    for &(u, v, b) in g.edges() {
        ids[u * n + v] = b;
        ids[v * n + u] = b;
    }
    BondMatrix::Categorical {
        ids,
        num_categories: num_bond_types + 2,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RingEncoding {
    /// Bound bit per pair, to be embedded and added to the edge features.
    Additive { bits: Vec<usize> },
    /// Paired categories `2·bond + bit` in a vocabulary of `2·|C|`.
    Categorical { ids: Vec<usize>, vocab: usize },
}

pub fn ring_edge_encoding(
    bonds: &BondMatrix,
    bound: &SBoundMatrix,
    mode: RingMode,
) -> Result<RingEncoding> {
    let pairs = bound.num_nodes * bound.num_nodes;
    let bits = || bound.bound.iter().map(|&b| b as usize);
    match (mode, bonds) {
        (RingMode::Additive, _) => Ok(RingEncoding::Additive {
            bits: bits().collect(),
        }),
        (
            RingMode::Categorical,
            BondMatrix::Categorical {
                ids,
                num_categories,
            },
        ) => {
            if ids.len() != pairs {
                return Err(CgtError::dim(
                    "ring_edge_encoding",
                    format!("{} bond ids for {pairs} pairs", ids.len()),
                ));
            }
            Ok(RingEncoding::Categorical {
                ids: ids.iter().zip(bits()).map(|(&b, bit)| 2 * b + bit).collect(),
                vocab: 2 * num_categories,
            })
        }
        (RingMode::Categorical, BondMatrix::Dense { .. }) => Err(CgtError::Config(
            "categorical ring encoding requires categorical bond features".into(),
        )),
    }
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

    fn cycle(n: usize) -> Graph {
        let edges: Vec<_> = (0..n).map(|i| (i, (i + 1) % n)).collect();
        graph(n, &edges)
    }

    fn k4() -> Graph {
        graph(4, &[(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)])
    }

    #[test]
    fn c6_has_one_ring() {
        let rs = enumerate_rings(&cycle(6), 6);
        assert_eq!(rs.rings, vec![vec![0, 1, 2, 3, 4, 5]]);
        assert!(enumerate_rings(&cycle(6), 5).rings.is_empty());
    }

    #[test]
    fn k4_has_only_triangles() {
        let rs = enumerate_rings(&k4(), 4);
        assert_eq!(
            rs.rings,
            vec![vec![0, 1, 2], vec![0, 1, 3], vec![0, 2, 3], vec![1, 2, 3]]
        );
    }

    #[test]
    fn path_has_no_rings() {
        assert!(enumerate_rings(&graph(3, &[(0, 1), (1, 2)]), 6).rings.is_empty());
    }

    #[test]
    fn bound_examples() {
        let rs = enumerate_rings(&cycle(6), 6);
        let b = s_bound_matrix(&rs, 6, BoundDiagonal::RingMembership);
        assert!(b.bound.iter().all(|&x| x));
        let off: usize = (0..6)
            .flat_map(|i| (i + 1..6).map(move |j| (i, j)))
            .filter(|&(i, j)| b.get(i, j))
            .count();
        assert_eq!(off, 15);

        let rs = enumerate_rings(&k4(), 4);
        let b = s_bound_matrix(&rs, 4, BoundDiagonal::Zero);
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(b.get(i, j), i != j);
            }
        }

        let p3 = graph(3, &[(0, 1), (1, 2)]);
        let b = s_bound_matrix(&enumerate_rings(&p3, 6), 3, BoundDiagonal::RingMembership);
        assert!(b.bound.iter().all(|&x| !x));
    }

    #[test]
    fn removing_ring_edge_clears_bound() {
        let mut edges: Vec<_> = (0..6).map(|i| (i, (i + 1) % 6)).collect();
        edges.push((5, 6));
        for cut in 0..6 {
            let kept: Vec<_> = edges
                .iter()
                .enumerate()
                .filter(|&(k, _)| k != cut)
                .map(|(_, &e)| e)
                .collect();
            let g = graph(7, &kept);
            let b = s_bound_matrix(&enumerate_rings(&g, 6), 7, BoundDiagonal::RingMembership);
            assert!(b.bound.iter().all(|&x| !x));
        }
    }

    #[test]
    fn categorical_pairing_rule() {
        let bonds = BondMatrix::Categorical {
            ids: vec![2],
            num_categories: 4,
        };
        let bound = SBoundMatrix {
            num_nodes: 1,
            bound: vec![true],
        };
        assert_eq!(
            ring_edge_encoding(&bonds, &bound, RingMode::Categorical).unwrap(),
            RingEncoding::Categorical {
                ids: vec![5],
                vocab: 8
            }
        );
    }

    #[test]
    fn additive_unbound_is_single_id() {
        let g = graph(4, &[(0, 1), (1, 2), (2, 3)]);
        let bound = s_bound_matrix(&enumerate_rings(&g, 6), 4, BoundDiagonal::RingMembership);
        let enc = ring_edge_encoding(&completed_bond_matrix(&g, 1), &bound, RingMode::Additive).unwrap();
        match enc {
            RingEncoding::Additive { bits } => assert!(bits.iter().all(|&b| b == 0)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn benzene_categorical_has_two_ring_ids() {
        let edges: Vec<_> = (0..6).map(|i| (i, (i + 1) % 6, i % 2)).collect();
        let g = Graph::new(6, vec![vec![0]; 6], edges, None, 2).unwrap();
        let bound = s_bound_matrix(&enumerate_rings(&g, 6), 6, BoundDiagonal::RingMembership);
        let enc = ring_edge_encoding(&completed_bond_matrix(&g, 2), &bound, RingMode::Categorical)
            .unwrap();
        let RingEncoding::Categorical { ids, vocab } = enc else {
            panic!("expected categorical");
        };
        assert_eq!(vocab, 8);
        let mut ring_ids: Vec<usize> = g.edges().iter().map(|&(u, v, _)| ids[u * 6 + v]).collect();
        ring_ids.sort();
        ring_ids.dedup();
        assert_eq!(ring_ids, vec![1, 3]);
        assert!(ring_ids.iter().all(|id| id % 2 == 1));
    }

    #[test]
    fn categorical_rejects_dense_bonds() {
        let bonds = BondMatrix::Dense {
            values: vec![0.0],
            dim: 1,
        };
        let bound = SBoundMatrix {
            num_nodes: 1,
            bound: vec![false],
        };
        assert!(matches!(
            ring_edge_encoding(&bonds, &bound, RingMode::Categorical),
            Err(CgtError::Config(_))
        ));
        assert!(ring_edge_encoding(&bonds, &bound, RingMode::Additive).is_ok());
    }

    #[test]
    fn brute_force_agrees_on_small_cases() {
        let c6 = graph(6, &[(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (0, 5)]);
        assert_eq!(brute_force_rings(&c6, 6), enumerate_rings(&c6, 6));
        assert!(brute_force_rings(&c6, 5).rings.is_empty());
        let k4 = graph(4, &[(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]);
        assert_eq!(brute_force_rings(&k4, 4).rings.len(), 4);
        // Two disjoint triangles are 2-regular but not one cycle.
        let two = graph(6, &[(0, 1), (1, 2), (0, 2), (3, 4), (4, 5), (3, 5)]);
        assert_eq!(brute_force_rings(&two, 6).rings, vec![vec![0, 1, 2], vec![3, 4, 5]]);
    }
}
