//! One-time structural preprocessing and its versioned sidecar file.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CgtError, Result};
use crate::graph::{Dataset, Graph};
use crate::rings::{enumerate_rings, RingSet, MAX_RING, MIN_RING};
use crate::rpe::{all_pairs_spd, random_walk_matrix, rw_power_stack, RpeKind, RwStack, SpdMatrix};

pub const SIDECAR_FORMAT: &str = "cgt-sidecar";
pub const SIDECAR_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub rpe: RpeKind,
    pub steps: usize,
    /// Largest ring size to enumerate; `None` skips rings.
    pub rings: Option<usize>,
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rpe != RpeKind::None && self.steps == 0 {
            return Err(CgtError::Config("preprocessing needs at least one step".into()));
        }
        if let Some(k) = self.rings {
            if !(MIN_RING..=MAX_RING).contains(&k) {
                return Err(CgtError::Config(format!(
                    "ring size {k} outside [{MIN_RING}, {MAX_RING}]"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphStructure {
    pub num_nodes: usize,
    pub rw: Option<RwStack>,
    pub spd: Option<SpdMatrix>,
    pub rings: Option<RingSet>,
}

pub fn preprocess_graph(g: &Graph, config: &PreprocessConfig) -> GraphStructure {
    let n = g.num_nodes();
    let rw = (config.rpe == RpeKind::Rwse)
        .then(|| rw_power_stack(&random_walk_matrix(g), n, config.steps));
    let spd = (config.rpe == RpeKind::Spde).then(|| all_pairs_spd(g, config.steps));
    let rings = config.rings.map(|k| enumerate_rings(g, k));
    GraphStructure {
        num_nodes: n,
        rw,
        spd,
        rings,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub format: String,
    pub version: u32,
    pub config: PreprocessConfig,
    pub graphs: Vec<GraphStructure>,
}

impl Sidecar {
    /// Preprocesses every graph, in parallel; output order follows the dataset.
    pub fn build(dataset: &Dataset, config: PreprocessConfig) -> Result<Self> {
        config.validate()?;
        let graphs = dataset
            .graphs()
            .par_iter()
            .map(|g| preprocess_graph(g, &config))
            .collect();
        Ok(Sidecar {
            format: SIDECAR_FORMAT.to_string(),
            version: SIDECAR_VERSION,
            config,
            graphs,
        })
    }

    /// Refuses a sidecar built for a different dataset.
    pub fn check_matches(&self, dataset: &Dataset) -> Result<()> {
        if self.graphs.len() != dataset.len() {
            return Err(CgtError::Config(format!(
                "sidecar has {} graphs, dataset has {}",
                self.graphs.len(),
                dataset.len()
            )));
        }
        for (idx, (s, g)) in self.graphs.iter().zip(dataset.graphs()).enumerate() {
            if s.num_nodes != g.num_nodes() {
                return Err(CgtError::Config(format!(
                    "sidecar graph {idx} has {} nodes, dataset graph has {}",
                    s.num_nodes,
                    g.num_nodes()
                )));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            format: String,
            version: u32,
        }
        let header: Header = serde_json::from_str(text)?;
        if header.format != SIDECAR_FORMAT {
            return Err(CgtError::Config(format!(
                "not a sidecar file (format {:?})",
                header.format
            )));
        }
        if header.version != SIDECAR_VERSION {
            return Err(CgtError::Version {
                what: "sidecar",
                expected: SIDECAR_VERSION,
                found: header.version,
            });
        }
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{DatasetSchema, TaskKind};

    fn c6_dataset() -> Dataset {
        let edges = (0..6).map(|i| (i.min((i + 1) % 6), i.max((i + 1) % 6), 0)).collect();
        let g = Graph::new(6, vec![vec![0]; 6], edges, None, 1).unwrap();
        let schema = DatasetSchema {
            task: TaskKind::GraphRegression,
            num_bond_types: 1,
        };
        Dataset::new(schema, vec![g], vec![None])
    }

    #[test]
    fn rwse_sidecar_has_requested_powers_and_rings() {
        let ds = c6_dataset();
        let cfg = PreprocessConfig {
            rpe: RpeKind::Rwse,
            steps: 16,
            rings: Some(6),
        };
        let sc = Sidecar::build(&ds, cfg).unwrap();
        let s = &sc.graphs[0];
        assert_eq!(s.rw.as_ref().unwrap().steps(), 16);
        assert!(s.spd.is_none());
        assert_eq!(s.rings.as_ref().unwrap().rings, vec![vec![0, 1, 2, 3, 4, 5]]);
        sc.check_matches(&ds).unwrap();
    }

    #[test]
    fn json_round_trip_is_exact_and_deterministic() {
        let ds = c6_dataset();
        let cfg = PreprocessConfig {
            rpe: RpeKind::Rwse,
            steps: 7,
            rings: None,
        };
        let a = Sidecar::build(&ds, cfg).unwrap().to_json().unwrap();
        let b = Sidecar::build(&ds, cfg).unwrap().to_json().unwrap();
        assert_eq!(a, b);
        let back = Sidecar::from_json(&a).unwrap();
        assert_eq!(back.to_json().unwrap(), a);
        assert_eq!(back, Sidecar::build(&ds, cfg).unwrap());
    }

    #[test]
    fn version_mismatch_is_refused() {
        let ds = c6_dataset();
        let cfg = PreprocessConfig {
            rpe: RpeKind::Spde,
            steps: 4,
            rings: None,
        };
        let mut sc = Sidecar::build(&ds, cfg).unwrap();
        sc.version = SIDECAR_VERSION + 1;
        let err = Sidecar::from_json(&sc.to_json().unwrap()).unwrap_err();
        assert!(matches!(err, CgtError::Version { what: "sidecar", .. }));
    }

    #[test]
    fn mismatched_dataset_is_refused() {
        let ds = c6_dataset();
        let cfg = PreprocessConfig {
            rpe: RpeKind::None,
            steps: 1,
            rings: Some(3),
        };
        let mut sc = Sidecar::build(&ds, cfg).unwrap();
        sc.graphs[0].num_nodes = 5;
        assert!(sc.check_matches(&ds).is_err());
    }
}
