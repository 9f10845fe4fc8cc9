//! Edge feature pipeline: completed bond categories, relative positional
//! encoding, optional ring bits, and the two projections to attention bias
//! and edge values.

use rand::Rng;

use crate::autodiff::{ParamId, ParameterStore, Tape, Var};
use crate::error::{CgtError, Result};
use crate::init;
use crate::rpe::{RpeConfig, RpeKind};

#[derive(Debug, Clone, PartialEq)]
pub struct EdgeEncoderConfig {
    /// Size of the completed (and possibly ring-paired) bond vocabulary.
    pub bond_vocab: usize,
    pub bond_dim: usize,
    pub rpe: RpeConfig,
    /// Embed the ring bit and add it to the concatenated edge features.
    pub additive_rings: bool,
}

impl EdgeEncoderConfig {
    pub fn rpe_width(&self) -> usize {
        match self.rpe.kind {
            RpeKind::None => 0,
            _ => self.rpe.dim,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.bond_dim + self.rpe_width()
    }
}

/// Precomputed structural inputs for one graph.
#[derive(Debug, Clone, PartialEq)]
pub enum RpeInput {
    None,
    /// `[RW¹_ij … RWᵖ_ij]` per pair, row-major `N²×p`.
    Rwse { feats: Vec<f64>, steps: usize },
    /// SPDE table row per pair.
    Spde { indices: Vec<usize>, vocab: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdgeInputs {
    pub n: usize,
    /// Completed bond category per pair (already paired with the ring bit in
    /// categorical ring mode).
    pub bond_ids: Vec<usize>,
    pub rpe: RpeInput,
    pub ring_bits: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Copy)]
pub struct EdgeVars {
    /// `N×N×d` attention bias.
    pub att: Var,
    /// `N×N×d` edge values, absent when edge values are disabled.
    pub val: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct EdgeEncoder {
    pub config: EdgeEncoderConfig,
    bond_table: ParamId,
    rwse_weight: Option<ParamId>,
    spde_table: Option<ParamId>,
    ring_table: Option<ParamId>,
}

impl EdgeEncoder {
    pub fn new<R: Rng>(
        store: &mut ParameterStore,
        prefix: &str,
        config: EdgeEncoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.rpe.validate()?;
        let bond_table = store.insert(
            format!("{prefix}.bond"),
            init::embedding(rng, config.bond_vocab, config.bond_dim),
        )?;
        let (mut rwse_weight, mut spde_table) = (None, None);
        match config.rpe.kind {
            RpeKind::Rwse => {
                // d_rpe × p, applied to the pair vectors.
                let w = init::xavier_uniform(rng, config.rpe.dim, config.rpe.steps);
                rwse_weight = Some(store.insert(format!("{prefix}.rwse"), w)?);
            }
            RpeKind::Spde => {
                let t = init::embedding(rng, config.rpe.steps + 2, config.rpe.dim);
                spde_table = Some(store.insert(format!("{prefix}.spde"), t)?);
            }
            RpeKind::None => {}
        }
        let ring_table = if config.additive_rings {
            let t = init::embedding(rng, 2, config.feature_dim());
            Some(store.insert(format!("{prefix}.ring"), t)?)
        } else {
            None
        };
        Ok(EdgeEncoder {
            config,
            bond_table,
            rwse_weight,
            spde_table,
            ring_table,
        })
    }

    /// Builds the `N²×(bond_dim + rpe_dim)` un-projected edge features.
    pub fn encode(&self, tape: &mut Tape, store: &ParameterStore, input: &EdgeInputs) -> Result<Var> {
        let pairs = input.n * input.n;
        if input.bond_ids.len() != pairs {
            return Err(CgtError::dim(
                "edge_encoder",
                format!("{} bond ids for {pairs} pairs", input.bond_ids.len()),
            ));
        }
        let table = tape.param(store, self.bond_table);
        let bond = tape.gather(table, &input.bond_ids)?;
        let rpe = match (self.config.rpe.kind, &input.rpe) {
            (RpeKind::None, _) => None,
            (RpeKind::Rwse, RpeInput::Rwse { feats, steps }) => {
                if *steps != self.config.rpe.steps {
                    return Err(CgtError::Config(format!(
                        "RWSE input has {steps} steps, model expects {}",
                        self.config.rpe.steps
                    )));
                }
                let x = tape.constant(vec![pairs, *steps], feats.clone())?;
                let raw = tape.param(store, self.rwse_weight.expect("created with RWSE"));
                let w = if self.config.rpe.nonneg_rwse {
                    tape.square(raw)
                } else {
                    raw
                };
                Some(tape.matmul_t(x, w)?)
            }
            (RpeKind::Spde, RpeInput::Spde { indices, vocab }) => {
                if *vocab != self.config.rpe.steps + 2 {
                    return Err(CgtError::Config(format!(
                        "SPDE input vocabulary {vocab}, model expects {}",
                        self.config.rpe.steps + 2
                    )));
                }
                let t = tape.param(store, self.spde_table.expect("created with SPDE"));
                Some(tape.gather(t, indices)?)
            }
            (kind, _) => {
                return Err(CgtError::Config(format!(
                    "model expects {kind:?} relative positional encoding but none was provided"
                )))
            }
        };
        let mut e0 = match rpe {
            Some(r) => tape.concat_last(&[bond, r])?,
            None => bond,
        };
        if let Some(ring) = self.ring_table {
            let bits = input.ring_bits.as_ref().ok_or_else(|| {
                CgtError::Config("model expects ring bits but none were provided".into())
            })?;
            let t = tape.param(store, ring);
            let emb = tape.gather(t, bits)?;
            e0 = tape.add(e0, emb)?;
        }
        Ok(e0)
    }
}

/// The two linear maps from encoded edge features to `E_att` and `E_val`.
#[derive(Debug, Clone, Copy)]
pub struct EdgeProjection {
    pub att: ParamId,
    pub val: Option<ParamId>,
}

impl EdgeProjection {
    pub fn new<R: Rng>(
        store: &mut ParameterStore,
        prefix: &str,
        in_dim: usize,
        width: usize,
        edge_value: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let att = store.insert(
            format!("{prefix}.w_att"),
            init::xavier_uniform(rng, in_dim, width),
        )?;
        let val = if edge_value {
            Some(store.insert(
                format!("{prefix}.w_val"),
                init::xavier_uniform(rng, in_dim, width),
            )?)
        } else {
            None
        };
        Ok(EdgeProjection { att, val })
    }

    pub fn project(&self, tape: &mut Tape, store: &ParameterStore, e0: Var, n: usize) -> Result<EdgeVars> {
        let w = tape.param(store, self.att);
        let flat = tape.matmul(e0, w)?;
        let width = tape.shape(flat)[1];
        let att = tape.reshape(flat, &[n, n, width])?;
        let val = match self.val {
            Some(id) => {
                let w = tape.param(store, id);
                let flat = tape.matmul(e0, w)?;
                Some(tape.reshape(flat, &[n, n, width])?)
            }
            None => None,
        };
        Ok(EdgeVars { att, val })
    }
}
