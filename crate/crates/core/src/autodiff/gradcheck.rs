//! Central-difference gradient checking.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{CgtError, Result};

use super::{ParamId, ParameterStore, Tape, Var};

/// Coordinates checked per parameter (all of them when fewer exist).
pub const COORDS_PER_PARAM: usize = 32;

/// Denominator floor of the relative error, so that two vanishing gradients
/// compare as equal.
pub const REL_ERROR_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Serialize)]
pub struct ParamGradError {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub eps: f64,
    pub params: Vec<ParamGradError>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&ParamGradError> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
    (analytic - numeric).abs() / denom
}

fn evaluate<F>(f: &F, store: &ParameterStore) -> Result<f64>
where
    F: Fn(&mut Tape, &ParameterStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    let v = tape.scalar(loss);
    if !v.is_finite() {
        return Err(CgtError::Numerical(format!("non-finite loss {v}")));
    }
    Ok(v)
}

/// Compares analytic gradients of the scalar `f` with central differences
/// `(f(θ + eps·e) − f(θ − eps·e)) / (2·eps)` on a seeded subsample of
/// coordinates of every parameter. `f` must be deterministic.
pub fn grad_check<F>(f: F, store: &ParameterStore, eps: f64, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParameterStore) -> Result<Var>,
{
    let mut work = store.clone();
    work.zero_grads();
    let mut tape = Tape::new();
    let loss = f(&mut tape, &work)?;
    if !tape.scalar(loss).is_finite() {
        return Err(CgtError::Numerical("non-finite loss".into()));
    }
    tape.backward(loss, &mut work)?;
    drop(tape);

    let ids: Vec<ParamId> = work.ids().collect();
    let mut params = Vec::with_capacity(ids.len());
    for id in ids {
        let analytic = work.grad(id).to_vec();
        if analytic.iter().any(|g| !g.is_finite()) {
            return Err(CgtError::Numerical(format!(
                "non-finite analytic gradient for {}",
                work.name(id)
            )));
        }
        let size = analytic.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (id.index() as u64).wrapping_mul(0x9E37_79B9));
        let coords: Vec<usize> = if size <= COORDS_PER_PARAM {
            (0..size).collect()
        } else {
            let mut c = sample(&mut rng, size, COORDS_PER_PARAM).into_vec();
            c.sort_unstable();
            c
        };
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        for &k in &coords {
            let original = work.get(id).data[k];
            work.get_mut(id).data[k] = original + eps;
            let plus = evaluate(&f, &work)?;
            work.get_mut(id).data[k] = original - eps;
            let minus = evaluate(&f, &work)?;
            work.get_mut(id).data[k] = original;
            let numeric = (plus - minus) / (2.0 * eps);
            max_rel = max_rel.max(relative_error(analytic[k], numeric));
            max_abs = max_abs.max((analytic[k] - numeric).abs());
        }
        params.push(ParamGradError {
            name: work.name(id).to_string(),
            checked: coords.len(),
            max_rel_error: max_rel,
            max_abs_error: max_abs,
        });
    }
    Ok(GradCheckReport { eps, params })
}
