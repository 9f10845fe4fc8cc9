//! One transformer block built around chromatic self-attention.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{AttentionMask, AttentionVariant, EdgeVars, NormChoice};
use crate::autodiff::{BatchStats, ParamId, ParameterStore, Tape, Var};
use crate::error::{CgtError, Result};
use crate::init;

pub const RUNNING_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerConfig {
    pub width: usize,
    pub heads: usize,
    pub variant: AttentionVariant,
    /// Multiply dot products by `1/√d_h`.
    pub scaled: bool,
    pub norm: NormChoice,
    pub ffn_mult: usize,
}

impl LayerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(CgtError::Config(format!(
                "{} heads do not divide width {}",
                self.heads, self.width
            )));
        }
        if self.ffn_mult == 0 {
            return Err(CgtError::Config("ffn multiplier must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }
}

/// Running mean and (unbiased) variance of a batch-norm site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(width: usize) -> Self {
        RunningStats {
            mean: vec![0.0; width],
            var: vec![1.0; width],
        }
    }

    pub fn update(&mut self, batch: &BatchStats) {
        for (r, b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = (1.0 - RUNNING_MOMENTUM) * *r + RUNNING_MOMENTUM * b;
        }
        for (r, b) in self.var.iter_mut().zip(&batch.var) {
            *r = (1.0 - RUNNING_MOMENTUM) * *r + RUNNING_MOMENTUM * b;
        }
    }
}

/// One graph's rows inside the stacked node matrix.
#[derive(Debug, Clone, Copy)]
pub struct GraphSlot<'a> {
    pub offset: usize,
    pub n: usize,
    pub edges: EdgeVars,
    pub mask: &'a AttentionMask,
}

#[derive(Debug)]
pub struct LayerOutput {
    pub h: Var,
    /// Normalized attention filters per graph, `N×N×d`.
    pub filters: Vec<Var>,
    /// Batch statistics of the two norm sites (training-mode batch norm only).
    pub stats: Option<[BatchStats; 2]>,
}

/// `d×d` matrix with `value` where row and column share a head, else 0.
pub fn head_block_matrix(d: usize, heads: usize, value: f64) -> Vec<f64> {
    let dh = d / heads;
    let mut m = vec![0.0; d * d];
    for l in 0..d {
        for c in 0..d {
            if l / dh == c / dh {
                m[l * d + c] = value;
            }
        }
    }
    m
}

#[derive(Debug, Clone)]
struct NormParams {
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Debug, Clone)]
pub struct CsaLayer {
    pub config: LayerConfig,
    pub name: String,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    norm1: NormParams,
    norm2: NormParams,
}

impl CsaLayer {
    pub fn new<R: Rng>(
        store: &mut ParameterStore,
        name: &str,
        config: LayerConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.width;
        let hidden = d * config.ffn_mult;
        let mut lin = |store: &mut ParameterStore, what: &str, i: usize, o: usize| {
            store.insert(format!("{name}.{what}"), init::xavier_uniform(rng, i, o))
        };
        let wq = lin(store, "wq", d, d)?;
        let wk = lin(store, "wk", d, d)?;
        let wv = lin(store, "wv", d, d)?;
        let w1 = lin(store, "ffn.w1", d, hidden)?;
        let w2 = lin(store, "ffn.w2", hidden, d)?;
        let b1 = store.insert(format!("{name}.ffn.b1"), init::constant(vec![hidden], 0.0))?;
        let b2 = store.insert(format!("{name}.ffn.b2"), init::constant(vec![d], 0.0))?;
        let mut norm = |site: &str| -> Result<NormParams> {
            Ok(NormParams {
                gamma: store.insert(format!("{name}.{site}.gamma"), init::constant(vec![d], 1.0))?,
                beta: store.insert(format!("{name}.{site}.beta"), init::constant(vec![d], 0.0))?,
            })
        };
        let norm1 = norm("norm1")?;
        let norm2 = norm("norm2")?;
        Ok(CsaLayer {
            config,
            name: name.to_string(),
            wq,
            wk,
            wv,
            w1,
            b1,
            w2,
            b2,
            norm1,
            norm2,
        })
    }

    /// Attention filters of one graph from its node rows `h: [N, d]`.
    pub fn filters(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        h: Var,
        slot: &GraphSlot,
    ) -> Result<(Var, Var)> {
        let d = self.config.width;
        let n = slot.n;
        let wq = tape.param(store, self.wq);
        let wk = tape.param(store, self.wk);
        let wv = tape.param(store, self.wv);
        let q = tape.matmul(h, wq)?;
        let k = tape.matmul(h, wk)?;
        let v = tape.matmul(h, wv)?;

        let q3 = tape.reshape(q, &[n, 1, d])?;
        let qb = tape.broadcast_to(q3, &[n, n, d])?;
        let k3 = tape.reshape(k, &[1, n, d])?;
        let kb = tape.broadcast_to(k3, &[n, n, d])?;
        let e = slot.edges.att;
        let logits = match self.config.variant {
            AttentionVariant::Additive => {
                let s = tape.add(qb, kb)?;
                tape.add(s, e)?
            }
            variant => {
                let heads = self.config.heads;
                let scale = if self.config.scaled {
                    1.0 / (self.config.head_dim() as f64).sqrt()
                } else {
                    1.0
                };
                let prod = tape.mul(qb, kb)?;
                let flat = tape.reshape(prod, &[n * n, d])?;
                let block = tape.constant(vec![d, d], head_block_matrix(d, heads, scale))?;
                let scores = tape.matmul(flat, block)?;
                let scores = tape.reshape(scores, &[n, n, d])?;
                let bias = if variant == AttentionVariant::Monochrome {
                    let dh = self.config.head_dim() as f64;
                    let ef = tape.reshape(e, &[n * n, d])?;
                    let avg = tape.constant(vec![d, d], head_block_matrix(d, heads, 1.0 / dh))?;
                    let m = tape.matmul(ef, avg)?;
                    tape.reshape(m, &[n, n, d])?
                } else {
                    e
                };
                tape.add(scores, bias)?
            }
        };
        let mut filters = tape.masked_softmax(logits, 1, slot.mask.pre_norm.as_deref())?;
        if let Some(post) = &slot.mask.post_norm {
            filters = tape.mask_mul(filters, Rc::from(post.as_slice()))?;
        }
        Ok((filters, v))
    }

    /// Runs the block over the stacked node matrix `h: [ΣN, d]`.
    ///
    /// `running = None` normalizes with batch statistics (training); otherwise
    /// the given running statistics are used as constants.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        h: Var,
        slots: &[GraphSlot],
        running: Option<[&RunningStats; 2]>,
        hidden_mask: Option<Rc<[f64]>>,
    ) -> Result<LayerOutput> {
        let d = self.config.width;
        let mut aggregated = Vec::with_capacity(slots.len());
        let mut all_filters = Vec::with_capacity(slots.len());
        for slot in slots {
            let hg = tape.slice_rows(h, slot.offset, slot.n)?;
            let (filters, v) = self.filters(tape, store, hg, slot)?;
            let n = slot.n;
            let msg = match slot.edges.val {
                Some(ev) => tape.add_trailing(ev, v)?,
                None => {
                    let v3 = tape.reshape(v, &[1, n, d])?;
                    tape.broadcast_to(v3, &[n, n, d])?
                }
            };
            let weighted = tape.mul(filters, msg)?;
            aggregated.push(tape.sum_axis(weighted, 1)?);
            all_filters.push(filters);
        }
        let agg = tape.concat_rows(&aggregated)?;
        let h1 = tape.add(h, agg)?;
        self.check_finite(tape, h1, "attention")?;
        let (n1, s1) = self.norm(tape, store, h1, &self.norm1, running.map(|r| r[0]))?;

        let w1 = tape.param(store, self.w1);
        let b1 = tape.param(store, self.b1);
        let w2 = tape.param(store, self.w2);
        let b2 = tape.param(store, self.b2);
        let z = tape.matmul(n1, w1)?;
        let z = tape.add_trailing(z, b1)?;
        let mut z = tape.gelu(z);
        if let Some(mask) = hidden_mask {
            z = tape.mask_mul(z, mask)?;
        }
        let f = tape.matmul(z, w2)?;
        let f = tape.add_trailing(f, b2)?;
        let h2 = tape.add(n1, f)?;
        self.check_finite(tape, h2, "feed-forward")?;
        let (out, s2) = self.norm(tape, store, h2, &self.norm2, running.map(|r| r[1]))?;
        let stats = match (s1, s2) {
            (Some(a), Some(b)) => Some([a, b]),
            _ => None,
        };
        Ok(LayerOutput {
            h: out,
            filters: all_filters,
            stats,
        })
    }

    fn norm(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        x: Var,
        p: &NormParams,
        running: Option<&RunningStats>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let g = tape.param(store, p.gamma);
        let b = tape.param(store, p.beta);
        match self.config.norm {
            NormChoice::Layer => Ok((tape.layer_norm(x, g, b)?, None)),
            NormChoice::Batch => {
                let fixed = running.map(|r| (r.mean.as_slice(), r.var.as_slice()));
                tape.batch_norm(x, g, b, fixed)
            }
        }
    }

    fn check_finite(&self, tape: &Tape, v: Var, block: &str) -> Result<()> {
        if tape.value(v).iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(CgtError::Numerical(format!(
                "non-finite activations after {block} in {}",
                self.name
            )))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::csa::{reference, DropoutKind};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
        (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn config(variant: AttentionVariant, heads: usize) -> LayerConfig {
        LayerConfig {
            width: 8,
            heads,
            variant,
            scaled: true,
            norm: NormChoice::Batch,
            ffn_mult: 2,
        }
    }

    /// Tape filters and update against the entry-wise reference formulas.
    #[test]
    fn tape_filters_match_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (n, d) = (5, 8);
        for (variant, heads) in [
            (AttentionVariant::Chromatic, 2),
            (AttentionVariant::Monochrome, 4),
            (AttentionVariant::Additive, 1),
        ] {
            for kind in [DropoutKind::None, DropoutKind::EdgeAblation, DropoutKind::Feature] {
                let mut store = ParameterStore::new();
                let layer = CsaLayer::new(&mut store, "l0", config(variant, heads), &mut rng).unwrap();
                let hv = random(&mut rng, n * d);
                let ea = random(&mut rng, n * n * d);
                let ev = random(&mut rng, n * n * d);
                let mask = reference::sample_attention_mask(n, d, kind, 0.3, &mut rng);

                let mut tape = Tape::new();
                let h = tape.constant(vec![n, d], hv.clone()).unwrap();
                let att = tape.constant(vec![n, n, d], ea.clone()).unwrap();
                let val = tape.constant(vec![n, n, d], ev.clone()).unwrap();
                let slot = GraphSlot {
                    offset: 0,
                    n,
                    edges: EdgeVars { att, val: Some(val) },
                    mask: &mask,
                };
                let (f, v) = layer.filters(&mut tape, &store, h, &slot).unwrap();

                let mm = |w: ParamId| {
                    let w = store.get(w);
                    let mut out = vec![0.0; n * d];
                    for i in 0..n {
                        for c in 0..d {
                            out[i * d + c] = (0..d).map(|l| hv[i * d + l] * w.data[l * d + c]).sum();
                        }
                    }
                    out
                };
                let (q, k, vr) = (mm(layer.wq), mm(layer.wk), mm(layer.wv));
                let a = reference::chromatic_scores(&q, &k, &ea, n, d, heads, variant, true);
                let expect = reference::attention_dropout(&a, &mask, n, d);
                for (x, y) in tape.value(f).iter().zip(&expect) {
                    assert!((x - y).abs() < 1e-12, "{variant:?} {kind:?}: {x} vs {y}");
                }
                for (x, y) in tape.value(v).iter().zip(&vr) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn forward_residual_matches_reference_update() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (n, d) = (4, 8);
        let mut store = ParameterStore::new();
        let mut cfg = config(AttentionVariant::Chromatic, 2);
        cfg.norm = NormChoice::Layer;
        let layer = CsaLayer::new(&mut store, "l0", cfg, &mut rng).unwrap();
        let hv = random(&mut rng, n * d);
        let ea = random(&mut rng, n * n * d);
        let ev = random(&mut rng, n * n * d);
        let mask = AttentionMask::none();
        let mut tape = Tape::new();
        let h = tape.constant(vec![n, d], hv.clone()).unwrap();
        let att = tape.constant(vec![n, n, d], ea).unwrap();
        let val = tape.constant(vec![n, n, d], ev.clone()).unwrap();
        let slot = GraphSlot {
            offset: 0,
            n,
            edges: EdgeVars { att, val: Some(val) },
            mask: &mask,
        };
        let out = layer.forward(&mut tape, &store, h, &[slot], None, None).unwrap();
        let filters = tape.value(out.filters[0]).to_vec();
        let (_, v) = layer.filters(&mut tape, &store, h, &slot).unwrap();
        let v = tape.value(v).to_vec();
        let h1 = reference::csa_update(&hv, &filters, &v, Some(&ev), n, d);
        let n1 = plain_layer_norm(&h1, d);
        let (w1, b1) = (&store.get(layer.w1).data, &store.get(layer.b1).data);
        let (w2, b2) = (&store.get(layer.w2).data, &store.get(layer.b2).data);
        let hidden = 2 * d;
        let mut h2 = n1.clone();
        for i in 0..n {
            let z: Vec<f64> = (0..hidden)
                .map(|o| crate::autodiff::gelu(b1[o] + (0..d).map(|l| n1[i * d + l] * w1[l * hidden + o]).sum::<f64>()))
                .collect();
            for c in 0..d {
                h2[i * d + c] += b2[c] + (0..hidden).map(|o| z[o] * w2[o * d + c]).sum::<f64>();
            }
        }
        let expect = plain_layer_norm(&h2, d);
        for (x, y) in tape.value(out.h).iter().zip(&expect) {
            assert!((x - y).abs() < 1e-10, "{x} vs {y}");
        }
    }

    fn plain_layer_norm(x: &[f64], d: usize) -> Vec<f64> {
        x.chunks(d)
            .flat_map(|row| {
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
                let inv = 1.0 / (var + crate::autodiff::NORM_EPS).sqrt();
                row.iter().map(move |v| (v - mean) * inv).collect::<Vec<_>>()
            })
            .collect()
    }

    #[test]
    fn batch_stats_returned_only_in_training_batch_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (n, d) = (3, 8);
        let mut store = ParameterStore::new();
        let layer = CsaLayer::new(&mut store, "l0", config(AttentionVariant::Chromatic, 8), &mut rng).unwrap();
        let mask = AttentionMask::none();
        let run = |running: Option<[&RunningStats; 2]>| {
            let mut tape = Tape::new();
            let h = tape.constant(vec![n, d], vec![0.5; n * d]).unwrap();
            let att = tape.constant(vec![n, n, d], vec![0.0; n * n * d]).unwrap();
            let slot = GraphSlot {
                offset: 0,
                n,
                edges: EdgeVars { att, val: None },
                mask: &mask,
            };
            layer.forward(&mut tape, &store, h, &[slot], running, None).unwrap().stats
        };
        assert!(run(None).is_some());
        let r = RunningStats::new(d);
        assert!(run(Some([&r, &r])).is_none());
    }

    #[test]
    fn running_stats_momentum() {
        let mut r = RunningStats::new(2);
        r.update(&BatchStats {
            mean: vec![1.0, 2.0],
            var: vec![3.0, 1.0],
        });
        assert!((r.mean[0] - 0.1).abs() < 1e-15);
        assert!((r.mean[1] - 0.2).abs() < 1e-15);
        assert!((r.var[0] - 1.2).abs() < 1e-15);
        assert!((r.var[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_heads_not_dividing_width() {
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = CsaLayer::new(&mut store, "l", config(AttentionVariant::Chromatic, 3), &mut rng);
        assert!(matches!(err, Err(CgtError::Config(_))));
    }
}
