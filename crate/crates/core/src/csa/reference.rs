//! Attention-filter operations on plain row-major buffers.
//!
//! These follow the per-channel formulas entry by entry and serve both as the
//! readable definition of the mechanism and as an independent route against
//! which the tape implementation is checked. Shapes: node tensors are `N×d`,
//! pair tensors `N×N×d` indexed `(i, j, c)`.

use rand::Rng;

use super::{AttentionVariant, DropoutKind};

/// Head index of channel `c` when `d` channels are split into `heads` heads.
pub fn head_of(c: usize, d: usize, heads: usize) -> usize {
    c / (d / heads)
}

/// Per-head mean of a pair tensor, broadcast back to every channel of the
/// head. This is the scalar-per-head bias of the monochrome variant.
pub fn per_head_mean(e: &[f64], d: usize, heads: usize) -> Vec<f64> {
    let dh = d / heads;
    let mut out = vec![0.0; e.len()];
    for (row, dst) in e.chunks(d).zip(out.chunks_mut(d)) {
        for h in 0..heads {
            let mean = row[h * dh..(h + 1) * dh].iter().sum::<f64>() / dh as f64;
            dst[h * dh..(h + 1) * dh].iter_mut().for_each(|x| *x = mean);
        }
    }
    out
}

/// Unnormalized log-filters. For the dot-product variants channel `c` of
/// head `c_h` gets `scale · Σ_{l ∈ c_h} Q_il K_jl` plus the edge bias: the
/// channel's own entry (chromatic) or the head mean (monochrome). The
/// additive variant uses `Q_ic + K_jc + E_ijc`.
#[allow(clippy::too_many_arguments)]
pub fn chromatic_logits(
    q: &[f64],
    k: &[f64],
    e_att: &[f64],
    n: usize,
    d: usize,
    heads: usize,
    variant: AttentionVariant,
    scaled: bool,
) -> Vec<f64> {
    assert_eq!(q.len(), n * d);
    assert_eq!(k.len(), n * d);
    assert_eq!(e_att.len(), n * n * d);
    assert!(heads >= 1 && d.is_multiple_of(heads), "heads must divide width");
    let dh = d / heads;
    let scale = if scaled { 1.0 / (dh as f64).sqrt() } else { 1.0 };
    let bias = match variant {
        AttentionVariant::Monochrome => per_head_mean(e_att, d, heads),
        _ => e_att.to_vec(),
    };
    let mut out = vec![0.0; n * n * d];
    for i in 0..n {
        for j in 0..n {
            let base = (i * n + j) * d;
            if variant == AttentionVariant::Additive {
                for c in 0..d {
                    out[base + c] = q[i * d + c] + k[j * d + c] + e_att[base + c];
                }
                continue;
            }
            for h in 0..heads {
                let mut dot = 0.0;
                for l in h * dh..(h + 1) * dh {
                    dot += q[i * d + l] * k[j * d + l];
                }
                for c in h * dh..(h + 1) * dh {
                    out[base + c] = scale * dot + bias[base + c];
                }
            }
        }
    }
    out
}

/// `a = exp(logits − max_j logits)` per receiver `i` and channel `c`.
pub fn exp_shifted(logits: &[f64], n: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    for i in 0..n {
        for c in 0..d {
            let max = (0..n)
                .map(|j| logits[(i * n + j) * d + c])
                .fold(f64::NEG_INFINITY, f64::max);
            for j in 0..n {
                let idx = (i * n + j) * d + c;
                out[idx] = (logits[idx] - max).exp();
            }
        }
    }
    out
}

/// Raw attention filters: [`chromatic_logits`] followed by [`exp_shifted`].
#[allow(clippy::too_many_arguments)]
pub fn chromatic_scores(
    q: &[f64],
    k: &[f64],
    e_att: &[f64],
    n: usize,
    d: usize,
    heads: usize,
    variant: AttentionVariant,
    scaled: bool,
) -> Vec<f64> {
    let logits = chromatic_logits(q, k, e_att, n, d, heads, variant, scaled);
    exp_shifted(&logits, n, d)
}

/// `ã(i, j) = a(i, j) / Σ_k a(i, k)`, separately for every channel.
pub fn normalize_filters(a: &[f64], n: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for i in 0..n {
        for c in 0..d {
            let total: f64 = (0..n).map(|j| a[(i * n + j) * d + c]).sum();
            for j in 0..n {
                let idx = (i * n + j) * d + c;
                out[idx] = a[idx] / total;
            }
        }
    }
    out
}

/// Sampled attention-dropout masks for one graph.
///
/// Ablation masks act on the raw filters before normalization so the
/// surviving senders share the full mass; the feature mask acts on the
/// normalized filters and carries the `1/(1−p)` rescaling.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AttentionMask {
    pub pre_norm: Option<Vec<f64>>,
    pub post_norm: Option<Vec<f64>>,
}

impl AttentionMask {
    pub fn none() -> Self {
        Self::default()
    }
}

/// Draws a mask over an `N×N×d` filter tensor.
///
/// Node ablation drops whole senders `j` for every receiver; edge ablation
/// drops individual `(i, j)` pairs; feature dropout drops individual
/// `(i, j, c)` entries. A receiver left without any sender falls back to
/// attending to itself only.
pub fn sample_attention_mask<R: Rng>(
    n: usize,
    d: usize,
    kind: DropoutKind,
    p: f64,
    rng: &mut R,
) -> AttentionMask {
    assert!((0.0..1.0).contains(&p), "dropout probability must be in [0, 1)");
    if p == 0.0 || kind == DropoutKind::None {
        return AttentionMask::none();
    }
    match kind {
        DropoutKind::None => AttentionMask::none(),
        DropoutKind::NodeAblation | DropoutKind::EdgeAblation => {
            let mut keep = vec![true; n * n];
            if kind == DropoutKind::NodeAblation {
                let dropped: Vec<bool> = (0..n).map(|_| rng.gen::<f64>() < p).collect();
                for i in 0..n {
                    for j in 0..n {
                        keep[i * n + j] = !dropped[j];
                    }
                }
            } else {
                keep.iter_mut().for_each(|k| *k = rng.gen::<f64>() >= p);
            }
            for i in 0..n {
                if !keep[i * n..(i + 1) * n].iter().any(|&k| k) {
                    keep[i * n + i] = true;
                }
            }
            let mut mask = vec![0.0; n * n * d];
            for (pair, &k) in keep.iter().enumerate() {
                if k {
                    mask[pair * d..(pair + 1) * d].iter_mut().for_each(|m| *m = 1.0);
                }
            }
            AttentionMask {
                pre_norm: Some(mask),
                post_norm: None,
            }
        }
        DropoutKind::Feature => {
            let scale = 1.0 / (1.0 - p);
            let mask = (0..n * n * d)
                .map(|_| if rng.gen::<f64>() < p { 0.0 } else { scale })
                .collect();
            AttentionMask {
                pre_norm: None,
                post_norm: Some(mask),
            }
        }
    }
}

/// Applies both parts of `mask` around the normalization of raw filters `a`.
pub fn attention_dropout(a: &[f64], mask: &AttentionMask, n: usize, d: usize) -> Vec<f64> {
    let masked: Vec<f64> = match &mask.pre_norm {
        Some(m) => a.iter().zip(m).map(|(x, m)| x * m).collect(),
        None => a.to_vec(),
    };
    let mut normalized = normalize_filters(&masked, n, d);
    if let Some(m) = &mask.post_norm {
        normalized.iter_mut().zip(m).for_each(|(x, m)| *x *= m);
    }
    normalized
}

/// `h_i + Σ_j ã(i, j) ⊙ (V_j + E^val_ij)`; without edge values this is the
/// plain filtered update.
pub fn csa_update(h: &[f64], filters: &[f64], v: &[f64], e_val: Option<&[f64]>, n: usize, d: usize) -> Vec<f64> {
    let mut out = h.to_vec();
    for i in 0..n {
        for j in 0..n {
            for c in 0..d {
                let idx = (i * n + j) * d + c;
                let msg = v[j * d + c] + e_val.map_or(0.0, |e| e[idx]);
                out[i * d + c] += filters[idx] * msg;
            }
        }
    }
    out
}
