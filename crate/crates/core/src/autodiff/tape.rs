//! Reverse-mode tape over dense tensors.
//!
//! Every op appends a node holding its forward value and enough of its
//! inputs to replay the local derivative. `backward` walks the tape once in
//! reverse and accumulates into the parameter store.

use std::rc::Rc;

use crate::error::{CgtError, Result};

use super::tensor::kernels;
use super::{ParamId, ParameterStore, Tensor};

pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    BatchMatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Square(Var),
    Relu(Var),
    Gelu(Var),
    AddTrailing(Var, Var),
    BroadcastTo(Var),
    Reshape(Var),
    SumAxis(Var, usize),
    Softmax(Var, usize),
    Gather(Var, Rc<[usize]>),
    ConcatLast(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    MeanRows(Var),
    Mean(Var),
    MaskMul(Var, Rc<[f64]>),
    Norm(NormCache),
    CrossEntropy(Var, Rc<[usize]>, Vec<f64>),
}

#[derive(Debug)]
struct NormCache {
    x: Var,
    gamma: Var,
    beta: Var,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    kind: NormKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum NormKind {
    /// Per-column statistics of this batch.
    BatchTrain,
    /// Fixed per-column statistics.
    BatchFixed,
    /// Per-row statistics.
    Layer,
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Batch statistics produced by a training-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased when more than one row is available.
    pub var: Vec<f64>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Splits `shape` around `axis` into (outer, len, inner) sizes.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].data[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("tape nodes are consistent")
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        debug_assert_eq!(numel(&shape), data.len());
        let needs_grad = match op {
            Op::Constant => false,
            Op::Param(_) => true,
            _ => inputs.iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node {
            shape,
            data,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        if numel(&shape) != data.len() {
            return Err(CgtError::dim(
                "constant",
                format!("shape {shape:?} with {} values", data.len()),
            ));
        }
        Ok(self.push(shape, data, Op::Constant, &[]))
    }

    pub fn constant_tensor(&mut self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), t.data.clone(), Op::Constant, &[])
    }

    pub fn param(&mut self, store: &ParameterStore, id: ParamId) -> Var {
        let t = store.get(id);
        self.push(t.shape.clone(), t.data.clone(), Op::Param(id), &[])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(CgtError::dim(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn rank(&self, op: &'static str, v: Var, rank: usize) -> Result<()> {
        if self.shape(v).len() != rank {
            return Err(CgtError::dim(
                op,
                format!("expected rank {rank}, got shape {:?}", self.shape(v)),
            ));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.rank("matmul", a, 2)?;
        self.rank("matmul", b, 2)?;
        let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
        let (k2, n) = (self.shape(b)[0], self.shape(b)[1]);
        if k != k2 {
            return Err(CgtError::dim("matmul", format!("[{m}, {k}] x [{k2}, {n}]")));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(self.value(a), self.value(b), &mut out, m, k, n);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ` for `a: [m, k]`, `b: [n, k]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.rank("matmul_t", a, 2)?;
        self.rank("matmul_t", b, 2)?;
        let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
        let (n, k2) = (self.shape(b)[0], self.shape(b)[1]);
        if k != k2 {
            return Err(CgtError::dim("matmul_t", format!("[{m}, {k}] x [{n}, {k2}]^T")));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_nt_acc(self.value(a), self.value(b), &mut out, m, k, n);
        Ok(self.push(vec![m, n], out, Op::MatMulT(a, b), &[a, b]))
    }

    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.rank("batch_matmul", a, 3)?;
        self.rank("batch_matmul", b, 3)?;
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(CgtError::dim("batch_matmul", format!("{sa:?} x {sb:?}")));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bs * m * n];
        for t in 0..bs {
            kernels::matmul_acc(
                &self.value(a)[t * m * k..(t + 1) * m * k],
                &self.value(b)[t * k * n..(t + 1) * k * n],
                &mut out[t * m * n..(t + 1) * m * n],
                m,
                k,
                n,
            );
        }
        Ok(self.push(vec![bs, m, n], out, Op::BatchMatMul(a, b), &[a, b]))
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(self.push(self.shape(a).to_vec(), out, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        self.push(self.shape(a).to_vec(), out, op, &[a])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, gelu, Op::Gelu(a))
    }

    /// `a + b` where `b`'s shape equals the trailing axes of `a`'s shape.
    pub fn add_trailing(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(CgtError::dim("add_trailing", format!("{sa:?} + {sb:?}")));
        }
        let inner = numel(sb);
        let bv = self.value(b);
        let out = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bv[i % inner])
            .collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::AddTrailing(a, b), &[a, b]))
    }

    /// Numpy-style broadcast: axes are aligned from the right and every
    /// input axis must equal the target axis or be 1.
    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let in_shape = broadcast_source_shape(&sa, shape)
            .ok_or_else(|| CgtError::dim("broadcast_to", format!("{sa:?} -> {shape:?}")))?;
        let map = broadcast_index_map(&in_shape, shape);
        let av = self.value(a);
        let out = map.iter().map(|&i| av[i]).collect();
        Ok(self.push(shape.to_vec(), out, Op::BroadcastTo(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != numel(self.shape(a)) {
            return Err(CgtError::dim(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape(a)),
            ));
        }
        let data = self.value(a).to_vec();
        Ok(self.push(shape.to_vec(), data, Op::Reshape(a), &[a]))
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() {
            return Err(CgtError::dim("sum_axis", format!("axis {axis} of {sa:?}")));
        }
        let (outer, len, inner) = axis_split(&sa, axis);
        let av = self.value(a);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &av[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, &x) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += x;
                }
            }
        }
        let mut shape = sa;
        shape.remove(axis);
        Ok(self.push(shape, out, Op::SumAxis(a, axis), &[a]))
    }

    /// Softmax along `axis` with per-slice max subtraction.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.masked_softmax(a, axis, None)
    }

    /// Softmax along `axis` where entries with mask 0 get no mass, i.e.
    /// `m·exp(x) / Σ m·exp(x)`. Every slice must keep at least one entry.
    pub fn masked_softmax(&mut self, a: Var, axis: usize, mask: Option<&[f64]>) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() {
            return Err(CgtError::dim("softmax", format!("axis {axis} of {sa:?}")));
        }
        if let Some(m) = mask {
            if m.len() != numel(&sa) {
                return Err(CgtError::dim(
                    "softmax",
                    format!("mask of {} values for {sa:?}", m.len()),
                ));
            }
        }
        let (outer, len, inner) = axis_split(&sa, axis);
        let av = self.value(a);
        let mut out = vec![0.0; av.len()];
        for o in 0..outer {
            for r in 0..inner {
                let idx = |l: usize| (o * len + l) * inner + r;
                let keep = |l: usize| mask.map_or(1.0, |m| m[idx(l)]);
                let mut max = f64::NEG_INFINITY;
                for l in 0..len {
                    if keep(l) != 0.0 {
                        max = max.max(av[idx(l)]);
                    }
                }
                if max == f64::NEG_INFINITY {
                    return Err(CgtError::Numerical(
                        "softmax slice has no unmasked entry".into(),
                    ));
                }
                let mut total = 0.0;
                for l in 0..len {
                    let e = keep(l) * (av[idx(l)] - max).exp();
                    out[idx(l)] = e;
                    total += e;
                }
                for l in 0..len {
                    out[idx(l)] /= total;
                }
            }
        }
        Ok(self.push(sa, out, Op::Softmax(a, axis), &[a]))
    }

    /// Rows of a `[V, d]` table selected by `indices`, giving `[len, d]`.
    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        self.rank("gather", table, 2)?;
        let (rows, d) = (self.shape(table)[0], self.shape(table)[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(CgtError::dim(
                "gather",
                format!("index {bad} into table of {rows} rows"),
            ));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        Ok(self.push(
            vec![indices.len(), d],
            out,
            Op::Gather(table, indices.into()),
            &[table],
        ))
    }

    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| CgtError::dim("concat_last", "no inputs"))?;
        let lead = self.shape(*first)[..self.shape(*first).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(CgtError::dim(
                    "concat_last",
                    format!("{:?} vs leading {lead:?}", s),
                ));
            }
            widths.push(*s.last().unwrap());
        }
        let rows = numel(&lead);
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        Ok(self.push(shape, out, Op::ConcatLast(parts.to_vec()), parts))
    }

    /// Stacks along axis 0.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| CgtError::dim("concat_rows", "no inputs"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut rows = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(CgtError::dim("concat_rows", format!("{s:?} vs tail {tail:?}")));
            }
            rows += s[0];
        }
        let mut out = Vec::with_capacity(rows * numel(&tail));
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        Ok(self.push(shape, out, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.is_empty() || start + len > sa[0] {
            return Err(CgtError::dim(
                "slice_rows",
                format!("rows {start}..{} of {sa:?}", start + len),
            ));
        }
        let inner = numel(&sa[1..]);
        let data = self.value(a)[start * inner..(start + len) * inner].to_vec();
        let mut shape = sa;
        shape[0] = len;
        Ok(self.push(shape, data, Op::SliceRows(a, start), &[a]))
    }

    /// Mean over the node axis: `[N, d] -> [d]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        self.rank("mean_rows", a, 2)?;
        let (n, d) = (self.shape(a)[0], self.shape(a)[1]);
        if n == 0 {
            return Err(CgtError::dim("mean_rows", "no rows"));
        }
        let av = self.value(a);
        let mut out = vec![0.0; d];
        for r in 0..n {
            for (o, &x) in out.iter_mut().zip(&av[r * d..(r + 1) * d]) {
                *o += x;
            }
        }
        out.iter_mut().for_each(|x| *x /= n as f64);
        Ok(self.push(vec![d], out, Op::MeanRows(a), &[a]))
    }

    /// Mean of all entries as a scalar.
    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let m = v.iter().sum::<f64>() / v.len() as f64;
        self.push(vec![], vec![m], Op::Mean(a), &[a])
    }

    /// Element-wise product with a fixed mask (dropout application; the mask
    /// carries any rescaling).
    pub fn mask_mul(&mut self, a: Var, mask: Rc<[f64]>) -> Result<Var> {
        if mask.len() != self.value(a).len() {
            return Err(CgtError::dim(
                "mask_mul",
                format!("mask of {} values for {:?}", mask.len(), self.shape(a)),
            ));
        }
        let out = self.value(a).iter().zip(mask.iter()).map(|(x, m)| x * m).collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::MaskMul(a, mask), &[a]))
    }

    fn check_norm(&self, op: &'static str, x: Var, gamma: Var, beta: Var, width: usize) -> Result<()> {
        self.rank(op, x, 2)?;
        if self.shape(gamma) != [width] || self.shape(beta) != [width] {
            return Err(CgtError::dim(
                op,
                format!(
                    "x {:?}, gamma {:?}, beta {:?}",
                    self.shape(x),
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        Ok(())
    }

    /// Batch normalization over the rows of `x: [N, d]`.
    ///
    /// With `fixed = Some((mean, var))` the given statistics are used and
    /// treated as constants; otherwise the biased batch statistics are used
    /// and returned (variance unbiased) for running-average bookkeeping.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        fixed: Option<(&[f64], &[f64])>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let (n, d) = match self.shape(x) {
            [n, d] => (*n, *d),
            s => return Err(CgtError::dim("batch_norm", format!("x {s:?}"))),
        };
        self.check_norm("batch_norm", x, gamma, beta, d)?;
        let xv = self.value(x);
        let (mean, var, stats, kind) = match fixed {
            Some((m, v)) => {
                if m.len() != d || v.len() != d {
                    return Err(CgtError::dim("batch_norm", "running statistics width"));
                }
                (m.to_vec(), v.to_vec(), None, NormKind::BatchFixed)
            }
            None => {
                if n == 0 {
                    return Err(CgtError::dim("batch_norm", "no rows"));
                }
                let mut mean = vec![0.0; d];
                for r in 0..n {
                    for c in 0..d {
                        mean[c] += xv[r * d + c];
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n as f64);
                let mut ss = vec![0.0; d];
                for r in 0..n {
                    for c in 0..d {
                        let z = xv[r * d + c] - mean[c];
                        ss[c] += z * z;
                    }
                }
                let var: Vec<f64> = ss.iter().map(|s| s / n as f64).collect();
                let unbiased = if n > 1 {
                    ss.iter().map(|s| s / (n - 1) as f64).collect()
                } else {
                    var.clone()
                };
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats), NormKind::BatchTrain)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
        let g = self.value(gamma);
        let b = self.value(beta);
        let mut xhat = vec![0.0; n * d];
        let mut out = vec![0.0; n * d];
        for r in 0..n {
            for c in 0..d {
                let h = (xv[r * d + c] - mean[c]) * inv_std[c];
                xhat[r * d + c] = h;
                out[r * d + c] = g[c] * h + b[c];
            }
        }
        let cache = NormCache {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            kind,
        };
        let v = self.push(vec![n, d], out, Op::Norm(cache), &[x, gamma, beta]);
        Ok((v, stats))
    }

    /// Layer normalization over the columns of each row of `x: [N, d]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (n, d) = match self.shape(x) {
            [n, d] => (*n, *d),
            s => return Err(CgtError::dim("layer_norm", format!("x {s:?}"))),
        };
        self.check_norm("layer_norm", x, gamma, beta, d)?;
        let xv = self.value(x);
        let g = self.value(gamma);
        let b = self.value(beta);
        let mut xhat = vec![0.0; n * d];
        let mut out = vec![0.0; n * d];
        let mut inv_std = vec![0.0; n];
        for r in 0..n {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + NORM_EPS).sqrt();
            inv_std[r] = is;
            for c in 0..d {
                let h = (row[c] - mean) * is;
                xhat[r * d + c] = h;
                out[r * d + c] = g[c] * h + b[c];
            }
        }
        let cache = NormCache {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            kind: NormKind::Layer,
        };
        Ok(self.push(vec![n, d], out, Op::Norm(cache), &[x, gamma, beta]))
    }

    /// Mean cross-entropy of `logits: [N, C]` against class ids.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        self.rank("cross_entropy", logits, 2)?;
        let (n, c) = (self.shape(logits)[0], self.shape(logits)[1]);
        if targets.len() != n || n == 0 {
            return Err(CgtError::dim(
                "cross_entropy",
                format!("{} targets for {n} rows", targets.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(CgtError::dim("cross_entropy", format!("class {bad} of {c}")));
        }
        let lv = self.value(logits);
        let mut probs = vec![0.0; n * c];
        let mut loss = 0.0;
        for r in 0..n {
            let row = &lv[r * c..(r + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let log_z = max + total.ln();
            for k in 0..c {
                probs[r * c + k] = (row[k] - log_z).exp();
            }
            loss += log_z - row[targets[r]];
        }
        loss /= n as f64;
        Ok(self.push(
            vec![],
            vec![loss],
            Op::CrossEntropy(logits, targets.into(), probs),
            &[logits],
        ))
    }

    /// Accumulates `d loss / d param` into `store` for every parameter leaf
    /// reachable from `loss`. Can be called repeatedly; gradients add up.
    pub fn backward(&self, loss: Var, store: &mut ParameterStore) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(CgtError::dim(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backward_node(node, &g, &mut grads, store);
        }
        Ok(())
    }

    fn backward_node(
        &self,
        node: &Node,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        store: &mut ParameterStore,
    ) {
        let len = |v: Var| self.nodes[v.0].data.len();
        let val = |v: Var| &self.nodes[v.0].data[..];
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Constant => {}
            Op::Param(id) => {
                for (d, &x) in store.grad_mut(*id).iter_mut().zip(g) {
                    *d += x;
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if needs(*a) {
                    let ga = acc(grads, *a, m * k);
                    kernels::matmul_nt_acc(g, val(*b), ga, m, n, k);
                }
                if needs(*b) {
                    let gb = acc(grads, *b, k * n);
                    kernels::matmul_tn_acc(val(*a), g, gb, m, k, n);
                }
            }
            Op::MatMulT(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[0];
                if needs(*a) {
                    let ga = acc(grads, *a, m * k);
                    kernels::matmul_acc(g, val(*b), ga, m, n, k);
                }
                if needs(*b) {
                    let gb = acc(grads, *b, n * k);
                    kernels::matmul_tn_acc(g, val(*a), gb, m, n, k);
                }
            }
            Op::BatchMatMul(a, b) => {
                let sa = self.shape(*a);
                let (bs, m, k) = (sa[0], sa[1], sa[2]);
                let n = self.shape(*b)[2];
                for t in 0..bs {
                    let gt = &g[t * m * n..(t + 1) * m * n];
                    if needs(*a) {
                        let ga = acc(grads, *a, bs * m * k);
                        kernels::matmul_nt_acc(
                            gt,
                            &val(*b)[t * k * n..(t + 1) * k * n],
                            &mut ga[t * m * k..(t + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    if needs(*b) {
                        let gb = acc(grads, *b, bs * k * n);
                        kernels::matmul_tn_acc(
                            &val(*a)[t * m * k..(t + 1) * m * k],
                            gt,
                            &mut gb[t * k * n..(t + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                }
            }
            Op::Add(a, b) => {
                for (v, sign) in [(*a, 1.0), (*b, 1.0)] {
                    if needs(v) {
                        let gv = acc(grads, v, g.len());
                        gv.iter_mut().zip(g).for_each(|(d, &x)| *d += sign * x);
                    }
                }
            }
            Op::Sub(a, b) => {
                for (v, sign) in [(*a, 1.0), (*b, -1.0)] {
                    if needs(v) {
                        let gv = acc(grads, v, g.len());
                        gv.iter_mut().zip(g).for_each(|(d, &x)| *d += sign * x);
                    }
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    let bv = val(*b);
                    let ga = acc(grads, *a, g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                }
                if needs(*b) {
                    let av = val(*a);
                    let gb = acc(grads, *b, g.len());
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                }
            }
            Op::Div(a, b) => {
                let bv = val(*b);
                if needs(*a) {
                    let ga = acc(grads, *a, g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] / bv[i];
                    }
                }
                if needs(*b) {
                    let out = &node.data;
                    let gb = acc(grads, *b, g.len());
                    for i in 0..g.len() {
                        gb[i] -= g[i] * out[i] / bv[i];
                    }
                }
            }
            Op::Scale(a, s) => {
                let ga = acc(grads, *a, g.len());
                ga.iter_mut().zip(g).for_each(|(d, &x)| *d += s * x);
            }
            Op::Exp(a) => {
                let out = &node.data;
                let ga = acc(grads, *a, g.len());
                for i in 0..g.len() {
                    ga[i] += g[i] * out[i];
                }
            }
            Op::Log(a) => {
                let av = val(*a);
                let ga = acc(grads, *a, g.len());
                for i in 0..g.len() {
                    ga[i] += g[i] / av[i];
                }
            }
            Op::Abs(a) => {
                let av = val(*a);
                let ga = acc(grads, *a, g.len());
                for i in 0..g.len() {
                    let s = if av[i] > 0.0 {
                        1.0
                    } else if av[i] < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    ga[i] += g[i] * s;
                }
            }
            Op::Square(a) => {
                let av = val(*a);
                let ga = acc(grads, *a, g.len());
                for i in 0..g.len() {
                    ga[i] += 2.0 * g[i] * av[i];
                }
            }
            Op::Relu(a) => {
                let av = val(*a);
                let ga = acc(grads, *a, g.len());
                for i in 0..g.len() {
                    if av[i] > 0.0 {
                        ga[i] += g[i];
                    }
                }
            }
            Op::Gelu(a) => {
                let av = val(*a);
                let ga = acc(grads, *a, g.len());
                for i in 0..g.len() {
                    ga[i] += g[i] * gelu_grad(av[i]);
                }
            }
            Op::AddTrailing(a, b) => {
                if needs(*a) {
                    let ga = acc(grads, *a, g.len());
                    ga.iter_mut().zip(g).for_each(|(d, &x)| *d += x);
                }
                if needs(*b) {
                    let inner = len(*b);
                    let gb = acc(grads, *b, inner);
                    for (i, &x) in g.iter().enumerate() {
                        gb[i % inner] += x;
                    }
                }
            }
            Op::BroadcastTo(a) => {
                let in_shape = broadcast_source_shape(self.shape(*a), &node.shape)
                    .expect("validated in forward");
                let map = broadcast_index_map(&in_shape, &node.shape);
                let ga = acc(grads, *a, len(*a));
                for (&src, &x) in map.iter().zip(g) {
                    ga[src] += x;
                }
            }
            Op::Reshape(a) => {
                let ga = acc(grads, *a, g.len());
                ga.iter_mut().zip(g).for_each(|(d, &x)| *d += x);
            }
            Op::SumAxis(a, axis) => {
                let (outer, l, inner) = axis_split(self.shape(*a), *axis);
                let ga = acc(grads, *a, outer * l * inner);
                for o in 0..outer {
                    let src = &g[o * inner..(o + 1) * inner];
                    for k in 0..l {
                        let dst = &mut ga[(o * l + k) * inner..(o * l + k + 1) * inner];
                        dst.iter_mut().zip(src).for_each(|(d, &x)| *d += x);
                    }
                }
            }
            Op::Softmax(a, axis) => {
                let (outer, l, inner) = axis_split(&node.shape, *axis);
                let y = &node.data;
                let ga = acc(grads, *a, y.len());
                for o in 0..outer {
                    for r in 0..inner {
                        let idx = |k: usize| (o * l + k) * inner + r;
                        let dot: f64 = (0..l).map(|k| y[idx(k)] * g[idx(k)]).sum();
                        for k in 0..l {
                            ga[idx(k)] += y[idx(k)] * (g[idx(k)] - dot);
                        }
                    }
                }
            }
            Op::Gather(table, indices) => {
                let d = self.shape(*table)[1];
                let gt = acc(grads, *table, len(*table));
                for (r, &i) in indices.iter().enumerate() {
                    for c in 0..d {
                        gt[i * d + c] += g[r * d + c];
                    }
                }
            }
            Op::ConcatLast(parts) => {
                let widths: Vec<usize> = parts.iter().map(|p| *self.shape(*p).last().unwrap()).collect();
                let total: usize = widths.iter().sum();
                let rows = g.len() / total;
                let mut offset = 0;
                for (&p, &w) in parts.iter().zip(&widths) {
                    if needs(p) {
                        let gp = acc(grads, p, rows * w);
                        for r in 0..rows {
                            for c in 0..w {
                                gp[r * w + c] += g[r * total + offset + c];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = len(p);
                    if needs(p) {
                        let gp = acc(grads, p, n);
                        gp.iter_mut()
                            .zip(&g[offset..offset + n])
                            .for_each(|(d, &x)| *d += x);
                    }
                    offset += n;
                }
            }
            Op::SliceRows(a, start) => {
                let inner: usize = self.shape(*a)[1..].iter().product();
                let ga = acc(grads, *a, len(*a));
                ga[start * inner..start * inner + g.len()]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(d, &x)| *d += x);
            }
            Op::MeanRows(a) => {
                let (n, d) = (self.shape(*a)[0], self.shape(*a)[1]);
                let ga = acc(grads, *a, n * d);
                for r in 0..n {
                    for c in 0..d {
                        ga[r * d + c] += g[c] / n as f64;
                    }
                }
            }
            Op::Mean(a) => {
                let n = len(*a);
                let ga = acc(grads, *a, n);
                ga.iter_mut().for_each(|d| *d += g[0] / n as f64);
            }
            Op::MaskMul(a, mask) => {
                let ga = acc(grads, *a, g.len());
                for i in 0..g.len() {
                    ga[i] += g[i] * mask[i];
                }
            }
            Op::Norm(cache) => self.backward_norm(cache, g, grads),
            Op::CrossEntropy(logits, targets, probs) => {
                let n = targets.len();
                let c = probs.len() / n;
                let gl = acc(grads, *logits, probs.len());
                let s = g[0] / n as f64;
                for r in 0..n {
                    for k in 0..c {
                        let y = if k == targets[r] { 1.0 } else { 0.0 };
                        gl[r * c + k] += s * (probs[r * c + k] - y);
                    }
                }
            }
        }
    }

    fn backward_norm(&self, cache: &NormCache, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (n, d) = (self.shape(cache.x)[0], self.shape(cache.x)[1]);
        let gamma = self.value(cache.gamma);
        let xhat = &cache.xhat;
        if self.nodes[cache.gamma.0].needs_grad {
            let gg = acc(grads, cache.gamma, d);
            for r in 0..n {
                for c in 0..d {
                    gg[c] += g[r * d + c] * xhat[r * d + c];
                }
            }
        }
        if self.nodes[cache.beta.0].needs_grad {
            let gb = acc(grads, cache.beta, d);
            for r in 0..n {
                for c in 0..d {
                    gb[c] += g[r * d + c];
                }
            }
        }
        if !self.nodes[cache.x.0].needs_grad {
            return;
        }
        let gx = acc(grads, cache.x, n * d);
        match cache.kind {
            NormKind::BatchFixed => {
                for r in 0..n {
                    for c in 0..d {
                        gx[r * d + c] += g[r * d + c] * gamma[c] * cache.inv_std[c];
                    }
                }
            }
            NormKind::BatchTrain => {
                let nf = n as f64;
                for c in 0..d {
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for r in 0..n {
                        let dh = g[r * d + c] * gamma[c];
                        s1 += dh;
                        s2 += dh * xhat[r * d + c];
                    }
                    for r in 0..n {
                        let dh = g[r * d + c] * gamma[c];
                        gx[r * d + c] +=
                            cache.inv_std[c] / nf * (nf * dh - s1 - xhat[r * d + c] * s2);
                    }
                }
            }
            NormKind::Layer => {
                let df = d as f64;
                for r in 0..n {
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for c in 0..d {
                        let dh = g[r * d + c] * gamma[c];
                        s1 += dh;
                        s2 += dh * xhat[r * d + c];
                    }
                    for c in 0..d {
                        let dh = g[r * d + c] * gamma[c];
                        gx[r * d + c] +=
                            cache.inv_std[r] / df * (df * dh - s1 - xhat[r * d + c] * s2);
                    }
                }
            }
        }
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_C: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

/// Left-pads `src` with ones to the target rank and checks compatibility.
fn broadcast_source_shape(src: &[usize], target: &[usize]) -> Option<Vec<usize>> {
    if src.len() > target.len() {
        return None;
    }
    let mut padded = vec![1; target.len() - src.len()];
    padded.extend_from_slice(src);
    padded
        .iter()
        .zip(target)
        .all(|(&s, &t)| s == t || s == 1)
        .then_some(padded)
}

/// For each flat output index, the flat input index it reads.
fn broadcast_index_map(src: &[usize], target: &[usize]) -> Vec<usize> {
    let src_strides = strides(src);
    let total = numel(target);
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; target.len()];
    for _ in 0..total {
        let mut s = 0;
        for ax in 0..target.len() {
            if src[ax] != 1 {
                s += idx[ax] * src_strides[ax];
            }
        }
        map.push(s);
        for ax in (0..target.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < target[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    map
}
