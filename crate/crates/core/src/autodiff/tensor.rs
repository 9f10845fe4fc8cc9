use serde::{Deserialize, Serialize};

use crate::error::{CgtError, Result};

/// Dense row-major f64 array with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    #[serde(skip)]
    pub grad: Option<Vec<f64>>,
    #[serde(skip)]
    pub requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(CgtError::dim(
                "tensor",
                format!("shape {shape:?} needs {expected} values, got {}", data.len()),
            ));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn scalar(x: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![x],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn with_grad(mut self) -> Self {
        self.grad = Some(vec![0.0; self.data.len()]);
        self.requires_grad = true;
        self
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

pub(crate) mod kernels {
    /// `out += a[m×k] · b[k×n]`.
    pub fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
        for i in 0..m {
            let dst = &mut out[i * n..(i + 1) * n];
            for l in 0..k {
                let x = a[i * k + l];
                if x == 0.0 {
                    continue;
                }
                let row = &b[l * n..(l + 1) * n];
                for (d, &y) in dst.iter_mut().zip(row) {
                    *d += x * y;
                }
            }
        }
    }

    /// `out += a[m×k] · b[n×k]ᵀ`.
    pub fn matmul_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
        for i in 0..m {
            let ar = &a[i * k..(i + 1) * k];
            for j in 0..n {
                let br = &b[j * k..(j + 1) * k];
                let mut s = 0.0;
                for (x, y) in ar.iter().zip(br) {
                    s += x * y;
                }
                out[i * n + j] += s;
            }
        }
    }

    /// `out += a[k×m]ᵀ · b[k×n]`.
    pub fn matmul_tn_acc(a: &[f64], b: &[f64], out: &mut [f64], k: usize, m: usize, n: usize) {
        for l in 0..k {
            let ar = &a[l * m..(l + 1) * m];
            let br = &b[l * n..(l + 1) * n];
            for (i, &x) in ar.iter().enumerate() {
                if x == 0.0 {
                    continue;
                }
                let dst = &mut out[i * n..(i + 1) * n];
                for (d, &y) in dst.iter_mut().zip(br) {
                    *d += x * y;
                }
            }
        }
    }
}
