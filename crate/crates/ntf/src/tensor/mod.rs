//! Dense f64 tensors and the reverse-mode gradient tape.
//!
//! Determinism contract: every reduction in this module (matrix products,
//! pooling, gradient accumulation) sums in a fixed left-to-right order over
//! the flat index, so identical inputs produce bitwise-identical outputs on
//! every run and platform. Operations validate shapes up front and reject
//! non-finite results instead of propagating them.

mod check;
pub(crate) mod fused;
mod ops;
mod tape;

pub use check::finite_diff_check;
pub use tape::{Gradients, Tape, Var};

pub(crate) use ops::stable_sigmoid;

use crate::error::{Error, Result};

/// A contiguous, row-major, 64-bit float tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
}

impl Tensor {
    /// Tensor of zeros. A scalar has shape `[]` and one element.
    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
            requires_grad: false,
        }
    }

    /// Tensor from explicit data; length must match the shape's volume.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let want: usize = shape.iter().product();
        if data.len() != want {
            return Err(Error::dim(
                "from_vec",
                format!("shape {:?} needs {} values, got {}", shape, want, data.len()),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
        })
    }

    /// Scalar tensor (shape `[]`).
    pub fn scalar(v: f64) -> Tensor {
        Tensor {
            shape: vec![],
            data: vec![v],
            requires_grad: false,
        }
    }

    /// Constant-filled tensor.
    pub fn filled(shape: &[usize], v: f64) -> Tensor {
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
            requires_grad: false,
        }
    }

    /// Mark this tensor as a trainable leaf when registered on a tape.
    pub fn with_requires_grad(mut self, flag: bool) -> Tensor {
        self.requires_grad = flag;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Value of a scalar tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::contract(
                "item",
                format!("expected scalar, got shape {:?}", self.shape),
            ));
        }
        Ok(self.data[0])
    }

    /// True when the tensor is rank 0 or has exactly one element.
    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Error if any element is NaN or infinite.
    pub fn ensure_finite(&self, op: &'static str) -> Result<()> {
        ensure_finite_slice(op, &self.data)
    }
}

/// Error if any value in `data` is NaN or infinite.
pub(crate) fn ensure_finite_slice(op: &'static str, data: &[f64]) -> Result<()> {
    for (i, &v) in data.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::numeric(
                op,
                format!("non-finite value {v} at flat index {i}"),
            ));
        }
    }
    Ok(())
}

/// `out[i][j] += sum_p a[i][p] * b[p][j]` for row-major `a: m×k`, `b: k×n`.
///
/// The accumulation index `p` runs in ascending order, which fixes the
/// floating-point summation order. The i–p–j loop nest keeps the inner loop
/// contiguous over both `b` and `out`.
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for j in 0..n {
                out_row[j] += av * b_row[j];
            }
        }
    }
}

/// `out[i][j] += sum_p a[p][i] * b[p][j]` — accumulate `aᵀ·b` for
/// row-major `a: k×m`, `b: k×n` without materializing the transpose.
pub(crate) fn matmul_tn_acc(a: &[f64], b: &[f64], k: usize, m: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                out_row[j] += av * b_row[j];
            }
        }
    }
}

/// `out[i][j] += sum_p a[i][p] * b[j][p]` — accumulate `a·bᵀ` for
/// row-major `a: m×k`, `b: n×k`.
pub(crate) fn matmul_nt_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for p in 0..k {
                s += a_row[p] * b_row[p];
            }
            out_row[j] += s;
        }
    }
}
