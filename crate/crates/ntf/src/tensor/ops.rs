//! Differentiable primitives recorded on the [`Tape`].
//!
//! Each operation validates shapes, computes its value eagerly, rejects
//! non-finite results, and records a backward rule implementing the exact
//! adjoint of its forward computation. Non-smooth points use fixed
//! subgradients, documented per op, so gradients are deterministic there
//! too: `relu` takes 0 at the kink and `l2_normalize` takes the norm branch
//! when the norm ties with `eps`.

use crate::error::{Error, Result};

use super::tape::{Tape, TapeOp, Var};
use super::{ensure_finite_slice, matmul_acc, matmul_nt_acc, matmul_tn_acc, Tensor};

impl Tape {
    /// Matrix product `a[m×k] · b[k×n] → [m×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (&[m, k], &[k2, n]) = (ta.shape(), tb.shape()) else {
            return Err(Error::dim(
                "matmul",
                format!("expected rank-2 operands, got {:?} and {:?}", ta.shape(), tb.shape()),
            ));
        };
        if k != k2 {
            return Err(Error::dim(
                "matmul",
                format!("inner extents disagree: {:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(ta.data(), tb.data(), m, k, n, &mut out);
        ensure_finite_slice("matmul", &out)?;
        let out = Tensor::from_vec(&[m, n], out)?;
        Ok(self.push_op(out, vec![a.0, b.0], Box::new(MatmulOp { m, k, n })))
    }

    /// 2-D cross-correlation with zero padding and square kernels:
    /// `x[B×C×H×W] ⋆ w[F×C×k×k] → [B×F×H'×W']`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (&[bsz, c, h, wd], &[f, cw, kh, kw]) = (tx.shape(), tw.shape()) else {
            return Err(Error::dim(
                "conv2d",
                format!("expected 4-D input and weights, got {:?} and {:?}", tx.shape(), tw.shape()),
            ));
        };
        if kh != kw {
            return Err(Error::dim("conv2d", format!("kernel must be square, got {kh}×{kw}")));
        }
        let k = kh;
        if cw != c {
            return Err(Error::dim(
                "conv2d",
                format!("input has {c} channels but weights expect {cw}"),
            ));
        }
        if stride == 0 {
            return Err(Error::dim("conv2d", "stride must be ≥ 1".to_string()));
        }
        if k > h + 2 * pad || k > wd + 2 * pad {
            return Err(Error::dim(
                "conv2d",
                format!("kernel {k}×{k} exceeds padded input {}×{}", h + 2 * pad, wd + 2 * pad),
            ));
        }
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        let rows = oh * ow;
        let ckk = c * k * k;

        // Weights transposed once per call: wt[(c,ky,kx), f].
        let mut wt = vec![0.0; ckk * f];
        let wdta = tw.data();
        for fi in 0..f {
            for q in 0..ckk {
                wt[q * f + fi] = wdta[fi * ckk + q];
            }
        }

        // Per-image im2col, then one [rows×ckk]·[ckk×f] product per image.
        let mut col = vec![0.0; bsz * rows * ckk];
        let mut out = vec![0.0; bsz * f * rows];
        let mut out_img = vec![0.0; rows * f];
        let xd = tx.data();
        for b in 0..bsz {
            let col_b = &mut col[b * rows * ckk..(b + 1) * rows * ckk];
            im2col(xd, b, c, h, wd, k, stride, pad, oh, ow, col_b);
            out_img.iter_mut().for_each(|v| *v = 0.0);
            matmul_acc(col_b, &wt, rows, ckk, f, &mut out_img);
            for r in 0..rows {
                for fi in 0..f {
                    out[(b * f + fi) * rows + r] = out_img[r * f + fi];
                }
            }
        }
        ensure_finite_slice("conv2d", &out)?;
        let out = Tensor::from_vec(&[bsz, f, oh, ow], out)?;
        let op = Conv2dOp {
            stride,
            pad,
            col,
            dims: ConvDims { bsz, c, h, w: wd, f, k, oh, ow },
        };
        Ok(self.push_op(out, vec![x.0, w.0], Box::new(op)))
    }

    /// Channel-wise bias add: `x[B×C×H×W] + b[C]` broadcast over B, H, W.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        let (&[bsz, c, h, w], &[cb]) = (tx.shape(), tb.shape()) else {
            return Err(Error::dim(
                "add_channel_bias",
                format!("expected 4-D input and 1-D bias, got {:?} and {:?}", tx.shape(), tb.shape()),
            ));
        };
        if cb != c {
            return Err(Error::dim(
                "add_channel_bias",
                format!("input has {c} channels but bias has {cb}"),
            ));
        }
        let plane = h * w;
        let mut out = tx.data().to_vec();
        for bi in 0..bsz {
            for ci in 0..c {
                let base = (bi * c + ci) * plane;
                let bv = tb.data()[ci];
                for v in &mut out[base..base + plane] {
                    *v += bv;
                }
            }
        }
        ensure_finite_slice("add_channel_bias", &out)?;
        let out = Tensor::from_vec(&[bsz, c, h, w], out)?;
        Ok(self.push_op(out, vec![x.0, b.0], Box::new(AddChannelBiasOp)))
    }

    /// Row-wise bias add: `x[N×D] + b[D]` broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        let (&[n, d], &[db]) = (tx.shape(), tb.shape()) else {
            return Err(Error::dim(
                "add_row_bias",
                format!("expected 2-D input and 1-D bias, got {:?} and {:?}", tx.shape(), tb.shape()),
            ));
        };
        if db != d {
            return Err(Error::dim(
                "add_row_bias",
                format!("input rows have {d} features but bias has {db}"),
            ));
        }
        let mut out = tx.data().to_vec();
        for i in 0..n {
            for j in 0..d {
                out[i * d + j] += tb.data()[j];
            }
        }
        ensure_finite_slice("add_row_bias", &out)?;
        let out = Tensor::from_vec(&[n, d], out)?;
        Ok(self.push_op(out, vec![x.0, b.0], Box::new(AddRowBiasOp)))
    }

    /// Element-wise max(x, 0). Subgradient 0 at the kink.
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let out: Vec<f64> = tx.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let out = Tensor::from_vec(tx.shape(), out)?;
        Ok(self.push_op(out, vec![x.0], Box::new(ReluOp)))
    }

    /// Mean over the spatial extent: `x[B×C×H×W] → [B×C]`.
    pub fn global_mean_pool(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let &[bsz, c, h, w] = tx.shape() else {
            return Err(Error::dim(
                "global_mean_pool",
                format!("expected 4-D input, got {:?}", tx.shape()),
            ));
        };
        let plane = h * w;
        let inv = 1.0 / plane as f64;
        let mut out = vec![0.0; bsz * c];
        for bi in 0..bsz {
            for ci in 0..c {
                let base = (bi * c + ci) * plane;
                let mut s = 0.0;
                for &v in &tx.data()[base..base + plane] {
                    s += v;
                }
                out[bi * c + ci] = s * inv;
            }
        }
        ensure_finite_slice("global_mean_pool", &out)?;
        let out = Tensor::from_vec(&[bsz, c], out)?;
        Ok(self.push_op(out, vec![x.0], Box::new(GlobalMeanPoolOp { h, w })))
    }

    /// Scale rows to unit Euclidean norm: `v / max(‖v‖₂, eps)`.
    ///
    /// A 1-D input is one row; a 2-D input is normalized row-wise. When the
    /// norm ties with `eps` the norm branch of the max is differentiated.
    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let (rows, d) = match *tx.shape() {
            [d] => (1, d),
            [n, d] => (n, d),
            _ => {
                return Err(Error::dim(
                    "l2_normalize",
                    format!("expected 1-D or 2-D input, got {:?}", tx.shape()),
                ))
            }
        };
        if eps <= 0.0 {
            return Err(Error::contract("l2_normalize", format!("eps must be > 0, got {eps}")));
        }
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = &tx.data()[r * d..(r + 1) * d];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let denom = norm.max(eps);
            for j in 0..d {
                out[r * d + j] = row[j] / denom;
            }
        }
        ensure_finite_slice("l2_normalize", &out)?;
        let out = Tensor::from_vec(tx.shape(), out)?;
        Ok(self.push_op(out, vec![x.0], Box::new(L2NormalizeOp { eps })))
    }

    /// Element-wise sum of two same-shape tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim(
                "add",
                format!("shape {:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let out: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        ensure_finite_slice("add", &out)?;
        let out = Tensor::from_vec(ta.shape(), out)?;
        Ok(self.push_op(out, vec![a.0, b.0], Box::new(AddOp)))
    }

    /// Multiply every element by a constant.
    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        if !c.is_finite() {
            return Err(Error::numeric("scale", format!("non-finite factor {c}")));
        }
        let tx = self.value(x);
        let out: Vec<f64> = tx.data().iter().map(|&v| v * c).collect();
        ensure_finite_slice("scale", &out)?;
        let out = Tensor::from_vec(tx.shape(), out)?;
        Ok(self.push_op(out, vec![x.0], Box::new(ScaleOp { c })))
    }

    /// Element-wise logistic function, computed in overflow-safe form.
    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let out: Vec<f64> = tx.data().iter().map(|&v| stable_sigmoid(v)).collect();
        ensure_finite_slice("sigmoid", &out)?;
        let out = Tensor::from_vec(tx.shape(), out)?;
        Ok(self.push_op(out, vec![x.0], Box::new(SigmoidOp)))
    }

    /// Element-wise natural logarithm; rejects non-positive inputs.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        for (i, &v) in tx.data().iter().enumerate() {
            if v <= 0.0 {
                return Err(Error::numeric(
                    "log",
                    format!("non-positive input {v} at flat index {i}"),
                ));
            }
        }
        let out: Vec<f64> = tx.data().iter().map(|&v| v.ln()).collect();
        ensure_finite_slice("log", &out)?;
        let out = Tensor::from_vec(tx.shape(), out)?;
        Ok(self.push_op(out, vec![x.0], Box::new(LogOp)))
    }

    /// Element-wise exponential; overflow surfaces as a numeric error.
    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let out: Vec<f64> = tx.data().iter().map(|&v| v.exp()).collect();
        ensure_finite_slice("exp", &out)?;
        let out = Tensor::from_vec(tx.shape(), out)?;
        Ok(self.push_op(out, vec![x.0], Box::new(ExpOp)))
    }

    /// View the elements under a new shape with the same element count.
    /// Backward is the inverse reshape of the gradient.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let n: usize = shape.iter().product();
        if n != tx.data().len() {
            return Err(Error::dim(
                "reshape",
                format!(
                    "cannot view {} elements as {shape:?}",
                    tx.data().len()
                ),
            ));
        }
        let out = Tensor::from_vec(shape, tx.data().to_vec())?;
        Ok(self.push_op(out, vec![x.0], Box::new(ReshapeOp)))
    }

    /// Sum of all elements, as a scalar (shape `[]`).
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let mut s = 0.0;
        for &v in tx.data() {
            s += v;
        }
        if !s.is_finite() {
            return Err(Error::numeric("sum", format!("non-finite total {s}")));
        }
        let out = Tensor::scalar(s);
        Ok(self.push_op(out, vec![x.0], Box::new(SumOp)))
    }

    /// Inner product of two same-shape tensors, flattened; scalar result.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim(
                "dot",
                format!("shape {:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let mut s = 0.0;
        for (x, y) in ta.data().iter().zip(tb.data()) {
            s += x * y;
        }
        if !s.is_finite() {
            return Err(Error::numeric("dot", format!("non-finite total {s}")));
        }
        let out = Tensor::scalar(s);
        Ok(self.push_op(out, vec![a.0, b.0], Box::new(DotOp)))
    }
}

/// Numerically stable logistic function.
pub(crate) fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Gather padded patches: one row per output pixel, columns in
/// `(channel, ky, kx)` order. Out-of-bounds taps contribute zero.
#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    col: &mut [f64],
) {
    let ckk = c * k * k;
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &mut col[(oy * ow + ox) * ckk..(oy * ow + ox + 1) * ckk];
            let mut q = 0;
            for ci in 0..c {
                let chan = &x[((b * c + ci) * h) * w..((b * c + ci) * h + h) * w];
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        row[q] = if iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < w {
                            chan[iy as usize * w + ix as usize]
                        } else {
                            0.0
                        };
                        q += 1;
                    }
                }
            }
        }
    }
}

// ───────────────────────── backward rules ─────────────────────────

#[derive(Debug)]
struct MatmulOp {
    m: usize,
    k: usize,
    n: usize,
}

impl TapeOp for MatmulOp {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _out: &Tensor,
        out_grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let (a, b) = (inputs[0], inputs[1]);
        let (m, k, n) = (self.m, self.k, self.n);
        let da = needs[0].then(|| {
            let mut g = vec![0.0; m * k];
            matmul_nt_acc(out_grad.data(), b.data(), m, n, k, &mut g);
            Tensor::from_vec(&[m, k], g).expect("matmul dA shape")
        });
        let db = needs[1].then(|| {
            let mut g = vec![0.0; k * n];
            matmul_tn_acc(a.data(), out_grad.data(), m, k, n, &mut g);
            Tensor::from_vec(&[k, n], g).expect("matmul dB shape")
        });
        vec![da, db]
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvDims {
    bsz: usize,
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    k: usize,
    oh: usize,
    ow: usize,
}

/// Caches the forward im2col buffer; backward reuses it for the weight
/// gradient and runs the transposed gather (col2im) for the input gradient.
struct Conv2dOp {
    stride: usize,
    pad: usize,
    col: Vec<f64>,
    dims: ConvDims,
}

impl std::fmt::Debug for Conv2dOp {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Conv2dOp")
            .field("stride", &self.stride)
            .field("pad", &self.pad)
            .finish()
    }
}

impl TapeOp for Conv2dOp {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _out: &Tensor,
        out_grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let ConvDims { bsz, c, h, w, f, k, oh, ow } = self.dims;
        let rows = oh * ow;
        let ckk = c * k * k;
        let wt_shape = [f, c, k, k];
        let go = out_grad.data();

        // Per-image gradient wrt the product output, in [row, filter] layout.
        let mut gout_img = vec![0.0; rows * f];
        let mut dwt = needs[1].then(|| vec![0.0; ckk * f]);
        let mut dx = needs[0].then(|| vec![0.0; bsz * c * h * w]);
        let mut dcol = vec![0.0; rows * ckk];

        for b in 0..bsz {
            for r in 0..rows {
                for fi in 0..f {
                    gout_img[r * f + fi] = go[(b * f + fi) * rows + r];
                }
            }
            let col_b = &self.col[b * rows * ckk..(b + 1) * rows * ckk];
            if let Some(dwt) = dwt.as_mut() {
                // dwt[q, f] += Σ_r col[r, q] · gout[r, f], images in order.
                matmul_tn_acc(col_b, &gout_img, rows, ckk, f, dwt);
            }
            if let Some(dx) = dx.as_mut() {
                dcol.iter_mut().for_each(|v| *v = 0.0);
                // dcol[r, q] = Σ_f gout[r, f] · w[f, q]
                matmul_acc(&gout_img, inputs[1].data(), rows, f, ckk, &mut dcol);
                col2im_acc(&dcol, b, c, h, w, k, self.stride, self.pad, oh, ow, dx);
            }
        }

        let da = dx.map(|g| Tensor::from_vec(&[bsz, c, h, w], g).expect("conv dX shape"));
        let db = dwt.map(|dwt| {
            // Transpose back from [q, f] to the weight layout [f, q].
            let mut g = vec![0.0; f * ckk];
            for q in 0..ckk {
                for fi in 0..f {
                    g[fi * ckk + q] = dwt[q * f + fi];
                }
            }
            Tensor::from_vec(&wt_shape, g).expect("conv dW shape")
        });
        vec![da, db]
    }
}

/// Scatter-add the patch-gradient rows back onto the padded input grid,
/// dropping taps that fell in the zero padding. Fixed row-major loop order.
#[allow(clippy::too_many_arguments)]
fn col2im_acc(
    dcol: &[f64],
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    dx: &mut [f64],
) {
    let ckk = c * k * k;
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &dcol[(oy * ow + ox) * ckk..(oy * ow + ox + 1) * ckk];
            let mut q = 0;
            for ci in 0..c {
                let base = ((b * c + ci) * h) * w;
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < w {
                            dx[base + iy as usize * w + ix as usize] += row[q];
                        }
                        q += 1;
                    }
                }
            }
        }
    }
}

#[derive(Debug)]
struct AddChannelBiasOp;

impl TapeOp for AddChannelBiasOp {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _out: &Tensor,
        out_grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let &[bsz, c, h, w] = inputs[0].shape() else { unreachable!() };
        let plane = h * w;
        let dx = needs[0].then(|| {
            Tensor::from_vec(inputs[0].shape(), out_grad.data().to_vec()).expect("bias dX")
        });
        let db = needs[1].then(|| {
            let mut g = vec![0.0; c];
            for bi in 0..bsz {
                for ci in 0..c {
                    let base = (bi * c + ci) * plane;
                    for &v in &out_grad.data()[base..base + plane] {
                        g[ci] += v;
                    }
                }
            }
            Tensor::from_vec(&[c], g).expect("bias dB")
        });
        vec![dx, db]
    }
}

#[derive(Debug)]
struct AddRowBiasOp;

impl TapeOp for AddRowBiasOp {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _out: &Tensor,
        out_grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let &[n, d] = inputs[0].shape() else { unreachable!() };
        let dx = needs[0].then(|| {
            Tensor::from_vec(inputs[0].shape(), out_grad.data().to_vec()).expect("row bias dX")
        });
        let db = needs[1].then(|| {
            let mut g = vec![0.0; d];
            for i in 0..n {
                for j in 0..d {
                    g[j] += out_grad.data()[i * d + j];
                }
            }
            Tensor::from_vec(&[d], g).expect("row bias dB")
        });
        vec![dx, db]
    }
}

#[derive(Debug)]
struct ReluOp;

impl TapeOp for ReluOp {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _out: &Tensor,
        out_grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let dx = needs[0].then(|| {
            let g: Vec<f64> = inputs[0]
                .data()
                .iter()
                .zip(out_grad.data())
                .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                .collect();
            Tensor::from_vec(inputs[0].shape(), g).expect("relu dX")
        });
        vec![dx]
    }
}

#[derive(Debug)]
struct GlobalMeanPoolOp {
    h: usize,
    w: usize,
}

impl TapeOp for GlobalMeanPoolOp {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _out: &Tensor,
        out_grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let plane = self.h * self.w;
        let inv = 1.0 / plane as f64;
        let dx = needs[0].then(|| {
            let mut g = vec![0.0; inputs[0].numel()];
            for (bc, &go) in out_grad.data().iter().enumerate() {
                let v = go * inv;
                for p in 0..plane {
                    g[bc * plane + p] = v;
                }
            }
            Tensor::from_vec(inputs[0].shape(), g).expect("pool dX")
        });
        vec![dx]
    }
}

#[derive(Debug)]
struct L2NormalizeOp {
    eps: f64,
}

impl TapeOp for L2NormalizeOp {
    fn backward(
        &self,
        inputs: &[&Tensor],
        out: &Tensor,
        out_grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let x = inputs[0];
        let (rows, d) = match *x.shape() {
            [d] => (1, d),
            [n, d] => (n, d),
            _ => unreachable!(),
        };
        let dx = needs[0].then(|| {
            let mut g = vec![0.0; x.numel()];
            for r in 0..rows {
                let xr = &x.data()[r * d..(r + 1) * d];
                let yr = &out.data()[r * d..(r + 1) * d];
                let gr = &out_grad.data()[r * d..(r + 1) * d];
                let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm >= self.eps {
                    // y = x/‖x‖ ⇒ dx = (g − y·(yᵀg)) / ‖x‖
                    let mut ydg = 0.0;
                    for j in 0..d {
                        ydg += yr[j] * gr[j];
                    }
                    for j in 0..d {
                        g[r * d + j] = (gr[j] - yr[j] * ydg) / norm;
                    }
                } else {
                    // y = x/eps is linear below the clamp.
                    for j in 0..d {
                        g[r * d + j] = gr[j] / self.eps;
                    }
                }
            }
            Tensor::from_vec(x.shape(), g).expect("l2_normalize dX")
        });
        vec![dx]
    }
}

#[derive(Debug)]
struct AddOp;

impl TapeOp for AddOp {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _out: &Tensor,
        out_grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let clone = |need: bool| {
            need.then(|| {
                Tensor::from_vec(inputs[0].shape(), out_grad.data().to_vec()).expect("add dX")
            })
        };
        vec![clone(needs[0]), clone(needs[1])]
    }
}

#[derive(Debug)]
struct ScaleOp {
    c: f64,
}

impl TapeOp for ScaleOp {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _out: &Tensor,
        out_grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let dx = needs[0].then(|| {
            let g: Vec<f64> = out_grad.data().iter().map(|&v| v * self.c).collect();
            Tensor::from_vec(inputs[0].shape(), g).expect("scale dX")
        });
        vec![dx]
    }
}

#[derive(Debug)]
struct ReshapeOp;

impl TapeOp for ReshapeOp {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _out: &Tensor,
        out_grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let dx = needs[0].then(|| {
            Tensor::from_vec(inputs[0].shape(), out_grad.data().to_vec()).expect("reshape dX")
        });
        vec![dx]
    }
}

#[derive(Debug)]
struct SigmoidOp;

impl TapeOp for SigmoidOp {
    fn backward(
        &self,
        inputs: &[&Tensor],
        out: &Tensor,
        out_grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let dx = needs[0].then(|| {
            let g: Vec<f64> = out
                .data()
                .iter()
                .zip(out_grad.data())
                .map(|(&y, &g)| y * (1.0 - y) * g)
                .collect();
            Tensor::from_vec(inputs[0].shape(), g).expect("sigmoid dX")
        });
        vec![dx]
    }
}

#[derive(Debug)]
struct LogOp;

impl TapeOp for LogOp {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _out: &Tensor,
        out_grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let dx = needs[0].then(|| {
            let g: Vec<f64> = inputs[0]
                .data()
                .iter()
                .zip(out_grad.data())
                .map(|(&x, &g)| g / x)
                .collect();
            Tensor::from_vec(inputs[0].shape(), g).expect("log dX")
        });
        vec![dx]
    }
}

#[derive(Debug)]
struct ExpOp;

impl TapeOp for ExpOp {
    fn backward(
        &self,
        inputs: &[&Tensor],
        out: &Tensor,
        out_grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let dx = needs[0].then(|| {
            let g: Vec<f64> = out
                .data()
                .iter()
                .zip(out_grad.data())
                .map(|(&y, &g)| y * g)
                .collect();
            Tensor::from_vec(inputs[0].shape(), g).expect("exp dX")
        });
        vec![dx]
    }
}

#[derive(Debug)]
struct SumOp;

impl TapeOp for SumOp {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _out: &Tensor,
        out_grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let go = out_grad.data()[0];
        let dx = needs[0].then(|| Tensor::filled(inputs[0].shape(), go));
        vec![dx]
    }
}

#[derive(Debug)]
struct DotOp;

impl TapeOp for DotOp {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _out: &Tensor,
        out_grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let go = out_grad.data()[0];
        let grad_from = |src: &Tensor| {
            let g: Vec<f64> = src.data().iter().map(|&v| v * go).collect();
            Tensor::from_vec(src.shape(), g).expect("dot dX")
        };
        vec![
            needs[0].then(|| grad_from(inputs[1])),
            needs[1].then(|| grad_from(inputs[0])),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn leaf(tape: &mut Tape, shape: &[usize], data: Vec<f64>) -> Var {
        tape.leaf(Tensor::from_vec(shape, data).unwrap().with_requires_grad(true))
    }

    fn random_tensor(rng: &mut Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.range_f64(-1.0, 1.0)).collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn matmul_identity_leaves_input_unchanged() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, &[2, 3], vec![1.0, -2.0, 3.0, 4.0, 0.5, -0.25]);
        let eye = tape.constant(
            Tensor::from_vec(&[3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap(),
        );
        let c = tape.matmul(a, eye).unwrap();
        assert_eq!(tape.value(c).data(), tape.value(a).data());
    }

    #[test]
    fn matmul_hand_sum() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, &[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = tape.constant(Tensor::from_vec(&[2, 1], vec![1.0, 1.0]).unwrap());
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_rejects_mismatched_inner_extent() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, &[2, 3], vec![0.0; 6]);
        let b = tape.constant(Tensor::zeros(&[4, 2]));
        assert!(matches!(tape.matmul(a, b), Err(Error::Dimension { .. })));
    }

    /// Direct six-nested-loop convolution oracle.
    fn conv_oracle(
        x: &Tensor,
        w: &Tensor,
        stride: usize,
        pad: usize,
    ) -> Tensor {
        let &[bsz, c, h, wd] = x.shape() else { panic!() };
        let &[f, _, k, _] = w.shape() else { panic!() };
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        let mut out = Tensor::zeros(&[bsz, f, oh, ow]);
        for b in 0..bsz {
            for fi in 0..f {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut s = 0.0;
                        for ci in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < wd {
                                        s += x.data()[((b * c + ci) * h + iy as usize) * wd + ix as usize]
                                            * w.data()[((fi * c + ci) * k + ky) * k + kx];
                                    }
                                }
                            }
                        }
                        out.data_mut()[((b * f + fi) * oh + oy) * ow + ox] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_with_unit_1x1_kernel_is_identity() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1, 1, 3, 3], (1..=9).map(f64::from).collect());
        let w = tape.constant(Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]).unwrap());
        let y = tape.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 3, 3]);
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn conv_all_ones_kernel_on_constant_image_gives_9c_interior() {
        let c_val = 2.5;
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::filled(&[1, 1, 5, 5], c_val));
        let w = tape.constant(Tensor::filled(&[1, 1, 3, 3], 1.0));
        let y = tape.conv2d(x, w, 1, 1).unwrap();
        let out = tape.value(y);
        assert_eq!(out.shape(), &[1, 1, 5, 5]);
        for oy in 1..4 {
            for ox in 1..4 {
                let v = out.data()[oy * 5 + ox];
                assert!((v - 9.0 * c_val).abs() < 1e-12, "interior ({oy},{ox}) = {v}");
            }
        }
        // Corner sees a 2×2 window of the image.
        assert!((out.data()[0] - 4.0 * c_val).abs() < 1e-12);
    }

    #[test]
    fn conv_matches_nested_loop_oracle() {
        let mut rng = Rng::new(2024);
        for &(bsz, c, h, w, f, k, stride, pad) in &[
            (2usize, 3usize, 7usize, 6usize, 4usize, 3usize, 1usize, 1usize),
            (1, 2, 8, 8, 3, 3, 2, 1),
            (2, 1, 5, 5, 2, 5, 1, 2),
            (1, 4, 9, 7, 5, 1, 3, 0),
        ] {
            let x = random_tensor(&mut rng, &[bsz, c, h, w]);
            let wt = random_tensor(&mut rng, &[f, c, k, k]);
            let want = conv_oracle(&x, &wt, stride, pad);

            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let wv = tape.constant(wt);
            let y = tape.conv2d(xv, wv, stride, pad).unwrap();
            assert_eq!(tape.value(y).shape(), want.shape());
            let max_diff = tape
                .value(y)
                .data()
                .iter()
                .zip(want.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(max_diff <= 1e-10, "max diff {max_diff}");
        }
    }

    #[test]
    fn conv_rejects_oversized_kernel() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 4, 4]));
        let w = tape.constant(Tensor::zeros(&[1, 1, 5, 5]));
        assert!(matches!(tape.conv2d(x, w, 1, 0), Err(Error::Dimension { .. })));
        // Same kernel fits once padding is added.
        let x2 = tape.constant(Tensor::zeros(&[1, 1, 4, 4]));
        let w2 = tape.constant(Tensor::zeros(&[1, 1, 5, 5]));
        assert!(tape.conv2d(x2, w2, 1, 1).is_ok());
    }

    #[test]
    fn l2_normalize_three_four_five_triangle() {
        let mut tape = Tape::new();
        let v = leaf(&mut tape, &[2], vec![3.0, 4.0]);
        let y = tape.l2_normalize(v, 1e-12).unwrap();
        let out = tape.value(y).data();
        assert!((out[0] - 0.6).abs() < 1e-15);
        assert!((out[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn l2_normalize_is_idempotent_on_unit_vectors() {
        let mut tape = Tape::new();
        let inv = 1.0 / 3.0f64.sqrt();
        let v = leaf(&mut tape, &[3], vec![inv, inv, inv]);
        let y = tape.l2_normalize(v, 1e-12).unwrap();
        for (a, b) in tape.value(y).data().iter().zip(tape.value(v).data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn l2_normalize_zero_vector_stays_zero() {
        let mut tape = Tape::new();
        let v = leaf(&mut tape, &[4], vec![0.0; 4]);
        let y = tape.l2_normalize(v, 1e-12).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0; 4]);
    }

    #[test]
    fn l2_normalize_rows_normalizes_each_row() {
        let mut tape = Tape::new();
        let v = leaf(&mut tape, &[2, 2], vec![3.0, 4.0, 0.0, 2.0]);
        let y = tape.l2_normalize(v, 1e-12).unwrap();
        let out = tape.value(y).data();
        assert!((out[0] - 0.6).abs() < 1e-15);
        assert!((out[1] - 0.8).abs() < 1e-15);
        assert!((out[2] - 0.0).abs() < 1e-15);
        assert!((out[3] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn global_mean_pool_averages_each_plane() {
        let mut tape = Tape::new();
        let x = leaf(
            &mut tape,
            &[1, 2, 2, 2],
            vec![1.0, 2.0, 3.0, 4.0, 10.0, 20.0, 30.0, 40.0],
        );
        let y = tape.global_mean_pool(x).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 2]);
        assert_eq!(tape.value(y).data(), &[2.5, 25.0]);
    }

    #[test]
    fn log_rejects_non_positive_input() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[2], vec![1.0, 0.0]);
        assert!(matches!(tape.log(x), Err(Error::Numeric { .. })));
    }

    #[test]
    fn exp_overflow_is_a_numeric_error() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1], vec![1e4]);
        assert!(matches!(tape.exp(x), Err(Error::Numeric { .. })));
    }

    #[test]
    fn reshape_views_data_and_routes_gradient_back() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[3, 1], vec![0.5, -1.0, 2.0]);
        let flat = tape.reshape(x, &[3]).unwrap();
        assert_eq!(tape.value(flat).shape(), &[3]);
        assert_eq!(tape.value(flat).data(), &[0.5, -1.0, 2.0]);
        // d(sum . reshape)/dx is all ones, in the original [3, 1] shape.
        let s = tape.sum(flat).unwrap();
        let g = tape.backward(s).unwrap();
        let gx = g.get(x).unwrap();
        assert_eq!(gx.shape(), &[3, 1]);
        assert_eq!(gx.data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn reshape_rejects_element_count_change() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[3, 1], vec![0.5, -1.0, 2.0]);
        assert!(matches!(
            tape.reshape(x, &[4]),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn sigmoid_is_stable_at_extreme_inputs() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[3], vec![-745.0, 0.0, 745.0]);
        let y = tape.sigmoid(x).unwrap();
        let out = tape.value(y).data();
        assert!(out[0] >= 0.0 && out[0] < 1e-300);
        assert_eq!(out[1], 0.5);
        assert_eq!(out[2], 1.0);
    }

    #[test]
    fn frozen_conv_skips_input_gradient_but_full_graph_matches() {
        // One conv with trainable weights and non-trainable input must give
        // the same weight gradient as the fully trainable graph.
        let mut rng = Rng::new(55);
        let x = random_tensor(&mut rng, &[2, 2, 6, 6]);
        let w = random_tensor(&mut rng, &[3, 2, 3, 3]);

        let run = |train_input: bool| {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone().with_requires_grad(train_input));
            let wv = tape.leaf(w.clone().with_requires_grad(true));
            let y = tape.conv2d(xv, wv, 2, 1).unwrap();
            let p = tape.global_mean_pool(y).unwrap();
            let s = tape.sum(p).unwrap();
            let g = tape.backward(s).unwrap();
            (g.get(wv).unwrap().data().to_vec(), g.get(xv).map(|t| t.numel()))
        };
        let (gw_frozen, gx_frozen) = run(false);
        let (gw_full, gx_full) = run(true);
        assert_eq!(gx_frozen, None);
        assert_eq!(gx_full, Some(x.numel()));
        assert!(gw_frozen
            .iter()
            .zip(&gw_full)
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
