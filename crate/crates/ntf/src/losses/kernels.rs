//! Fused forward/backward implementations of the individual losses.
//!
//! Each kernel validates its batch contract, computes the scalar with
//! numerically safe reductions (max-subtracted softmaxes, guarded norms),
//! and records a tape rule whose backward applies the exact adjoint.
//! Softmax weight matrices are cached at forward time so the backward pass
//! is a handful of small matrix products.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

use super::{OrtMode, PairedBatch};

// Tape internals used to register fused ops.
use crate::tensor::fused::{push_fused, FusedBackward};

/// Paired InfoNCE over heterogeneous projections.
///
/// For each row `i` with sibling `p(i)`, candidates are all other rows:
/// `L = Σ_i −log( exp(zᵢ·z_{p(i)}/τ) / Σ_{k≠i} exp(zᵢ·z_k/τ) )`.
pub fn loss_het(tape: &mut Tape, z: Var, batch: &PairedBatch, tau: f64) -> Result<Var> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Argument(format!("tau must be > 0, got {tau}")));
    }
    let (rows, c) = matrix_dims(tape, z, "loss_het")?;
    check_rows(rows, batch, "loss_het")?;
    if rows < 2 {
        return Err(Error::contract("loss_het", "need at least one source pair".to_string()));
    }

    let zd = tape.value(z).data();
    let scores = pairwise_scores(zd, rows, c, 1.0 / tau);

    // Per-anchor softmax over k≠i with max subtraction; the cached matrix g
    // holds ∂L/∂s where s is the score matrix (its diagonal stays zero).
    let mut g = vec![0.0; rows * rows];
    let mut total = 0.0;
    for i in 0..rows {
        let p = batch.pair_of(i);
        let row = &scores[i * rows..(i + 1) * rows];
        let mut m = f64::NEG_INFINITY;
        for (k, &s) in row.iter().enumerate() {
            if k != i && s > m {
                m = s;
            }
        }
        let mut denom = 0.0;
        for (k, &s) in row.iter().enumerate() {
            if k != i {
                denom += (s - m).exp();
            }
        }
        total += -(row[p] - m - denom.ln());
        for k in 0..rows {
            if k != i {
                g[i * rows + k] = (row[k] - m).exp() / denom;
            }
        }
        g[i * rows + p] -= 1.0;
    }
    if !total.is_finite() {
        return Err(Error::numeric("loss_het", format!("non-finite loss {total}")));
    }

    let op = HetBackward { g, rows, c, tau };
    Ok(push_fused(tape, Tensor::scalar(total), vec![z], Box::new(op)))
}

struct HetBackward {
    g: Vec<f64>,
    rows: usize,
    c: usize,
    tau: f64,
}

impl FusedBackward for HetBackward {
    fn backward(&self, inputs: &[&Tensor], go: f64, needs: &[bool]) -> Vec<Option<Tensor>> {
        let dz = needs[0].then(|| {
            // dZ = go/τ · (G + Gᵀ)·Z
            let r = self.rows;
            let mut sym = vec![0.0; r * r];
            for i in 0..r {
                for k in 0..r {
                    sym[i * r + k] = self.g[i * r + k] + self.g[k * r + i];
                }
            }
            let mut dz = vec![0.0; r * self.c];
            crate::tensor::matmul_acc(&sym, inputs[0].data(), r, r, self.c, &mut dz);
            let scale = go / self.tau;
            dz.iter_mut().for_each(|v| *v *= scale);
            Tensor::from_vec(inputs[0].shape(), dz).expect("het dZ shape")
        });
        vec![dz]
    }
}

/// Worst cross-source squared distance between homogeneous projections.
///
/// `L = max_{source(i) ≠ source(k)} ‖z_k − z_i‖²`, minimized through its
/// subgradient at the argmax pair; ties keep the first pair in row-major
/// `(i, k)` scan order. `smooth_tau` swaps the hard max for
/// `t·ln Σ exp(d/t)` over the same pairs.
pub fn loss_hom(
    tape: &mut Tape,
    z: Var,
    batch: &PairedBatch,
    smooth_tau: Option<f64>,
) -> Result<Var> {
    let (rows, c) = matrix_dims(tape, z, "loss_hom")?;
    check_rows(rows, batch, "loss_hom")?;
    let first = batch.source_of(0);
    if (1..rows).all(|i| batch.source_of(i) == first) {
        return Err(Error::contract(
            "loss_hom",
            "all rows share one source; no cross-source pair exists".to_string(),
        ));
    }
    if let Some(t) = smooth_tau {
        if !(t > 0.0 && t.is_finite()) {
            return Err(Error::Argument(format!(
                "smooth-max temperature must be > 0, got {t}"
            )));
        }
    }

    let zd = tape.value(z).data();
    let sq_dist = |i: usize, k: usize| -> f64 {
        let zi = &zd[i * c..(i + 1) * c];
        let zk = &zd[k * c..(k + 1) * c];
        let mut s = 0.0;
        for j in 0..c {
            let d = zk[j] - zi[j];
            s += d * d;
        }
        s
    };

    match smooth_tau {
        None => {
            let mut best = f64::NEG_INFINITY;
            let mut arg = (0, 0);
            for i in 0..rows {
                for k in 0..rows {
                    if batch.source_of(k) == batch.source_of(i) {
                        continue;
                    }
                    let d = sq_dist(i, k);
                    if d > best {
                        best = d;
                        arg = (i, k);
                    }
                }
            }
            let op = HomHardBackward { arg, c };
            Ok(push_fused(tape, Tensor::scalar(best), vec![z], Box::new(op)))
        }
        Some(t) => {
            // Log-sum-exp over cross-source pairs, max-subtracted.
            let mut dists = Vec::new();
            let mut m = f64::NEG_INFINITY;
            for i in 0..rows {
                for k in 0..rows {
                    if batch.source_of(k) != batch.source_of(i) {
                        let d = sq_dist(i, k);
                        dists.push((i, k, d));
                        if d > m {
                            m = d;
                        }
                    }
                }
            }
            let mut denom = 0.0;
            for &(_, _, d) in &dists {
                denom += ((d - m) / t).exp();
            }
            let value = m + t * denom.ln();
            let weights: Vec<(usize, usize, f64)> = dists
                .iter()
                .map(|&(i, k, d)| (i, k, ((d - m) / t).exp() / denom))
                .collect();
            let op = HomSmoothBackward { weights, c };
            Ok(push_fused(tape, Tensor::scalar(value), vec![z], Box::new(op)))
        }
    }
}

struct HomHardBackward {
    arg: (usize, usize),
    c: usize,
}

impl FusedBackward for HomHardBackward {
    fn backward(&self, inputs: &[&Tensor], go: f64, needs: &[bool]) -> Vec<Option<Tensor>> {
        let dz = needs[0].then(|| {
            let (i, k) = self.arg;
            let zd = inputs[0].data();
            let mut g = vec![0.0; inputs[0].numel()];
            for j in 0..self.c {
                let d = zd[k * self.c + j] - zd[i * self.c + j];
                g[k * self.c + j] += 2.0 * d * go;
                g[i * self.c + j] -= 2.0 * d * go;
            }
            Tensor::from_vec(inputs[0].shape(), g).expect("hom dZ shape")
        });
        vec![dz]
    }
}

struct HomSmoothBackward {
    weights: Vec<(usize, usize, f64)>,
    c: usize,
}

impl FusedBackward for HomSmoothBackward {
    fn backward(&self, inputs: &[&Tensor], go: f64, needs: &[bool]) -> Vec<Option<Tensor>> {
        let dz = needs[0].then(|| {
            let zd = inputs[0].data();
            let mut g = vec![0.0; inputs[0].numel()];
            for &(i, k, w) in &self.weights {
                let f = 2.0 * w * go;
                for j in 0..self.c {
                    let d = zd[k * self.c + j] - zd[i * self.c + j];
                    g[k * self.c + j] += f * d;
                    g[i * self.c + j] -= f * d;
                }
            }
            Tensor::from_vec(inputs[0].shape(), g).expect("hom dZ shape")
        });
        vec![dz]
    }
}

/// Cosine alignment between two projection spaces, row by row.
///
/// `L = Σ_i m(cos(z_hom[i], z_het[i]))` where `m` is identity, `|·|`, or
/// `(·)²`. Cosines use true norms with an epsilon guard, so the value
/// equals the row dot product whenever rows are unit-norm.
pub fn loss_ort(tape: &mut Tape, z_hom: Var, z_het: Var, mode: OrtMode) -> Result<Var> {
    const EPS: f64 = 1e-12;
    let (rows_a, ca) = matrix_dims(tape, z_hom, "loss_ort")?;
    let (rows_b, cb) = matrix_dims(tape, z_het, "loss_ort")?;
    if rows_a != rows_b || ca != cb {
        return Err(Error::dim(
            "loss_ort",
            format!("operands disagree: {rows_a}×{ca} vs {rows_b}×{cb}"),
        ));
    }

    let (a, b) = (tape.value(z_hom).data(), tape.value(z_het).data());
    let mut total = 0.0;
    for i in 0..rows_a {
        let (ra, rb) = (&a[i * ca..(i + 1) * ca], &b[i * ca..(i + 1) * ca]);
        let cos = guarded_cosine(ra, rb, EPS);
        total += match mode {
            OrtMode::Signed => cos,
            OrtMode::Absolute => cos.abs(),
            OrtMode::Squared => cos * cos,
        };
    }
    if !total.is_finite() {
        return Err(Error::numeric("loss_ort", format!("non-finite loss {total}")));
    }
    let op = OrtBackward { mode, c: ca, eps: EPS };
    Ok(push_fused(tape, Tensor::scalar(total), vec![z_hom, z_het], Box::new(op)))
}

fn guarded_cosine(a: &[f64], b: &[f64], eps: f64) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for j in 0..a.len() {
        dot += a[j] * b[j];
        na += a[j] * a[j];
        nb += b[j] * b[j];
    }
    dot / (na.sqrt() * nb.sqrt()).max(eps)
}

struct OrtBackward {
    mode: OrtMode,
    c: usize,
    eps: f64,
}

impl FusedBackward for OrtBackward {
    fn backward(&self, inputs: &[&Tensor], go: f64, needs: &[bool]) -> Vec<Option<Tensor>> {
        let (a, b) = (inputs[0].data(), inputs[1].data());
        let rows = a.len() / self.c;
        let mut da = needs[0].then(|| vec![0.0; a.len()]);
        let mut db = needs[1].then(|| vec![0.0; b.len()]);

        for i in 0..rows {
            let ra = &a[i * self.c..(i + 1) * self.c];
            let rb = &b[i * self.c..(i + 1) * self.c];
            let (mut dot, mut na2, mut nb2) = (0.0, 0.0, 0.0);
            for j in 0..self.c {
                dot += ra[j] * rb[j];
                na2 += ra[j] * ra[j];
                nb2 += rb[j] * rb[j];
            }
            let prod = (na2.sqrt() * nb2.sqrt()).max(self.eps);
            if prod <= self.eps {
                continue; // Degenerate row: treated as constant zero cosine.
            }
            let cos = dot / prod;
            let shaped = match self.mode {
                OrtMode::Signed => 1.0,
                OrtMode::Absolute => {
                    if cos > 0.0 {
                        1.0
                    } else if cos < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                }
                OrtMode::Squared => 2.0 * cos,
            } * go;
            if let Some(da) = da.as_mut() {
                // ∂cos/∂a = b/prod − cos·a/‖a‖²
                for j in 0..self.c {
                    da[i * self.c + j] += shaped * (rb[j] / prod - cos * ra[j] / na2);
                }
            }
            if let Some(db) = db.as_mut() {
                for j in 0..self.c {
                    db[i * self.c + j] += shaped * (ra[j] / prod - cos * rb[j] / nb2);
                }
            }
        }
        vec![
            da.map(|g| Tensor::from_vec(inputs[0].shape(), g).expect("ort dA shape")),
            db.map(|g| Tensor::from_vec(inputs[1].shape(), g).expect("ort dB shape")),
        ]
    }
}

/// Supervised contrastive loss over the batch plus frozen aux rows.
///
/// Anchors are the batch rows. For anchor `i`, the candidate set is every
/// other batch row plus all aux rows; positives are same-label batch rows,
/// plus all aux rows when the anchor is real. Aux rows never anchor. With
/// `log_form` (default): `Σ_i (−1/|P(i)|) Σ_{p∈P(i)} [s_ip − logΣ_{k∈K(i)} e^{s_ik}]`
/// with `s` in units of `1/τ`; without it, the raw softmax-ratio variant.
pub fn loss_ext(
    tape: &mut Tape,
    z: Var,
    batch: &PairedBatch,
    aux: &Tensor,
    tau: f64,
    log_form: bool,
) -> Result<Var> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Argument(format!("tau must be > 0, got {tau}")));
    }
    let (rows, c) = matrix_dims(tape, z, "loss_ext")?;
    check_rows(rows, batch, "loss_ext")?;
    let labels = batch
        .labels()
        .ok_or_else(|| Error::contract("loss_ext", "batch must be labeled".to_string()))?;
    let &[m, ac] = aux.shape() else {
        return Err(Error::dim(
            "loss_ext",
            format!("aux must be 2-D, got {:?}", aux.shape()),
        ));
    };
    if m > 0 && ac != c {
        return Err(Error::dim(
            "loss_ext",
            format!("aux width {ac} does not match feature width {c}"),
        ));
    }
    aux.ensure_finite("loss_ext")?;

    let n_cand = rows + m;
    let zd = tape.value(z).data();

    // Scores s[i][j] = z_i · cand_j / τ, candidates = batch rows then aux.
    let mut scores = vec![0.0; rows * n_cand];
    for i in 0..rows {
        let zi = &zd[i * c..(i + 1) * c];
        for j in 0..rows {
            let zj = &zd[j * c..(j + 1) * c];
            let mut s = 0.0;
            for t in 0..c {
                s += zi[t] * zj[t];
            }
            scores[i * n_cand + j] = s / tau;
        }
        for j in 0..m {
            let ajr = &aux.data()[j * c..(j + 1) * c];
            let mut s = 0.0;
            for t in 0..c {
                s += zi[t] * ajr[t];
            }
            scores[i * n_cand + rows + j] = s / tau;
        }
    }

    let positive = |i: usize, j: usize| -> bool {
        if j < rows {
            j != i && labels[j] == labels[i]
        } else {
            !labels[i] // aux rows are positives for real anchors only
        }
    };

    let mut g = vec![0.0; rows * n_cand];
    let mut total = 0.0;
    for i in 0..rows {
        let row = &scores[i * n_cand..(i + 1) * n_cand];
        let p_count = (0..n_cand).filter(|&j| positive(i, j)).count();
        if p_count == 0 {
            return Err(Error::contract(
                "loss_ext",
                format!(
                    "anchor {i} has no positives; each class present needs at least two views"
                ),
            ));
        }
        let inv_p = 1.0 / p_count as f64;

        let mut mx = f64::NEG_INFINITY;
        for (j, &s) in row.iter().enumerate() {
            if j != i && s > mx {
                mx = s;
            }
        }
        let mut denom = 0.0;
        for (j, &s) in row.iter().enumerate() {
            if j != i {
                denom += (s - mx).exp();
            }
        }

        if log_form {
            // L_i = (−1/|P|) Σ_p (s_ip − mx − ln denom)
            let mut acc = 0.0;
            for (j, &s) in row.iter().enumerate() {
                if positive(i, j) {
                    acc += s - mx - denom.ln();
                }
            }
            total += -acc * inv_p;
            // g_ij = softmax_ij − [j ∈ P]·(1/|P|)
            for j in 0..n_cand {
                if j != i {
                    g[i * n_cand + j] = (row[j] - mx).exp() / denom;
                }
                if positive(i, j) {
                    g[i * n_cand + j] -= inv_p;
                }
            }
        } else {
            // Raw ratio variant: L_i = (−1/|P|) Σ_p softmax_ip
            let mut r_sum = 0.0;
            for (j, &s) in row.iter().enumerate() {
                let r = if j != i { (s - mx).exp() / denom } else { 0.0 };
                if positive(i, j) {
                    r_sum += r;
                }
            }
            total += -r_sum * inv_p;
            // g_ij = (−1/|P|)·r_ij·([j ∈ P] − Σ_p r_ip)
            for j in 0..n_cand {
                if j == i {
                    continue;
                }
                let r = (row[j] - mx).exp() / denom;
                let ind = if positive(i, j) { 1.0 } else { 0.0 };
                g[i * n_cand + j] = -inv_p * r * (ind - r_sum);
            }
        }
    }
    if !total.is_finite() {
        return Err(Error::numeric("loss_ext", format!("non-finite loss {total}")));
    }

    let op = ExtBackward {
        g,
        aux: aux.clone(),
        rows,
        c,
        tau,
    };
    Ok(push_fused(tape, Tensor::scalar(total), vec![z], Box::new(op)))
}

struct ExtBackward {
    g: Vec<f64>,
    aux: Tensor,
    rows: usize,
    c: usize,
    tau: f64,
}

impl FusedBackward for ExtBackward {
    fn backward(&self, inputs: &[&Tensor], go: f64, needs: &[bool]) -> Vec<Option<Tensor>> {
        let dz = needs[0].then(|| {
            let (rows, c) = (self.rows, self.c);
            let m = self.aux.data().len() / c.max(1);
            let n_cand = rows + m;
            let zd = inputs[0].data();

            // Anchor role: dZ_i += Σ_j g_ij·cand_j; candidate role (batch
            // columns only): dZ_j += Σ_i g_ij·z_i. Everything scaled go/τ.
            let mut dz = vec![0.0; rows * c];
            for i in 0..rows {
                for j in 0..n_cand {
                    let w = self.g[i * n_cand + j];
                    if w == 0.0 {
                        continue;
                    }
                    let cand = if j < rows {
                        &zd[j * c..(j + 1) * c]
                    } else {
                        &self.aux.data()[(j - rows) * c..(j - rows + 1) * c]
                    };
                    for t in 0..c {
                        dz[i * c + t] += w * cand[t];
                    }
                    if j < rows {
                        let zi = &zd[i * c..(i + 1) * c];
                        for t in 0..c {
                            dz[j * c + t] += w * zi[t];
                        }
                    }
                }
            }
            let scale = go / self.tau;
            dz.iter_mut().for_each(|v| *v *= scale);
            Tensor::from_vec(inputs[0].shape(), dz).expect("ext dZ shape")
        });
        vec![dz]
    }
}

/// Mean binary cross-entropy from logits; fake = 1.
///
/// Probabilities are the stable logistic of each logit, clamped to
/// `[1e-7, 1−1e-7]` before the logs; the clamp also zeroes the gradient of
/// saturated samples, keeping the derivative consistent with the value.
pub fn loss_ce(tape: &mut Tape, logits: Var, labels: &[bool]) -> Result<Var> {
    const LO: f64 = 1e-7;
    const HI: f64 = 1.0 - 1e-7;
    let t = tape.value(logits);
    let n = t.numel();
    if t.shape().len() > 1 {
        return Err(Error::dim(
            "loss_ce",
            format!("logits must be a vector, got {:?}", t.shape()),
        ));
    }
    if n == 0 {
        return Err(Error::contract("loss_ce", "empty batch".to_string()));
    }
    if labels.len() != n {
        return Err(Error::dim(
            "loss_ce",
            format!("{n} logits but {} labels", labels.len()),
        ));
    }

    let mut total = 0.0;
    for (i, &x) in t.data().iter().enumerate() {
        let p = crate::tensor::stable_sigmoid(x).clamp(LO, HI);
        let y = if labels[i] { 1.0 } else { 0.0 };
        total -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
    }
    total /= n as f64;
    if !total.is_finite() {
        return Err(Error::numeric("loss_ce", format!("non-finite loss {total}")));
    }

    let op = CeBackward {
        labels: labels.to_vec(),
        lo: LO,
        hi: HI,
    };
    Ok(push_fused(tape, Tensor::scalar(total), vec![logits], Box::new(op)))
}

struct CeBackward {
    labels: Vec<bool>,
    lo: f64,
    hi: f64,
}

impl FusedBackward for CeBackward {
    fn backward(&self, inputs: &[&Tensor], go: f64, needs: &[bool]) -> Vec<Option<Tensor>> {
        let dx = needs[0].then(|| {
            let n = inputs[0].numel() as f64;
            let g: Vec<f64> = inputs[0]
                .data()
                .iter()
                .zip(&self.labels)
                .map(|(&x, &fake)| {
                    let p = crate::tensor::stable_sigmoid(x);
                    if p < self.lo || p > self.hi {
                        0.0 // clamped: the loss is locally constant in x
                    } else {
                        let y = if fake { 1.0 } else { 0.0 };
                        go * (p - y) / n
                    }
                })
                .collect();
            Tensor::from_vec(inputs[0].shape(), g).expect("ce dX shape")
        });
        vec![dx]
    }
}

// ───────────────────────── shared helpers ─────────────────────────

fn matrix_dims(tape: &Tape, v: Var, op: &'static str) -> Result<(usize, usize)> {
    match *tape.value(v).shape() {
        [r, c] => Ok((r, c)),
        ref s => Err(Error::dim(op, format!("expected 2-D features, got {s:?}"))),
    }
}

fn check_rows(rows: usize, batch: &PairedBatch, op: &'static str) -> Result<()> {
    if rows != batch.rows() {
        return Err(Error::contract(
            op,
            format!("{rows} feature rows but batch describes {}", batch.rows()),
        ));
    }
    Ok(())
}

/// Dense `Z·Zᵀ` scaled by `inv_tau`, row-major `rows×rows`.
fn pairwise_scores(zd: &[f64], rows: usize, c: usize, inv_tau: f64) -> Vec<f64> {
    let mut s = vec![0.0; rows * rows];
    crate::tensor::matmul_nt_acc(zd, zd, rows, c, rows, &mut s);
    if inv_tau != 1.0 {
        s.iter_mut().for_each(|v| *v *= inv_tau);
    }
    s
}
