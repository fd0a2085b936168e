//! Loss kernels for the two training stages.
//!
//! All losses are fused tape operations: the forward pass computes the
//! scalar directly (with max-subtraction wherever a softmax appears), and
//! the backward rule implements the hand-derived adjoint, verified against
//! finite differences and brute-force oracles in the tests.
//!
//! Stage 1 (real images only) shapes the encoder through
//! [`loss_tra`] = `L_hom + L_het + λ·L_ort`:
//!
//! * [`loss_het`] — paired InfoNCE over heterogeneous projections: each
//!   view's positive is the other view of the same source; every other row
//!   in the batch is a candidate.
//! * [`loss_hom`] — the worst cross-source squared distance between
//!   homogeneous projections; minimizing it pulls all sources toward a
//!   shared trace representation.
//! * [`loss_ort`] — cosine alignment between the two projection spaces,
//!   driving them apart (signed, absolute, or squared).
//!
//! Stage 2 trains an auxiliary head and classifier through
//! [`loss_d`] = `L_ext + γ·L_ce`:
//!
//! * [`loss_ext`] — supervised contrastive loss whose candidate set is the
//!   batch plus frozen auxiliary rows; aux rows count as extra positives
//!   for real anchors and extra negatives for fake anchors, and are never
//!   anchors themselves.
//! * [`loss_ce`] — mean binary cross-entropy from logits (fake = 1).

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

mod gradcheck;
mod kernels;

pub use gradcheck::{gradient_check_suite, GradCheckEntry};
pub use kernels::{loss_ce, loss_ext, loss_het, loss_hom, loss_ort};

/// How [`loss_ort`] maps each row's cosine before summing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OrtMode {
    /// Identity: minimizing drives cosines toward −1 (antiparallel).
    #[default]
    Signed,
    /// Absolute value: minimizing drives cosines toward 0 (orthogonal).
    Absolute,
    /// Square: smooth variant of `Absolute`.
    Squared,
}

impl std::str::FromStr for OrtMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<OrtMode> {
        match s {
            "signed" => Ok(OrtMode::Signed),
            "absolute" => Ok(OrtMode::Absolute),
            "squared" => Ok(OrtMode::Squared),
            other => Err(Error::Argument(format!(
                "unknown orthogonality mode {other:?} (expected signed|absolute|squared)"
            ))),
        }
    }
}

impl std::fmt::Display for OrtMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OrtMode::Signed => "signed",
            OrtMode::Absolute => "absolute",
            OrtMode::Squared => "squared",
        })
    }
}

/// Hyperparameters shared by the loss combinators.
#[derive(Debug, Clone)]
pub struct LossConfig {
    /// Softmax temperature for both contrastive losses.
    pub tau: f64,
    /// Weight of the orthogonality term inside [`loss_tra`].
    pub lambda: f64,
    /// Weight of the cross-entropy term inside [`loss_d`].
    pub gamma: f64,
    /// Cosine shaping for [`loss_ort`].
    pub ort_mode: OrtMode,
    /// Whether stage 2 extends the candidate set with frozen aux rows.
    pub ext_use_aux: bool,
    /// Ablation switch for the heterogeneous term of [`loss_tra`].
    pub enable_het: bool,
    /// Ablation switch for the orthogonality term of [`loss_tra`].
    pub enable_ort: bool,
    /// Standard log-ratio form of [`loss_ext`] (default). `false` selects
    /// the raw softmax-ratio variant kept for comparison; its gradients are
    /// poorly scaled and its value can be negative.
    pub ext_log_form: bool,
    /// `Some(t)` replaces the hard max of [`loss_hom`] with a logsumexp
    /// smooth max at temperature `t`; `None` (default) keeps the exact max.
    pub hom_smooth_tau: Option<f64>,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau: 0.07,
            lambda: 0.1,
            gamma: 0.5,
            ort_mode: OrtMode::Signed,
            ext_use_aux: true,
            enable_het: true,
            enable_ort: true,
            ext_log_form: true,
            hom_smooth_tau: None,
        }
    }
}

impl LossConfig {
    /// Validate value ranges; call after construction from user input.
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Argument(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Argument(format!("lambda must be ≥ 0, got {}", self.lambda)));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Argument(format!("gamma must be ≥ 0, got {}", self.gamma)));
        }
        if let Some(t) = self.hom_smooth_tau {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::Argument(format!(
                    "smooth-max temperature must be > 0, got {t}"
                )));
            }
        }
        Ok(())
    }
}

/// A batch of paired augmented views.
///
/// Row `i` of the projected feature matrix corresponds to `source_id[i]`;
/// each source contributes exactly two rows (its two augmentations), and
/// `pair_of` maps each row to its sibling. Labels are present for stage-2
/// batches only; both rows of a source must share one label.
#[derive(Debug, Clone)]
pub struct PairedBatch {
    source_id: Vec<u32>,
    pairing: Vec<usize>,
    labels: Option<Vec<bool>>,
}

impl PairedBatch {
    /// Build and validate a batch from per-row source ids and optional
    /// per-row fake flags (`true` = fake).
    pub fn new(source_id: Vec<u32>, labels: Option<Vec<bool>>) -> Result<PairedBatch> {
        let rows = source_id.len();
        if rows == 0 || rows % 2 != 0 {
            return Err(Error::contract(
                "paired_batch",
                format!("need a positive even row count, got {rows}"),
            ));
        }
        if let Some(l) = &labels {
            if l.len() != rows {
                return Err(Error::contract(
                    "paired_batch",
                    format!("{rows} rows but {} labels", l.len()),
                ));
            }
        }

        // Each source id must appear exactly twice; its rows pair up.
        let mut first_row: std::collections::HashMap<u32, usize> = std::collections::HashMap::new();
        let mut pairing = vec![usize::MAX; rows];
        for (i, &sid) in source_id.iter().enumerate() {
            match first_row.entry(sid) {
                std::collections::hash_map::Entry::Vacant(e) => {
                    e.insert(i);
                }
                std::collections::hash_map::Entry::Occupied(e) => {
                    let j = *e.get();
                    if pairing[j] != usize::MAX {
                        return Err(Error::contract(
                            "paired_batch",
                            format!("source {sid} appears more than twice"),
                        ));
                    }
                    pairing[j] = i;
                    pairing[i] = j;
                    if let Some(l) = &labels {
                        if l[i] != l[j] {
                            return Err(Error::contract(
                                "paired_batch",
                                format!("views of source {sid} have conflicting labels"),
                            ));
                        }
                    }
                }
            }
        }
        if let Some((i, _)) = pairing.iter().enumerate().find(|(_, &p)| p == usize::MAX) {
            return Err(Error::contract(
                "paired_batch",
                format!("source {} appears only once", source_id[i]),
            ));
        }
        Ok(PairedBatch {
            source_id,
            pairing,
            labels,
        })
    }

    /// Number of rows (2N).
    pub fn rows(&self) -> usize {
        self.source_id.len()
    }

    /// Source identifier of a row.
    pub fn source_of(&self, row: usize) -> u32 {
        self.source_id[row]
    }

    /// The row holding the other augmentation of the same source.
    pub fn pair_of(&self, row: usize) -> usize {
        self.pairing[row]
    }

    /// Per-row fake flags, when this is a labeled (stage-2) batch.
    pub fn labels(&self) -> Option<&[bool]> {
        self.labels.as_deref()
    }

    /// Reorder rows by `perm` (new row `i` = old row `perm[i]`), keeping
    /// source ids, labels, and pairing consistent. Test helper for the
    /// permutation-invariance property.
    pub fn permuted(&self, perm: &[usize]) -> Result<PairedBatch> {
        if perm.len() != self.rows() {
            return Err(Error::contract("paired_batch", "permutation length mismatch".to_string()));
        }
        let source_id = perm.iter().map(|&p| self.source_id[p]).collect();
        let labels = self
            .labels
            .as_ref()
            .map(|l| perm.iter().map(|&p| l[p]).collect());
        PairedBatch::new(source_id, labels)
    }
}

/// Stage-1 composite: `L_hom + [het]·L_het + [ort]·λ·L_ort`.
///
/// `z_hom` and `z_het` are the two projection matrices for the SAME batch
/// rows. The batch must be unlabeled or all-real: the trace representation
/// is learned from real images only.
pub fn loss_tra(
    tape: &mut Tape,
    z_hom: Var,
    z_het: Var,
    batch: &PairedBatch,
    cfg: &LossConfig,
) -> Result<Var> {
    cfg.validate()?;
    if let Some(labels) = batch.labels() {
        if labels.iter().any(|&fake| fake) {
            return Err(Error::contract(
                "loss_tra",
                "stage-1 batches must contain real images only".to_string(),
            ));
        }
    }
    let mut total = loss_hom(tape, z_hom, batch, cfg.hom_smooth_tau)?;
    if cfg.enable_het {
        let het = loss_het(tape, z_het, batch, cfg.tau)?;
        total = tape.add(total, het)?;
    }
    if cfg.enable_ort {
        let ort = loss_ort(tape, z_hom, z_het, cfg.ort_mode)?;
        let scaled = tape.scale(ort, cfg.lambda)?;
        total = tape.add(total, scaled)?;
    }
    Ok(total)
}

/// Stage-2 composite: `L_ext + γ·L_ce`.
///
/// `z` holds the auxiliary-head projections of the batch rows, `logits`
/// the classifier outputs for the same rows, and `aux` the frozen
/// homogeneous features used to extend the candidate set (ignored when
/// `cfg.ext_use_aux` is false). The batch must be labeled.
pub fn loss_d(
    tape: &mut Tape,
    z: Var,
    logits: Var,
    batch: &PairedBatch,
    aux: &Tensor,
    cfg: &LossConfig,
) -> Result<Var> {
    cfg.validate()?;
    let labels = batch
        .labels()
        .ok_or_else(|| Error::contract("loss_d", "stage-2 batch must be labeled".to_string()))?
        .to_vec();
    let empty;
    let aux_used = if cfg.ext_use_aux {
        aux
    } else {
        let width = match *tape.value(z).shape() {
            [_, c] => c,
            _ => 0,
        };
        empty = Tensor::zeros(&[0, width]);
        &empty
    };
    let ext = loss_ext(tape, z, batch, aux_used, cfg.tau, cfg.ext_log_form)?;
    let ce = loss_ce(tape, logits, &labels)?;
    let ce_scaled = tape.scale(ce, cfg.gamma)?;
    tape.add(ext, ce_scaled)
}

#[cfg(test)]
mod tests;
