//! Two-stage training.
//!
//! Stage 1 learns the trace representation on real images only: the
//! encoder plus the `f_hom`/`f_het` heads minimize the composite
//! homogeneity + instance-discrimination + orthogonality objective.
//!
//! Stage 2 freezes the backbone bitwise and trains the auxiliary head and
//! the classifier: per batch, the frozen `f_hom` projections of the real
//! views become extra contrastive candidates (positives for real anchors,
//! negatives for fake anchors), and the classifier is fit with sigmoid
//! cross-entropy. Setting `ext_weight = 0` (and optionally unfreezing the
//! backbone on a fresh model) reduces the stage to plain BCE training —
//! the baseline the full method is compared against.
//!
//! Optimization is plain SGD with momentum and L2 weight decay. Given a
//! seed, a config, and a manifest, every checkpoint byte is reproducible.

use std::collections::BTreeMap;

use crate::data::{make_stage1_batch, make_stage2_batch, AugmentConfig, ImageSet, Label};
use crate::error::{Error, Result};
use crate::losses::{loss_ce, loss_ext, loss_het, loss_hom, loss_ort, LossConfig, PairedBatch};
use crate::model::{FrozenFlags, ModelBundle};
use crate::rng::{streams, Rng};
use crate::tensor::{Tape, Tensor, Var};

/// SGD with momentum and L2 weight decay:
/// `v ← μ·v + g + wd·θ`, `θ ← θ − lr·v`.
///
/// Velocities are kept per parameter name and created on first use, so an
/// optimizer can be shared across steps that touch different subsets.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Result<Sgd> {
        if !(lr >= 0.0) || !lr.is_finite() {
            return Err(Error::Argument(format!(
                "learning rate must be finite and ≥ 0, got {lr}"
            )));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Argument(format!(
                "momentum must be in [0,1), got {momentum}"
            )));
        }
        if !(weight_decay >= 0.0) || !weight_decay.is_finite() {
            return Err(Error::Argument(format!(
                "weight decay must be finite and ≥ 0, got {weight_decay}"
            )));
        }
        Ok(Sgd {
            lr,
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        })
    }

    /// Apply one update to every trainable parameter that received a
    /// gradient. Parameters without gradients (or frozen ones) are left
    /// untouched, as are their velocities.
    pub fn step(
        &mut self,
        params: &mut [(String, &mut Tensor, bool)],
        grads: &BTreeMap<String, Tensor>,
    ) -> Result<()> {
        for (name, tensor, trainable) in params.iter_mut() {
            if !*trainable {
                continue;
            }
            let Some(g) = grads.get(name.as_str()) else {
                continue;
            };
            if g.shape() != tensor.shape() {
                return Err(Error::dim(
                    "sgd_step",
                    format!(
                        "gradient shape {:?} does not match parameter {name} {:?}",
                        g.shape(),
                        tensor.shape()
                    ),
                ));
            }
            if g.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::numeric(
                    "sgd_step",
                    format!("non-finite gradient for parameter {name}"),
                ));
            }
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(tensor.shape()));
            let theta = tensor.data_mut();
            let vel = v.data_mut();
            for i in 0..theta.len() {
                vel[i] = self.momentum * vel[i] + g.data()[i] + self.weight_decay * theta[i];
                theta[i] -= self.lr * vel[i];
            }
        }
        Ok(())
    }
}

/// Gather gradients for a registered bundle into a name-keyed map.
fn collect_grads(
    bundle: &ModelBundle,
    ordered: &[Var],
    grads: &crate::tensor::Gradients,
) -> BTreeMap<String, Tensor> {
    let mut out = BTreeMap::new();
    for (i, (name, _, trainable)) in bundle.named_params().iter().enumerate() {
        if *trainable {
            if let Some(g) = grads.get(ordered[i]) {
                out.insert(name.clone(), g.clone());
            }
        }
    }
    out
}

/// Write freshly stepped values back into the bundle — handled implicitly
/// since `Sgd::step` mutates the bundle's tensors in place.
///
/// One logged line of training: per-epoch means of the loss terms.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean total loss over the epoch's steps.
    pub total: f64,
    /// Mean value of each component, keyed by a short stable name
    /// (`hom`, `het`, `ort`, `ext`, `ce`).
    pub components: Vec<(&'static str, f64)>,
}

impl EpochLog {
    pub fn component(&self, name: &str) -> Option<f64> {
        self.components
            .iter()
            .find(|(n, _)| *n == name)
            .map(|&(_, v)| v)
    }
}

/// Stage-1 hyperparameters.
#[derive(Debug, Clone)]
pub struct Stage1Config {
    pub epochs: usize,
    /// Sources per batch (the batch holds 2·N views).
    pub batch_n: usize,
    pub loss: LossConfig,
    pub augment: AugmentConfig,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config {
            epochs: 30,
            batch_n: 64,
            loss: LossConfig::default(),
            augment: AugmentConfig::default(),
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.001,
            seed: 0,
        }
    }
}

impl Stage1Config {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Argument("epochs must be ≥ 1".to_string()));
        }
        if self.batch_n < 2 {
            return Err(Error::Argument("stage-1 batch needs ≥ 2 sources".to_string()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Argument(format!(
                "training learning rate must be > 0, got {}",
                self.lr
            )));
        }
        self.loss.validate()?;
        self.augment.validate()
    }
}

/// Stage-2 hyperparameters.
#[derive(Debug, Clone)]
pub struct Stage2Config {
    pub epochs: usize,
    pub batch_real: usize,
    pub batch_fake: usize,
    pub loss: LossConfig,
    /// Weight of the contrastive extension term; `0` gives plain BCE.
    pub ext_weight: f64,
    /// Freeze encoder + stage-1 heads (the published recipe). `false`
    /// trains everything — used by the end-to-end BCE baseline.
    pub freeze_backbone: bool,
    pub augment: AugmentConfig,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Stage2Config {
            epochs: 10,
            batch_real: 32,
            batch_fake: 32,
            loss: LossConfig::default(),
            ext_weight: 1.0,
            freeze_backbone: true,
            augment: AugmentConfig::default(),
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.001,
            seed: 0,
        }
    }
}

impl Stage2Config {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Argument("epochs must be ≥ 1".to_string()));
        }
        if self.batch_real == 0 || self.batch_fake == 0 {
            return Err(Error::Argument(
                "stage-2 batch needs ≥ 1 source per class".to_string(),
            ));
        }
        if !(self.ext_weight >= 0.0) || !self.ext_weight.is_finite() {
            return Err(Error::Argument(format!(
                "ext weight must be finite and ≥ 0, got {}",
                self.ext_weight
            )));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Argument(format!(
                "training learning rate must be > 0, got {}",
                self.lr
            )));
        }
        self.loss.validate()?;
        self.augment.validate()
    }
}

fn with_step_context(e: Error, epoch: usize, step: usize) -> Error {
    match e {
        Error::Numeric { op, detail } => Error::Numeric {
            op,
            detail: format!("epoch {epoch} step {step}: {detail}"),
        },
        other => other,
    }
}

/// Train the encoder and the two stage-1 heads on real images.
///
/// `real` must hold only real train records (the batch builder enforces
/// it). Returns one log entry per epoch with means of `hom`/`het`/`ort`.
pub fn train_stage1(
    bundle: &mut ModelBundle,
    real: &ImageSet,
    cfg: &Stage1Config,
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    bundle.frozen = FrozenFlags::stage1();
    let stage_rng = Rng::new(cfg.seed).substream(streams::STAGE1);
    let mut opt = Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay)?;
    let steps = (real.len() / cfg.batch_n).max(1);

    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut sums = [0.0f64; 4]; // total, hom, het, ort
        for step in 0..steps {
            let brng = stage_rng.substream((epoch * steps + step) as u64);
            let (x, batch) = make_stage1_batch(real, cfg.batch_n, &cfg.augment, &brng)?;

            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let vars = bundle.register(&mut tape);
            let e = vars.encode(&mut tape, xv)?;
            let z_hom = vars.project_hom(&mut tape, e)?;
            let z_het = vars.project_het(&mut tape, e)?;

            let hom = loss_hom(&mut tape, z_hom, &batch, cfg.loss.hom_smooth_tau)?;
            let mut total = hom;
            let mut het_val = 0.0;
            if cfg.loss.enable_het {
                let het = loss_het(&mut tape, z_het, &batch, cfg.loss.tau)?;
                het_val = tape.value(het).data()[0];
                total = tape.add(total, het)?;
            }
            let mut ort_val = 0.0;
            if cfg.loss.enable_ort {
                let ort = loss_ort(&mut tape, z_hom, z_het, cfg.loss.ort_mode)?;
                ort_val = tape.value(ort).data()[0];
                let scaled = tape.scale(ort, cfg.loss.lambda)?;
                total = tape.add(total, scaled)?;
            }

            sums[0] += tape.value(total).data()[0];
            sums[1] += tape.value(hom).data()[0];
            sums[2] += het_val;
            sums[3] += ort_val;

            let grads = tape
                .backward(total)
                .map_err(|e| with_step_context(e, epoch, step))?;
            let grad_map = collect_grads(bundle, &vars.ordered(), &grads);
            opt.step(&mut bundle.named_params_mut(), &grad_map)
                .map_err(|e| with_step_context(e, epoch, step))?;
        }
        let n = steps as f64;
        logs.push(EpochLog {
            epoch,
            total: sums[0] / n,
            components: vec![
                ("hom", sums[1] / n),
                ("het", sums[2] / n),
                ("ort", sums[3] / n),
            ],
        });
    }
    Ok(logs)
}

/// Frozen per-batch anchors: `f_hom(encoder(real rows))` evaluated with
/// gradients off. Returns an `[n_real_rows, C]` tensor.
fn frozen_aux_features(bundle: &ModelBundle, x: &Tensor, batch: &PairedBatch) -> Result<Tensor> {
    let labels = batch
        .labels()
        .ok_or_else(|| Error::contract("train_stage2", "stage-2 batch must be labeled".to_string()))?;
    let real_rows: Vec<usize> = (0..batch.rows()).filter(|&r| !labels[r]).collect();
    let &[_, c, h, w] = x.shape() else {
        return Err(Error::dim("train_stage2", "batch tensor must be [B,3,S,S]"));
    };
    let mut data = Vec::with_capacity(real_rows.len() * c * h * w);
    for &r in &real_rows {
        data.extend_from_slice(&x.data()[r * c * h * w..(r + 1) * c * h * w]);
    }
    let real_x = Tensor::from_vec(&[real_rows.len(), c, h, w], data)?;

    // A throwaway tape with no trainable leaves: pure evaluation.
    let mut frozen = bundle.clone();
    frozen.frozen = FrozenFlags {
        encoder: true,
        f_hom: true,
        f_het: true,
        f_aux: true,
        classifier: true,
    };
    let mut tape = Tape::new();
    let xv = tape.constant(real_x);
    let vars = frozen.register(&mut tape);
    let e = vars.encode(&mut tape, xv)?;
    let z = vars.project_hom(&mut tape, e)?;
    Ok(tape.value(z).clone())
}

/// Train the auxiliary head and classifier (stage 2).
///
/// With `freeze_backbone` (default) the encoder and stage-1 heads stay
/// bitwise unchanged. Per batch the frozen trace features of the real
/// views extend the contrastive candidate set; the total objective is
/// `ext_weight·L_ext + γ·L_ce`.
pub fn train_stage2(
    bundle: &mut ModelBundle,
    real: &ImageSet,
    fake: &ImageSet,
    cfg: &Stage2Config,
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    if real.records.iter().any(|r| r.label != Label::Real)
        || fake.records.iter().any(|r| r.label != Label::Fake)
    {
        return Err(Error::contract(
            "train_stage2",
            "image sets must be single-class (real set real, fake set fake)".to_string(),
        ));
    }
    bundle.frozen = if cfg.freeze_backbone {
        FrozenFlags::stage2()
    } else {
        FrozenFlags {
            encoder: false,
            f_hom: false,
            f_het: false,
            f_aux: false,
            classifier: false,
        }
    };
    let stage_rng = Rng::new(cfg.seed).substream(streams::STAGE2);
    let mut opt = Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay)?;
    let steps = ((real.len() / cfg.batch_real).min(fake.len() / cfg.batch_fake)).max(1);
    let use_ext = cfg.ext_weight > 0.0;

    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut sums = [0.0f64; 3]; // total, ext, ce
        for step in 0..steps {
            let brng = stage_rng.substream((epoch * steps + step) as u64);
            let (x, batch) =
                make_stage2_batch(real, fake, cfg.batch_real, cfg.batch_fake, &cfg.augment, &brng)?;
            let labels = batch.labels().expect("stage-2 batches are labeled").to_vec();

            let aux = if use_ext && cfg.loss.ext_use_aux {
                frozen_aux_features(bundle, &x, &batch)?
            } else {
                Tensor::zeros(&[0, bundle.config.proj_dim])
            };

            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let vars = bundle.register(&mut tape);
            let e = vars.encode(&mut tape, xv)?;
            let logits = vars.classify(&mut tape, e)?;
            let logits = tape.reshape(logits, &[batch.rows()])?;
            let ce = loss_ce(&mut tape, logits, &labels)?;
            let ce_scaled = tape.scale(ce, cfg.loss.gamma)?;

            let mut ext_val = 0.0;
            let total = if use_ext {
                let z = vars.project_aux(&mut tape, e)?;
                let ext = loss_ext(&mut tape, z, &batch, &aux, cfg.loss.tau, cfg.loss.ext_log_form)?;
                ext_val = tape.value(ext).data()[0];
                let ext_scaled = tape.scale(ext, cfg.ext_weight)?;
                tape.add(ext_scaled, ce_scaled)?
            } else {
                ce_scaled
            };

            sums[0] += tape.value(total).data()[0];
            sums[1] += ext_val;
            sums[2] += tape.value(ce).data()[0];

            let grads = tape
                .backward(total)
                .map_err(|e| with_step_context(e, epoch, step))?;
            let grad_map = collect_grads(bundle, &vars.ordered(), &grads);
            opt.step(&mut bundle.named_params_mut(), &grad_map)
                .map_err(|e| with_step_context(e, epoch, step))?;
        }
        let n = steps as f64;
        logs.push(EpochLog {
            epoch,
            total: sums[0] / n,
            components: vec![("ext", sums[1] / n), ("ce", sums[2] / n)],
        });
    }
    Ok(logs)
}

/// Render epoch logs as tab-separated text: `epoch`, `total`, then one
/// column per component.
pub fn logs_to_tsv(logs: &[EpochLog]) -> String {
    let mut out = String::new();
    if logs.is_empty() {
        return out;
    }
    out.push_str("epoch\ttotal");
    for (name, _) in &logs[0].components {
        out.push('\t');
        out.push_str(name);
    }
    out.push('\n');
    for l in logs {
        out.push_str(&format!("{}\t{:.6}", l.epoch, l.total));
        for (_, v) in &l.components {
            out.push_str(&format!("\t{v:.6}"));
        }
        out.push('\n');
    }
    out
}
