//! Reusable finite-difference verification of every loss kernel.
//!
//! [`gradient_check_suite`] drives [`finite_diff_check`] over random
//! configurations of each loss and reports the worst relative error seen
//! per loss. The CLI exposes it as a subcommand; the acceptance tests call
//! it directly. The homogeneous max-distance loss (and the composite that
//! contains it) is only probed at points where the argmax is unique by a
//! clear margin, since the hard max is not differentiable at ties.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{finite_diff_check, Tensor};

use super::{
    loss_ce, loss_d, loss_ext, loss_het, loss_hom, loss_ort, loss_tra, LossConfig, OrtMode,
    PairedBatch,
};

/// Worst finite-difference relative error observed for one loss.
#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub loss: &'static str,
    pub rounds: usize,
    pub max_rel_err: f64,
}

const STEP: f64 = 1e-6;
/// Required gap between the two largest cross-source distances for the
/// hard max to be treated as differentiable at the probe point.
const ARGMAX_MARGIN: f64 = 1e-3;

fn random_unit_rows(rng: &mut Rng, rows: usize, c: usize) -> Tensor {
    let mut data = vec![0.0; rows * c];
    for r in 0..rows {
        loop {
            let row = &mut data[r * c..(r + 1) * c];
            let mut norm = 0.0;
            for v in row.iter_mut() {
                *v = rng.normal();
                norm += *v * *v;
            }
            let norm = norm.sqrt();
            if norm > 1e-6 {
                row.iter_mut().for_each(|v| *v /= norm);
                break;
            }
        }
    }
    Tensor::from_vec(&[rows, c], data).expect("unit rows")
}

/// Two-views-per-source batch `[a0, a1, b0, b1, …]`.
fn paired(n_sources: usize, labels: Option<Vec<bool>>) -> PairedBatch {
    let mut src = Vec::with_capacity(2 * n_sources);
    for s in 0..n_sources {
        src.push(s as u32);
        src.push(s as u32);
    }
    let labels = labels.map(|per_source| {
        per_source
            .into_iter()
            .flat_map(|l| [l, l])
            .collect::<Vec<bool>>()
    });
    PairedBatch::new(src, labels).expect("paired batch")
}

/// True when the largest cross-source squared distance beats the runner-up
/// by more than `margin`.
fn argmax_margin_exceeds(z: &Tensor, batch: &PairedBatch, margin: f64) -> bool {
    let c = z.shape()[1];
    let mut dists: Vec<f64> = Vec::new();
    for i in 0..batch.rows() {
        for k in 0..batch.rows() {
            if batch.source_of(i) != batch.source_of(k) {
                let d: f64 = (0..c)
                    .map(|t| {
                        let d = z.data()[k * c + t] - z.data()[i * c + t];
                        d * d
                    })
                    .sum();
                dists.push(d);
            }
        }
    }
    dists.sort_by(|a, b| b.partial_cmp(a).unwrap());
    // Each unordered pair appears twice, so the true runner-up is dists[2].
    dists.len() >= 3 && dists[0] - dists[2] > margin
}

/// Unit rows redrawn until the hard-max argmax is unique by a margin.
fn unit_rows_away_from_ties(rng: &mut Rng, batch: &PairedBatch, c: usize) -> Result<Tensor> {
    for _ in 0..1000 {
        let z = random_unit_rows(rng, batch.rows(), c);
        if argmax_margin_exceeds(&z, batch, ARGMAX_MARGIN) {
            return Ok(z);
        }
    }
    Err(Error::contract(
        "gradient_check_suite",
        "could not sample a feature matrix with a unique argmax".to_string(),
    ))
}

/// Labels with at least one real and one fake source.
fn mixed_labels(rng: &mut Rng, n_sources: usize) -> Vec<bool> {
    let mut labels = vec![false; n_sources];
    labels[1] = true;
    for l in labels.iter_mut().skip(2) {
        *l = rng.unit_f64() < 0.5;
    }
    labels
}

/// Run every loss through `rounds` random finite-difference checks and
/// report the worst relative error per loss, in a fixed order.
pub fn gradient_check_suite(seed: u64, rounds: usize) -> Result<Vec<GradCheckEntry>> {
    if rounds == 0 {
        return Err(Error::Argument("rounds must be positive".to_string()));
    }
    let mut rng = Rng::new(seed);
    let mut entries = Vec::new();
    let modes = [OrtMode::Signed, OrtMode::Absolute, OrtMode::Squared];

    // Paired InfoNCE over the heterogeneous projections.
    let mut worst = 0.0f64;
    for round in 0..rounds {
        let n = 2 + round % 2;
        let c = 4 + round % 5;
        let batch = paired(n, None);
        let z = random_unit_rows(&mut rng, batch.rows(), c);
        let b = batch.clone();
        let err = finite_diff_check(&[z], |t, v| loss_het(t, v[0], &b, 0.1), STEP)?;
        worst = worst.max(err);
    }
    entries.push(GradCheckEntry {
        loss: "het",
        rounds,
        max_rel_err: worst,
    });

    // Worst cross-source distance, probed away from argmax ties.
    let mut worst = 0.0f64;
    for round in 0..rounds {
        let n = 2 + round % 2;
        let c = 4 + round % 5;
        let batch = paired(n, None);
        let z = unit_rows_away_from_ties(&mut rng, &batch, c)?;
        let b = batch.clone();
        let err = finite_diff_check(&[z], |t, v| loss_hom(t, v[0], &b, None), STEP)?;
        worst = worst.max(err);
    }
    entries.push(GradCheckEntry {
        loss: "hom",
        rounds,
        max_rel_err: worst,
    });

    // Cosine separation between the two projection spaces, all modes.
    let mut worst = 0.0f64;
    for round in 0..rounds {
        let rows = 4 + 2 * (round % 2);
        let c = 4 + round % 5;
        let a = random_unit_rows(&mut rng, rows, c);
        let b = random_unit_rows(&mut rng, rows, c);
        let mode = modes[round % modes.len()];
        let err = finite_diff_check(&[a, b], |t, v| loss_ort(t, v[0], v[1], mode), STEP)?;
        worst = worst.max(err);
    }
    entries.push(GradCheckEntry {
        loss: "ort",
        rounds,
        max_rel_err: worst,
    });

    // Stage-1 composite, cycling the ablation switches.
    let mut worst = 0.0f64;
    for round in 0..rounds {
        let n = 2 + round % 2;
        let c = 4 + round % 5;
        let batch = paired(n, None);
        let zh = unit_rows_away_from_ties(&mut rng, &batch, c)?;
        let ze = random_unit_rows(&mut rng, batch.rows(), c);
        let cfg = LossConfig {
            lambda: if round % 2 == 0 { 0.1 } else { 0.5 },
            ort_mode: modes[round % modes.len()],
            enable_het: round % 3 != 1,
            enable_ort: round % 3 != 2,
            ..LossConfig::default()
        };
        let b = batch.clone();
        let err =
            finite_diff_check(&[zh, ze], |t, v| loss_tra(t, v[0], v[1], &b, &cfg), STEP)?;
        worst = worst.max(err);
    }
    entries.push(GradCheckEntry {
        loss: "tra",
        rounds,
        max_rel_err: worst,
    });

    // Extended supervised contrastive loss, with and without aux rows.
    let mut worst = 0.0f64;
    for round in 0..rounds {
        let n = 2 + round % 2;
        let c = 4 + round % 5;
        let batch = paired(n, Some(mixed_labels(&mut rng, n)));
        let z = random_unit_rows(&mut rng, batch.rows(), c);
        let aux = if round % 2 == 0 {
            random_unit_rows(&mut rng, 3, c)
        } else {
            Tensor::zeros(&[0, c])
        };
        let log_form = round % 3 != 1;
        let b = batch.clone();
        let err = finite_diff_check(
            &[z],
            |t, v| loss_ext(t, v[0], &b, &aux, 0.1, log_form),
            STEP,
        )?;
        worst = worst.max(err);
    }
    entries.push(GradCheckEntry {
        loss: "ext",
        rounds,
        max_rel_err: worst,
    });

    // Mean binary cross-entropy from logits.
    let mut worst = 0.0f64;
    for round in 0..rounds {
        let n = 4 + round % 6;
        let data: Vec<f64> = (0..n).map(|_| rng.range_f64(-2.0, 2.0)).collect();
        let logits = Tensor::from_vec(&[n], data).expect("logits");
        let labels: Vec<bool> = (0..n).map(|_| rng.unit_f64() < 0.5).collect();
        let err = finite_diff_check(&[logits], |t, v| loss_ce(t, v[0], &labels), STEP)?;
        worst = worst.max(err);
    }
    entries.push(GradCheckEntry {
        loss: "ce",
        rounds,
        max_rel_err: worst,
    });

    // Stage-2 composite over both its trainable inputs.
    let mut worst = 0.0f64;
    for round in 0..rounds {
        let n = 2 + round % 2;
        let c = 4 + round % 5;
        let batch = paired(n, Some(mixed_labels(&mut rng, n)));
        let z = random_unit_rows(&mut rng, batch.rows(), c);
        let logit_data: Vec<f64> = (0..batch.rows()).map(|_| rng.range_f64(-2.0, 2.0)).collect();
        let logits = Tensor::from_vec(&[batch.rows()], logit_data).expect("logits");
        let aux = random_unit_rows(&mut rng, 3, c);
        let cfg = LossConfig {
            ext_use_aux: round % 2 == 0,
            ext_log_form: round % 3 != 1,
            ..LossConfig::default()
        };
        let b = batch.clone();
        let err = finite_diff_check(
            &[z, logits],
            |t, v| loss_d(t, v[0], v[1], &b, &aux, &cfg),
            STEP,
        )?;
        worst = worst.max(err);
    }
    entries.push(GradCheckEntry {
        loss: "d",
        rounds,
        max_rel_err: worst,
    });

    Ok(entries)
}
