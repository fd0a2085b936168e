//! Loss-kernel verification: closed-form spot values, independently written
//! brute-force oracles, batch-contract errors, invariance properties, and
//! finite-difference gradient checks.

use proptest::prelude::*;

use crate::error::Error;
use crate::rng::Rng;
use crate::tensor::{finite_diff_check, Tape, Tensor};

use super::*;

// ───────────────────────── test helpers ─────────────────────────

/// Unit-norm feature matrix with `rows` rows of width `c`.
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
    Tensor::from_vec(&[rows, c], data).unwrap()
}

/// Batch whose rows are `[a0, a1, b0, b1, …]` (two views per source).
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
    PairedBatch::new(src, labels).unwrap()
}

fn eval_loss<F>(f: F) -> f64
where
    F: FnOnce(&mut Tape) -> crate::Result<crate::tensor::Var>,
{
    let mut tape = Tape::new();
    let v = f(&mut tape).unwrap();
    tape.value(v).item().unwrap()
}

// ───────────────────────── brute-force oracles ─────────────────────────
// Written in plain scalar style, deliberately independent of the kernels'
// fused softmax algebra.

fn oracle_het(z: &Tensor, batch: &PairedBatch, tau: f64) -> f64 {
    let c = z.shape()[1];
    let rows = batch.rows();
    let dot = |i: usize, k: usize| -> f64 {
        (0..c).map(|t| z.data()[i * c + t] * z.data()[k * c + t]).sum::<f64>()
    };
    let mut total = 0.0;
    for i in 0..rows {
        let p = batch.pair_of(i);
        let num = (dot(i, p) / tau).exp();
        let mut den = 0.0;
        for k in 0..rows {
            if k != i {
                den += (dot(i, k) / tau).exp();
            }
        }
        total += -(num / den).ln();
    }
    total
}

fn oracle_hom(z: &Tensor, batch: &PairedBatch) -> f64 {
    let c = z.shape()[1];
    let mut best = f64::NEG_INFINITY;
    for i in 0..batch.rows() {
        for k in 0..batch.rows() {
            if batch.source_of(i) == batch.source_of(k) {
                continue;
            }
            let d: f64 = (0..c)
                .map(|t| {
                    let d = z.data()[k * c + t] - z.data()[i * c + t];
                    d * d
                })
                .sum();
            if d > best {
                best = d;
            }
        }
    }
    best
}

fn oracle_ort(a: &Tensor, b: &Tensor, mode: OrtMode) -> f64 {
    let c = a.shape()[1];
    let rows = a.shape()[0];
    let mut total = 0.0;
    for i in 0..rows {
        let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
        for t in 0..c {
            let (x, y) = (a.data()[i * c + t], b.data()[i * c + t]);
            dot += x * y;
            na += x * x;
            nb += y * y;
        }
        let cos = dot / (na.sqrt() * nb.sqrt()).max(1e-12);
        total += match mode {
            OrtMode::Signed => cos,
            OrtMode::Absolute => cos.abs(),
            OrtMode::Squared => cos * cos,
        };
    }
    total
}

/// Supervised contrastive oracle over batch ∪ aux, log form.
fn oracle_ext(z: &Tensor, labels: &[bool], aux: &Tensor, tau: f64, log_form: bool) -> f64 {
    let c = z.shape()[1];
    let rows = z.shape()[0];
    let m = aux.shape()[0];
    let cand = |j: usize, t: usize| -> f64 {
        if j < rows {
            z.data()[j * c + t]
        } else {
            aux.data()[(j - rows) * c + t]
        }
    };
    let score = |i: usize, j: usize| -> f64 {
        (0..c).map(|t| z.data()[i * c + t] * cand(j, t)).sum::<f64>() / tau
    };
    let is_pos = |i: usize, j: usize| -> bool {
        if j < rows {
            j != i && labels[j] == labels[i]
        } else {
            !labels[i]
        }
    };
    let mut total = 0.0;
    for i in 0..rows {
        let pos: Vec<usize> = (0..rows + m).filter(|&j| is_pos(i, j)).collect();
        let mut den = 0.0;
        for j in 0..rows + m {
            if j != i {
                den += score(i, j).exp();
            }
        }
        let mut acc = 0.0;
        for &p in &pos {
            let ratio = score(i, p).exp() / den;
            acc += if log_form { ratio.ln() } else { ratio };
        }
        total += -acc / pos.len() as f64;
    }
    total
}

fn oracle_ce(logits: &[f64], labels: &[bool]) -> f64 {
    let mut total = 0.0;
    for (&x, &fake) in logits.iter().zip(labels) {
        let p = (1.0 / (1.0 + (-x).exp())).clamp(1e-7, 1.0 - 1e-7);
        let y = if fake { 1.0 } else { 0.0 };
        total -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
    }
    total / logits.len() as f64
}

// ───────────────────────── loss_het ─────────────────────────

#[test]
fn het_single_pair_batch_is_zero() {
    let batch = paired(1, None);
    let mut rng = Rng::new(1);
    let z = random_unit_rows(&mut rng, 2, 8);
    let v = eval_loss(|t| {
        let zv = t.leaf(z.clone());
        loss_het(t, zv, &batch, 0.07)
    });
    assert!(v.abs() <= 1e-12, "{v}");
}

#[test]
fn het_identical_rows_give_4_ln3_for_any_tau() {
    let batch = paired(2, None);
    let row = [0.5f64, -0.5, 0.5, -0.5]; // unit norm
    let z = Tensor::from_vec(&[4, 4], row.repeat(4)).unwrap();
    let want = 4.0 * 3.0f64.ln();
    for tau in [0.05, 0.07, 0.3, 1.0] {
        let v = eval_loss(|t| {
            let zv = t.leaf(z.clone());
            loss_het(t, zv, &batch, tau)
        });
        assert!((v - want).abs() <= 1e-9, "tau {tau}: {v} vs {want}");
    }
}

#[test]
fn het_matches_double_loop_oracle_on_random_batches() {
    let mut rng = Rng::new(77);
    for round in 0..20 {
        let batch = paired(3, None);
        let z = random_unit_rows(&mut rng, 6, 16);
        let tau = rng.range_f64(0.05, 1.0);
        let got = eval_loss(|t| {
            let zv = t.leaf(z.clone());
            loss_het(t, zv, &batch, tau)
        });
        let want = oracle_het(&z, &batch, tau);
        assert!((got - want).abs() <= 1e-10, "round {round}: {got} vs {want}");
    }
}

#[test]
fn het_excludes_anchor_from_its_own_denominator() {
    // With K(i) = I∖{i}, the identical-rows batch gives 4·ln3. If the
    // anchor leaked into its own denominator the value would be 4·ln4.
    let batch = paired(2, None);
    let z = Tensor::from_vec(&[4, 2], [1.0, 0.0].repeat(4)).unwrap();
    let v = eval_loss(|t| {
        let zv = t.leaf(z.clone());
        loss_het(t, zv, &batch, 0.07)
    });
    assert!((v - 4.0 * 3.0f64.ln()).abs() <= 1e-9);
    assert!((v - 4.0 * 4.0f64.ln()).abs() > 0.5);
}

#[test]
fn het_gradient_passes_finite_differences() {
    let mut rng = Rng::new(99);
    let batch = paired(3, None);
    for _ in 0..5 {
        let z = random_unit_rows(&mut rng, 6, 8);
        let b = batch.clone();
        let err = finite_diff_check(&[z], |t, v| loss_het(t, v[0], &b, 0.1), 1e-6).unwrap();
        assert!(err <= 1e-5, "relative error {err}");
    }
}

// ───────────────────────── loss_hom ─────────────────────────

#[test]
fn hom_collapsed_features_give_zero() {
    let batch = paired(2, None);
    let z = Tensor::from_vec(&[4, 3], [0.6, 0.8, 0.0].repeat(4)).unwrap();
    let v = eval_loss(|t| {
        let zv = t.leaf(z.clone());
        loss_hom(t, zv, &batch, None)
    });
    assert_eq!(v, 0.0);
}

#[test]
fn hom_antipodal_unit_rows_give_four() {
    // Sources 0 and 1 hold z and −z; the worst cross-source distance is 4.
    let z = Tensor::from_vec(
        &[4, 2],
        vec![1.0, 0.0, 1.0, 0.0, -1.0, 0.0, -1.0, 0.0],
    )
    .unwrap();
    let batch = paired(2, None);
    let v = eval_loss(|t| {
        let zv = t.leaf(z.clone());
        loss_hom(t, zv, &batch, None)
    });
    assert!((v - 4.0).abs() <= 1e-12, "{v}");
}

#[test]
fn hom_matches_brute_force_max_exactly() {
    let mut rng = Rng::new(1234);
    for _ in 0..20 {
        let batch = paired(4, None);
        let z = random_unit_rows(&mut rng, 8, 8);
        let got = eval_loss(|t| {
            let zv = t.leaf(z.clone());
            loss_hom(t, zv, &batch, None)
        });
        let want = oracle_hom(&z, &batch);
        assert_eq!(got, want);
    }
}

#[test]
fn hom_single_source_batch_is_a_contract_error() {
    let batch = paired(1, None);
    let mut tape = Tape::new();
    let z = tape.leaf(Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let err = loss_hom(&mut tape, z, &batch, None).unwrap_err();
    assert!(matches!(err, Error::Contract { .. }), "{err:?}");
}

#[test]
fn hom_gradient_passes_finite_differences_away_from_ties() {
    let mut rng = Rng::new(321);
    let mut checked = 0;
    while checked < 5 {
        let batch = paired(3, None);
        let z = random_unit_rows(&mut rng, 6, 6);
        if !hom_argmax_margin_exceeds(&z, &batch, 1e-3) {
            continue;
        }
        let b = batch.clone();
        let err = finite_diff_check(&[z], |t, v| loss_hom(t, v[0], &b, None), 1e-6).unwrap();
        assert!(err <= 1e-5, "relative error {err}");
        checked += 1;
    }
}

/// True when the largest cross-source distance beats the runner-up by more
/// than `margin` (so the hard max is differentiable at this point).
fn hom_argmax_margin_exceeds(z: &Tensor, batch: &PairedBatch, margin: f64) -> bool {
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

#[test]
fn hom_smooth_max_upper_bounds_hard_max_and_has_clean_gradients() {
    let mut rng = Rng::new(555);
    let batch = paired(3, None);
    let z = random_unit_rows(&mut rng, 6, 6);
    let hard = eval_loss(|t| {
        let zv = t.leaf(z.clone());
        loss_hom(t, zv, &batch, None)
    });
    let smooth = eval_loss(|t| {
        let zv = t.leaf(z.clone());
        loss_hom(t, zv, &batch, Some(0.05))
    });
    // t·ln Σ exp(d/t) ≥ max d, approaching it as t → 0.
    assert!(smooth >= hard - 1e-12, "smooth {smooth} < hard {hard}");
    assert!(smooth - hard < 0.5, "smooth max too loose: {smooth} vs {hard}");

    let b = batch.clone();
    let err =
        finite_diff_check(&[z], |t, v| loss_hom(t, v[0], &b, Some(0.05)), 1e-6).unwrap();
    assert!(err <= 1e-5, "relative error {err}");
}

// ───────────────────────── loss_ort ─────────────────────────

#[test]
fn ort_orthogonal_pair_is_zero_in_all_modes() {
    let a = Tensor::from_vec(&[1, 2], vec![1.0, 0.0]).unwrap();
    let b = Tensor::from_vec(&[1, 2], vec![0.0, 1.0]).unwrap();
    for mode in [OrtMode::Signed, OrtMode::Absolute, OrtMode::Squared] {
        let v = eval_loss(|t| {
            let av = t.leaf(a.clone());
            let bv = t.leaf(b.clone());
            loss_ort(t, av, bv, mode)
        });
        assert!(v.abs() <= 1e-15, "{mode}: {v}");
    }
}

#[test]
fn ort_parallel_pair_is_one_in_all_modes() {
    let a = Tensor::from_vec(&[1, 2], vec![1.0, 0.0]).unwrap();
    for mode in [OrtMode::Signed, OrtMode::Absolute, OrtMode::Squared] {
        let v = eval_loss(|t| {
            let av = t.leaf(a.clone());
            let bv = t.leaf(a.clone());
            loss_ort(t, av, bv, mode)
        });
        assert!((v - 1.0).abs() <= 1e-15, "{mode}: {v}");
    }
}

#[test]
fn ort_antiparallel_pair_depends_on_mode() {
    let a = Tensor::from_vec(&[1, 2], vec![1.0, 0.0]).unwrap();
    let b = Tensor::from_vec(&[1, 2], vec![-1.0, 0.0]).unwrap();
    let run = |mode| {
        eval_loss(|t| {
            let av = t.leaf(a.clone());
            let bv = t.leaf(b.clone());
            loss_ort(t, av, bv, mode)
        })
    };
    assert!((run(OrtMode::Signed) + 1.0).abs() <= 1e-15);
    assert!((run(OrtMode::Absolute) - 1.0).abs() <= 1e-15);
    assert!((run(OrtMode::Squared) - 1.0).abs() <= 1e-15);
}

#[test]
fn ort_matches_oracle_and_passes_gradient_check() {
    let mut rng = Rng::new(808);
    for mode in [OrtMode::Signed, OrtMode::Squared] {
        for _ in 0..5 {
            let a = random_unit_rows(&mut rng, 4, 6);
            let b = random_unit_rows(&mut rng, 4, 6);
            let got = eval_loss(|t| {
                let av = t.leaf(a.clone());
                let bv = t.leaf(b.clone());
                loss_ort(t, av, bv, mode)
            });
            let want = oracle_ort(&a, &b, mode);
            assert!((got - want).abs() <= 1e-12);

            let err = finite_diff_check(
                &[a.clone(), b.clone()],
                |t, v| loss_ort(t, v[0], v[1], mode),
                1e-6,
            )
            .unwrap();
            assert!(err <= 1e-5, "{mode}: relative error {err}");
        }
    }
}

// The absolute mode's kink sits at cos = 0, so check it only at points
// whose cosines are clearly signed.
#[test]
fn ort_absolute_gradient_checks_away_from_zero_cosine() {
    let mut rng = Rng::new(809);
    let mut checked = 0;
    while checked < 3 {
        let a = random_unit_rows(&mut rng, 3, 4);
        let b = random_unit_rows(&mut rng, 3, 4);
        let clear = (0..3).all(|i| {
            let dot: f64 = (0..4).map(|t| a.data()[i * 4 + t] * b.data()[i * 4 + t]).sum();
            dot.abs() > 0.05
        });
        if !clear {
            continue;
        }
        let err = finite_diff_check(
            &[a, b],
            |t, v| loss_ort(t, v[0], v[1], OrtMode::Absolute),
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-5, "relative error {err}");
        checked += 1;
    }
}

// ───────────────────────── loss_tra ─────────────────────────

#[test]
fn tra_is_the_flagged_weighted_sum_of_its_parts() {
    let mut rng = Rng::new(4444);
    let batch = paired(3, None);
    let zh = random_unit_rows(&mut rng, 6, 8);
    let ze = random_unit_rows(&mut rng, 6, 8);

    let part = |f: &dyn Fn(&mut Tape) -> crate::Result<crate::tensor::Var>| -> f64 {
        let mut tape = Tape::new();
        let v = f(&mut tape).unwrap();
        tape.value(v).item().unwrap()
    };
    let hom = part(&|t| {
        let z = t.leaf(zh.clone());
        loss_hom(t, z, &batch, None)
    });
    let het = part(&|t| {
        let z = t.leaf(ze.clone());
        loss_het(t, z, &batch, 0.07)
    });
    let ort = part(&|t| {
        let a = t.leaf(zh.clone());
        let b = t.leaf(ze.clone());
        loss_ort(t, a, b, OrtMode::Signed)
    });

    let run = |cfg: LossConfig| -> f64 {
        part(&|t| {
            let a = t.leaf(zh.clone());
            let b = t.leaf(ze.clone());
            loss_tra(t, a, b, &batch, &cfg)
        })
    };

    let full = run(LossConfig::default());
    assert!((full - (hom + het + 0.1 * ort)).abs() <= 1e-12);

    let no_ort = run(LossConfig {
        enable_ort: false,
        ..LossConfig::default()
    });
    assert!((no_ort - (hom + het)).abs() <= 1e-12);

    let hom_only = run(LossConfig {
        enable_het: false,
        enable_ort: false,
        ..LossConfig::default()
    });
    assert!((hom_only - hom).abs() <= 1e-12);

    let lambda_zero = run(LossConfig {
        lambda: 0.0,
        ..LossConfig::default()
    });
    assert!((lambda_zero - (hom + het)).abs() <= 1e-12);
}

#[test]
fn tra_rejects_fake_rows() {
    let batch = paired(2, Some(vec![false, true]));
    let mut tape = Tape::new();
    let z = tape.leaf(Tensor::zeros(&[4, 4]));
    let z2 = tape.leaf(Tensor::zeros(&[4, 4]));
    let err = loss_tra(&mut tape, z, z2, &batch, &LossConfig::default()).unwrap_err();
    assert!(matches!(err, Error::Contract { .. }));
}

#[test]
fn tra_gradient_passes_finite_differences() {
    let mut rng = Rng::new(31337);
    let mut checked = 0;
    while checked < 3 {
        let batch = paired(2, None);
        let zh = random_unit_rows(&mut rng, 4, 8);
        let ze = random_unit_rows(&mut rng, 4, 8);
        if !hom_argmax_margin_exceeds(&zh, &batch, 1e-3) {
            continue;
        }
        let b = batch.clone();
        let err = finite_diff_check(
            &[zh, ze],
            |t, v| loss_tra(t, v[0], v[1], &b, &LossConfig::default()),
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-5, "relative error {err}");
        checked += 1;
    }
}

// ───────────────────────── loss_ext ─────────────────────────

fn no_aux() -> Tensor {
    Tensor::zeros(&[0, 8])
}

#[test]
fn ext_without_aux_matches_supcon_oracle() {
    let mut rng = Rng::new(9090);
    for _ in 0..20 {
        let batch = paired(3, Some(vec![false, true, false]));
        let z = random_unit_rows(&mut rng, 6, 8);
        let tau = rng.range_f64(0.05, 1.0);
        let got = eval_loss(|t| {
            let zv = t.leaf(z.clone());
            loss_ext(t, zv, &batch, &no_aux(), tau, true)
        });
        let want = oracle_ext(&z, batch.labels().unwrap(), &no_aux(), tau, true);
        assert!((got - want).abs() <= 1e-10, "{got} vs {want}");
    }
}

#[test]
fn ext_identical_embeddings_two_real_two_fake_give_4_ln3() {
    let batch = paired(2, Some(vec![false, true]));
    let z = Tensor::from_vec(&[4, 2], [1.0, 0.0].repeat(4)).unwrap();
    let v = eval_loss(|t| {
        let zv = t.leaf(z.clone());
        loss_ext(t, zv, &batch, &Tensor::zeros(&[0, 2]), 0.07, true)
    });
    assert!((v - 4.0 * 3.0f64.ln()).abs() <= 1e-9, "{v}");
}

#[test]
fn ext_with_aux_matches_extended_oracle() {
    let mut rng = Rng::new(2468);
    for _ in 0..20 {
        let batch = paired(3, Some(vec![false, false, true]));
        let z = random_unit_rows(&mut rng, 6, 8);
        let aux = random_unit_rows(&mut rng, 4, 8);
        let tau = rng.range_f64(0.05, 1.0);
        let got = eval_loss(|t| {
            let zv = t.leaf(z.clone());
            loss_ext(t, zv, &batch, &aux, tau, true)
        });
        let want = oracle_ext(&z, batch.labels().unwrap(), &aux, tau, true);
        assert!((got - want).abs() <= 1e-10, "{got} vs {want}");
    }
}

#[test]
fn ext_no_log_variant_matches_its_oracle() {
    let mut rng = Rng::new(13579);
    for _ in 0..10 {
        let batch = paired(2, Some(vec![false, true]));
        let z = random_unit_rows(&mut rng, 4, 8);
        let aux = random_unit_rows(&mut rng, 2, 8);
        let got = eval_loss(|t| {
            let zv = t.leaf(z.clone());
            loss_ext(t, zv, &batch, &aux, 0.1, false)
        });
        let want = oracle_ext(&z, batch.labels().unwrap(), &aux, 0.1, false);
        assert!((got - want).abs() <= 1e-10, "{got} vs {want}");
    }
}

#[test]
fn ext_requires_labels() {
    let z = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let batch = PairedBatch::new(vec![0, 0], None).unwrap();
    let mut tape = Tape::new();
    let zv = tape.leaf(z);
    let err = loss_ext(&mut tape, zv, &batch, &Tensor::zeros(&[0, 2]), 0.07, true).unwrap_err();
    assert!(matches!(err, Error::Contract { .. }));
}

#[test]
fn ext_anchor_with_no_positives_is_a_contract_error() {
    // A validated batch always gives every anchor its sibling as a
    // positive (views of one source share a label), so the zero-positive
    // guard is defensive. Drive it with a hand-built inconsistent batch:
    // the lone fake row has no same-label candidate and no aux.
    let batch = PairedBatch {
        source_id: vec![0, 0, 1, 1],
        pairing: vec![1, 0, 3, 2],
        labels: Some(vec![false, false, true, false]),
    };
    let z = Tensor::from_vec(&[4, 2], [1.0, 0.0].repeat(4)).unwrap();
    let mut tape = Tape::new();
    let zv = tape.leaf(z);
    let err = loss_ext(&mut tape, zv, &batch, &Tensor::zeros(&[0, 2]), 0.07, true).unwrap_err();
    assert!(matches!(err, Error::Contract { .. }), "{err:?}");
}

#[test]
fn ext_aux_rows_join_real_positives_and_fake_denominators() {
    // An aux row identical to every real row raises real-anchor agreement
    // and dilutes fake anchors' ratios; the exact values must match the
    // brute-force oracle, and the real anchors' loss must drop relative to
    // the no-aux batch while fake anchors' loss rises.
    let real_row = vec![1.0, 0.0];
    let fake_row = vec![0.0, 1.0];
    let mut data = Vec::new();
    data.extend_from_slice(&real_row);
    data.extend_from_slice(&real_row);
    data.extend_from_slice(&fake_row);
    data.extend_from_slice(&fake_row);
    let z = Tensor::from_vec(&[4, 2], data).unwrap();
    let batch = paired(2, Some(vec![false, true]));
    let aux = Tensor::from_vec(&[1, 2], real_row.clone()).unwrap();

    let with_aux = eval_loss(|t| {
        let zv = t.leaf(z.clone());
        loss_ext(t, zv, &batch, &aux, 0.2, true)
    });
    let want = oracle_ext(&z, batch.labels().unwrap(), &aux, 0.2, true);
    assert!((with_aux - want).abs() <= 1e-10);
}

#[test]
fn ext_gradient_passes_finite_differences() {
    let mut rng = Rng::new(86420);
    for log_form in [true, false] {
        for _ in 0..3 {
            let batch = paired(3, Some(vec![false, true, false]));
            let aux = random_unit_rows(&mut rng, 3, 8);
            let z = random_unit_rows(&mut rng, 6, 8);
            let b = batch.clone();
            let a = aux.clone();
            let err = finite_diff_check(
                &[z],
                |t, v| loss_ext(t, v[0], &b, &a, 0.1, log_form),
                1e-6,
            )
            .unwrap();
            assert!(err <= 1e-5, "log_form {log_form}: relative error {err}");
        }
    }
}

// ───────────────────────── loss_ce ─────────────────────────

#[test]
fn ce_zero_logits_give_ln2_for_any_labels() {
    for labels in [vec![true, false, true], vec![false, false, false]] {
        let v = eval_loss(|t| {
            let x = t.leaf(Tensor::zeros(&[labels.len()]));
            loss_ce(t, x, &labels)
        });
        assert!((v - std::f64::consts::LN_2).abs() <= 1e-12, "{v}");
    }
}

#[test]
fn ce_perfect_predictions_cost_at_most_1e_6() {
    let v = eval_loss(|t| {
        let x = t.leaf(Tensor::from_vec(&[2], vec![40.0, -40.0]).unwrap());
        loss_ce(t, x, &[true, false])
    });
    assert!(v >= 0.0 && v <= 1e-6, "{v}");
}

#[test]
fn ce_quarter_probability_on_positive_is_ln4() {
    // σ(x) = 0.25 at x = ln(1/3).
    let x = (1.0f64 / 3.0).ln();
    let v = eval_loss(|t| {
        let l = t.leaf(Tensor::from_vec(&[1], vec![x]).unwrap());
        loss_ce(t, l, &[true])
    });
    assert!((v - 4.0f64.ln()).abs() <= 1e-12, "{v}");
}

#[test]
fn ce_matches_oracle_and_gradient_checks() {
    let mut rng = Rng::new(200);
    for _ in 0..10 {
        let n = 6;
        let logits: Vec<f64> = (0..n).map(|_| rng.range_f64(-3.0, 3.0)).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.uniform(2) == 1).collect();
        let t = Tensor::from_vec(&[n], logits.clone()).unwrap();
        let got = eval_loss(|tp| {
            let x = tp.leaf(t.clone());
            loss_ce(tp, x, &labels)
        });
        let want = oracle_ce(&logits, &labels);
        assert!((got - want).abs() <= 1e-12);

        let lb = labels.clone();
        let err = finite_diff_check(&[t], |tp, v| loss_ce(tp, v[0], &lb), 1e-6).unwrap();
        assert!(err <= 1e-5, "relative error {err}");
    }
}

// ───────────────────────── loss_d ─────────────────────────

#[test]
fn d_is_ext_plus_gamma_ce() {
    let mut rng = Rng::new(606);
    let batch = paired(2, Some(vec![false, true]));
    let z = random_unit_rows(&mut rng, 4, 8);
    let aux = random_unit_rows(&mut rng, 2, 8);
    let logits = Tensor::from_vec(&[4], vec![0.3, -0.1, 0.9, -2.0]).unwrap();
    let labels: Vec<bool> = batch.labels().unwrap().to_vec();

    let ext = eval_loss(|t| {
        let zv = t.leaf(z.clone());
        loss_ext(t, zv, &batch, &aux, 0.07, true)
    });
    let ce = eval_loss(|t| {
        let x = t.leaf(logits.clone());
        loss_ce(t, x, &labels)
    });

    for gamma in [0.0, 0.5, 2.0] {
        let cfg = LossConfig {
            gamma,
            ..LossConfig::default()
        };
        let got = eval_loss(|t| {
            let zv = t.leaf(z.clone());
            let lv = t.leaf(logits.clone());
            loss_d(t, zv, lv, &batch, &aux, &cfg)
        });
        assert!((got - (ext + gamma * ce)).abs() <= 1e-12, "gamma {gamma}");
    }
}

#[test]
fn d_without_aux_flag_ignores_aux_rows() {
    let mut rng = Rng::new(607);
    let batch = paired(2, Some(vec![false, true]));
    let z = random_unit_rows(&mut rng, 4, 8);
    let aux = random_unit_rows(&mut rng, 2, 8);
    let logits = Tensor::zeros(&[4]);

    let cfg_off = LossConfig {
        ext_use_aux: false,
        ..LossConfig::default()
    };
    let with_flag_off = eval_loss(|t| {
        let zv = t.leaf(z.clone());
        let lv = t.leaf(logits.clone());
        loss_d(t, zv, lv, &batch, &aux, &cfg_off)
    });
    let with_empty_aux = eval_loss(|t| {
        let zv = t.leaf(z.clone());
        let lv = t.leaf(logits.clone());
        loss_d(t, zv, lv, &batch, &Tensor::zeros(&[0, 8]), &LossConfig::default())
    });
    assert!((with_flag_off - with_empty_aux).abs() <= 1e-12);
}

// ───────────────────────── invariance properties ─────────────────────────

#[test]
fn permuting_rows_changes_no_loss_beyond_1e_12() {
    let mut rng = Rng::new(515);
    let batch = paired(3, Some(vec![false, true, false]));
    let z = random_unit_rows(&mut rng, 6, 8);
    let ze = random_unit_rows(&mut rng, 6, 8);
    let aux = random_unit_rows(&mut rng, 2, 8);
    let logits_data: Vec<f64> = (0..6).map(|_| rng.range_f64(-2.0, 2.0)).collect();

    let perm = [3usize, 0, 5, 2, 1, 4];
    let permuted = batch.permuted(&perm).unwrap();
    let permute_rows = |t: &Tensor| -> Tensor {
        let c = t.shape()[1];
        let mut d = vec![0.0; t.numel()];
        for (new_i, &old_i) in perm.iter().enumerate() {
            d[new_i * c..(new_i + 1) * c].copy_from_slice(&t.data()[old_i * c..(old_i + 1) * c]);
        }
        Tensor::from_vec(t.shape(), d).unwrap()
    };
    let zp = permute_rows(&z);
    let zep = permute_rows(&ze);
    let logits_p: Vec<f64> = perm.iter().map(|&i| logits_data[i]).collect();

    let labels: Vec<bool> = batch.labels().unwrap().to_vec();
    let labels_p: Vec<bool> = permuted.labels().unwrap().to_vec();

    let cases: Vec<(f64, f64)> = vec![
        (
            eval_loss(|t| {
                let v = t.leaf(z.clone());
                loss_het(t, v, &batch, 0.07)
            }),
            eval_loss(|t| {
                let v = t.leaf(zp.clone());
                loss_het(t, v, &permuted, 0.07)
            }),
        ),
        (
            eval_loss(|t| {
                let v = t.leaf(z.clone());
                loss_hom(t, v, &batch, None)
            }),
            eval_loss(|t| {
                let v = t.leaf(zp.clone());
                loss_hom(t, v, &permuted, None)
            }),
        ),
        (
            eval_loss(|t| {
                let a = t.leaf(z.clone());
                let b = t.leaf(ze.clone());
                loss_ort(t, a, b, OrtMode::Signed)
            }),
            eval_loss(|t| {
                let a = t.leaf(zp.clone());
                let b = t.leaf(zep.clone());
                loss_ort(t, a, b, OrtMode::Signed)
            }),
        ),
        (
            eval_loss(|t| {
                let v = t.leaf(z.clone());
                loss_ext(t, v, &batch, &aux, 0.1, true)
            }),
            eval_loss(|t| {
                let v = t.leaf(zp.clone());
                loss_ext(t, v, &permuted, &aux, 0.1, true)
            }),
        ),
        (
            eval_loss(|t| {
                let x = t.leaf(Tensor::from_vec(&[6], logits_data.clone()).unwrap());
                loss_ce(t, x, &labels)
            }),
            eval_loss(|t| {
                let x = t.leaf(Tensor::from_vec(&[6], logits_p.clone()).unwrap());
                loss_ce(t, x, &labels_p)
            }),
        ),
    ];
    for (i, (a, b)) in cases.iter().enumerate() {
        assert!((a - b).abs() <= 1e-12, "case {i}: {a} vs {b}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn het_is_nonnegative(seed in 0u64..1_000_000, n_sources in 2usize..5) {
        let mut rng = Rng::new(seed);
        let batch = paired(n_sources, None);
        let z = random_unit_rows(&mut rng, 2 * n_sources, 8);
        let v = eval_loss(|t| {
            let zv = t.leaf(z.clone());
            loss_het(t, zv, &batch, 0.07)
        });
        // InfoNCE with the positive included in the candidate set is ≥ 0.
        prop_assert!(v >= -1e-12, "loss_het = {}", v);
    }

    #[test]
    fn hom_is_bounded_for_unit_rows(seed in 0u64..1_000_000, n_sources in 2usize..5) {
        let mut rng = Rng::new(seed);
        let batch = paired(n_sources, None);
        let z = random_unit_rows(&mut rng, 2 * n_sources, 8);
        let v = eval_loss(|t| {
            let zv = t.leaf(z.clone());
            loss_hom(t, zv, &batch, None)
        });
        prop_assert!((0.0..=4.0 + 1e-12).contains(&v), "loss_hom = {}", v);
    }

    #[test]
    fn ext_log_form_is_nonnegative(seed in 0u64..1_000_000) {
        let mut rng = Rng::new(seed);
        let batch = paired(3, Some(vec![false, true, false]));
        let z = random_unit_rows(&mut rng, 6, 8);
        let v = eval_loss(|t| {
            let zv = t.leaf(z.clone());
            loss_ext(t, zv, &batch, &Tensor::zeros(&[0, 8]), 0.07, true)
        });
        prop_assert!(v >= -1e-12, "loss_ext = {}", v);
    }

    #[test]
    fn ce_is_nonnegative(seed in 0u64..1_000_000, n in 1usize..8) {
        let mut rng = Rng::new(seed);
        let logits: Vec<f64> = (0..n).map(|_| rng.range_f64(-10.0, 10.0)).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.uniform(2) == 1).collect();
        let v = eval_loss(|t| {
            let x = t.leaf(Tensor::from_vec(&[n], logits.clone()).unwrap());
            loss_ce(t, x, &labels)
        });
        prop_assert!(v >= 0.0, "loss_ce = {}", v);
    }
}
