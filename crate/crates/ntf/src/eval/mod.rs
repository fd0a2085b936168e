//! Detection scoring, ranking metrics, perturbation robustness sweeps, and
//! report emission.
//!
//! The positive class is `fake` throughout: a score is the probability that
//! an image is synthetic, and `score >= threshold` classifies it as fake
//! (ties go to fake). Average precision uses the step-interpolated rank
//! formulation over a stable descending sort, so it is exactly reproducible
//! and invariant under strictly monotone rescaling of the scores.

use rayon::prelude::*;

use crate::data::{stack_views, ImageSet, Label};
use crate::error::{Error, Result};
use crate::imgproc;
use crate::model::ModelBundle;
use crate::rng::{streams, Rng};
use crate::tensor::{Tape, Tensor};

/// Number of images scored per forward pass.
const SCORE_CHUNK: usize = 64;

/// One scored test example.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredExample {
    /// Probability that the image is fake, in `[0, 1]`.
    pub score: f64,
    pub label: Label,
    pub family: String,
}

/// The four ranking/threshold metrics over one pool of scored examples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricSet {
    /// Step-interpolated average precision of the fake-vs-real ranking.
    pub ap: f64,
    /// Fraction of examples classified correctly at the threshold.
    pub acc: f64,
    /// Fraction of real examples scored at or above the threshold.
    pub fpr: f64,
    /// Fraction of fake examples scored below the threshold.
    pub fnr: f64,
}

/// Metrics for one fake family evaluated against the full real pool.
#[derive(Debug, Clone, PartialEq)]
pub struct FamilyRow {
    pub family: String,
    pub n_real: usize,
    pub n_fake: usize,
    pub metrics: MetricSet,
}

/// Metrics for one (transform, severity) cell of a robustness sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub transform: &'static str,
    /// The transform's severity knob (sigma, quality, or scale factor).
    pub severity: f64,
    /// Mean absolute pixel difference against the unperturbed images.
    pub mean_abs_error: f64,
    pub aggregate: MetricSet,
    pub per_family: Vec<FamilyRow>,
}

/// Clean metrics plus optional perturbation curves.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Decision threshold used for ACC/FPR/FNR.
    pub threshold: f64,
    /// Metrics over all real and all fake examples.
    pub aggregate: MetricSet,
    /// One row per fake family, each against the full real pool.
    pub per_family: Vec<FamilyRow>,
    /// Robustness cells; empty when only the clean evaluation ran.
    pub cells: Vec<SweepCell>,
}

/// Severity grid for Gaussian blur (sigma).
pub const BLUR_GRID: [f64; 4] = [0.0, 0.5, 1.0, 2.0];
/// Severity grid for JPEG compression (quality, least severe first).
pub const JPEG_GRID: [u32; 5] = [100, 90, 70, 50, 30];
/// Severity grid for additive Gaussian noise (sigma).
pub const NOISE_GRID: [f64; 4] = [0.0, 0.02, 0.05, 0.1];
/// Severity grid for down/up scaling (factor, least severe first).
pub const SCALE_GRID: [f64; 4] = [1.0, 0.75, 0.5, 0.2];

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Compute AP/ACC/FPR/FNR over one pool of scored examples.
///
/// Both classes must be present. AP ranks by descending score with ties kept
/// in input order (`R_0 = 0`); the threshold metrics count `score >=
/// threshold` as a fake prediction.
pub fn compute_metrics(scored: &[ScoredExample], threshold: f64) -> Result<MetricSet> {
    if !threshold.is_finite() {
        return Err(Error::Argument(format!(
            "threshold must be finite, got {threshold}"
        )));
    }
    for (i, ex) in scored.iter().enumerate() {
        if !ex.score.is_finite() || !(0.0..=1.0).contains(&ex.score) {
            return Err(Error::contract(
                "compute_metrics",
                format!("score at index {i} is {} (must be in [0,1])", ex.score),
            ));
        }
    }
    let n_fake = scored.iter().filter(|e| e.label == Label::Fake).count();
    let n_real = scored.len() - n_fake;
    if n_real == 0 || n_fake == 0 {
        return Err(Error::contract(
            "compute_metrics",
            format!(
                "need at least one example of each class, got {n_real} real / {n_fake} fake"
            ),
        ));
    }

    // Stable descending sort: ties keep their input order.
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| {
        scored[b]
            .score
            .partial_cmp(&scored[a].score)
            .expect("scores validated finite")
    });

    // AP = sum over ranks of (R_n - R_{n-1}) * P_n; only ranks holding a
    // fake example move recall, so only those contribute.
    let mut ap = 0.0;
    let mut tp = 0usize;
    for (rank, &idx) in order.iter().enumerate() {
        if scored[idx].label == Label::Fake {
            tp += 1;
            let precision = tp as f64 / (rank + 1) as f64;
            ap += precision / n_fake as f64;
        }
    }

    let false_pos = scored
        .iter()
        .filter(|e| e.label == Label::Real && e.score >= threshold)
        .count();
    let false_neg = scored
        .iter()
        .filter(|e| e.label == Label::Fake && e.score < threshold)
        .count();
    let fpr = false_pos as f64 / n_real as f64;
    let fnr = false_neg as f64 / n_fake as f64;
    let acc = 1.0 - (false_pos + false_neg) as f64 / scored.len() as f64;

    Ok(MetricSet { ap, acc, fpr, fnr })
}

// ---------------------------------------------------------------------------
// Scoring
// ---------------------------------------------------------------------------

/// Score one image: probability fake and the thresholded label.
///
/// The image is center-cropped to the model input size (undersized images
/// are a dimension error), encoded, and classified; the score is the
/// sigmoid of the logit. `score >= threshold` labels the image fake.
pub fn detect(bundle: &ModelBundle, image: &Tensor, threshold: f64) -> Result<(f64, Label)> {
    let scores = score_batch(bundle, std::slice::from_ref(image))?;
    let score = scores[0];
    let label = if score >= threshold {
        Label::Fake
    } else {
        Label::Real
    };
    Ok((score, label))
}

/// Forward one chunk of images and return their fake probabilities.
fn score_batch(bundle: &ModelBundle, images: &[Tensor]) -> Result<Vec<f64>> {
    let size = bundle.config.encoder.input_size;
    let cropped: Vec<Tensor> = images
        .iter()
        .map(|img| imgproc::center_crop(img, size))
        .collect::<Result<_>>()?;
    let x = stack_views(&cropped)?;

    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let vars = bundle.register(&mut tape);
    let e = vars.encode(&mut tape, xv)?;
    let logits = vars.classify(&mut tape, e)?;
    let probs = tape.sigmoid(logits)?;
    Ok(tape.value(probs).data().to_vec())
}

/// Score every image in a set, in set order.
///
/// Chunks are scored in parallel; each image's score depends only on its
/// own pixels, so the result is identical at any thread count.
pub fn score_set(bundle: &ModelBundle, set: &ImageSet) -> Result<Vec<ScoredExample>> {
    let per_chunk: Vec<Vec<f64>> = set
        .images
        .par_chunks(SCORE_CHUNK)
        .map(|chunk| score_batch(bundle, chunk))
        .collect::<Result<_>>()?;
    let scores = per_chunk.into_iter().flatten();
    Ok(scores
        .zip(&set.records)
        .map(|(score, rec)| ScoredExample {
            score,
            label: rec.label,
            family: rec.family.clone(),
        })
        .collect())
}

/// Aggregate plus per-family metrics over one pool of scored examples.
///
/// Each fake family is measured against the full real pool; families are
/// reported in first-appearance order.
fn metrics_by_family(scored: &[ScoredExample], threshold: f64) -> Result<(MetricSet, Vec<FamilyRow>)> {
    let aggregate = compute_metrics(scored, threshold)?;
    let real_pool: Vec<ScoredExample> = scored
        .iter()
        .filter(|e| e.label == Label::Real)
        .cloned()
        .collect();

    let mut families: Vec<String> = Vec::new();
    for ex in scored {
        if ex.label == Label::Fake && !families.contains(&ex.family) {
            families.push(ex.family.clone());
        }
    }

    let mut rows = Vec::with_capacity(families.len());
    for family in families {
        let mut pool = real_pool.clone();
        pool.extend(
            scored
                .iter()
                .filter(|e| e.label == Label::Fake && e.family == family)
                .cloned(),
        );
        let n_fake = pool.len() - real_pool.len();
        let metrics = compute_metrics(&pool, threshold)?;
        rows.push(FamilyRow {
            family,
            n_real: real_pool.len(),
            n_fake,
            metrics,
        });
    }
    Ok((aggregate, rows))
}

/// Clean evaluation of a test set: aggregate and per-family metrics.
pub fn evaluate_set(bundle: &ModelBundle, set: &ImageSet, threshold: f64) -> Result<EvalReport> {
    let scored = score_set(bundle, set)?;
    let (aggregate, per_family) = metrics_by_family(&scored, threshold)?;
    Ok(EvalReport {
        threshold,
        aggregate,
        per_family,
        cells: Vec::new(),
    })
}

// ---------------------------------------------------------------------------
// Perturbations
// ---------------------------------------------------------------------------

/// Gaussian blur with reflect padding; `sigma = 0` is a bitwise identity.
pub fn perturb_gaussian_blur(img: &Tensor, sigma: f64) -> Result<Tensor> {
    imgproc::gaussian_blur(img, sigma)
}

/// JPEG-equivalent quantization round trip at the given quality (1..=100).
pub fn perturb_jpeg(img: &Tensor, quality: u32) -> Result<Tensor> {
    imgproc::jpeg_roundtrip(img, quality)
}

/// Additive i.i.d. Gaussian pixel noise, clamped to `[0, 1]`;
/// `sigma = 0` is a bitwise identity.
pub fn perturb_noise(img: &Tensor, sigma: f64, rng: &mut Rng) -> Result<Tensor> {
    if !sigma.is_finite() || sigma < 0.0 {
        return Err(Error::Argument(format!(
            "noise sigma must be finite and >= 0, got {sigma}"
        )));
    }
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let data: Vec<f64> = img
        .data()
        .iter()
        .map(|&v| (v + sigma * rng.normal()).clamp(0.0, 1.0))
        .collect();
    Tensor::from_vec(img.shape(), data)
}

/// Bilinear downscale by `factor` then upscale back to the original size;
/// `factor = 1` is a bitwise identity.
pub fn perturb_scale(img: &Tensor, factor: f64) -> Result<Tensor> {
    if !factor.is_finite() || factor <= 0.0 || factor > 1.0 {
        return Err(Error::Argument(format!(
            "scale factor must be in (0, 1], got {factor}"
        )));
    }
    if factor == 1.0 {
        return Ok(img.clone());
    }
    let &[_, h, w] = img.shape() else {
        return Err(Error::dim("perturb_scale", "image must be [C,H,W]"));
    };
    let dh = ((h as f64 * factor).round() as usize).max(1);
    let dw = ((w as f64 * factor).round() as usize).max(1);
    let small = imgproc::bilinear_resize(img, dh, dw)?;
    imgproc::bilinear_resize(&small, h, w)
}

/// One point in a robustness sweep: a transform with its severity knob.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Perturbation {
    Blur(f64),
    Jpeg(u32),
    Noise(f64),
    Scale(f64),
}

impl Perturbation {
    pub fn transform(&self) -> &'static str {
        match self {
            Perturbation::Blur(_) => "blur",
            Perturbation::Jpeg(_) => "jpeg",
            Perturbation::Noise(_) => "noise",
            Perturbation::Scale(_) => "scale",
        }
    }

    /// The severity knob as a number, for reporting.
    pub fn severity(&self) -> f64 {
        match *self {
            Perturbation::Blur(s) => s,
            Perturbation::Jpeg(q) => q as f64,
            Perturbation::Noise(s) => s,
            Perturbation::Scale(f) => f,
        }
    }

    /// Apply to one image. `rng` feeds the noise transform only.
    pub fn apply(&self, img: &Tensor, rng: &mut Rng) -> Result<Tensor> {
        match *self {
            Perturbation::Blur(s) => perturb_gaussian_blur(img, s),
            Perturbation::Jpeg(q) => perturb_jpeg(img, q),
            Perturbation::Noise(s) => perturb_noise(img, s, rng),
            Perturbation::Scale(f) => perturb_scale(img, f),
        }
    }
}

/// The full severity grid: 4 blur + 5 JPEG + 4 noise + 4 scale cells.
pub fn standard_grid() -> Vec<Perturbation> {
    let mut grid = Vec::new();
    grid.extend(BLUR_GRID.iter().map(|&s| Perturbation::Blur(s)));
    grid.extend(JPEG_GRID.iter().map(|&q| Perturbation::Jpeg(q)));
    grid.extend(NOISE_GRID.iter().map(|&s| Perturbation::Noise(s)));
    grid.extend(SCALE_GRID.iter().map(|&f| Perturbation::Scale(f)));
    grid
}

// ---------------------------------------------------------------------------
// Robustness sweep
// ---------------------------------------------------------------------------

/// Evaluate a test set clean and under every grid cell.
///
/// Noise draws come from a per-image substream keyed on (cell index, image
/// index), so results are identical at any thread count and do not depend
/// on evaluation order. Identity severities (blur 0, noise 0, scale 1)
/// reproduce the clean scores bitwise.
pub fn robustness_sweep(
    bundle: &ModelBundle,
    set: &ImageSet,
    grid: &[Perturbation],
    threshold: f64,
    noise_seed: u64,
) -> Result<EvalReport> {
    let clean = score_set(bundle, set)?;
    let (aggregate, per_family) = metrics_by_family(&clean, threshold)?;
    let noise_root = Rng::new(noise_seed).substream(streams::EVAL_NOISE);

    let mut cells = Vec::with_capacity(grid.len());
    for (cell_idx, pert) in grid.iter().enumerate() {
        let cell_rng = noise_root.substream(cell_idx as u64);
        let perturbed: Vec<Tensor> = set
            .images
            .par_iter()
            .enumerate()
            .map(|(i, img)| pert.apply(img, &mut cell_rng.substream(i as u64)))
            .collect::<Result<_>>()?;
        let n_px: usize = set.images.iter().map(|t| t.numel()).sum();
        let abs_err: f64 = perturbed
            .iter()
            .zip(&set.images)
            .flat_map(|(p, c)| p.data().iter().zip(c.data()).map(|(a, b)| (a - b).abs()))
            .sum();
        let mean_abs_error = abs_err / n_px as f64;

        let pert_set = ImageSet {
            records: set.records.clone(),
            images: perturbed,
        };
        let scored = score_set(bundle, &pert_set)?;
        let (cell_aggregate, cell_per_family) = metrics_by_family(&scored, threshold)?;
        cells.push(SweepCell {
            transform: pert.transform(),
            severity: pert.severity(),
            mean_abs_error,
            aggregate: cell_aggregate,
            per_family: cell_per_family,
        });
    }

    Ok(EvalReport {
        threshold,
        aggregate,
        per_family,
        cells,
    })
}

// ---------------------------------------------------------------------------
// Report emission
// ---------------------------------------------------------------------------

fn tsv_row(
    out: &mut String,
    family: &str,
    transform: &str,
    severity: f64,
    n_real: usize,
    n_fake: usize,
    m: &MetricSet,
    mae: f64,
) {
    out.push_str(&format!(
        "{family}\t{transform}\t{severity}\t{n_real}\t{n_fake}\t{}\t{}\t{}\t{}\t{mae}\n",
        m.ap, m.acc, m.fpr, m.fnr
    ));
}

/// Render a report as TSV: a header, then one row per family (and the
/// `all` aggregate) for the clean pass and for each sweep cell. Floats use
/// the shortest round-trip representation, so equal reports render to
/// byte-identical text.
pub fn report_to_tsv(report: &EvalReport) -> String {
    let mut out = String::from(
        "family\ttransform\tseverity\tn_real\tn_fake\tap\tacc\tfpr\tfnr\tmean_abs_error\n",
    );
    let totals = |rows: &[FamilyRow]| -> (usize, usize) {
        let n_real = rows.first().map_or(0, |r| r.n_real);
        let n_fake = rows.iter().map(|r| r.n_fake).sum();
        (n_real, n_fake)
    };

    let (n_real, n_fake) = totals(&report.per_family);
    tsv_row(
        &mut out,
        "all",
        "none",
        0.0,
        n_real,
        n_fake,
        &report.aggregate,
        0.0,
    );
    for row in &report.per_family {
        tsv_row(
            &mut out,
            &row.family,
            "none",
            0.0,
            row.n_real,
            row.n_fake,
            &row.metrics,
            0.0,
        );
    }
    for cell in &report.cells {
        let (n_real, n_fake) = totals(&cell.per_family);
        tsv_row(
            &mut out,
            "all",
            cell.transform,
            cell.severity,
            n_real,
            n_fake,
            &cell.aggregate,
            cell.mean_abs_error,
        );
        for row in &cell.per_family {
            tsv_row(
                &mut out,
                &row.family,
                cell.transform,
                cell.severity,
                row.n_real,
                row.n_fake,
                &row.metrics,
                cell.mean_abs_error,
            );
        }
    }
    out
}

/// Short human-readable summary of the clean metrics.
pub fn report_summary(report: &EvalReport) -> String {
    let mut out = format!(
        "threshold {}: AP {:.4}  ACC {:.4}  FPR {:.4}  FNR {:.4}\n",
        report.threshold,
        report.aggregate.ap,
        report.aggregate.acc,
        report.aggregate.fpr,
        report.aggregate.fnr
    );
    for row in &report.per_family {
        out.push_str(&format!(
            "  {}: AP {:.4}  ACC {:.4}  ({} real / {} fake)\n",
            row.family, row.metrics.ap, row.metrics.acc, row.n_real, row.n_fake
        ));
    }
    if !report.cells.is_empty() {
        out.push_str(&format!("  robustness cells: {}\n", report.cells.len()));
    }
    out
}
