//! Synthetic corpus generator.
//!
//! Four image families over a shared "natural" base texture:
//!
//! * `natural` (real): 1/f^α spectral synthesis (α = 2) with random
//!   Gaussian spectra, plus a mild linear illumination gradient and a
//!   small per-channel tint — the stable power-law statistics that real
//!   photographs exhibit.
//! * `fakeA` (fake): natural base + additive checkerboard at the Nyquist
//!   frequency, amplitude 0.08 — an upsampling-artifact proxy.
//! * `fakeB` (fake): natural base + two mid-frequency cosine gratings,
//!   amplitude 0.06 each — a periodic spectral-fingerprint proxy.
//! * `fakeC` (fake): natural base blurred (σ = 1.0) then unsharp-masked
//!   (amount 1.5) — a smoothing/resharpening fingerprint proxy.
//!
//! The train split holds natural + fakeA only; the test split holds all
//! four families, so evaluation on fakeB/fakeC measures generalization to
//! artifact mechanisms never seen in training. Every image is produced
//! from its own named RNG substream, so corpora are bitwise reproducible
//! and generation parallelizes without changing a pixel.

use std::path::Path;

use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use super::{save_manifest, write_ppm, ImageRecord, Label, Manifest, Split, MANIFEST_SCHEMA_VERSION};
use crate::error::{Error, Result};
use crate::imgproc;
use crate::rng::{streams, Rng};
use crate::tensor::Tensor;

/// Spectral exponent of the natural family: power ∝ 1/f^α.
pub const NATURAL_ALPHA: f64 = 2.0;
/// Checkerboard amplitude of fakeA.
pub const FAKE_A_AMPLITUDE: f64 = 0.08;
/// Grating amplitude of fakeB (each of the two gratings).
pub const FAKE_B_AMPLITUDE: f64 = 0.06;
/// Blur sigma and unsharp amount of fakeC.
pub const FAKE_C_SIGMA: f64 = 1.0;
pub const FAKE_C_AMOUNT: f64 = 1.5;

/// How many images of each family and split to generate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CorpusPlan {
    pub n_natural_train: usize,
    pub n_fake_a_train: usize,
    pub n_test_per_family: usize,
    /// Image side length; ≥ 32 and a power of two.
    pub size: usize,
}

impl CorpusPlan {
    pub fn validate(&self) -> Result<()> {
        if self.size < 32 || !self.size.is_power_of_two() {
            return Err(Error::Argument(format!(
                "image size must be a power of two ≥ 32, got {}",
                self.size
            )));
        }
        if self.n_natural_train + self.n_fake_a_train + self.n_test_per_family == 0 {
            return Err(Error::Argument("corpus plan is empty".to_string()));
        }
        Ok(())
    }
}

// --- Spectral synthesis --------------------------------------------------

/// In-place 2-D FFT of an n×n complex grid (row-major).
fn fft2(buf: &mut [Complex64], n: usize, inverse: bool) {
    let mut planner = FftPlanner::<f64>::new();
    let fft = if inverse {
        planner.plan_fft_inverse(n)
    } else {
        planner.plan_fft_forward(n)
    };
    fft.process(buf); // all rows
    // Transpose, transform the columns as rows, transpose back.
    let mut t = vec![Complex64::default(); n * n];
    for y in 0..n {
        for x in 0..n {
            t[x * n + y] = buf[y * n + x];
        }
    }
    fft.process(&mut t);
    for y in 0..n {
        for x in 0..n {
            buf[y * n + x] = t[x * n + y];
        }
    }
}

/// Wrapped frequency magnitude of FFT bin index `i` in an `n`-point grid.
fn bin_freq(i: usize, n: usize) -> f64 {
    i.min(n - i) as f64
}

/// One zero-mean, unit-variance plane with power spectrum ∝ 1/f^α:
/// draw a Gaussian complex spectrum shaped by f^{−α/2}, inverse-transform,
/// and keep the real part (implicitly Hermitian-symmetrizing the draw).
fn spectral_plane(n: usize, rng: &mut Rng) -> Vec<f64> {
    let mut spec = vec![Complex64::default(); n * n];
    for v in 0..n {
        for u in 0..n {
            if u == 0 && v == 0 {
                continue; // zero DC: the plane is zero-mean by construction
            }
            let f = bin_freq(u, n).hypot(bin_freq(v, n));
            let amp = f.powf(-NATURAL_ALPHA / 2.0);
            spec[v * n + u] = Complex64::new(amp * rng.normal(), amp * rng.normal());
        }
    }
    fft2(&mut spec, n, true);
    let mut plane: Vec<f64> = spec.iter().map(|c| c.re / (n * n) as f64).collect();
    let var = plane.iter().map(|v| v * v).sum::<f64>() / plane.len() as f64;
    let scale = 1.0 / var.sqrt().max(1e-12);
    for v in &mut plane {
        *v *= scale;
    }
    plane
}

/// Power spectrum |F|² of a real plane (used by the family tests).
#[cfg(test)]
fn periodogram(plane: &[f64], n: usize) -> Vec<f64> {
    let mut buf: Vec<Complex64> = plane.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft2(&mut buf, n, false);
    buf.iter().map(|c| c.norm_sqr()).collect()
}

/// A fresh "natural" image: power-law texture + linear illumination
/// gradient + per-channel tint, clamped to `[0,1]`.
pub fn natural_image(size: usize, rng: &mut Rng) -> Tensor {
    let plane = spectral_plane(size, rng);
    let contrast = rng.range_f64(0.10, 0.18);
    let gx = rng.range_f64(-0.15, 0.15);
    let gy = rng.range_f64(-0.15, 0.15);
    let tints = [
        rng.range_f64(-0.04, 0.04),
        rng.range_f64(-0.04, 0.04),
        rng.range_f64(-0.04, 0.04),
    ];
    let n = size;
    let mut data = vec![0.0f64; 3 * n * n];
    for y in 0..n {
        for x in 0..n {
            let ramp = gx * (x as f64 / (n - 1) as f64 - 0.5) + gy * (y as f64 / (n - 1) as f64 - 0.5);
            let base = 0.5 + contrast * plane[y * n + x] + ramp;
            for (c, &tint) in tints.iter().enumerate() {
                data[c * n * n + y * n + x] = (base + tint).clamp(0.0, 1.0);
            }
        }
    }
    Tensor::from_vec(&[3, n, n], data).expect("synthesis shape")
}

/// fakeA: add a Nyquist-frequency checkerboard to every channel.
pub fn add_checkerboard(img: &Tensor, amplitude: f64) -> Tensor {
    let &[c, h, w] = img.shape() else { unreachable!("corpus images are [3,S,S]") };
    let mut data = img.data().to_vec();
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let sign = if (x + y) % 2 == 0 { 1.0 } else { -1.0 };
                let v = &mut data[ch * h * w + y * w + x];
                *v = (*v + amplitude * sign).clamp(0.0, 1.0);
            }
        }
    }
    Tensor::from_vec(img.shape(), data).expect("synthesis shape")
}

/// fakeB: add two fixed mid-frequency cosine gratings with random phases.
pub fn add_gratings(img: &Tensor, amplitude: f64, rng: &mut Rng) -> Tensor {
    let &[c, h, w] = img.shape() else { unreachable!("corpus images are [3,S,S]") };
    let n = w as f64;
    let freqs = [
        (w as f64 / 4.0, h as f64 / 8.0),
        (w as f64 / 8.0, 3.0 * h as f64 / 8.0),
    ];
    let phases = [
        rng.range_f64(0.0, std::f64::consts::TAU),
        rng.range_f64(0.0, std::f64::consts::TAU),
    ];
    let mut data = img.data().to_vec();
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut add = 0.0;
                for ((fx, fy), phi) in freqs.iter().zip(phases.iter()) {
                    add += amplitude
                        * (std::f64::consts::TAU * (fx * x as f64 + fy * y as f64) / n + phi).cos();
                }
                let v = &mut data[ch * h * w + y * w + x];
                *v = (*v + add).clamp(0.0, 1.0);
            }
        }
    }
    Tensor::from_vec(img.shape(), data).expect("synthesis shape")
}

/// fakeC: blur then unsharp-mask (`b + amount·(b − blur(b))`).
pub fn smooth_and_sharpen(img: &Tensor) -> Result<Tensor> {
    let b = imgproc::gaussian_blur(img, FAKE_C_SIGMA)?;
    let bb = imgproc::gaussian_blur(&b, FAKE_C_SIGMA)?;
    let mut data = b.data().to_vec();
    for (v, (&bv, &bbv)) in data.iter_mut().zip(b.data().iter().zip(bb.data())) {
        *v = (bv + FAKE_C_AMOUNT * (bv - bbv)).clamp(0.0, 1.0);
    }
    Tensor::from_vec(img.shape(), data)
}

/// The four family tags, with their labels.
pub const FAMILIES: [(&str, Label); 4] = [
    ("natural", Label::Real),
    ("fakeA", Label::Fake),
    ("fakeB", Label::Fake),
    ("fakeC", Label::Fake),
];

/// Render one image of `family` from its dedicated rng.
fn render_family(family: &str, size: usize, rng: &mut Rng) -> Result<Tensor> {
    let base = natural_image(size, rng);
    Ok(match family {
        "natural" => base,
        "fakeA" => add_checkerboard(&base, FAKE_A_AMPLITUDE),
        "fakeB" => add_gratings(&base, FAKE_B_AMPLITUDE, rng),
        "fakeC" => smooth_and_sharpen(&base)?,
        other => return Err(Error::Argument(format!("unknown family {other:?}"))),
    })
}

/// Generate a corpus according to `plan` under `out_dir`, write
/// `manifest.tsv` there, and return the manifest. Bitwise reproducible
/// from the seed; image files are independent of generation order.
pub fn generate_corpus(out_dir: impl AsRef<Path>, plan: &CorpusPlan, rng: &Rng) -> Result<Manifest> {
    plan.validate()?;
    let counts: Vec<(&str, Split, usize)> = vec![
        ("natural", Split::Train, plan.n_natural_train),
        ("natural", Split::Test, plan.n_test_per_family),
        ("fakeA", Split::Train, plan.n_fake_a_train),
        ("fakeA", Split::Test, plan.n_test_per_family),
        ("fakeB", Split::Test, plan.n_test_per_family),
        ("fakeC", Split::Test, plan.n_test_per_family),
    ];
    generate_with_counts(out_dir, plan.size, &counts, rng)
}

/// Spec-shaped convenience: exactly `n_per_family` images per family.
/// Natural and fakeA put ⌈n/5⌉ of theirs in the test split and the rest
/// in train; fakeB and fakeC are test-only.
pub fn gen_synthetic_corpus(
    out_dir: impl AsRef<Path>,
    n_per_family: usize,
    size: usize,
    rng: &Rng,
) -> Result<Manifest> {
    if n_per_family == 0 {
        return Err(Error::Argument("n_per_family must be positive".to_string()));
    }
    let test = n_per_family.div_ceil(5);
    let train = n_per_family - test;
    let counts: Vec<(&str, Split, usize)> = vec![
        ("natural", Split::Train, train),
        ("natural", Split::Test, test),
        ("fakeA", Split::Train, train),
        ("fakeA", Split::Test, test),
        ("fakeB", Split::Test, n_per_family),
        ("fakeC", Split::Test, n_per_family),
    ];
    // Reuse the plan validation for the size constraint.
    CorpusPlan {
        n_natural_train: train.max(1),
        n_fake_a_train: train.max(1),
        n_test_per_family: test,
        size,
    }
    .validate()?;
    generate_with_counts(out_dir, size, &counts, rng)
}

fn generate_with_counts(
    out_dir: impl AsRef<Path>,
    size: usize,
    counts: &[(&str, Split, usize)],
    rng: &Rng,
) -> Result<Manifest> {
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let corpus_rng = rng.substream(streams::CORPUS);

    // One job per image, each with a private rng keyed by
    // (family, split, index) so output never depends on scheduling.
    struct Job {
        family: &'static str,
        label: Label,
        split: Split,
        index: usize,
        rng: Rng,
    }
    let family_index = |name: &str| FAMILIES.iter().position(|(f, _)| *f == name).unwrap();
    let mut jobs: Vec<Job> = Vec::new();
    for &(family, split, count) in counts {
        let fam = family_index(family);
        let label = FAMILIES[fam].1;
        let split_idx = match split {
            Split::Train => 0u64,
            Split::Val => 1,
            Split::Test => 2,
        };
        let fam_rng = corpus_rng.substream(fam as u64).substream(split_idx);
        let family_static = FAMILIES[fam].0;
        for index in 0..count {
            jobs.push(Job {
                family: family_static,
                label,
                split,
                index,
                rng: fam_rng.substream(index as u64),
            });
        }
    }

    for &(family, _) in &FAMILIES {
        let d = out_dir.join(family);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(d.clone(), e))?;
    }

    let records: Vec<ImageRecord> = jobs
        .into_par_iter()
        .map(|mut job| -> Result<ImageRecord> {
            let img = render_family(job.family, size, &mut job.rng)?;
            let name = format!("{}_{:05}.ppm", job.split, job.index);
            let path = out_dir.join(job.family).join(name);
            write_ppm(&img, &path)?;
            Ok(ImageRecord {
                path,
                label: job.label,
                family: job.family.to_string(),
                split: job.split,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let manifest = Manifest {
        records,
        schema_version: MANIFEST_SCHEMA_VERSION,
    };
    save_manifest(&manifest, out_dir.join("manifest.tsv"))?;
    Ok(manifest)
}
