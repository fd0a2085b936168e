//! Corpus plumbing: manifest parsing, PPM image I/O, augmentation, batch
//! assembly for both training stages, and (in [`corpus`]) the synthetic
//! corpus generator.
//!
//! A corpus on disk is a directory of binary PPM (P6) images plus one
//! tab-separated manifest, one line per image:
//!
//! ```text
//! path<TAB>label<TAB>family<TAB>split
//! ```
//!
//! where `label ∈ {real, fake}`, `split ∈ {train, val, test}`, and
//! `family` is a free-form nonempty tag (e.g. `natural`, `fakeA`).
//! Relative paths are resolved against the manifest's directory.

pub mod corpus;

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::error::{DecodeErrorKind, Error, Result};
use crate::imgproc;
use crate::losses::PairedBatch;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

/// Ground-truth class of an image. `Fake` is the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    Real,
    Fake,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Real => "real",
            Label::Fake => "fake",
        }
    }
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Dataset partition a record belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One manifest line: an image on disk plus its metadata.
#[derive(Debug, Clone)]
pub struct ImageRecord {
    /// Resolved path (absolute, or relative to the process cwd).
    pub path: PathBuf,
    pub label: Label,
    pub family: String,
    pub split: Split,
}

/// A parsed corpus manifest.
#[derive(Debug, Clone)]
pub struct Manifest {
    pub records: Vec<ImageRecord>,
    pub schema_version: u32,
}

impl Manifest {
    /// Records matching the given filters (`None` = don't filter).
    pub fn select(
        &self,
        split: Option<Split>,
        label: Option<Label>,
        family: Option<&str>,
    ) -> Vec<&ImageRecord> {
        self.records
            .iter()
            .filter(|r| split.is_none_or(|s| r.split == s))
            .filter(|r| label.is_none_or(|l| r.label == l))
            .filter(|r| family.is_none_or(|f| r.family == f))
            .collect()
    }

    /// Distinct family tags in first-appearance order.
    pub fn families(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for r in &self.records {
            if seen.insert(r.family.clone()) {
                out.push(r.family.clone());
            }
        }
        out
    }
}

fn manifest_err(path: &Path, line: usize, detail: impl Into<String>) -> Error {
    Error::Manifest {
        path: path.display().to_string(),
        line,
        detail: detail.into(),
    }
}

/// Parse a tab-separated manifest and verify that every referenced image
/// exists. Relative record paths are resolved against the manifest's
/// directory.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));

    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split('\t').collect();
        if fields.len() != 4 {
            return Err(manifest_err(
                path,
                lineno,
                format!("expected 4 tab-separated fields, found {}", fields.len()),
            ));
        }
        let (p, label_s, family, split_s) = (fields[0], fields[1], fields[2], fields[3]);
        if p.is_empty() {
            return Err(manifest_err(path, lineno, "empty path"));
        }
        let label = match label_s {
            "real" => Label::Real,
            "fake" => Label::Fake,
            other => {
                return Err(manifest_err(
                    path,
                    lineno,
                    format!("unknown label {other:?} (expected \"real\" or \"fake\")"),
                ))
            }
        };
        let split = match split_s {
            "train" => Split::Train,
            "val" => Split::Val,
            "test" => Split::Test,
            other => {
                return Err(manifest_err(
                    path,
                    lineno,
                    format!("unknown split {other:?} (expected train/val/test)"),
                ))
            }
        };
        if family.is_empty() {
            return Err(manifest_err(path, lineno, "empty family tag"));
        }
        if !seen.insert(p.to_string()) {
            return Err(manifest_err(path, lineno, format!("duplicate path {p:?}")));
        }
        let resolved = if Path::new(p).is_absolute() {
            PathBuf::from(p)
        } else {
            base.join(p)
        };
        if !resolved.exists() {
            return Err(manifest_err(
                path,
                lineno,
                format!("referenced image {} does not exist", resolved.display()),
            ));
        }
        records.push(ImageRecord {
            path: resolved,
            label,
            family: family.to_string(),
            split,
        });
    }
    Ok(Manifest {
        records,
        schema_version: MANIFEST_SCHEMA_VERSION,
    })
}

/// Write a manifest next to its corpus. Record paths under the manifest's
/// directory are written relative to it, so the corpus stays relocatable.
pub fn save_manifest(manifest: &Manifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new("."));
    let mut text = String::new();
    for r in &manifest.records {
        let p = r.path.strip_prefix(base).unwrap_or(&r.path);
        text.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            p.display(),
            r.label,
            r.family,
            r.split
        ));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

// --- PPM (P6) codec -----------------------------------------------------

fn decode_err(path: &Path, kind: DecodeErrorKind) -> Error {
    Error::Decode {
        path: path.display().to_string(),
        kind,
    }
}

/// Pull the next whitespace-delimited token, skipping `#` comments, and
/// parse it as a number.
fn ppm_token(bytes: &[u8], pos: &mut usize) -> Option<usize> {
    // Skip whitespace and comments.
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
        *pos += 1;
    }
    if *pos == start {
        return None;
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()?
        .parse()
        .ok()
}

/// Decode a binary PPM (P6, 8-bit) file into a `[3,H,W]` tensor with
/// values `byte/255`.
pub fn read_image(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(decode_err(path, DecodeErrorKind::BadMagic));
    }
    let mut pos = 2;
    let w = ppm_token(&bytes, &mut pos).ok_or_else(|| decode_err(path, DecodeErrorKind::BadHeader))?;
    let h = ppm_token(&bytes, &mut pos).ok_or_else(|| decode_err(path, DecodeErrorKind::BadHeader))?;
    let maxval =
        ppm_token(&bytes, &mut pos).ok_or_else(|| decode_err(path, DecodeErrorKind::BadHeader))?;
    if w == 0 || h == 0 {
        return Err(decode_err(path, DecodeErrorKind::BadHeader));
    }
    if maxval != 255 {
        return Err(decode_err(path, DecodeErrorKind::UnsupportedDepth));
    }
    // Exactly one whitespace byte separates the header from the payload.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(decode_err(path, DecodeErrorKind::BadHeader));
    }
    pos += 1;
    let need = 3 * w * h;
    if bytes.len() - pos < need {
        return Err(decode_err(path, DecodeErrorKind::Truncated));
    }
    let payload = &bytes[pos..pos + need];
    let mut data = vec![0.0f64; need];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                data[c * h * w + y * w + x] = payload[(y * w + x) * 3 + c] as f64 / 255.0;
            }
        }
    }
    Tensor::from_vec(&[3, h, w], data)
}

/// Encode a `[3,H,W]` tensor as binary PPM, snapping samples to bytes.
pub fn write_ppm(img: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let &[c, h, w] = img.shape() else {
        return Err(Error::dim(
            "write_ppm",
            format!("expected [3,H,W], got {:?}", img.shape()),
        ));
    };
    if c != 3 {
        return Err(Error::dim("write_ppm", format!("expected 3 channels, got {c}")));
    }
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    let data = img.data();
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                let v = (data[ch * h * w + y * w + x].clamp(0.0, 1.0) * 255.0).round();
                bytes.push(v as u8);
            }
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

// --- Augmentation -------------------------------------------------------

/// Training-time augmentation parameters. Each image always yields two
/// views.
#[derive(Debug, Clone, Copy)]
pub struct AugmentConfig {
    /// Output side length of the random crop.
    pub crop_size: usize,
    /// Probability of a horizontal flip.
    pub flip_prob: f64,
    /// Per-channel multiplicative brightness jitter `[1−j, 1+j]`.
    pub brightness_jitter: f64,
}

/// Views produced per source image by batch assembly; the contrastive
/// batch layout (`PairedBatch`) is built around exactly two.
pub const VIEWS_PER_IMAGE: usize = 2;

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            crop_size: 32,
            flip_prob: 0.5,
            brightness_jitter: 0.2,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.crop_size == 0 {
            return Err(Error::Argument("crop size must be positive".to_string()));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Argument(format!(
                "flip probability must be in [0,1], got {}",
                self.flip_prob
            )));
        }
        if !(0.0..=1.0).contains(&self.brightness_jitter) {
            return Err(Error::Argument(format!(
                "brightness jitter must be in [0,1], got {}",
                self.brightness_jitter
            )));
        }
        Ok(())
    }
}

/// One random view of an image: uniform random crop, horizontal flip with
/// `flip_prob`, per-channel multiplicative brightness jitter, clamp to
/// `[0,1]`. Deterministic given the rng state.
pub fn augment(img: &Tensor, cfg: &AugmentConfig, rng: &mut Rng) -> Result<Tensor> {
    cfg.validate()?;
    let &[c, h, w] = img.shape() else {
        return Err(Error::dim(
            "augment",
            format!("expected [C,H,W], got {:?}", img.shape()),
        ));
    };
    let s = cfg.crop_size;
    if h < s || w < s {
        return Err(Error::dim(
            "augment",
            format!("image {h}×{w} is smaller than crop {s}"),
        ));
    }
    let top = rng.uniform_usize(h - s + 1);
    let left = rng.uniform_usize(w - s + 1);
    let mut out = imgproc::crop(img, top, left, s)?;
    if rng.unit_f64() < cfg.flip_prob {
        out = imgproc::flip_horizontal(&out)?;
    }
    let j = cfg.brightness_jitter;
    let mut factors = [0.0f64; 3];
    for (ch, f) in factors.iter_mut().enumerate().take(c.min(3)) {
        *f = rng.range_f64(1.0 - j, 1.0 + j);
        let _ = ch;
    }
    let plane = s * s;
    let data = out.data_mut();
    for ch in 0..c {
        let f = factors[ch.min(2)];
        for v in &mut data[ch * plane..(ch + 1) * plane] {
            *v = (*v * f).clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

// --- Preloaded image sets and batch assembly ----------------------------

/// A filtered slice of the corpus with every image decoded into memory.
/// Order follows the manifest, so batch sampling is deterministic given
/// (manifest order, seed).
#[derive(Debug, Clone)]
pub struct ImageSet {
    pub records: Vec<ImageRecord>,
    pub images: Vec<Tensor>,
}

impl ImageSet {
    /// Load every record matching the filters. Decoding runs in parallel;
    /// results join in manifest order.
    pub fn load(
        manifest: &Manifest,
        split: Option<Split>,
        label: Option<Label>,
        family: Option<&str>,
    ) -> Result<ImageSet> {
        let records: Vec<ImageRecord> = manifest
            .select(split, label, family)
            .into_iter()
            .cloned()
            .collect();
        let images: Vec<Tensor> = records
            .par_iter()
            .map(|r| read_image(&r.path))
            .collect::<Result<Vec<_>>>()?;
        Ok(ImageSet { records, images })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Stack per-view `[3,S,S]` tensors into one `[rows,3,S,S]` batch tensor.
pub(crate) fn stack_views(views: &[Tensor]) -> Result<Tensor> {
    let &[c, h, w] = views[0].shape() else {
        return Err(Error::dim("stack_views", "views must be [C,H,W]"));
    };
    let mut data = Vec::with_capacity(views.len() * c * h * w);
    for v in views {
        if v.shape() != views[0].shape() {
            return Err(Error::dim("stack_views", "inconsistent view shapes"));
        }
        data.extend_from_slice(v.data());
    }
    Tensor::from_vec(&[views.len(), c, h, w], data)
}

/// Draw `n` distinct indices from `0..len` (partial Fisher–Yates).
fn sample_distinct(len: usize, n: usize, rng: &mut Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..len).collect();
    for i in 0..n {
        let j = i + rng.uniform_usize(len - i);
        idx.swap(i, j);
    }
    idx.truncate(n);
    idx
}

/// Assemble a stage-1 contrastive batch: `n` distinct real sources, two
/// augmented views each, rows interleaved so views `2i` and `2i+1` share
/// source `i`. Returns the stacked pixels and the batch layout.
pub fn make_stage1_batch(
    set: &ImageSet,
    n: usize,
    cfg: &AugmentConfig,
    rng: &Rng,
) -> Result<(Tensor, PairedBatch)> {
    if n < 2 {
        return Err(Error::Argument(format!(
            "stage-1 batches need at least 2 sources, got {n}"
        )));
    }
    if set.records.iter().any(|r| r.label != Label::Real) {
        return Err(Error::contract(
            "make_stage1_batch",
            "stage-1 batches must draw from real images only".to_string(),
        ));
    }
    if set.len() < n {
        return Err(Error::contract(
            "make_stage1_batch",
            format!("need {n} real training images, found {}", set.len()),
        ));
    }
    let picked = sample_distinct(set.len(), n, &mut rng.substream(0));
    let mut views = Vec::with_capacity(VIEWS_PER_IMAGE * n);
    let mut source_id = Vec::with_capacity(VIEWS_PER_IMAGE * n);
    for (i, &src) in picked.iter().enumerate() {
        for v in 0..VIEWS_PER_IMAGE {
            let mut vrng = rng.substream(1 + (VIEWS_PER_IMAGE * i + v) as u64);
            views.push(augment(&set.images[src], cfg, &mut vrng)?);
            source_id.push(i as u32);
        }
    }
    Ok((stack_views(&views)?, PairedBatch::new(source_id, None)?))
}

/// Assemble a labeled stage-2 batch: `n_real` real + `n_fake` fake train
/// sources, two views each, real sources first.
pub fn make_stage2_batch(
    real: &ImageSet,
    fake: &ImageSet,
    n_real: usize,
    n_fake: usize,
    cfg: &AugmentConfig,
    rng: &Rng,
) -> Result<(Tensor, PairedBatch)> {
    if n_real == 0 || n_fake == 0 {
        return Err(Error::Argument(
            "stage-2 batches need at least one source per class".to_string(),
        ));
    }
    if real.is_empty() || fake.is_empty() {
        return Err(Error::contract(
            "make_stage2_batch",
            format!(
                "both classes must be available: {} real, {} fake",
                real.len(),
                fake.len()
            ),
        ));
    }
    if real.len() < n_real || fake.len() < n_fake {
        return Err(Error::contract(
            "make_stage2_batch",
            format!(
                "need {n_real} real and {n_fake} fake images, found {} and {}",
                real.len(),
                fake.len()
            ),
        ));
    }
    let picked_real = sample_distinct(real.len(), n_real, &mut rng.substream(0));
    let picked_fake = sample_distinct(fake.len(), n_fake, &mut rng.substream(1));

    let total = n_real + n_fake;
    let mut views = Vec::with_capacity(VIEWS_PER_IMAGE * total);
    let mut source_id = Vec::with_capacity(VIEWS_PER_IMAGE * total);
    let mut labels = Vec::with_capacity(VIEWS_PER_IMAGE * total);
    for (i, (&src, is_fake)) in picked_real
        .iter()
        .map(|s| (s, false))
        .chain(picked_fake.iter().map(|s| (s, true)))
        .enumerate()
    {
        let img = if is_fake {
            &fake.images[src]
        } else {
            &real.images[src]
        };
        for v in 0..VIEWS_PER_IMAGE {
            let mut vrng = rng.substream(2 + (VIEWS_PER_IMAGE * i + v) as u64);
            views.push(augment(img, cfg, &mut vrng)?);
            source_id.push(i as u32);
            labels.push(is_fake);
        }
    }
    Ok((
        stack_views(&views)?,
        PairedBatch::new(source_id, Some(labels))?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_file(dir: &Path, name: &str, contents: &[u8]) -> PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, contents).unwrap();
        p
    }

    fn tiny_ppm(w: usize, h: usize, rgb: (u8, u8, u8)) -> Vec<u8> {
        let mut b = format!("P6\n{w} {h}\n255\n").into_bytes();
        for _ in 0..w * h {
            b.extend_from_slice(&[rgb.0, rgb.1, rgb.2]);
        }
        b
    }

    #[test]
    fn manifest_parses_valid_lines() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["a.ppm", "b.ppm", "c.ppm"] {
            write_file(dir.path(), name, &tiny_ppm(2, 2, (0, 0, 0)));
        }
        let m = write_file(
            dir.path(),
            "manifest.tsv",
            b"a.ppm\treal\tnatural\ttrain\nb.ppm\tfake\tfakeA\ttrain\nc.ppm\tfake\tfakeB\ttest\n",
        );
        let manifest = load_manifest(&m).unwrap();
        assert_eq!(manifest.records.len(), 3);
        assert_eq!(manifest.records[0].label, Label::Real);
        assert_eq!(manifest.records[2].split, Split::Test);
        assert_eq!(manifest.families(), vec!["natural", "fakeA", "fakeB"]);
        assert_eq!(manifest.select(Some(Split::Train), None, None).len(), 2);
        assert_eq!(
            manifest
                .select(None, Some(Label::Fake), Some("fakeA"))
                .len(),
            1
        );
    }

    #[test]
    fn manifest_rejects_unknown_label_with_line_number() {
        let dir = tempfile::tempdir().unwrap();
        write_file(dir.path(), "a.ppm", &tiny_ppm(2, 2, (0, 0, 0)));
        let m = write_file(
            dir.path(),
            "manifest.tsv",
            b"a.ppm\treal\tnatural\ttrain\na.ppm\thalf-real\tnatural\ttrain\n",
        );
        match load_manifest(&m) {
            Err(Error::Manifest { line, detail, .. }) => {
                assert_eq!(line, 2);
                assert!(detail.contains("half-real"));
            }
            other => panic!("expected manifest error, got {other:?}"),
        }
    }

    #[test]
    fn manifest_rejects_duplicate_paths_and_bad_field_counts() {
        let dir = tempfile::tempdir().unwrap();
        write_file(dir.path(), "a.ppm", &tiny_ppm(2, 2, (0, 0, 0)));
        let dup = write_file(
            dir.path(),
            "dup.tsv",
            b"a.ppm\treal\tnatural\ttrain\na.ppm\treal\tnatural\ttest\n",
        );
        match load_manifest(&dup) {
            Err(Error::Manifest { line, detail, .. }) => {
                assert_eq!(line, 2);
                assert!(detail.contains("duplicate"));
            }
            other => panic!("expected duplicate error, got {other:?}"),
        }
        let bad = write_file(dir.path(), "bad.tsv", b"a.ppm\treal\tnatural\n");
        assert!(matches!(load_manifest(&bad), Err(Error::Manifest { .. })));
    }

    #[test]
    fn manifest_requires_referenced_images_to_exist() {
        let dir = tempfile::tempdir().unwrap();
        let m = write_file(dir.path(), "m.tsv", b"ghost.ppm\treal\tnatural\ttrain\n");
        match load_manifest(&m) {
            Err(Error::Manifest { detail, .. }) => assert!(detail.contains("does not exist")),
            other => panic!("expected manifest error, got {other:?}"),
        }
    }

    #[test]
    fn manifest_round_trips_through_save() {
        let dir = tempfile::tempdir().unwrap();
        write_file(dir.path(), "a.ppm", &tiny_ppm(2, 2, (1, 2, 3)));
        let m = write_file(dir.path(), "m.tsv", b"a.ppm\treal\tnatural\ttrain\n");
        let manifest = load_manifest(&m).unwrap();
        let m2 = dir.path().join("m2.tsv");
        save_manifest(&manifest, &m2).unwrap();
        let reloaded = load_manifest(&m2).unwrap();
        assert_eq!(reloaded.records.len(), 1);
        assert_eq!(reloaded.records[0].family, "natural");
    }

    #[test]
    fn ppm_decodes_solid_red() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_file(dir.path(), "red.ppm", &tiny_ppm(2, 2, (255, 0, 0)));
        let img = read_image(&p).unwrap();
        assert_eq!(img.shape(), &[3, 2, 2]);
        assert!(img.data()[0..4].iter().all(|&v| v == 1.0)); // red plane
        assert!(img.data()[4..12].iter().all(|&v| v == 0.0)); // green, blue
    }

    #[test]
    fn ppm_decode_errors_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let bad_magic = write_file(dir.path(), "p5.ppm", b"P5\n2 2\n255\n....");
        assert!(matches!(
            read_image(&bad_magic),
            Err(Error::Decode {
                kind: DecodeErrorKind::BadMagic,
                ..
            })
        ));

        let bad_header = write_file(dir.path(), "h.ppm", b"P6\n2 two\n255\n");
        assert!(matches!(
            read_image(&bad_header),
            Err(Error::Decode {
                kind: DecodeErrorKind::BadHeader,
                ..
            })
        ));

        let deep = write_file(dir.path(), "d.ppm", b"P6\n2 2\n65535\n");
        assert!(matches!(
            read_image(&deep),
            Err(Error::Decode {
                kind: DecodeErrorKind::UnsupportedDepth,
                ..
            })
        ));

        // Header claims 4×4 but the payload holds only 3×4 pixels.
        let mut short = format!("P6\n4 4\n255\n").into_bytes();
        short.extend(std::iter::repeat_n(7u8, 3 * 12));
        let trunc = write_file(dir.path(), "t.ppm", &short);
        assert!(matches!(
            read_image(&trunc),
            Err(Error::Decode {
                kind: DecodeErrorKind::Truncated,
                ..
            })
        ));
    }

    #[test]
    fn ppm_comments_in_header_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let mut b = b"P6\n# a comment\n2 1 # trailing\n255\n".to_vec();
        b.extend_from_slice(&[10, 20, 30, 40, 50, 60]);
        let p = write_file(dir.path(), "c.ppm", &b);
        let img = read_image(&p).unwrap();
        assert_eq!(img.shape(), &[3, 1, 2]);
        assert!((img.data()[0] - 10.0 / 255.0).abs() < 1e-12);
    }

    #[test]
    fn ppm_write_read_round_trip_is_byte_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = Rng::new(4);
        let data: Vec<f64> = (0..3 * 5 * 4).map(|_| rng.uniform(256) as f64 / 255.0).collect();
        let img = Tensor::from_vec(&[3, 5, 4], data).unwrap();
        let p = dir.path().join("rt.ppm");
        write_ppm(&img, &p).unwrap();
        let back = read_image(&p).unwrap();
        assert!(img
            .data()
            .iter()
            .zip(back.data())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
        // And the bytes themselves are stable across a second write.
        let p2 = dir.path().join("rt2.ppm");
        write_ppm(&back, &p2).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn degenerate_augmentation_is_identity() {
        let mut rng = Rng::new(5);
        let data: Vec<f64> = (0..3 * 6 * 6).map(|_| rng.uniform(256) as f64 / 255.0).collect();
        let img = Tensor::from_vec(&[3, 6, 6], data).unwrap();
        let cfg = AugmentConfig {
            crop_size: 6,
            flip_prob: 0.0,
            brightness_jitter: 0.0,
        };
        let mut arng = Rng::new(99);
        let out = augment(&img, &cfg, &mut arng).unwrap();
        assert!(img
            .data()
            .iter()
            .zip(out.data())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn augmentation_is_deterministic_and_clamped() {
        let mut rng = Rng::new(6);
        let data: Vec<f64> = (0..3 * 8 * 8).map(|_| rng.unit_f64() * 1.0).collect();
        let img = Tensor::from_vec(&[3, 8, 8], data).unwrap();
        let cfg = AugmentConfig {
            crop_size: 5,
            flip_prob: 0.5,
            brightness_jitter: 0.3,
        };
        let out1 = augment(&img, &cfg, &mut Rng::new(11)).unwrap();
        let out2 = augment(&img, &cfg, &mut Rng::new(11)).unwrap();
        assert!(out1
            .data()
            .iter()
            .zip(out2.data())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(out1.shape(), &[3, 5, 5]);
        for seed in 0..20 {
            let out = augment(&img, &cfg, &mut Rng::new(seed)).unwrap();
            assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn augmentation_rejects_undersized_images() {
        let img = Tensor::zeros(&[3, 4, 4]);
        let cfg = AugmentConfig {
            crop_size: 5,
            ..AugmentConfig::default()
        };
        assert!(matches!(
            augment(&img, &cfg, &mut Rng::new(0)),
            Err(Error::Dimension { .. })
        ));
    }

    /// Build a tiny in-memory corpus: `n` real + `m` fake 6×6 images.
    fn tiny_sets(n: usize, m: usize) -> (ImageSet, ImageSet) {
        let mut rng = Rng::new(13);
        let mut mk = |label: Label, family: &str, count: usize| -> ImageSet {
            let mut records = Vec::new();
            let mut images = Vec::new();
            for i in 0..count {
                let data: Vec<f64> = (0..3 * 36).map(|_| rng.uniform(256) as f64 / 255.0).collect();
                images.push(Tensor::from_vec(&[3, 6, 6], data).unwrap());
                records.push(ImageRecord {
                    path: PathBuf::from(format!("{family}/{i}.ppm")),
                    label,
                    family: family.to_string(),
                    split: Split::Train,
                });
            }
            ImageSet { records, images }
        };
        (mk(Label::Real, "natural", n), mk(Label::Fake, "fakeA", m))
    }

    #[test]
    fn stage1_batches_have_paired_structure() {
        let (real, _) = tiny_sets(6, 0);
        let cfg = AugmentConfig {
            crop_size: 6,
            ..AugmentConfig::default()
        };
        let (x, batch) = make_stage1_batch(&real, 4, &cfg, &Rng::new(3)).unwrap();
        assert_eq!(x.shape(), &[8, 3, 6, 6]);
        assert_eq!(batch.rows(), 8);
        for i in 0..4 {
            assert_eq!(batch.source_of(2 * i), i as u32);
            assert_eq!(batch.source_of(2 * i + 1), i as u32);
            assert_eq!(batch.pair_of(2 * i), 2 * i + 1);
            assert_eq!(batch.pair_of(2 * i + 1), 2 * i);
        }
        assert!(batch.labels().is_none());
    }

    #[test]
    fn stage1_batch_is_reproducible_and_respects_preconditions() {
        let (real, fake) = tiny_sets(5, 2);
        let cfg = AugmentConfig {
            crop_size: 5,
            ..AugmentConfig::default()
        };
        let (x1, _) = make_stage1_batch(&real, 3, &cfg, &Rng::new(8)).unwrap();
        let (x2, _) = make_stage1_batch(&real, 3, &cfg, &Rng::new(8)).unwrap();
        assert!(x1
            .data()
            .iter()
            .zip(x2.data())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
        let (x3, _) = make_stage1_batch(&real, 3, &cfg, &Rng::new(9)).unwrap();
        assert!(x1.data() != x3.data());

        assert!(make_stage1_batch(&real, 1, &cfg, &Rng::new(0)).is_err());
        assert!(make_stage1_batch(&real, 6, &cfg, &Rng::new(0)).is_err());
        assert!(make_stage1_batch(&fake, 2, &cfg, &Rng::new(0)).is_err());
    }

    #[test]
    fn stage1_views_of_one_source_differ() {
        let (real, _) = tiny_sets(4, 0);
        let cfg = AugmentConfig {
            crop_size: 4,
            flip_prob: 0.5,
            brightness_jitter: 0.2,
        };
        let (x, _) = make_stage1_batch(&real, 4, &cfg, &Rng::new(21)).unwrap();
        let row = 3 * 16;
        let d = x.data();
        let mut any_diff = false;
        for i in 0..4 {
            let a = &d[2 * i * row..(2 * i + 1) * row];
            let b = &d[(2 * i + 1) * row..(2 * i + 2) * row];
            if a != b {
                any_diff = true;
            }
        }
        assert!(any_diff, "independent augmentations should differ");
    }

    #[test]
    fn stage2_batches_are_labeled_and_balanced() {
        let (real, fake) = tiny_sets(10, 10);
        let cfg = AugmentConfig {
            crop_size: 6,
            ..AugmentConfig::default()
        };
        let (x, batch) = make_stage2_batch(&real, &fake, 8, 8, &cfg, &Rng::new(2)).unwrap();
        assert_eq!(x.shape(), &[32, 3, 6, 6]);
        let labels = batch.labels().unwrap();
        assert_eq!(labels.iter().filter(|&&f| f).count(), 16);
        assert_eq!(labels.iter().filter(|&&f| !f).count(), 16);
        // Real sources come first, and every source contributes two views.
        for i in 0..8 {
            assert!(!labels[2 * i]);
            assert!(labels[16 + 2 * i]);
        }
        let (y1, _) = make_stage2_batch(&real, &fake, 8, 8, &cfg, &Rng::new(2)).unwrap();
        assert!(x
            .data()
            .iter()
            .zip(y1.data())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn stage2_batch_requires_both_classes() {
        let (real, fake) = tiny_sets(4, 0);
        let cfg = AugmentConfig {
            crop_size: 6,
            ..AugmentConfig::default()
        };
        assert!(matches!(
            make_stage2_batch(&real, &fake, 2, 2, &cfg, &Rng::new(0)),
            Err(Error::Contract { .. })
        ));
    }
}
