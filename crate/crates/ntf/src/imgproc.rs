//! Pure image-space operations on channel-first `[C,H,W]` tensors with
//! values in `[0,1]`: Gaussian blur, bilinear resize, crops, horizontal
//! flip, and a JPEG-equivalent quantization round trip.
//!
//! These are deterministic (no RNG) and allocation-simple; the evaluation
//! perturbation suite and the corpus synthesizer are built on them.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn image_dims(img: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    match *img.shape() {
        [c, h, w] if c > 0 && h > 0 && w > 0 => Ok((c, h, w)),
        _ => Err(Error::dim(
            op,
            format!("expected [C,H,W] image, got {:?}", img.shape()),
        )),
    }
}

/// Mirror an out-of-range index back into `0..n` without repeating the
/// edge sample (`-1 → 1`, `n → n-2`), the usual "reflect" convention.
fn reflect(mut i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * (n - 1) - i;
        } else {
            return i as usize;
        }
    }
}

/// Normalized 1-D Gaussian taps for radius `⌈3σ⌉`.
fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Separable Gaussian blur with reflect padding. `sigma = 0` returns the
/// input unchanged (bitwise).
pub fn gaussian_blur(img: &Tensor, sigma: f64) -> Result<Tensor> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::Argument(format!(
            "blur sigma must be a finite value ≥ 0, got {sigma}"
        )));
    }
    let (c, h, w) = image_dims(img, "gaussian_blur")?;
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let src = img.data();
    // Horizontal pass.
    let mut tmp = vec![0.0f64; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            let row = ch * h * w + y * w;
            for x in 0..w {
                let mut acc = 0.0;
                for (j, &kv) in k.iter().enumerate() {
                    let sx = reflect(x as isize + j as isize - r, w);
                    acc += kv * src[row + sx];
                }
                tmp[row + x] = acc;
            }
        }
    }
    // Vertical pass.
    let mut out = vec![0.0f64; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (j, &kv) in k.iter().enumerate() {
                    let sy = reflect(y as isize + j as isize - r, h);
                    acc += kv * tmp[ch * h * w + sy * w + x];
                }
                out[ch * h * w + y * w + x] = acc;
            }
        }
    }
    Tensor::from_vec(img.shape(), out)
}

/// Bilinear resize with half-pixel center alignment. Interpolation uses
/// the `a + t·(b−a)` form, so constant images survive exactly and a
/// same-size resize is the bitwise identity.
pub fn bilinear_resize(img: &Tensor, oh: usize, ow: usize) -> Result<Tensor> {
    let (c, h, w) = image_dims(img, "bilinear_resize")?;
    if oh == 0 || ow == 0 {
        return Err(Error::Argument(format!(
            "resize target must be positive, got {oh}×{ow}"
        )));
    }
    let src = img.data();
    let mut out = vec![0.0f64; c * oh * ow];
    let lerp = |a: f64, b: f64, t: f64| a + t * (b - a);
    for ch in 0..c {
        for oy in 0..oh {
            let sy = ((oy as f64 + 0.5) * h as f64 / oh as f64 - 0.5).clamp(0.0, (h - 1) as f64);
            let y0 = sy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let ty = sy - y0 as f64;
            for ox in 0..ow {
                let sx =
                    ((ox as f64 + 0.5) * w as f64 / ow as f64 - 0.5).clamp(0.0, (w - 1) as f64);
                let x0 = sx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let tx = sx - x0 as f64;
                let base = ch * h * w;
                let top = lerp(src[base + y0 * w + x0], src[base + y0 * w + x1], tx);
                let bot = lerp(src[base + y1 * w + x0], src[base + y1 * w + x1], tx);
                out[ch * oh * ow + oy * ow + ox] = lerp(top, bot, ty);
            }
        }
    }
    Tensor::from_vec(&[c, oh, ow], out)
}

/// Axis-aligned crop at `(top, left)` with side `size`.
pub fn crop(img: &Tensor, top: usize, left: usize, size: usize) -> Result<Tensor> {
    let (c, h, w) = image_dims(img, "crop")?;
    if size == 0 || top + size > h || left + size > w {
        return Err(Error::dim(
            "crop",
            format!("{size}×{size} at ({top},{left}) does not fit in {h}×{w}"),
        ));
    }
    let src = img.data();
    let mut out = vec![0.0f64; c * size * size];
    for ch in 0..c {
        for y in 0..size {
            let srow = ch * h * w + (top + y) * w + left;
            let drow = ch * size * size + y * size;
            out[drow..drow + size].copy_from_slice(&src[srow..srow + size]);
        }
    }
    Tensor::from_vec(&[c, size, size], out)
}

/// Centered crop with side `size` (the evaluation-time crop).
pub fn center_crop(img: &Tensor, size: usize) -> Result<Tensor> {
    let (_, h, w) = image_dims(img, "center_crop")?;
    if size > h || size > w {
        return Err(Error::dim(
            "center_crop",
            format!("crop {size} exceeds image {h}×{w}"),
        ));
    }
    crop(img, (h - size) / 2, (w - size) / 2, size)
}

/// Mirror the image left-to-right.
pub fn flip_horizontal(img: &Tensor) -> Result<Tensor> {
    let (c, h, w) = image_dims(img, "flip_horizontal")?;
    let src = img.data();
    let mut out = vec![0.0f64; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            let row = ch * h * w + y * w;
            for x in 0..w {
                out[row + x] = src[row + (w - 1 - x)];
            }
        }
    }
    Tensor::from_vec(img.shape(), out)
}

// --- JPEG-equivalent quantization round trip ---------------------------
//
// The pixel effect of baseline JPEG without chroma subsampling: RGB →
// YCbCr, per-channel 8×8 block DCT, quantization by the standard
// luminance/chrominance tables scaled by the quality factor, dequantize,
// inverse DCT, inverse color transform, clamp. Entropy coding is omitted
// because it is lossless and therefore pixel-irrelevant.

/// Standard baseline luminance quantization table (quality 50).
const Q_LUMA: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

/// Standard baseline chrominance quantization table (quality 50).
const Q_CHROMA: [u16; 64] = [
    17, 18, 24, 47, 99, 99, 99, 99, //
    18, 21, 26, 66, 99, 99, 99, 99, //
    24, 26, 56, 99, 99, 99, 99, 99, //
    47, 66, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99,
];

/// Scale a base table by the quality factor using the common rule:
/// `q < 50 → 5000/q`, else `200 − 2q` (percent), each entry clamped to
/// `[1, 255]`.
fn scaled_table(base: &[u16; 64], quality: u32) -> [f64; 64] {
    let scale: u32 = if quality < 50 {
        5000 / quality
    } else {
        200 - 2 * quality
    };
    let mut out = [0.0f64; 64];
    for (o, &b) in out.iter_mut().zip(base.iter()) {
        let v = (u32::from(b) * scale + 50) / 100;
        *o = v.clamp(1, 255) as f64;
    }
    out
}

/// cos((2x+1)·u·π/16) table for the 8-point DCT.
fn dct_cos() -> [[f64; 8]; 8] {
    let mut c = [[0.0f64; 8]; 8];
    for (u, row) in c.iter_mut().enumerate() {
        for (x, v) in row.iter_mut().enumerate() {
            *v = ((2 * x + 1) as f64 * u as f64 * std::f64::consts::PI / 16.0).cos();
        }
    }
    c
}

fn dct_norm(u: usize) -> f64 {
    if u == 0 {
        std::f64::consts::FRAC_1_SQRT_2
    } else {
        1.0
    }
}

/// Forward 8×8 DCT-II with JPEG scaling of one level-shifted block.
fn dct8x8(block: &[f64; 64], cos: &[[f64; 8]; 8]) -> [f64; 64] {
    let mut out = [0.0f64; 64];
    for v in 0..8 {
        for u in 0..8 {
            let mut acc = 0.0;
            for y in 0..8 {
                for x in 0..8 {
                    acc += block[y * 8 + x] * cos[u][x] * cos[v][y];
                }
            }
            out[v * 8 + u] = 0.25 * dct_norm(u) * dct_norm(v) * acc;
        }
    }
    out
}

/// Inverse of [`dct8x8`].
fn idct8x8(coef: &[f64; 64], cos: &[[f64; 8]; 8]) -> [f64; 64] {
    let mut out = [0.0f64; 64];
    for y in 0..8 {
        for x in 0..8 {
            let mut acc = 0.0;
            for v in 0..8 {
                for u in 0..8 {
                    acc += dct_norm(u) * dct_norm(v) * coef[v * 8 + u] * cos[u][x] * cos[v][y];
                }
            }
            out[y * 8 + x] = 0.25 * acc;
        }
    }
    out
}

/// Quantization round trip of one plane (values around `[0,255]`,
/// level-shifted internally). The plane is edge-padded to a multiple of 8.
fn plane_roundtrip(plane: &mut [f64], h: usize, w: usize, table: &[f64; 64], cos: &[[f64; 8]; 8]) {
    let bh = h.div_ceil(8);
    let bw = w.div_ceil(8);
    for by in 0..bh {
        for bx in 0..bw {
            let mut block = [0.0f64; 64];
            for y in 0..8 {
                for x in 0..8 {
                    let sy = (by * 8 + y).min(h - 1);
                    let sx = (bx * 8 + x).min(w - 1);
                    block[y * 8 + x] = plane[sy * w + sx] - 128.0;
                }
            }
            let mut coef = dct8x8(&block, cos);
            for (cv, &q) in coef.iter_mut().zip(table.iter()) {
                *cv = (*cv / q).round() * q;
            }
            let rec = idct8x8(&coef, cos);
            for y in 0..8 {
                let sy = by * 8 + y;
                if sy >= h {
                    break;
                }
                for x in 0..8 {
                    let sx = bx * 8 + x;
                    if sx >= w {
                        break;
                    }
                    plane[sy * w + sx] = rec[y * 8 + x] + 128.0;
                }
            }
        }
    }
}

/// Apply the pixel effect of JPEG compression at `quality` (1–100) to an
/// RGB image in `[0,1]`.
///
/// The input is first snapped to the 8-bit grid (JPEG sources are bytes),
/// then RGB→YCbCr (no subsampling), per-plane block quantization round
/// trip, inverse transform, and a clamp back to `[0,1]`. A constant
/// mid-gray image (128/255) reconstructs exactly at any quality because
/// every level-shifted coefficient quantizes to zero.
pub fn jpeg_roundtrip(img: &Tensor, quality: u32) -> Result<Tensor> {
    if !(1..=100).contains(&quality) {
        return Err(Error::Argument(format!(
            "jpeg quality must be in 1..=100, got {quality}"
        )));
    }
    let (c, h, w) = image_dims(img, "jpeg_roundtrip")?;
    if c != 3 {
        return Err(Error::dim(
            "jpeg_roundtrip",
            format!("expected 3 channels, got {c}"),
        ));
    }
    let n = h * w;
    let src = img.data();
    let byte = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round();

    let mut yp = vec![0.0f64; n];
    let mut cb = vec![0.0f64; n];
    let mut cr = vec![0.0f64; n];
    for i in 0..n {
        let r = byte(src[i]);
        let g = byte(src[n + i]);
        let b = byte(src[2 * n + i]);
        yp[i] = 0.299 * r + 0.587 * g + 0.114 * b;
        cb[i] = 128.0 - 0.168736 * r - 0.331264 * g + 0.5 * b;
        cr[i] = 128.0 + 0.5 * r - 0.418688 * g - 0.081312 * b;
    }

    let cos = dct_cos();
    let tl = scaled_table(&Q_LUMA, quality);
    let tc = scaled_table(&Q_CHROMA, quality);
    plane_roundtrip(&mut yp, h, w, &tl, &cos);
    plane_roundtrip(&mut cb, h, w, &tc, &cos);
    plane_roundtrip(&mut cr, h, w, &tc, &cos);

    // Decode back to the byte grid, as a real decoder would.
    let mut out = vec![0.0f64; 3 * n];
    for i in 0..n {
        let y = yp[i];
        let u = cb[i] - 128.0;
        let v = cr[i] - 128.0;
        let r = y + 1.402 * v;
        let g = y - 0.344136 * u - 0.714136 * v;
        let b = y + 1.772 * u;
        out[i] = byte(r / 255.0) / 255.0;
        out[n + i] = byte(g / 255.0) / 255.0;
        out[2 * n + i] = byte(b / 255.0) / 255.0;
    }
    Tensor::from_vec(&[3, h, w], out)
}
