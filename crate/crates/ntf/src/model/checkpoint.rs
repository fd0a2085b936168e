//! Checkpoint persistence for [`ModelBundle`].
//!
//! Binary layout (all integers little-endian):
//!
//! ```text
//! magic      4 bytes  "NTF1"
//! version    u32      currently 1
//! dtype      u8       2 = f64 (the only supported payload type)
//! input_size u32
//! n_blocks   u32      followed by n_blocks × u32 channel counts
//! embed_dim  u32
//! proj_dim   u32
//! flags      5 × u8   frozen: encoder, f_hom, f_het, f_aux, classifier
//! n_arrays   u32
//! per array:
//!   name_len u16, name bytes (UTF-8)
//!   ndim     u8,  ndim × u32 dims
//!   payload  numel × f64
//! crc        u32      CRC-32 (IEEE) over every preceding byte
//! ```
//!
//! Parameters are stored as full-precision f64 so a save/load round trip is
//! bitwise exact — a requirement for the persistence invariants (reloaded
//! models must reproduce outputs bit for bit).
//!
//! Load-time failures are distinguished: wrong magic, unsupported version,
//! short file, checksum mismatch, and structural problems (unknown array
//! names, shape mismatches) each raise a different error.

use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::{EncoderConfig, FrozenFlags, ModelBundle, ModelConfig};

const MAGIC: &[u8; 4] = b"NTF1";
const VERSION: u32 = 1;
const DTYPE_F64: u8 = 2;

/// CRC-32 (IEEE 802.3, reflected, polynomial 0xEDB88320), the same
/// checksum used by gzip and PNG. Bitwise implementation; the checkpoint
/// payloads are small enough that a lookup table is not worth the code.
fn crc32(bytes: &[u8]) -> u32 {
    let mut crc: u32 = 0xFFFF_FFFF;
    for &b in bytes {
        crc ^= b as u32;
        for _ in 0..8 {
            let mask = 0u32.wrapping_sub(crc & 1);
            crc = (crc >> 1) ^ (0xEDB8_8320 & mask);
        }
    }
    !crc
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn usize_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Argument(format!("{what} {v} exceeds u32 range")))
}

/// Serialize a bundle to `buf` (without touching the filesystem).
fn encode_bundle(bundle: &ModelBundle) -> Result<Vec<u8>> {
    let mut w = Writer { buf: Vec::new() };
    w.buf.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.u8(DTYPE_F64);
    let cfg = &bundle.config;
    w.u32(usize_u32(cfg.encoder.input_size, "input size")?);
    w.u32(usize_u32(cfg.encoder.channels.len(), "block count")?);
    for &c in &cfg.encoder.channels {
        w.u32(usize_u32(c, "channel count")?);
    }
    w.u32(usize_u32(cfg.encoder.embed_dim, "embed dim")?);
    w.u32(usize_u32(cfg.proj_dim, "projection dim")?);
    for flag in [
        bundle.frozen.encoder,
        bundle.frozen.f_hom,
        bundle.frozen.f_het,
        bundle.frozen.f_aux,
        bundle.frozen.classifier,
    ] {
        w.u8(flag as u8);
    }
    let params = bundle.named_params();
    w.u32(usize_u32(params.len(), "array count")?);
    for (name, tensor, _) in &params {
        let name_bytes = name.as_bytes();
        w.u16(u16::try_from(name_bytes.len()).expect("parameter names are short"));
        w.buf.extend_from_slice(name_bytes);
        w.u8(u8::try_from(tensor.shape().len()).expect("parameter ranks are small"));
        for &d in tensor.shape() {
            w.u32(usize_u32(d, "array dim")?);
        }
        for &v in tensor.data() {
            w.f64(v);
        }
    }
    let crc = crc32(&w.buf);
    w.u32(crc);
    Ok(w.buf)
}

/// Write `bundle` to `path`, replacing any existing file.
pub fn save_checkpoint(bundle: &ModelBundle, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_bundle(bundle)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::CheckpointTruncated {
                path: self.path.to_string(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn format(&self, detail: impl Into<String>) -> Error {
        Error::CheckpointFormat {
            path: self.path.to_string(),
            detail: detail.into(),
        }
    }
}

/// Read a bundle back from `path`.
///
/// Check order: magic, version, checksum, then structure — so a corrupted
/// payload byte reports a checksum mismatch rather than a confusing
/// structural error, and a wrong-format file is rejected on its first bytes.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelBundle> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let path_str = path.display().to_string();

    if bytes.len() < 4 {
        return Err(Error::CheckpointTruncated { path: path_str });
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::CheckpointMagic { path: path_str });
    }
    if bytes.len() < 12 {
        // magic + version + checksum trailer do not fit
        return Err(Error::CheckpointTruncated { path: path_str });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::CheckpointVersion {
            path: path_str,
            found: version,
        });
    }
    let body = &bytes[..bytes.len() - 4];
    let stored_crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    if crc32(body) != stored_crc {
        return Err(Error::CheckpointChecksum { path: path_str });
    }

    let mut r = Reader {
        buf: body,
        pos: 8, // past magic + version
        path: &path_str,
    };

    let dtype = r.u8()?;
    if dtype != DTYPE_F64 {
        return Err(r.format(format!("unsupported dtype tag {dtype}")));
    }
    let input_size = r.u32()? as usize;
    let n_blocks = r.u32()? as usize;
    if n_blocks > 64 {
        return Err(r.format(format!("implausible block count {n_blocks}")));
    }
    let mut channels = Vec::with_capacity(n_blocks);
    for _ in 0..n_blocks {
        channels.push(r.u32()? as usize);
    }
    let embed_dim = r.u32()? as usize;
    let proj_dim = r.u32()? as usize;
    let config = ModelConfig {
        encoder: EncoderConfig {
            input_size,
            channels,
            embed_dim,
        },
        proj_dim,
    };
    config
        .validate()
        .map_err(|e| r.format(format!("stored config is invalid: {e}")))?;

    let mut flags = [false; 5];
    for f in &mut flags {
        *f = match r.u8()? {
            0 => false,
            1 => true,
            other => return Err(r.format(format!("bad freeze flag byte {other}"))),
        };
    }
    let frozen = FrozenFlags {
        encoder: flags[0],
        f_hom: flags[1],
        f_het: flags[2],
        f_aux: flags[3],
        classifier: flags[4],
    };

    // Start from a structurally correct bundle and overwrite every array.
    let mut bundle = ModelBundle::new(&config, &Rng::new(0))?;
    bundle.frozen = frozen;

    let expected: Vec<(String, Vec<usize>)> = bundle
        .named_params()
        .iter()
        .map(|(n, t, _)| (n.clone(), t.shape().to_vec()))
        .collect();

    let n_arrays = r.u32()? as usize;
    if n_arrays != expected.len() {
        return Err(r.format(format!(
            "expected {} parameter arrays, found {n_arrays}",
            expected.len()
        )));
    }

    let mut loaded: Vec<(String, Tensor)> = Vec::with_capacity(n_arrays);
    for _ in 0..n_arrays {
        let name_len = r.u16()? as usize;
        let name_bytes = r.take(name_len)?;
        let name = std::str::from_utf8(name_bytes)
            .map_err(|_| r.format("array name is not UTF-8"))?
            .to_string();
        let ndim = r.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(r.f64()?);
        }
        let t = Tensor::from_vec(&shape, data)
            .map_err(|e| r.format(format!("array {name}: {e}")))?;
        loaded.push((name, t));
    }
    if r.pos != r.buf.len() {
        return Err(r.format(format!(
            "{} trailing bytes after the last array",
            r.buf.len() - r.pos
        )));
    }

    for (i, (name, tensor)) in loaded.into_iter().enumerate() {
        let (ref want_name, ref want_shape) = expected[i];
        if &name != want_name {
            return Err(Error::CheckpointFormat {
                path: path_str,
                detail: format!("array {i} is named {name:?}, expected {want_name:?}"),
            });
        }
        if tensor.shape() != &want_shape[..] {
            return Err(Error::CheckpointFormat {
                path: path_str,
                detail: format!(
                    "array {name}: shape {:?} does not match config-implied {:?}",
                    tensor.shape(),
                    want_shape
                ),
            });
        }
        let slot = &mut bundle.named_params_mut()[i];
        *slot.1 = tensor;
    }

    Ok(bundle)
}
