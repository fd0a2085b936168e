//! Crate-wide error type.
//!
//! Every fallible public operation returns [`Result`]. Variants are grouped
//! by failure class so callers (notably the CLI) can map them onto process
//! exit codes without string matching.

use std::path::PathBuf;

use thiserror::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// What went wrong while decoding an image payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeErrorKind {
    /// The file did not start with a recognized magic number.
    BadMagic,
    /// The header was present but malformed (dimensions, whitespace, ...).
    BadHeader,
    /// Fewer payload bytes than the header promised.
    Truncated,
    /// A sample depth other than the supported 8-bit-per-channel.
    UnsupportedDepth,
}

impl std::fmt::Display for DecodeErrorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            DecodeErrorKind::BadMagic => "bad magic number",
            DecodeErrorKind::BadHeader => "malformed header",
            DecodeErrorKind::Truncated => "truncated payload",
            DecodeErrorKind::UnsupportedDepth => "unsupported sample depth",
        };
        f.write_str(s)
    }
}

/// Unified error type for the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Shape or size mismatch between tensor operands.
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// An operation's structural precondition was violated (batch layout,
    /// frozen-parameter rules, backward called on a non-scalar, ...).
    #[error("contract violation in {op}: {detail}")]
    Contract { op: &'static str, detail: String },

    /// A computation produced or received a non-finite value.
    #[error("numeric failure in {op}: {detail}")]
    Numeric { op: &'static str, detail: String },

    /// Bad user-supplied argument or configuration value.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// A dataset manifest line could not be parsed or failed validation.
    #[error("manifest error at {path}:{line}: {detail}")]
    Manifest {
        path: String,
        line: usize,
        detail: String,
    },

    /// An image payload could not be decoded.
    #[error("decode error in {path}: {kind}")]
    Decode { path: String, kind: DecodeErrorKind },

    /// Checkpoint file does not start with the expected magic bytes.
    #[error("checkpoint error in {path}: bad magic")]
    CheckpointMagic { path: String },

    /// Checkpoint declares a format version this build does not support.
    #[error("checkpoint error in {path}: unsupported version {found}")]
    CheckpointVersion { path: String, found: u32 },

    /// Checkpoint file ended before the declared payload was complete.
    #[error("checkpoint error in {path}: truncated file")]
    CheckpointTruncated { path: String },

    /// Checkpoint checksum did not match the stored payload.
    #[error("checkpoint error in {path}: checksum mismatch")]
    CheckpointChecksum { path: String },

    /// Checkpoint payload is structurally invalid for the target model.
    #[error("checkpoint error in {path}: {detail}")]
    CheckpointFormat { path: String, detail: String },

    /// Underlying filesystem failure, annotated with the path involved.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Attach a path to a raw [`std::io::Error`].
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Shorthand for [`Error::Dimension`].
    pub fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    /// Shorthand for [`Error::Contract`].
    pub fn contract(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Contract {
            op,
            detail: detail.into(),
        }
    }

    /// Shorthand for [`Error::Numeric`].
    pub fn numeric(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Numeric {
            op,
            detail: detail.into(),
        }
    }

    /// Process exit code class for this error: `2` for usage and input
    /// validation problems, `3` for filesystem and file-format problems,
    /// `4` for numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Dimension { .. }
            | Error::Contract { .. }
            | Error::Argument(_)
            | Error::Manifest { .. } => 2,
            Error::Decode { .. }
            | Error::CheckpointMagic { .. }
            | Error::CheckpointVersion { .. }
            | Error::CheckpointTruncated { .. }
            | Error::CheckpointChecksum { .. }
            | Error::CheckpointFormat { .. }
            | Error::Io { .. } => 3,
            Error::Numeric { .. } => 4,
        }
    }
}
