//! Error type shared across the crate.

use thiserror::Error;

/// Errors surfaced by corpus generation, modeling, file formats, and the CLI.
#[derive(Debug, Error)]
pub enum VcError {
    /// Caller passed an argument outside the documented domain.
    #[error("invalid argument: {0}")]
    InvalidArg(String),

    /// Required data is missing or malformed (corpus, ids, file contents).
    #[error("data error: {0}")]
    Data(String),

    /// File magic did not match the expected format.
    #[error("bad magic in {0}")]
    BadMagic(String),

    /// Format version is not supported by this build.
    #[error("unsupported {kind} version {found} (expected {expected})")]
    VersionMismatch {
        kind: &'static str,
        found: u32,
        expected: u32,
    },

    /// File ended before the declared payload was complete.
    #[error("truncated file: {0}")]
    Truncated(String),

    /// Stored checksum does not match the recomputed one.
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },

    /// Training produced a non-finite loss; carries a diagnostic snapshot.
    #[error("non-finite loss at iteration {iteration}: cfm={cfm} dur={dur} grl={grl}")]
    NonFiniteLoss {
        iteration: usize,
        cfm: f64,
        dur: f64,
        grl: f64,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
