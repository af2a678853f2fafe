// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every module of the crate.

use std::path::PathBuf;

/// Everything that can go wrong inside `attn-steer`.
#[derive(Debug, thiserror::Error)]
#[non_exhaustive]
pub enum Error {
    /// A prompt with no tokens at all.
    #[error("empty prompt")]
    EmptyPrompt,

    /// Vectors or matrices whose shapes do not line up.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// A NaN was fed into an operation that requires finite input.
    #[error("non-finite input: {0}")]
    NonFinite(String),

    /// A forward pass produced a non-finite intermediate value.
    #[error("numeric overflow")]
    NumericOverflow,

    /// An index range that does not fit the sequence it refers to.
    #[error("span [{start}, {end}) out of bounds for length {len}")]
    SpanOutOfBounds {
        /// Inclusive start.
        start: usize,
        /// Exclusive end.
        end: usize,
        /// Length of the indexed sequence.
        len: usize,
    },

    /// Adaptive amplification requested without a profile.
    #[error("profile required")]
    ProfileRequired,

    /// A profile cannot be finalized because one label class is empty.
    #[error("insufficient labeled data (n_r = {n_r}, n_h = {n_h})")]
    InsufficientLabeledData {
        /// Number of real-object steps seen.
        n_r: usize,
        /// Number of hallucinated-object steps seen.
        n_h: usize,
    },

    /// A profile file that does not parse.
    #[error("corrupt profile: {0}")]
    CorruptProfile(String),

    /// A profile file written by an incompatible version.
    #[error("profile version mismatch: expected {expected}, found {found}")]
    VersionMismatch {
        /// Version this build reads.
        expected: u32,
        /// Version stored in the file.
        found: u32,
    },

    /// Declared shapes disagree with the data or with the model.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// Heatmap export asked for a matrix that does not exist.
    #[error("unknown matrix '{0}'")]
    UnknownMatrix(String),

    /// Corpus metrics over nothing.
    #[error("empty corpus")]
    EmptyCorpus,

    /// OpenCHAIR with every object judged uncertain.
    #[error("no judged objects")]
    NoJudgedObjects,

    /// A caption whose image has no ground-truth annotation.
    #[error("missing annotation for image '{0}'")]
    MissingAnnotation(String),

    /// A malformed weights file.
    #[error("invalid weights file: {0}")]
    WeightsFormat(String),

    /// Anything that fails up-front validation of a config or spec.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// Filesystem failure, with the path involved.
    #[error("{path}: {source}")]
    Io {
        /// File that could not be read or written.
        path: PathBuf,
        /// Underlying error.
        #[source]
        source: std::io::Error,
    },

    /// JSON that does not match the expected schema.
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    /// CSV encoding failure.
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the failure came from the filesystem rather than from the data.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. })
    }

    /// Short stable identifier for machine-readable error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::EmptyPrompt => "empty_prompt",
            Error::DimensionMismatch(_) => "dimension_mismatch",
            Error::NonFinite(_) => "non_finite",
            Error::NumericOverflow => "numeric_overflow",
            Error::SpanOutOfBounds { .. } => "span_out_of_bounds",
            Error::ProfileRequired => "profile_required",
            Error::InsufficientLabeledData { .. } => "insufficient_labeled_data",
            Error::CorruptProfile(_) => "corrupt_profile",
            Error::VersionMismatch { .. } => "version_mismatch",
            Error::ShapeMismatch(_) => "shape_mismatch",
            Error::UnknownMatrix(_) => "unknown_matrix",
            Error::EmptyCorpus => "empty_corpus",
            Error::NoJudgedObjects => "no_judged_objects",
            Error::MissingAnnotation(_) => "missing_annotation",
            Error::WeightsFormat(_) => "weights_format",
            Error::InvalidConfig(_) => "invalid_config",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
