use std::fmt;
use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse grouping used for process exit codes and machine-readable
/// diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Validation,
    Numeric,
    Io,
}

impl ErrorCategory {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorCategory::Validation => 1,
            ErrorCategory::Numeric => 2,
            ErrorCategory::Io => 3,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCategory::Validation => "validation",
            ErrorCategory::Numeric => "numeric",
            ErrorCategory::Io => "io",
        }
    }
}

impl fmt::Display for ErrorCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// What was wrong with a single manifest record.
#[derive(Debug, Clone, PartialEq)]
pub enum ValidationKind {
    MissingFeature(PathBuf),
    DurationTooLong(f64),
    UnknownClass(String),
    OrphanVariant(String),
    DimensionMismatch {
        modality: &'static str,
        expected: usize,
        found: usize,
    },
    BadVariant(String),
    DuplicateId,
    ZeroNormRow {
        modality: &'static str,
        row: usize,
    },
    Parse(String),
}

impl fmt::Display for ValidationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ValidationKind::MissingFeature(p) => write!(f, "missing feature file {}", p.display()),
            ValidationKind::DurationTooLong(d) => {
                write!(f, "duration {d} s is not below the 240 s limit")
            }
            ValidationKind::UnknownClass(c) => write!(f, "unknown class `{c}`"),
            ValidationKind::OrphanVariant(p) => write!(f, "variant parent `{p}` is not an original in the manifest"),
            ValidationKind::DimensionMismatch {
                modality,
                expected,
                found,
            } => write!(
                f,
                "{modality} feature dimension {found} does not match manifest dimension {expected}"
            ),
            ValidationKind::BadVariant(msg) => write!(f, "bad variant lineage: {msg}"),
            ValidationKind::DuplicateId => f.write_str("duplicate video_id"),
            ValidationKind::ZeroNormRow { modality, row } => {
                write!(f, "{modality} feature row {row} has zero norm")
            }
            ValidationKind::Parse(msg) => write!(f, "parse error: {msg}"),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("numeric error in {op}: {detail}")]
    Numeric { op: &'static str, detail: String },
    #[error("label {label} at index {index} is outside 0..{classes}")]
    Label {
        index: usize,
        label: usize,
        classes: usize,
    },
    #[error("unknown class `{0}`")]
    UnknownClass(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("record `{record}`: {kind}")]
    Validation { record: String, kind: ValidationKind },
    #[error("augmentation error for `{record}`: {detail}")]
    Augmentation { record: String, detail: String },
    #[error("stratification error: class `{class}` has {count} originals, fewer than k = {k}")]
    Stratification {
        class: String,
        count: usize,
        k: usize,
    },
    #[error("curation error: {0}")]
    Curation(String),
    #[error("evaluation error: {0}")]
    Evaluation(String),
    #[error("format error in {path}: {detail}")]
    Format { path: String, detail: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Numeric { .. } => ErrorCategory::Numeric,
            Error::Io { .. } => ErrorCategory::Io,
            _ => ErrorCategory::Validation,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn numeric(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Numeric {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn validation(record: impl Into<String>, kind: ValidationKind) -> Self {
        Error::Validation {
            record: record.into(),
            kind,
        }
    }
}
