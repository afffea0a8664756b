use std::path::PathBuf;

/// Malformed embedding files. Each variant has a stable [`FormatError::code`].
#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("bad magic {found:?}, expected \"EMB1\"")]
    BadMagic { found: [u8; 4] },

    #[error("truncated payload: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },

    #[error("sample {sample}: non-finite value at coordinate {coordinate}")]
    NonFinite { sample: usize, coordinate: usize },

    #[error("sample {sample}: label {label} out of range for {class_count} classes")]
    LabelOutOfRange {
        sample: usize,
        label: u32,
        class_count: u32,
    },

    #[error("{extra} trailing bytes after the last sample")]
    TrailingBytes { extra: usize },

    #[error("dimension must be positive")]
    ZeroDim,

    #[error("csv line {line}: {message}")]
    Csv { line: usize, message: String },
}

impl FormatError {
    pub fn code(&self) -> u8 {
        match self {
            FormatError::BadMagic { .. } => 10,
            FormatError::Truncated { .. } => 11,
            FormatError::NonFinite { .. } => 12,
            FormatError::LabelOutOfRange { .. } => 13,
            FormatError::TrailingBytes { .. } => 14,
            FormatError::ZeroDim => 15,
            FormatError::Csv { .. } => 16,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Format {
        path: PathBuf,
        #[source]
        source: FormatError,
    },

    #[error(transparent)]
    Core(#[from] esfr_core::Error),

    #[error("class {class} has {available} samples, episode needs {needed}")]
    InsufficientSamples {
        class: u32,
        needed: usize,
        available: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl HarnessError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI.
    pub fn exit_code(&self) -> u8 {
        match self {
            HarnessError::Io { .. } => 3,
            HarnessError::Format { source, .. } => source.code(),
            HarnessError::Core(_) => 4,
            HarnessError::InsufficientSamples { .. } => 5,
            HarnessError::Config(_) => 2,
            HarnessError::Json(_) => 6,
        }
    }
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;
