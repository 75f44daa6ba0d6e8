use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("dimension {dim} is not divisible by factor {factor}")]
    NotDivisible { dim: usize, factor: usize },
    #[error("resampling factor {0} must be at least 2")]
    InvalidFactor(usize),
    #[error("invalid field: {0}")]
    InvalidField(String),
    #[error("patch {patch} does not fit in a {rows}x{cols} field")]
    PatchTooLarge {
        patch: usize,
        rows: usize,
        cols: usize,
    },
    #[error("diffusion step {t} outside 1..={steps}")]
    StepOutOfRange { t: usize, steps: usize },
    #[error("invalid noise schedule: {0}")]
    InvalidSchedule(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("station count {k} outside 1..={max}")]
    StationCount { k: usize, max: usize },
    #[error("station list is empty")]
    NoStations,
    #[error("station {id} at ({row}, {col}) lies outside the {rows}x{cols} grid")]
    StationOutOfBounds {
        id: String,
        row: usize,
        col: usize,
        rows: usize,
        cols: usize,
    },
    #[error("more than one station at cell ({row}, {col})")]
    DuplicateStation { row: usize, col: usize },
    #[error("invalid station: {0}")]
    InvalidStation(String),
    #[error("input has zero variance")]
    ZeroVariance,
    #[error("evaluation mask selects no pixels")]
    EmptyMask,
    #[error("input is empty")]
    EmptyInput,
    #[error("{rows}x{cols} field is smaller than the {window}x{window} window")]
    FieldTooSmall {
        rows: usize,
        cols: usize,
        window: usize,
    },
    #[error("height {0} m must be positive")]
    NonPositiveHeight(f64),
    #[error("training dataset is empty")]
    EmptyDataset,
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u16, expected: u16 },
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("malformed file: {0}")]
    Malformed(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable tag, used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "shape-mismatch",
            Error::NotDivisible { .. } => "dimension-not-divisible",
            Error::InvalidFactor(_) => "invalid-factor",
            Error::InvalidField(_) => "invalid-field",
            Error::PatchTooLarge { .. } => "patch-too-large",
            Error::StepOutOfRange { .. } => "step-out-of-range",
            Error::InvalidSchedule(_) => "invalid-schedule",
            Error::InvalidConfig(_) => "invalid-config",
            Error::StationCount { .. } => "station-count",
            Error::NoStations => "no-stations",
            Error::StationOutOfBounds { .. } => "station-out-of-bounds",
            Error::DuplicateStation { .. } => "duplicate-station",
            Error::InvalidStation(_) => "invalid-station",
            Error::ZeroVariance => "zero-variance",
            Error::EmptyMask => "empty-mask",
            Error::EmptyInput => "empty-input",
            Error::FieldTooSmall { .. } => "field-too-small",
            Error::NonPositiveHeight(_) => "nonpositive-height",
            Error::EmptyDataset => "empty-dataset",
            Error::BadMagic { .. } => "bad-magic",
            Error::VersionMismatch { .. } => "version-mismatch",
            Error::Truncated { .. } => "truncated",
            Error::Malformed(_) => "malformed",
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
        }
    }
}
