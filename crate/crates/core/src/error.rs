use thiserror::Error;

/// Broad failure class. Maps one-to-one onto the CLI exit codes and the C ABI
/// status codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Estimation,
    Io,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Config => 2,
            ErrorKind::Data => 3,
            ErrorKind::Estimation => 4,
            ErrorKind::Io => 3,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorKind::Config => "config",
            ErrorKind::Data => "data",
            ErrorKind::Estimation => "estimation",
            ErrorKind::Io => "io",
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing mandatory column `{0}`")]
    MissingColumn(String),

    #[error("duplicate (firm, year) keys: {}", format_keys(.0))]
    DuplicateKeys(Vec<(String, i32)>),

    #[error("treatment flag varies within firm(s): {}", .0.join(", "))]
    TreatmentVaries(Vec<String>),

    #[error("unparseable value `{value}` in column `{column}` at line {line}")]
    Parse { line: usize, column: String, value: String },

    #[error("unknown variable `{0}`")]
    UnknownVariable(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("rank-deficient design; dependent columns: {}", .0.join(", "))]
    RankDeficient(Vec<String>),

    #[error("perfect separation detected (max |coefficient| = {max_coef:.3e} after {iterations} iterations)")]
    Separation { max_coef: f64, iterations: usize },

    #[error("optimizer did not converge after {iterations} iterations (gradient max-norm {grad_norm:.3e})")]
    NoConvergence { iterations: usize, grad_norm: f64, trace: Vec<f64> },

    #[error("propensity score numerically at one for unit `{0}`")]
    PropensityAtOne(String),

    #[error("no overlap: every treated unit falls outside the control score range")]
    NoOverlap,

    #[error("empty control pool")]
    EmptyControls,

    #[error("no treated units")]
    EmptyTreated,

    #[error("no contributing treated units for `{0}`")]
    NoContributingTreated(String),

    #[error("weights reference unknown firm `{0}`")]
    UnknownFirm(String),

    #[error("negative weight {weight} for unit `{firm}`")]
    NegativeWeight { firm: String, weight: f64 },

    #[error("no firms in industry {0}")]
    EmptyIndustry(u16),

    #[error("too few observations: {got} < {need}")]
    TooFewObservations { got: usize, need: usize },

    #[error("column mismatch: model expects [{}], got [{}]", .expected.join(", "), .got.join(", "))]
    ColumnMismatch { expected: Vec<String>, got: Vec<String> },

    #[error("{0}")]
    Estimation(String),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

fn format_keys(keys: &[(String, i32)]) -> String {
    keys.iter().map(|(f, y)| format!("{f}/{y}")).collect::<Vec<_>>().join(", ")
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        use Error::*;
        match self {
            Config(_) | UnknownVariable(_) | ColumnMismatch { .. } => ErrorKind::Config,
            MissingColumn(_)
            | DuplicateKeys(_)
            | TreatmentVaries(_)
            | Parse { .. }
            | Csv(_)
            | EmptyIndustry(_)
            | TooFewObservations { .. }
            | UnknownFirm(_)
            | NegativeWeight { .. }
            | EmptyControls
            | EmptyTreated => ErrorKind::Data,
            RankDeficient(_)
            | Separation { .. }
            | NoConvergence { .. }
            | PropensityAtOne(_)
            | NoOverlap
            | NoContributingTreated(_)
            | Estimation(_) => ErrorKind::Estimation,
            Io(_) | Json(_) => ErrorKind::Io,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
