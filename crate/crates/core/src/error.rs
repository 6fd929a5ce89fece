use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("{file}:{line}: column `{column}`: {message}")]
    Data {
        file: PathBuf,
        line: u64,
        column: String,
        message: String,
    },

    #[error("missing CPI data for cohort year(s) {0:?}")]
    MissingCpiYears(Vec<i32>),

    #[error("duplicate record for student `{student_id}` at semester {semester_number}")]
    DuplicateRecord {
        student_id: String,
        semester_number: u32,
    },

    #[error("rank-deficient design: column(s) {0:?} are collinear with earlier columns")]
    RankDeficient(Vec<String>),

    #[error("degenerate outcome: {0}")]
    DegenerateOutcome(String),

    #[error("model not converged: {0}")]
    NotConverged(String),

    #[error(
        "residualized treatment and interaction are collinear (correlation {correlation:.6}); \
         inspect the variation of inflation at entry across cohorts"
    )]
    CollinearResiduals { correlation: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Coarse classification used to pick process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numerical,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::InvalidArgument(_) => ErrorKind::Usage,
            Error::RankDeficient(_)
            | Error::NotConverged(_)
            | Error::CollinearResiduals { .. } => ErrorKind::Numerical,
            _ => ErrorKind::Data,
        }
    }
}
