//! Error and diagnostics types shared across the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Everything that can go wrong while loading data, fitting a propensity
/// model or evaluating an estimator.
#[derive(Debug, Error)]
pub enum Error {
    /// CSV file could not be read at all.
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// A column named in the schema is absent from the file header.
    #[error("missing column `{0}` in input file")]
    MissingColumn(String),

    /// A cell that should hold a number does not parse as one.
    #[error("non-numeric value `{value}` at data row {row}, column `{column}`")]
    NonNumericCell {
        row: usize,
        column: String,
        value: String,
    },

    /// The file has a header but no data rows.
    #[error("input file contains no data rows")]
    EmptyFile,

    /// Dataset failed validation; every violation is listed, not only the
    /// first one encountered.
    #[error("dataset validation failed: {}", format_violations(.0))]
    Invalid(Vec<Violation>),

    /// Basis or covariate-map expression could not be parsed.
    #[error("expression parse error: {0}")]
    ExprParse(String),

    /// Expression references a covariate column that the data set lacks,
    /// or a dose variable in a categorical problem.
    #[error("expression refers to unknown variable `{0}`")]
    UnknownVariable(String),

    /// Parameter vector has the wrong length for the family/basis at hand.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// Argument outside its mathematical domain (e.g. a dose outside the
    /// open support of a beta density).
    #[error("domain error: {0}")]
    Domain(String),

    /// An optimizer exhausted its iteration budget without meeting its
    /// convergence criteria. The best point found is carried along so the
    /// caller can decide whether to use it.
    #[error("optimizer failed to converge after {iterations} iterations (best objective {objective:.6e})")]
    NonConvergence {
        iterations: usize,
        objective: f64,
        best: Vec<f64>,
    },

    /// No observation fell inside a kernel window, so a local average is
    /// undefined at the requested dose.
    #[error("empty kernel window at dose {dose} with bandwidth {bandwidth}")]
    EmptyWindow { dose: f64, bandwidth: f64 },

    /// A weight or covariance matrix was numerically singular and even the
    /// ridge/pseudo-inverse fallback produced nothing usable.
    #[error("singular matrix in {0}")]
    Singular(String),

    /// A cross-validation or simulation run had too many failed units or
    /// replicates to produce a trustworthy summary.
    #[error("{0}")]
    Degenerate(String),

    /// Configuration error surfaced by the simulation harness or reporting
    /// layer (bad grid, zero replicates, unwritable output, ...).
    #[error("{0}")]
    Config(String),
}

/// One validation failure. `validate` returns all of them at once.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub enum Violation {
    /// Outcome, covariate or dose is NaN/infinite.
    NonFinite { row: usize, field: String },
    /// Categorical treatment value is not an integer in `0..=k_max`.
    LevelOutOfRange { row: usize, value: f64, k_max: usize },
    /// Some categorical level has zero observations.
    EmptyLevel { level: usize },
    /// Continuous dose sits outside the declared support.
    DoseOutsideSupport { row: usize, value: f64 },
    /// Column counts disagree with the declared dimension.
    ShapeMismatch { detail: String },
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::NonFinite { row, field } => {
                write!(f, "non-finite {field} at row {row}")
            }
            Violation::LevelOutOfRange { row, value, k_max } => {
                write!(f, "treatment level {value} at row {row} not an integer in 0..={k_max}")
            }
            Violation::EmptyLevel { level } => write!(f, "no observations at level {level}"),
            Violation::DoseOutsideSupport { row, value } => {
                write!(f, "dose {value} at row {row} outside declared support")
            }
            Violation::ShapeMismatch { detail } => write!(f, "shape mismatch: {detail}"),
        }
    }
}

fn format_violations(violations: &[Violation]) -> String {
    let mut out = String::new();
    for (i, v) in violations.iter().enumerate() {
        if i > 0 {
            out.push_str("; ");
        }
        out.push_str(&v.to_string());
    }
    out
}

impl Error {
    /// Machine-readable error code, stable across releases. The CLI maps
    /// these onto exit codes and JSON error objects.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::MissingColumn(_) => "missing_column",
            Error::NonNumericCell { .. } => "non_numeric_cell",
            Error::EmptyFile => "empty_file",
            Error::Invalid(_) => "invalid_data",
            Error::ExprParse(_) => "expr_parse",
            Error::UnknownVariable(_) => "unknown_variable",
            Error::DimensionMismatch(_) => "dimension_mismatch",
            Error::Domain(_) => "domain",
            Error::NonConvergence { .. } => "non_convergence",
            Error::EmptyWindow { .. } => "empty_window",
            Error::Singular(_) => "singular",
            Error::Degenerate(_) => "degenerate",
            Error::Config(_) => "config",
        }
    }
}
