use thiserror::Error;

use crate::data::Violation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("csv parse error at row {row}, column '{column}': {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("dataset failed validation: {}", join_violations(.0))]
    Invalid(Vec<Violation>),

    #[error("cell {cell} has no {arm} units; the estimator is undefined")]
    EmptyCell { cell: String, arm: &'static str },

    #[error("singular design: column(s) {} are (nearly) collinear with earlier columns", .columns.join(", "))]
    SingularDesign { columns: Vec<String> },

    #[error("cell {cell}: variance denominator {denominator} is not positive")]
    InsufficientCell { cell: String, denominator: f64 },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("estimates are missing subgroup '{0}'")]
    MissingSubgroup(String),

    #[error("simulation failed at draw {draw}, replication {rep}: {source}")]
    Replication {
        draw: usize,
        rep: usize,
        #[source]
        source: Box<Error>,
    },
}

fn join_violations(v: &[Violation]) -> String {
    v.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ")
}
