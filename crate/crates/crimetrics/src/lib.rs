//! Street-level crime analytics for UK district panels.
//!
//! The crate covers the full pipeline from raw incident CSVs to estimation
//! output: ingestion and classification ([`ingest`]), street-level crime
//! concentration and its Monte Carlo benchmark ([`concentration`]), weighted
//! fixed-effects regression with cluster-robust inference ([`regress`]), the
//! difference-in-differences specification families built on top of it
//! ([`estimators`]), semiparametric dose-response curves ([`nonparam`]), a
//! crime-supply calibration model ([`becker`]), and a synthetic-data lab for
//! validating the estimators against known ground truth ([`synthlab`]).

pub mod becker;
pub mod concentration;
pub mod estimators;
pub mod ingest;
pub mod manifest;
pub mod nonparam;
pub mod regress;
pub mod seeds;
pub mod synthlab;
pub mod tables;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid configuration: missing columns, bad parameter ranges, unknown names.
    #[error("config error: {0}")]
    Config(String),
    /// Input data violates a structural requirement (schema, join, coverage).
    #[error("data error: {0}")]
    Data(String),
    /// A numeric routine failed to produce a usable result.
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
