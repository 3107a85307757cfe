//! Command-line pipeline: dataset generation and filtering, generator
//! training and sampling, annotation extraction, SGG training and
//! evaluation, report tables and whole experiments with stage caching.

pub mod config;
pub mod experiment;
pub mod ledger;
pub mod stages;

use thiserror::Error;

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "NESYAUG_OUT";

/// Failure classes that map to distinct exit codes.
#[derive(Debug, Error)]
pub enum Failure {
    #[error("config error: {0}")]
    Config(String),
    #[error("stage {stage} failed: {message}")]
    Stage { stage: String, message: String },
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Config(_) => 2,
            Failure::Stage { .. } => 3,
        }
    }
}

/// Exit code for any error: config 2, everything else (stage failures) 3.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    err.chain()
        .find_map(|e| e.downcast_ref::<Failure>())
        .map_or(3, Failure::exit_code)
}
