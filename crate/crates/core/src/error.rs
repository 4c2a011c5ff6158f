use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("resolution error: {0}")]
    Resolution(String),

    #[error("degenerate mask: {0}")]
    DegenerateMask(&'static str),

    #[error("numeric error in {term}: {detail}")]
    Numeric { term: String, detail: String },

    #[error("gradient balancing failed: {0}")]
    Balancing(String),

    #[error("preprocessing error: {0}")]
    Preprocess(String),

    #[error("dataset ingestion failed ({reason}) for {} file(s): {}", .paths.len(), display_paths(.paths))]
    Ingestion { paths: Vec<PathBuf>, reason: String },

    #[error("end of data")]
    EndOfData,

    #[error("training aborted at step {step}: non-finite {term}{}", match .last_checkpoint {
        Some(p) => format!(" (last good checkpoint: {})", p.display()),
        None => " (no checkpoint written yet)".to_string(),
    })]
    NonFinite { step: u64, term: String, last_checkpoint: Option<PathBuf> },

    #[error("failed to load {path}: {reason}")]
    Load { path: PathBuf, reason: String },

    #[error("incompatible checkpoint version {found} (this build reads version {expected})")]
    Version { found: u32, expected: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn display_paths(paths: &[PathBuf]) -> String {
    paths.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", ")
}
