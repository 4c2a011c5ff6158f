//! Command line and HTTP front ends for the image completion toolkit.

pub mod commands;
pub mod complete;
pub mod service;

use std::path::PathBuf;

/// Directory searched for `final.ckpt` when no checkpoint is given.
pub const HOME_ENV: &str = "INPAINT_LAB_HOME";
pub const DEFAULT_CHECKPOINT_NAME: &str = "final.ckpt";

#[derive(Debug, thiserror::Error)]
pub enum AppError {
    #[error(transparent)]
    Core(#[from] inpaint_core::Error),

    #[error("no checkpoint given: pass --checkpoint or set {HOME_ENV}")]
    NoCheckpoint,

    #[error("checkpoint file {0} does not exist")]
    MissingCheckpoint(PathBuf),

    #[error("{field}: {message}")]
    Input { field: &'static str, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type AppResult<T> = std::result::Result<T, AppError>;

/// `--checkpoint` if given, else `$INPAINT_LAB_HOME/final.ckpt`. The file
/// must exist.
pub fn resolve_checkpoint(explicit: Option<PathBuf>, home: Option<PathBuf>) -> AppResult<PathBuf> {
    let path = match (explicit, home) {
        (Some(p), _) => p,
        (None, Some(h)) => h.join(DEFAULT_CHECKPOINT_NAME),
        (None, None) => return Err(AppError::NoCheckpoint),
    };
    if !path.is_file() {
        return Err(AppError::MissingCheckpoint(path));
    }
    Ok(path)
}
