use std::io;

use thiserror::Error;

/// Errors produced by the denoising toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("format error: {0}")]
    Format(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("index ({h}, {w}, {e}) out of bounds for {height}x{width}x{echoes} cloud")]
    Index {
        h: usize,
        w: usize,
        e: usize,
        height: usize,
        width: usize,
        echoes: usize,
    },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("valid echo at ({h}, {w}, {e}) has zero range")]
    DegenerateRange { h: usize, w: usize, e: usize },
    #[error("blind-spot mask selects no valid echo")]
    EmptySubset,
    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Divergence { epoch: usize, loss: f64 },
    #[error("cloud is already multi-echo (Ne = {0})")]
    Mode(usize),
    #[error("metric undefined: {0}")]
    UndefinedMetric(&'static str),
    #[error("prediction and labels are misaligned: {0}")]
    Alignment(String),
    #[error("{0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for errors caused by configuration rather than data.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Shape(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
