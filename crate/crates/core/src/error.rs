// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("{path}:{line}: parse error: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("vocab mismatch: {0}")]
    VocabMismatch(String),

    #[error("alphabet overflow: {needed} symbols exceed the vocab bound of {bound}")]
    AlphabetOverflow { needed: usize, bound: usize },

    #[error("unsupported checkpoint version: {0}")]
    Version(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("unknown method `{0}`")]
    UnknownMethod(String),

    #[error("{0}")]
    Metric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
