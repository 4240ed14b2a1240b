//! Crate error type.
//!
//! Variants are grouped by what the caller can do about them: `Validation`
//! covers malformed user data (the CLI maps it to its data exit code),
//! everything else is a programming or environment fault.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ZettError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path} line {line}: {message}")]
    Parse { path: String, line: usize, message: String },

    /// Data fails a documented contract: unknown relation ids, duplicate
    /// example ids, invalid templates, inconsistent folds.
    #[error("validation error: {0}")]
    Validation(String),

    /// A configuration value is out of its documented range.
    #[error("config error: {0}")]
    Config(String),

    /// Model-side faults: shape mismatches, sequence length overflow,
    /// malformed checkpoints.
    #[error("model error: {0}")]
    Model(String),
}

impl ZettError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        ZettError::Io { path: path.into(), source }
    }

    pub fn validation(msg: impl Into<String>) -> Self {
        ZettError::Validation(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        ZettError::Config(msg.into())
    }

    pub fn model(msg: impl Into<String>) -> Self {
        ZettError::Model(msg.into())
    }
}
