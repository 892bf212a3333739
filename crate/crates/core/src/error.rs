// SPDX-License-Identifier: Apache-2.0

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration, preset, or argument.
    #[error("config error: {0}")]
    Config(String),

    /// One or more requests exceed the engine's maximum input length.
    #[error("capacity error: {} request(s) exceed max input length {mil}: ids {ids:?}", ids.len())]
    Capacity { mil: u64, ids: Vec<u64> },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("regression failed: {0}")]
    Fit(String),

    /// Eviction could not free enough room without touching protected blocks.
    #[error("cache shortfall: needed {needed} tokens, {available} obtainable")]
    Shortfall { needed: u64, available: u64 },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
