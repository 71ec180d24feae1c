//! Continual depth completion with frozen backbones and per-domain prototype sets.
//!
//! A small dual-encoder network is trained once on the first dataset of a
//! sequence and frozen. Every later dataset gets its own set of prototypes at
//! each latent tap plus a descriptor used to pick the right set when the
//! domain of a test sample is unknown.

pub mod adapter;
pub mod backbone;
pub mod config;
pub mod diagnostics;
mod error;
pub mod geometry;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod registry;
pub mod report;
pub mod rng;
pub mod router;
pub mod synth;

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

pub use error::{Error, Result};
pub use protodepth_tensor as tensor;

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    text.push('\n');
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })
}
