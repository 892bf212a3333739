// SPDX-License-Identifier: Apache-2.0

//! Named model and GPU presets.
//!
//! Presets are `key = value` text files under `model/` and `gpu/`. The
//! bundled set is compiled in; setting `PREFILLSIM_PRESETS` to a directory
//! with the same layout makes the loader look there first.

use std::path::PathBuf;

use serde::de::DeserializeOwned;

use crate::error::{Error, Result};
use crate::exec::CostKnobs;
use crate::geometry::{GpuSpec, ModelGeometry};

pub const PRESET_DIR_ENV: &str = "PREFILLSIM_PRESETS";

/// The (model, gpu) pairs used throughout the evaluation setup.
pub const PAIRINGS: [(&str, &str); 3] = [
    ("llama-3.1-8b", "l4"),
    ("qwen-32b-fp8", "a100-40gb"),
    ("llama-3.3-70b-fp8", "h100-pcie"),
];

pub const DEFAULT_MODEL: &str = "llama-3.1-8b";
pub const DEFAULT_GPU: &str = "l4";

const BUNDLED_MODELS: &[(&str, &str)] = &[
    (
        "llama-3.1-8b",
        include_str!("../../../presets/model/llama-3.1-8b.toml"),
    ),
    (
        "qwen-32b-fp8",
        include_str!("../../../presets/model/qwen-32b-fp8.toml"),
    ),
    (
        "llama-3.3-70b-fp8",
        include_str!("../../../presets/model/llama-3.3-70b-fp8.toml"),
    ),
];

const BUNDLED_GPUS: &[(&str, &str)] = &[
    ("l4", include_str!("../../../presets/gpu/l4.toml")),
    ("a100-40gb", include_str!("../../../presets/gpu/a100-40gb.toml")),
    ("h100-pcie", include_str!("../../../presets/gpu/h100-pcie.toml")),
    ("h100-nvlink", include_str!("../../../presets/gpu/h100-nvlink.toml")),
];

pub fn model_names() -> Vec<&'static str> {
    BUNDLED_MODELS.iter().map(|(n, _)| *n).collect()
}

pub fn gpu_names() -> Vec<&'static str> {
    BUNDLED_GPUS.iter().map(|(n, _)| *n).collect()
}

pub fn model(name: &str) -> Result<ModelGeometry> {
    let text = source("model", name, BUNDLED_MODELS)?;
    let mut geom: ModelGeometry = parse(&text, name)?;
    geom.name = name.to_string();
    geom.validate()?;
    Ok(geom)
}

pub fn gpu(name: &str) -> Result<GpuSpec> {
    gpu_with_knobs(name).map(|(gpu, _)| gpu)
}

/// GPU spec plus the cost-model knobs stored alongside it.
pub fn gpu_with_knobs(name: &str) -> Result<(GpuSpec, CostKnobs)> {
    let text = source("gpu", name, BUNDLED_GPUS)?;
    let mut gpu: GpuSpec = parse(&text, name)?;
    gpu.name = name.to_string();
    gpu.validate()?;
    let knobs: CostKnobs = parse(&text, name)?;
    knobs.validate()?;
    Ok((gpu, knobs))
}

/// Parse a preset document.
pub fn parse<T: DeserializeOwned>(text: &str, name: &str) -> Result<T> {
    toml::from_str(text).map_err(|e| Error::Parse(format!("preset {name}: {e}")))
}

fn source(kind: &str, name: &str, bundled: &[(&str, &str)]) -> Result<String> {
    if let Some(dir) = std::env::var_os(PRESET_DIR_ENV) {
        let path = PathBuf::from(dir).join(kind).join(format!("{name}.toml"));
        if path.is_file() {
            return Ok(std::fs::read_to_string(path)?);
        }
    }
    bundled
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, text)| text.to_string())
        .ok_or_else(|| Error::config(format!("unknown {kind} preset '{name}'")))
}
