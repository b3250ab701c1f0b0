//! Checkpoint directory layout: `params.bin` (binary tensor blob) next to
//! `checkpoint.toml` (version, optimizer step count, and the full run
//! configuration the parameters were trained under).

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::ParamStore;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const PARAMS_FILE: &str = "params.bin";
pub const MANIFEST_FILE: &str = "checkpoint.toml";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    steps: usize,
    config: RunConfig,
}

pub fn save(dir: &Path, config: &RunConfig, model: &Model, steps: usize) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    model.params.save(&dir.join(PARAMS_FILE))?;
    let manifest = Manifest {
        version: VERSION,
        steps,
        config: config.clone(),
    };
    let text = toml::to_string_pretty(&manifest).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(dir.join(MANIFEST_FILE), text)?;
    Ok(())
}

pub fn load(dir: &Path) -> Result<(RunConfig, Model, usize)> {
    let text = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let manifest: Manifest =
        toml::from_str(&text).map_err(|e| Error::CheckpointMismatch(e.to_string()))?;
    if manifest.version != VERSION {
        return Err(Error::CheckpointMismatch(format!(
            "unsupported checkpoint version {}",
            manifest.version
        )));
    }
    manifest.config.validate()?;
    let params = ParamStore::load(&dir.join(PARAMS_FILE))?;
    let model = Model::from_parts(&manifest.config.model, params)?;
    Ok((manifest.config, model, manifest.steps))
}
