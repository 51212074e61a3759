//! Checkpoint directories.
//!
//! A checkpoint is a directory holding `checkpoint.toml` and the parameter
//! blob `params-<hash>.bin`. The blob is written first under its content
//! hash, then the manifest is replaced atomically, so an interrupted save
//! leaves the previous checkpoint loadable.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{MdfceModel, ModelConfig, NormStats, Variant};
use crate::channel::SystemConfig;
use crate::digest::short_hash;
use crate::error::{Error, Result};
use crate::tensor::ParamStore;

pub const CHECKPOINT_VERSION: u32 = 1;
const MANIFEST: &str = "checkpoint.toml";

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    variant: Variant,
    params_file: String,
    params_hash: String,
    params_manifest: String,
    model: ModelConfig,
    system: SystemConfig,
    norm: NormStats,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Writes `model` into `dir` (created if needed) and returns the manifest
/// path.
pub fn save_checkpoint(dir: &Path, model: &MdfceModel) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (params_manifest, blob) = model.params().to_bytes();
    let params_hash = short_hash(&blob);
    let params_file = format!("params-{params_hash}.bin");
    write_atomic(&dir.join(&params_file), &blob)?;

    let manifest = Manifest {
        version: CHECKPOINT_VERSION,
        variant: model.variant(),
        params_file,
        params_hash,
        params_manifest,
        model: model.config().clone(),
        system: model.system().clone(),
        norm: model.norm().clone(),
    };
    let text = toml::to_string(&manifest)
        .map_err(|e| Error::Config(format!("checkpoint manifest: {e}")))?;
    let path = dir.join(MANIFEST);
    write_atomic(&path, text.as_bytes())?;
    Ok(path)
}

/// Loads the checkpoint in `dir`, verifying version and parameter hash.
pub fn load_checkpoint(dir: &Path) -> Result<MdfceModel> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    #[derive(Deserialize)]
    struct Version {
        version: u32,
    }
    let v: Version = toml::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    if v.version != CHECKPOINT_VERSION {
        return Err(Error::Config(format!(
            "{}: checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
            path.display(),
            v.version
        )));
    }
    let m: Manifest = toml::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let blob_path = dir.join(&m.params_file);
    let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    let actual = short_hash(&blob);
    if actual != m.params_hash {
        return Err(Error::Format {
            offset: 0,
            reason: format!(
                "{} has hash {actual}, manifest records {}",
                blob_path.display(),
                m.params_hash
            ),
        });
    }
    let params = ParamStore::from_bytes(&m.params_manifest, &blob)?;
    MdfceModel::from_parts(m.model, m.system, m.variant, m.norm, params)
}
