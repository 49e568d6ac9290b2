//! Checkpoint directories: one NTB file per parameter plus `manifest.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::car::{CarConfig, CarModel};
use crate::error::{Error, Result};
use crate::optim::ParamStore;
use crate::quantizer::{Axis, Codebook};
use crate::tensor::Tensor;
use crate::tokenizer::{Autoencoder, AutoencoderConfig};
use crate::train::TokenizerModel;

pub const CHECKPOINT_MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum CheckpointKind {
    Tokenizer {
        autoencoder: AutoencoderConfig,
        axis: Axis,
        codebook_size: usize,
        codeword_dim: usize,
    },
    Car {
        car: CarConfig,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    #[serde(flatten)]
    pub kind: CheckpointKind,
    pub step: usize,
    /// Parameter names in load order.
    pub params: Vec<String>,
    pub shapes: BTreeMap<String, Vec<usize>>,
    /// The run configuration that produced this checkpoint.
    pub config: serde_json::Value,
}

fn write_manifest(dir: &Path, m: &CheckpointManifest) -> Result<()> {
    let path = dir.join(CHECKPOINT_MANIFEST);
    fs::write(&path, serde_json::to_vec_pretty(m)?).map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(CHECKPOINT_MANIFEST);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

fn load_params(dir: &Path, m: &CheckpointManifest) -> Result<ParamStore> {
    let store = ParamStore::load_dir(&dir.join("params"), &m.params)?;
    if store.shapes() != m.shapes {
        return Err(Error::Format {
            format: "checkpoint",
            detail: "parameter shapes disagree with manifest".into(),
        });
    }
    Ok(store)
}

pub fn save_tokenizer(
    dir: &Path,
    model: &TokenizerModel,
    step: usize,
    config: &serde_json::Value,
) -> Result<()> {
    let params = model.autoencoder.params();
    params.save_dir(&dir.join("params"))?;
    model.codebook.entries().save(&dir.join("codebook.ntb"))?;
    write_manifest(
        dir,
        &CheckpointManifest {
            kind: CheckpointKind::Tokenizer {
                autoencoder: *model.autoencoder.config(),
                axis: model.axis(),
                codebook_size: model.codebook.size(),
                codeword_dim: model.codebook.dim(),
            },
            step,
            params: params.names().to_vec(),
            shapes: params.shapes(),
            config: config.clone(),
        },
    )
}

/// Loads a tokenizer. Usage counters start empty.
pub fn load_tokenizer(dir: &Path) -> Result<(TokenizerModel, CheckpointManifest)> {
    let m = read_manifest(dir)?;
    let CheckpointKind::Tokenizer {
        autoencoder,
        axis,
        codebook_size,
        codeword_dim,
    } = m.kind
    else {
        return Err(Error::Format {
            format: "checkpoint",
            detail: format!("{} is not a tokenizer checkpoint", dir.display()),
        });
    };
    let ae = Autoencoder::from_params(autoencoder, load_params(dir, &m)?)?;
    let entries = Tensor::load(&dir.join("codebook.ntb"))?;
    if entries.shape() != [codebook_size, codeword_dim] {
        return Err(Error::Format {
            format: "checkpoint",
            detail: "codebook shape disagrees with manifest".into(),
        });
    }
    let codebook = Codebook::new(axis, entries)?;
    let (h, w) = autoencoder.grid();
    codebook.check_geometry(h, w, autoencoder.latent_channels)?;
    Ok((
        TokenizerModel {
            autoencoder: ae,
            codebook,
        },
        m,
    ))
}

pub fn save_car(
    dir: &Path,
    model: &CarModel,
    step: usize,
    config: &serde_json::Value,
) -> Result<()> {
    let params = model.params();
    params.save_dir(&dir.join("params"))?;
    model.codewords().save(&dir.join("codewords.ntb"))?;
    write_manifest(
        dir,
        &CheckpointManifest {
            kind: CheckpointKind::Car {
                car: *model.config(),
            },
            step,
            params: params.names().to_vec(),
            shapes: params.shapes(),
            config: config.clone(),
        },
    )
}

pub fn load_car(dir: &Path) -> Result<(CarModel, CheckpointManifest)> {
    let m = read_manifest(dir)?;
    let CheckpointKind::Car { car } = m.kind else {
        return Err(Error::Format {
            format: "checkpoint",
            detail: format!("{} is not a CAR checkpoint", dir.display()),
        });
    };
    let codewords = Tensor::load(&dir.join("codewords.ntb"))?;
    let model = CarModel::from_params(car, codewords, load_params(dir, &m)?)?;
    Ok((model, m))
}

/// SHA-256 over every file under `dir`, visited in sorted relative-path
/// order, hashing each path and its bytes.
pub fn content_id(dir: &Path) -> Result<String> {
    let mut files = Vec::new();
    collect_files(dir, dir, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for rel in files {
        let bytes = fs::read(dir.join(&rel)).map_err(|e| Error::io(dir.join(&rel), e))?;
        h.update(rel.as_bytes());
        h.update([0]);
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            let rel = path.strip_prefix(root).unwrap_or(&path);
            out.push(rel.to_string_lossy().replace('\\', "/"));
        }
    }
    Ok(())
}
