use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{load_tensor, save_tensor};
use crate::net::{Model, ModelConfig};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: ModelConfig,
    pub params: Vec<ManifestEntry>,
}

/// Writes one PVGT file per parameter plus `manifest.json` into `dir`.
pub fn save_checkpoint(dir: &Path, model: &Model<f32>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut params = Vec::with_capacity(model.params().len());
    for (name, t) in model.params().iter() {
        let file = format!("{name}.pvgt");
        save_tensor(&dir.join(&file), t)?;
        params.push(ManifestEntry {
            name: name.to_string(),
            file,
            shape: t.shape().to_vec(),
        });
    }
    let manifest = Manifest {
        config: model.config().clone(),
        params,
    };
    let path = dir.join(MANIFEST);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path: PathBuf = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

/// Rebuilds the model recorded in `dir`. The manifest must list exactly the
/// parameters its config implies, with matching shapes.
pub fn load_checkpoint(dir: &Path) -> Result<Model<f32>> {
    let manifest = read_manifest(dir)?;
    let mut model = Model::<f32>::new(manifest.config.clone(), 0)
        .map_err(|e| Error::Checkpoint(format!("manifest config: {e}")))?;
    let expected = model.params().names().to_vec();
    if manifest.params.len() != expected.len() {
        return Err(Error::Checkpoint(format!(
            "manifest lists {} parameters, config implies {}",
            manifest.params.len(),
            expected.len()
        )));
    }
    for (i, (entry, name)) in manifest.params.iter().zip(&expected).enumerate() {
        if &entry.name != name {
            return Err(Error::Checkpoint(format!(
                "parameter {i} is {}, config implies {name}",
                entry.name
            )));
        }
        let t = load_tensor(&dir.join(&entry.file))?;
        let slot = model.params_mut().get_mut(i);
        if t.shape() != slot.shape() || entry.shape != slot.shape() {
            return Err(Error::Checkpoint(format!(
                "{name}: stored shape {:?}, config implies {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        slot.data_mut().copy_from_slice(t.data());
    }
    Ok(model)
}
