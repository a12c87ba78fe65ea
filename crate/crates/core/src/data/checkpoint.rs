use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{load_tensor, save_tensor, DataError};
use crate::nn::{FrozenSourceModel, SourceArch, Tensor};

const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub file: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceManifest {
    pub arch: SourceArch,
    pub fingerprint: String,
    pub source_accuracy: f64,
    /// Seed the model was trained with.
    pub seed: u64,
    pub tensors: Vec<TensorEntry>,
}

/// Writes one PTNS file per parameter group plus `manifest.json`.
pub fn save_source(dir: &Path, model: &FrozenSourceModel, seed: u64) -> Result<SourceManifest, DataError> {
    fs::create_dir_all(dir).map_err(|e| DataError::io(dir, e))?;
    let mut tensors = Vec::new();
    for (i, p) in model.network().params().iter().enumerate() {
        let file = format!("param_{i:02}.ptns");
        save_tensor(&dir.join(&file), &Tensor::from_vec(p.to_vec()))?;
        tensors.push(TensorEntry {
            file,
            shape: vec![p.len()],
        });
    }
    let manifest = SourceManifest {
        arch: model.arch().clone(),
        fingerprint: model.fingerprint().to_string(),
        source_accuracy: model.source_accuracy(),
        seed,
        tensors,
    };
    let path = dir.join(MANIFEST);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    fs::write(&path, json).map_err(|e| DataError::io(&path, e))?;
    Ok(manifest)
}

/// Rebuilds and reseals a saved source model; the recomputed fingerprint
/// must match the manifest.
pub fn load_source(dir: &Path) -> Result<(FrozenSourceModel, SourceManifest), DataError> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| DataError::io(&path, e))?;
    let manifest: SourceManifest =
        serde_json::from_str(&text).map_err(|e| DataError::Checkpoint(format!("{}: {e}", path.display())))?;
    manifest.arch.validate()?;
    let mut net = manifest
        .arch
        .build(manifest.arch.classes, &mut ChaCha8Rng::seed_from_u64(0));
    let mut slots = net.params_mut();
    if slots.len() != manifest.tensors.len() {
        return Err(DataError::Checkpoint(format!(
            "architecture has {} parameter groups, manifest lists {}",
            slots.len(),
            manifest.tensors.len()
        )));
    }
    for (slot, entry) in slots.iter_mut().zip(&manifest.tensors) {
        let t = load_tensor(&dir.join(&entry.file))?;
        if t.len() != slot.len() {
            return Err(DataError::Checkpoint(format!(
                "{} holds {} values, expected {}",
                entry.file,
                t.len(),
                slot.len()
            )));
        }
        slot.copy_from_slice(t.data());
    }
    let model = FrozenSourceModel::seal(net, manifest.arch.clone(), manifest.source_accuracy)?;
    if model.fingerprint() != manifest.fingerprint {
        return Err(DataError::Checkpoint(format!(
            "fingerprint mismatch: manifest {}, weights {}",
            manifest.fingerprint,
            model.fingerprint()
        )));
    }
    Ok((model, manifest))
}
