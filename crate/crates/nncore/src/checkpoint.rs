//! Checkpoints: flat little-endian f32 binary plus a JSON manifest carrying
//! names, shapes, frozen flags, and free-form numeric metadata.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::params::{Param, ParamStore};
use crate::NnError;

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    frozen: bool,
    trainable: bool,
}

/// Scalar metadata saved alongside the weights (e.g. output encodings).
pub type CheckpointMeta = BTreeMap<String, f64>;

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    params: Vec<ManifestEntry>,
    #[serde(default)]
    meta: CheckpointMeta,
}

/// Write `<base>.bin` and `<base>.json`.
pub fn save_checkpoint(
    store: &ParamStore,
    base: &Path,
    meta: &CheckpointMeta,
) -> Result<(), NnError> {
    let mut entries = Vec::with_capacity(store.len());
    let mut blob: Vec<u8> = Vec::new();
    for (name, param) in store.iter() {
        entries.push(ManifestEntry {
            name: name.clone(),
            shape: param.shape.clone(),
            frozen: param.frozen,
            trainable: param.trainable,
        });
        for v in &param.data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        params: entries,
        meta: meta.clone(),
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| NnError::Checkpoint(e.to_string()))?;
    std::fs::write(base.with_extension("json"), json)
        .map_err(|e| NnError::Checkpoint(e.to_string()))?;
    std::fs::write(base.with_extension("bin"), blob)
        .map_err(|e| NnError::Checkpoint(e.to_string()))?;
    Ok(())
}

/// Read a checkpoint written by [`save_checkpoint`]. Optimizer moments are
/// reset to zero.
pub fn load_checkpoint(base: &Path) -> Result<(ParamStore, CheckpointMeta), NnError> {
    let json = std::fs::read_to_string(base.with_extension("json"))
        .map_err(|e| NnError::Checkpoint(format!("{}: {e}", base.display())))?;
    let manifest: Manifest =
        serde_json::from_str(&json).map_err(|e| NnError::Checkpoint(e.to_string()))?;
    let blob = std::fs::read(base.with_extension("bin"))
        .map_err(|e| NnError::Checkpoint(format!("{}: {e}", base.display())))?;

    let total: usize = manifest
        .params
        .iter()
        .map(|e| e.shape.iter().product::<usize>())
        .sum();
    if blob.len() != total * 4 {
        return Err(NnError::Checkpoint(format!(
            "binary holds {} bytes, manifest expects {}",
            blob.len(),
            total * 4
        )));
    }
    let mut store = ParamStore::new();
    let mut offset = 0usize;
    for entry in manifest.params {
        let n: usize = entry.shape.iter().product();
        let data: Vec<f32> = blob[offset..offset + n * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        offset += n * 4;
        store.insert_raw(
            entry.name,
            Param {
                data,
                shape: entry.shape,
                frozen: entry.frozen,
                trainable: entry.trainable,
                m: vec![0.0; if entry.trainable { n } else { 0 }],
                v: vec![0.0; if entry.trainable { n } else { 0 }],
            },
        );
    }
    Ok((store, manifest.meta))
}
