//! Checkpoint persistence: one array file per parameter tensor plus a JSON
//! manifest carrying the graph config, training history and provenance.

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use dect_core::arrayfile::{read_array, write_array, ArraySidecar};
use dect_core::error::{Error, Result};

use crate::model::Model;
use crate::models::ModelKind;
use crate::train::{EpochStats, Stage};

pub const CHECKPOINT_MANIFEST: &str = "checkpoint.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub kind: ModelKind,
    pub stage: Stage,
    pub seed: u64,
    pub best_epoch: usize,
    pub best_val: f64,
    pub history: Vec<EpochStats>,
    pub geometry_hash: String,
    /// Normalization constant for material sinogram targets (mm).
    pub gt_sino_scale_mm: f64,
    pub n_params: usize,
}

fn param_path(dir: &Path, idx: usize) -> PathBuf {
    dir.join(format!("p{idx:03}.bin"))
}

pub fn save_checkpoint(dir: &Path, manifest: &CheckpointManifest, model: &Model) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    if model.params.len() != manifest.n_params {
        return Err(Error::Config("manifest parameter count mismatch".into()));
    }
    for (idx, p) in model.params.iter().enumerate() {
        let sidecar = ArraySidecar::new(&p.shape, "model_param")
            .with_geometry(&manifest.geometry_hash)
            .with_seed(manifest.seed);
        write_array(&param_path(dir, idx), &p.data, &sidecar)?;
    }
    let tmp = dir.join("checkpoint.json.tmp");
    std::fs::write(&tmp, serde_json::to_string_pretty(manifest)?)?;
    std::fs::rename(&tmp, dir.join(CHECKPOINT_MANIFEST))?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(CheckpointManifest, Model)> {
    let manifest_path = dir.join(CHECKPOINT_MANIFEST);
    let manifest: CheckpointManifest = serde_json::from_str(
        &std::fs::read_to_string(&manifest_path)
            .map_err(|e| Error::Data(format!("missing checkpoint {}: {e}", dir.display())))?,
    )?;
    let mut model = manifest.kind.build(manifest.seed)?;
    if model.params.len() != manifest.n_params {
        return Err(Error::Data("checkpoint parameter count mismatch".into()));
    }
    for (idx, p) in model.params.iter_mut().enumerate() {
        let (values, sidecar) = read_array(&param_path(dir, idx))?;
        if sidecar.shape != p.shape.to_vec() {
            return Err(Error::Data(format!(
                "parameter {idx} has shape {:?}, model expects {:?}",
                sidecar.shape, p.shape
            )));
        }
        if sidecar.geometry_hash.as_deref() != Some(manifest.geometry_hash.as_str()) {
            return Err(Error::Data(format!("parameter {idx} geometry hash mismatch")));
        }
        p.data = values;
    }
    Ok((manifest, model))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{DenoiseNetConfig, ModelKind};

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let kind = ModelKind::DenoiseNet(DenoiseNetConfig {
            in_channels: 3,
            out_channels: 3,
            n_blocks: 1,
            kernel: 3,
            stride: 1,
            channel_schedule: vec![4],
        });
        let model = kind.build(9).unwrap();
        let manifest = CheckpointManifest {
            kind: kind.clone(),
            stage: Stage::Image,
            seed: 9,
            best_epoch: 3,
            best_val: 0.125,
            history: vec![],
            geometry_hash: "cafe".into(),
            gt_sino_scale_mm: 100.0,
            n_params: model.params.len(),
        };
        save_checkpoint(dir.path(), &manifest, &model).unwrap();
        let (m2, model2) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(m2.best_epoch, 3);
        assert_eq!(m2.kind, kind);
        for (a, b) in model.params.iter().zip(&model2.params) {
            assert_eq!(a.shape, b.shape);
            // Values survive the f32 round trip.
            for (x, y) in a.data.iter().zip(&b.data) {
                assert_eq!(*x as f32, *y as f32);
            }
        }
    }

    #[test]
    fn missing_checkpoint_is_a_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_checkpoint(&dir.path().join("nope")).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }
}
