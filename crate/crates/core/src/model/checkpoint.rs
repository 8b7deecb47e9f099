//! Weight checkpoints: a JSON manifest next to a flat little-endian `f64` blob.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::model::params::{ParamSet, SplitModelWeights};
use crate::model::unet::{build_split_unet, ArchConfig};
use crate::scalar::Scalar;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

const STAGES: [&str; 3] = ["front_end", "server", "back_end"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub stage: String,
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
    /// Byte offset into the blob.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub architecture: ArchConfig,
    /// Blob file name, relative to the manifest.
    pub blob: String,
    pub params: Vec<ManifestEntry>,
}

/// Writes `<stem>.json` and `<stem>.bin` into `dir`; returns the manifest path.
pub fn save_checkpoint<T: Scalar>(
    dir: &Path,
    stem: &str,
    arch: &ArchConfig,
    weights: &SplitModelWeights<T>,
) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let mut blob = Vec::with_capacity(weights.numel() * 8);
    let mut params = Vec::new();
    for (stage, set) in STAGES.iter().zip(weights.stages()) {
        for p in set.iter() {
            params.push(ManifestEntry {
                stage: stage.to_string(),
                name: p.name.clone(),
                shape: p.tensor.shape().to_vec(),
                trainable: p.trainable,
                offset: blob.len() as u64,
            });
            for v in p.tensor.data() {
                blob.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
            }
        }
    }
    let blob_name = format!("{stem}.bin");
    fs::write(dir.join(&blob_name), &blob)?;
    let manifest = CheckpointManifest {
        format_version: CHECKPOINT_FORMAT_VERSION,
        architecture: arch.clone(),
        blob: blob_name,
        params,
    };
    let path = dir.join(format!("{stem}.json"));
    fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(path)
}

/// Loads a checkpoint and checks every entry against the layout `arch` produces.
pub fn load_checkpoint<T: Scalar>(manifest_path: &Path, arch: &ArchConfig) -> Result<SplitModelWeights<T>> {
    let manifest: CheckpointManifest = serde_json::from_str(&fs::read_to_string(manifest_path)?)?;
    if manifest.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format_version {}", manifest.format_version)));
    }
    if &manifest.architecture != arch {
        return Err(Error::Checkpoint("architecture differs from the expected config".into()));
    }
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let blob = fs::read(dir.join(&manifest.blob))?;
    let expected = build_split_unet::<T>(arch, 0)?;
    let layout: Vec<_> =
        STAGES.iter().zip(expected.stages()).flat_map(|(stage, set)| set.iter().map(move |p| (*stage, p))).collect();
    if layout.len() != manifest.params.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} parameters, manifest lists {}",
            layout.len(),
            manifest.params.len()
        )));
    }
    let mut stages = [ParamSet::new(), ParamSet::new(), ParamSet::new()];
    for ((stage, want), entry) in layout.into_iter().zip(&manifest.params) {
        if entry.stage != stage
            || entry.name != want.name
            || entry.shape != want.tensor.shape()
            || entry.trainable != want.trainable
        {
            return Err(Error::Checkpoint(format!(
                "entry `{}/{}` does not match the architecture",
                entry.stage, entry.name
            )));
        }
        let n = want.tensor.len();
        let start = entry.offset as usize;
        let end = start + 8 * n;
        let bytes =
            blob.get(start..end).ok_or_else(|| Error::Checkpoint(format!("blob too short for `{}`", entry.name)))?;
        let data =
            bytes.chunks_exact(8).map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8-byte chunk")))).collect();
        let idx = STAGES.iter().position(|s| *s == stage).expect("known stage");
        stages[idx].push(entry.name.clone(), Tensor::new(entry.shape.clone(), data)?, entry.trainable);
    }
    let [front_end, server, back_end] = stages;
    Ok(SplitModelWeights { front_end, server, back_end })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let arch = ArchConfig::default();
        let w = build_split_unet::<f64>(&arch, 42).unwrap();
        let path = save_checkpoint(dir.path(), "global", &arch, &w).unwrap();
        let back: SplitModelWeights<f64> = load_checkpoint(&path, &arch).unwrap();
        assert_eq!(back, w);

        let other = ArchConfig { bottleneck_filters: 16, ..ArchConfig::default() };
        assert!(load_checkpoint::<f64>(&path, &other).is_err());

        fs::write(dir.path().join("global.bin"), [0u8; 16]).unwrap();
        assert!(load_checkpoint::<f64>(&path, &arch).is_err());
    }
}
