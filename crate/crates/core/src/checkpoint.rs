//! Tar archives holding a JSON manifest and raw little-endian f32 tensors.
//!
//! ```text
//! manifest.json
//! tensors/<parameter name>.bin
//! ```
//!
//! A full checkpoint stores every model tensor (and the adapters, when the
//! run used them). An adapter checkpoint stores only the LoRA factors and
//! is loaded onto a compatible base checkpoint.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::{LoraLayerId, LoraState, Regimen, LORA_NS};
use crate::model::{ModelConfig, ParamStore, SegmentationModel};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Full,
    Lora,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraMeta {
    pub rank: usize,
    pub alpha: f64,
    pub registry: Vec<LoraLayerId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub kind: CheckpointKind,
    pub model_config: ModelConfig,
    pub regimen: Regimen,
    pub step: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lora: Option<LoraMeta>,
    pub tensors: Vec<TensorEntry>,
}

/// Contents of a full checkpoint.
#[derive(Debug, Clone)]
pub struct LoadedCheckpoint {
    pub manifest: CheckpointManifest,
    pub model: SegmentationModel,
    pub lora: Option<LoraState>,
}

fn tensor_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let values = t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
    Ok(values.iter().flat_map(|v| v.to_le_bytes()).collect())
}

fn append(builder: &mut tar::Builder<impl Write>, path: &str, data: &[u8]) -> Result<()> {
    let mut header = tar::Header::new_gnu();
    header.set_size(data.len() as u64);
    header.set_mode(0o644);
    header.set_cksum();
    builder.append_data(&mut header, path, data)?;
    Ok(())
}

fn write_archive(
    path: &Path,
    mut manifest: CheckpointManifest,
    tensors: Vec<(&str, &Tensor)>,
) -> Result<CheckpointManifest> {
    manifest.tensors = tensors
        .iter()
        .map(|(name, t)| TensorEntry {
            name: name.to_string(),
            shape: t.dims().to_vec(),
            file: format!("tensors/{name}.bin"),
        })
        .collect();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    let mut builder = tar::Builder::new(BufWriter::new(File::create(path)?));
    append(&mut builder, MANIFEST_NAME, &serde_json::to_vec_pretty(&manifest)?)?;
    for ((_, t), entry) in tensors.iter().zip(&manifest.tensors) {
        append(&mut builder, &entry.file, &tensor_bytes(t)?)?;
    }
    builder.into_inner()?.flush()?;
    Ok(manifest)
}

fn lora_meta(state: &LoraState) -> LoraMeta {
    LoraMeta {
        rank: state.rank,
        alpha: state.alpha,
        registry: state.registry.clone(),
    }
}

/// Writes every model tensor, plus the adapters if given.
pub fn save_checkpoint(
    path: impl AsRef<Path>,
    model: &SegmentationModel,
    lora: Option<&LoraState>,
    regimen: Regimen,
    step: usize,
) -> Result<CheckpointManifest> {
    let mut tensors: Vec<(&str, &Tensor)> = model.weights.iter().collect();
    if let Some(state) = lora {
        tensors.extend(state.factors.iter());
    }
    let manifest = CheckpointManifest {
        format_version: CHECKPOINT_FORMAT_VERSION,
        kind: CheckpointKind::Full,
        model_config: model.config,
        regimen,
        step,
        lora: lora.map(lora_meta),
        tensors: Vec::new(),
    };
    write_archive(path.as_ref(), manifest, tensors)
}

/// Writes only the adapter factors.
pub fn save_lora(
    path: impl AsRef<Path>,
    lora: &LoraState,
    config: &ModelConfig,
    regimen: Regimen,
    step: usize,
) -> Result<CheckpointManifest> {
    let manifest = CheckpointManifest {
        format_version: CHECKPOINT_FORMAT_VERSION,
        kind: CheckpointKind::Lora,
        model_config: *config,
        regimen,
        step,
        lora: Some(lora_meta(lora)),
        tensors: Vec::new(),
    };
    write_archive(path.as_ref(), manifest, lora.factors.iter().collect())
}

fn read_archive(path: &Path) -> Result<(CheckpointManifest, ParamStore)> {
    let file = File::open(path)
        .map_err(|e| Error::NotFound(format!("checkpoint {}: {e}", path.display())))?;
    let mut archive = tar::Archive::new(BufReader::new(file));
    let mut manifest: Option<CheckpointManifest> = None;
    let mut blobs = std::collections::HashMap::new();
    for entry in archive
        .entries()
        .map_err(|e| Error::format("archive", e.to_string()))?
    {
        let mut entry = entry.map_err(|e| Error::format("archive", e.to_string()))?;
        let name = entry.path()?.to_string_lossy().into_owned();
        let mut data = Vec::new();
        entry
            .read_to_end(&mut data)
            .map_err(|e| Error::format("archive", e.to_string()))?;
        if name == MANIFEST_NAME {
            manifest = Some(
                serde_json::from_slice(&data).map_err(|e| Error::format("manifest", e.to_string()))?,
            );
        } else {
            blobs.insert(name, data);
        }
    }
    let manifest = manifest.ok_or_else(|| Error::format("manifest", "missing manifest.json"))?;
    if manifest.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::format(
            "format_version",
            format!(
                "version {} is not supported (expected {CHECKPOINT_FORMAT_VERSION})",
                manifest.format_version
            ),
        ));
    }
    let mut store = ParamStore::new();
    for entry in &manifest.tensors {
        let data = blobs
            .get(&entry.file)
            .ok_or_else(|| Error::format("tensors", format!("missing {}", entry.file)))?;
        let n: usize = entry.shape.iter().product();
        if data.len() != n * 4 {
            return Err(Error::format(
                "tensors",
                format!("{} holds {} bytes, shape needs {}", entry.file, data.len(), n * 4),
            ));
        }
        let values: Vec<f32> = data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        store.insert(
            entry.name.clone(),
            Tensor::from_vec(values, entry.shape.as_slice(), &Device::Cpu)?,
        );
    }
    Ok((manifest, store))
}

fn split_lora(manifest: &CheckpointManifest, store: &mut ParamStore) -> Result<Option<LoraState>> {
    let prefix = format!("{LORA_NS}.");
    let names: Vec<String> = store
        .names()
        .filter(|n| n.starts_with(&prefix))
        .map(str::to_owned)
        .collect();
    let Some(meta) = &manifest.lora else {
        if names.is_empty() {
            return Ok(None);
        }
        return Err(Error::format("lora", "adapter tensors without adapter metadata"));
    };
    let mut factors = ParamStore::new();
    for name in names {
        let t = store.remove(&name).expect("listed above");
        factors.insert(name, t);
    }
    let state = LoraState {
        rank: meta.rank,
        alpha: meta.alpha,
        registry: meta.registry.clone(),
        factors,
    };
    state
        .check_compatible(&manifest.model_config)
        .map_err(|e| Error::format("lora", e.to_string()))?;
    Ok(Some(state))
}

/// Loads a full checkpoint as f32.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<LoadedCheckpoint> {
    let (manifest, mut store) = read_archive(path.as_ref())?;
    if manifest.kind != CheckpointKind::Full {
        return Err(Error::format("kind", "expected a full checkpoint, found adapters only"));
    }
    let lora = split_lora(&manifest, &mut store)?;
    let model = SegmentationModel::from_weights(manifest.model_config, store)?;
    Ok(LoadedCheckpoint {
        manifest,
        model,
        lora,
    })
}

/// Loads adapter factors (from either checkpoint kind) and checks them
/// against `config`.
pub fn load_lora(path: impl AsRef<Path>, config: &ModelConfig) -> Result<LoraState> {
    let (manifest, mut store) = read_archive(path.as_ref())?;
    let state = split_lora(&manifest, &mut store)?
        .ok_or_else(|| Error::format("lora", "the archive holds no adapters"))?;
    state.check_compatible(config)?;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lora::inject_lora;

    fn small() -> ModelConfig {
        ModelConfig {
            input_size: 32,
            patch_size: 8,
            embed_dim: 8,
            num_blocks: 1,
            num_heads: 2,
            mlp_ratio: 2,
            decoder_dim: 8,
            num_classes: 2,
            logit_downsample: 2,
        }
    }

    #[test]
    fn full_and_adapter_round_trip() {
        let cfg = small();
        let model = SegmentationModel::init(cfg, 3, DType::F32).unwrap();
        let lora = inject_lora(&cfg, 2, 4.0, 5, DType::F32).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let full = dir.path().join("model.tar");
        save_checkpoint(&full, &model, Some(&lora), Regimen::LoraSamed, 7).unwrap();
        let loaded = load_checkpoint(&full).unwrap();
        assert_eq!(loaded.manifest.step, 7);
        assert!(loaded.model.weights.bit_identical(&model.weights).unwrap());
        assert!(loaded.lora.unwrap().factors.bit_identical(&lora.factors).unwrap());

        let adapters = dir.path().join("lora.tar");
        let m = save_lora(&adapters, &lora, &cfg, Regimen::LoraSamed, 7).unwrap();
        assert!(m.tensors.iter().all(|t| t.name.starts_with("lora.")));
        let back = load_lora(&adapters, &cfg).unwrap();
        assert_eq!(back.registry, lora.registry);
        assert!(matches!(load_checkpoint(&adapters), Err(Error::Format { .. })));

        let other = ModelConfig {
            embed_dim: 16,
            decoder_dim: 16,
            ..cfg
        };
        assert!(load_lora(&adapters, &other).is_err());
    }

    #[test]
    fn missing_file_is_not_found() {
        assert!(matches!(load_checkpoint("/nonexistent/x.tar"), Err(Error::NotFound(_))));
    }
}
