//! Dataset directories: `manifest.json` plus volume and mask files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::io::{load_mask, load_volume, save_mask, save_volume};
use super::synthetic::SyntheticDataset;
use super::{LabelMask, Vendor, Volume};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Paths relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryPaths {
    pub volume: String,
    pub mask: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_b: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub volume_id: String,
    pub vendor: Vendor,
    pub split: Split,
    pub paths: EntryPaths,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub classes: BTreeMap<u8, String>,
    pub entries: Vec<DatasetEntry>,
}

impl DatasetManifest {
    pub fn count(&self, split: Split) -> usize {
        self.entries.iter().filter(|e| e.split == split).count()
    }
}

/// A loaded volume with its reference annotation(s).
#[derive(Debug, Clone)]
pub struct DatasetItem {
    pub entry: DatasetEntry,
    pub volume: Volume,
    pub mask: LabelMask,
    pub mask_b: Option<LabelMask>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub items: Vec<DatasetItem>,
}

impl Dataset {
    pub fn load(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let manifest_path = root.join(MANIFEST_FILE);
        let bytes = fs::read(&manifest_path)
            .map_err(|e| Error::format("manifest", format!("{}: {e}", manifest_path.display())))?;
        let manifest: DatasetManifest =
            serde_json::from_slice(&bytes).map_err(|e| Error::format("manifest", e.to_string()))?;
        let mut items = Vec::with_capacity(manifest.entries.len());
        for entry in &manifest.entries {
            let volume = load_volume(root.join(&entry.paths.volume))?;
            let mask = load_mask(root.join(&entry.paths.mask))?;
            if mask.shape != volume.shape {
                return Err(Error::format(
                    "mask",
                    format!("{}: mask shape differs from volume", entry.volume_id),
                ));
            }
            let mask_b = entry
                .paths
                .mask_b
                .as_ref()
                .map(|p| load_mask(root.join(p)))
                .transpose()?;
            items.push(DatasetItem {
                entry: entry.clone(),
                volume,
                mask,
                mask_b,
            });
        }
        Ok(Self {
            root,
            manifest,
            items,
        })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &DatasetItem> {
        self.items.iter().filter(move |i| i.entry.split == split)
    }

    /// Builds an in-memory dataset from generated samples.
    pub fn from_synthetic(ds: SyntheticDataset) -> Self {
        let manifest = manifest_for(&ds);
        let items = ds
            .samples
            .into_iter()
            .zip(&manifest.entries)
            .map(|(s, entry)| DatasetItem {
                entry: entry.clone(),
                volume: s.volume,
                mask: s.mask,
                mask_b: s.mask_b,
            })
            .collect();
        Self {
            root: PathBuf::new(),
            manifest,
            items,
        }
    }
}

fn manifest_for(ds: &SyntheticDataset) -> DatasetManifest {
    let entries = ds
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let id = &s.volume.volume_id;
            DatasetEntry {
                volume_id: id.clone(),
                vendor: s.volume.vendor,
                split: if i < ds.n_train { Split::Train } else { Split::Test },
                paths: EntryPaths {
                    volume: format!("volumes/{id}.json"),
                    mask: format!("masks/{id}.json"),
                    mask_b: s.mask_b.as_ref().map(|_| format!("masks_b/{id}.json")),
                },
            }
        })
        .collect();
    DatasetManifest {
        format_version: super::io::FORMAT_VERSION,
        classes: ds
            .samples
            .first()
            .map(|s| s.mask.classes.clone())
            .unwrap_or_default(),
        entries,
    }
}

/// Writes volumes, masks and `manifest.json` under `root`.
pub fn write_synthetic(ds: &SyntheticDataset, root: impl AsRef<Path>) -> Result<DatasetManifest> {
    let root = root.as_ref();
    fs::create_dir_all(root)?;
    let manifest = manifest_for(ds);
    for (sample, entry) in ds.samples.iter().zip(&manifest.entries) {
        save_volume(&sample.volume, root.join(&entry.paths.volume))?;
        save_mask(&sample.mask, root.join(&entry.paths.mask))?;
        if let (Some(mask_b), Some(path)) = (&sample.mask_b, &entry.paths.mask_b) {
            save_mask(mask_b, root.join(path))?;
        }
    }
    fs::write(root.join(MANIFEST_FILE), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}
