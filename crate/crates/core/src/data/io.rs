//! Raw voxel file plus JSON sidecar.
//!
//! `scan.json` describes the data in `scan.raw`: little-endian, row-major,
//! depth as the slowest axis. Volumes store `f32`, masks store `u8`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{LabelMask, Shape3, Spacing, Vendor, Volume};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VoxelType {
    F32,
    U8,
}

impl VoxelType {
    fn size(self) -> usize {
        match self {
            VoxelType::F32 => 4,
            VoxelType::U8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub format_version: u32,
    pub volume_id: String,
    pub vendor: Vendor,
    /// `[depth, height, width]`
    pub shape: [usize; 3],
    /// Millimetres per voxel along `[depth, height, width]`.
    pub spacing_mm: [f64; 3],
    pub dtype: VoxelType,
    /// Raw data file name, relative to the sidecar.
    pub data_file: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<BTreeMap<u8, String>>,
}

/// Raw data path that belongs to a sidecar path.
pub fn data_path(sidecar: &Path) -> PathBuf {
    sidecar.with_extension("raw")
}

fn write_sidecar(path: &Path, sidecar: &Sidecar) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(path, serde_json::to_vec_pretty(sidecar)?)?;
    Ok(())
}

fn read_sidecar(path: &Path, expected: VoxelType) -> Result<(Sidecar, Vec<u8>)> {
    let text = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(format!("{}: {e}", path.display())),
        _ => Error::format("sidecar", format!("{}: {e}", path.display())),
    })?;
    let sidecar: Sidecar =
        serde_json::from_slice(&text).map_err(|e| Error::format("sidecar", e.to_string()))?;
    if sidecar.format_version != FORMAT_VERSION {
        return Err(Error::format(
            "format_version",
            format!(
                "unsupported version {}, expected {FORMAT_VERSION}",
                sidecar.format_version
            ),
        ));
    }
    if sidecar.dtype != expected {
        return Err(Error::format(
            "dtype",
            format!("found {:?}, expected {expected:?}", sidecar.dtype),
        ));
    }
    if sidecar.shape.iter().any(|&d| d == 0) {
        return Err(Error::format("shape", "dimensions must be >= 1"));
    }
    let spacing = spacing_of(&sidecar)?;
    spacing
        .validate()
        .map_err(|e| Error::format("spacing_mm", e.to_string()))?;
    let raw_path = path
        .parent()
        .map(|p| p.join(&sidecar.data_file))
        .unwrap_or_else(|| PathBuf::from(&sidecar.data_file));
    let bytes = fs::read(&raw_path)
        .map_err(|e| Error::format("data_file", format!("{}: {e}", raw_path.display())))?;
    let expected_len = sidecar.shape.iter().product::<usize>() * sidecar.dtype.size();
    if bytes.len() != expected_len {
        return Err(Error::format(
            "shape",
            format!(
                "shape {:?} needs {expected_len} bytes but {} holds {}",
                sidecar.shape,
                raw_path.display(),
                bytes.len()
            ),
        ));
    }
    Ok((sidecar, bytes))
}

fn spacing_of(s: &Sidecar) -> Result<Spacing> {
    Ok(Spacing {
        depth: s.spacing_mm[0],
        height: s.spacing_mm[1],
        width: s.spacing_mm[2],
    })
}

fn data_file_name(path: &Path) -> String {
    data_path(path)
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "data.raw".into())
}

pub fn save_volume(volume: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let sidecar = Sidecar {
        format_version: FORMAT_VERSION,
        volume_id: volume.volume_id.clone(),
        vendor: volume.vendor,
        shape: volume.shape.as_array(),
        spacing_mm: [volume.spacing.depth, volume.spacing.height, volume.spacing.width],
        dtype: VoxelType::F32,
        data_file: data_file_name(path),
        classes: None,
    };
    write_sidecar(path, &sidecar)?;
    let bytes: Vec<u8> = volume.voxels.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(data_path(path), bytes)?;
    Ok(())
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let (sidecar, bytes) = read_sidecar(path.as_ref(), VoxelType::F32)?;
    let voxels = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let [d, h, w] = sidecar.shape;
    Volume::new(
        sidecar.volume_id.clone(),
        sidecar.vendor,
        spacing_of(&sidecar)?,
        Shape3::new(d, h, w),
        voxels,
    )
}

pub fn save_mask(mask: &LabelMask, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let sidecar = Sidecar {
        format_version: FORMAT_VERSION,
        volume_id: mask.volume_id.clone(),
        vendor: mask.vendor,
        shape: mask.shape.as_array(),
        spacing_mm: [mask.spacing.depth, mask.spacing.height, mask.spacing.width],
        dtype: VoxelType::U8,
        data_file: data_file_name(path),
        classes: Some(mask.classes.clone()),
    };
    write_sidecar(path, &sidecar)?;
    fs::write(data_path(path), &mask.labels)?;
    Ok(())
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<LabelMask> {
    let (sidecar, bytes) = read_sidecar(path.as_ref(), VoxelType::U8)?;
    let [d, h, w] = sidecar.shape;
    LabelMask::new(
        sidecar.volume_id.clone(),
        sidecar.vendor,
        spacing_of(&sidecar)?,
        Shape3::new(d, h, w),
        bytes,
        sidecar.classes.clone().unwrap_or_else(super::default_classes),
    )
    .map_err(|e| Error::format("labels", e.to_string()))
}
