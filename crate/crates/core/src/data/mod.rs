//! Volumes, label masks, their file formats, and dataset generation.

pub mod dataset;
pub mod io;
pub mod rle;
pub mod synthetic;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use dataset::{write_synthetic, Dataset, DatasetEntry, DatasetItem, DatasetManifest, EntryPaths, Split};
pub use io::{load_mask, load_volume, save_mask, save_volume};
pub use rle::{rle_decode, rle_encode, rle_encode_binary, RleMask};
pub use synthetic::{generate_synthetic, SyntheticConfig, SyntheticDataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Vendor {
    Cirrus,
    Spectralis,
    Topcon,
    #[serde(rename = "synthetic")]
    Synthetic,
}

impl Vendor {
    pub fn as_str(self) -> &'static str {
        match self {
            Vendor::Cirrus => "Cirrus",
            Vendor::Spectralis => "Spectralis",
            Vendor::Topcon => "Topcon",
            Vendor::Synthetic => "synthetic",
        }
    }
}

impl fmt::Display for Vendor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Vendor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "Cirrus" => Ok(Vendor::Cirrus),
            "Spectralis" => Ok(Vendor::Spectralis),
            "Topcon" => Ok(Vendor::Topcon),
            "synthetic" => Ok(Vendor::Synthetic),
            other => Err(Error::Validation(format!("unknown vendor `{other}`"))),
        }
    }
}

/// Voxel size in millimetres along (depth, height, width).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spacing {
    pub depth: f64,
    pub height: f64,
    pub width: f64,
}

impl Spacing {
    pub fn new(depth: f64, height: f64, width: f64) -> Result<Self> {
        let s = Self {
            depth,
            height,
            width,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        for (axis, v) in [("depth", self.depth), ("height", self.height), ("width", self.width)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Validation(format!(
                    "spacing along {axis} must be positive, got {v}"
                )));
            }
        }
        Ok(())
    }

    pub fn voxel_volume_mm3(&self) -> f64 {
        self.depth * self.height * self.width
    }
}

/// `(depth, height, width)`; depth indexes B-scans.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape3 {
    pub depth: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape3 {
    pub fn new(depth: usize, height: usize, width: usize) -> Self {
        Self {
            depth,
            height,
            width,
        }
    }

    pub fn slice_len(&self) -> usize {
        self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.depth * self.slice_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.depth, self.height, self.width]
    }
}

/// Default fluid-class dictionary.
pub fn default_classes() -> BTreeMap<u8, String> {
    BTreeMap::from([
        (1, "IRF".to_string()),
        (2, "SRF".to_string()),
        (3, "PED".to_string()),
    ])
}

/// A grayscale OCT scan with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub volume_id: String,
    pub vendor: Vendor,
    pub spacing: Spacing,
    pub shape: Shape3,
    pub voxels: Vec<f32>,
}

impl Volume {
    pub fn new(
        volume_id: impl Into<String>,
        vendor: Vendor,
        spacing: Spacing,
        shape: Shape3,
        voxels: Vec<f32>,
    ) -> Result<Self> {
        spacing.validate()?;
        if shape.is_empty() {
            return Err(Error::Validation("volume dimensions must be >= 1".into()));
        }
        if voxels.len() != shape.len() {
            return Err(Error::Validation(format!(
                "{} voxels for shape {:?}",
                voxels.len(),
                shape.as_array()
            )));
        }
        Ok(Self {
            volume_id: volume_id.into(),
            vendor,
            spacing,
            shape,
            voxels,
        })
    }

    pub fn slice(&self, k: usize) -> Result<&[f32]> {
        if k >= self.shape.depth {
            return Err(Error::Validation(format!(
                "slice {k} out of range for depth {}",
                self.shape.depth
            )));
        }
        let n = self.shape.slice_len();
        Ok(&self.voxels[k * n..(k + 1) * n])
    }
}

/// Per-voxel class labels, `0` is background.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMask {
    pub volume_id: String,
    pub vendor: Vendor,
    pub spacing: Spacing,
    pub shape: Shape3,
    pub labels: Vec<u8>,
    pub classes: BTreeMap<u8, String>,
}

impl LabelMask {
    pub fn new(
        volume_id: impl Into<String>,
        vendor: Vendor,
        spacing: Spacing,
        shape: Shape3,
        labels: Vec<u8>,
        classes: BTreeMap<u8, String>,
    ) -> Result<Self> {
        spacing.validate()?;
        if labels.len() != shape.len() {
            return Err(Error::Validation(format!(
                "{} labels for shape {:?}",
                labels.len(),
                shape.as_array()
            )));
        }
        let max_class = classes.keys().copied().max().unwrap_or(0);
        if let Some(bad) = labels.iter().find(|&&l| l > max_class) {
            return Err(Error::Validation(format!(
                "label {bad} exceeds the largest class {max_class}"
            )));
        }
        Ok(Self {
            volume_id: volume_id.into(),
            vendor,
            spacing,
            shape,
            labels,
            classes,
        })
    }

    /// An all-background mask matching `volume`.
    pub fn empty_like(volume: &Volume, classes: BTreeMap<u8, String>) -> Self {
        Self {
            volume_id: volume.volume_id.clone(),
            vendor: volume.vendor,
            spacing: volume.spacing,
            shape: volume.shape,
            labels: vec![0; volume.shape.len()],
            classes,
        }
    }

    pub fn slice(&self, k: usize) -> Result<&[u8]> {
        if k >= self.shape.depth {
            return Err(Error::Validation(format!(
                "slice {k} out of range for depth {}",
                self.shape.depth
            )));
        }
        let n = self.shape.slice_len();
        Ok(&self.labels[k * n..(k + 1) * n])
    }

    pub fn slice_mut(&mut self, k: usize) -> Result<&mut [u8]> {
        let n = self.shape.slice_len();
        if k >= self.shape.depth {
            return Err(Error::Validation(format!("slice {k} out of range")));
        }
        Ok(&mut self.labels[k * n..(k + 1) * n])
    }

    pub fn class_ids(&self) -> Vec<u8> {
        self.classes.keys().copied().collect()
    }
}
