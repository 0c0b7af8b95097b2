//! OCT-like synthetic volumes with elliptical fluid pockets.
//!
//! Each B-scan shows a dark vitreous, a stack of horizontal retinal bands
//! whose boundaries undulate smoothly, a bright bottom band, and a
//! medium-bright choroid below it, all under speckle noise. Fluid pockets
//! are clipped ellipsoids: class 1 (IRF) sits inside the retina, class 2
//! (SRF) rests on top of the bottom band, class 3 (PED) straddles the
//! bottom band and is capped by a bright rim.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{default_classes, LabelMask, Shape3, Spacing, Vendor, Volume};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_volumes: usize,
    pub shape: Shape3,
    /// Number of fluid classes, 1 to 3.
    pub classes: usize,
    pub seed: u64,
    /// Also emit a second, slightly different annotation per volume.
    pub dual_annotation: bool,
    /// Fraction of volumes in the training split.
    pub train_fraction: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_volumes: 8,
            shape: Shape3::new(16, 256, 256),
            classes: 3,
            seed: 1,
            dual_annotation: false,
            train_fraction: 0.75,
        }
    }
}

/// One fluid pocket: an ellipsoid clipped to `|z - cz| <= half_depth`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub class_id: u8,
    pub center: [f64; 3],
    /// Semi-axes along (depth, row, column).
    pub radii: [f64; 3],
    pub half_depth: f64,
    pub intensity: f32,
}

impl Blob {
    pub fn contains(&self, z: usize, y: usize, x: usize) -> bool {
        let dz = z as f64 - self.center[0];
        if dz.abs() > self.half_depth {
            return false;
        }
        let dy = y as f64 - self.center[1];
        let dx = x as f64 - self.center[2];
        (dz / self.radii[0]).powi(2) + (dy / self.radii[1]).powi(2) + (dx / self.radii[2]).powi(2)
            <= 1.0
    }

    /// The same blob with in-plane radii scaled by `factor`.
    fn scaled(&self, factor: f64) -> Self {
        let mut b = *self;
        b.radii[1] *= factor;
        b.radii[2] *= factor;
        b
    }
}

pub struct SyntheticSample {
    pub volume: Volume,
    pub mask: LabelMask,
    pub mask_b: Option<LabelMask>,
    pub blobs: Vec<Blob>,
}

pub struct SyntheticDataset {
    pub config: SyntheticConfig,
    pub samples: Vec<SyntheticSample>,
    pub n_train: usize,
}

struct VendorProfile {
    vendor: Vendor,
    height_mm: f64,
    speckle: f64,
    additive: f64,
}

const PROFILES: [VendorProfile; 3] = [
    VendorProfile {
        vendor: Vendor::Cirrus,
        height_mm: 2.0,
        speckle: 0.22,
        additive: 0.04,
    },
    VendorProfile {
        vendor: Vendor::Spectralis,
        height_mm: 1.9,
        speckle: 0.15,
        additive: 0.03,
    },
    VendorProfile {
        vendor: Vendor::Topcon,
        height_mm: 2.3,
        speckle: 0.25,
        additive: 0.05,
    },
];

/// Band boundaries as fractions of retinal thickness, and band intensities.
const BANDS: [(f64, f32); 7] = [
    (0.12, 0.78),
    (0.35, 0.52),
    (0.45, 0.32),
    (0.52, 0.58),
    (0.80, 0.28),
    (0.90, 0.70),
    (1.00, 0.40),
];
const VITREOUS: f32 = 0.05;
const BOTTOM_BAND: f32 = 0.92;
const BOTTOM_BAND_PX: f64 = 7.0;
const CHOROID: f32 = 0.5;

struct Layout {
    top: Vec<f64>,
    bottom: Vec<f64>,
}

fn layout(rng: &mut ChaCha8Rng, shape: Shape3) -> Vec<Layout> {
    let (h, w) = (shape.height as f64, shape.width as f64);
    let top0 = h * rng.random_range(0.18..0.32);
    let bottom0 = top0 + h * rng.random_range(0.44..0.48);
    let amp_top = h * rng.random_range(0.01..0.03);
    let amp_bottom = h * rng.random_range(0.005..0.015);
    let freq = rng.random_range(0.6..1.4);
    let phase = rng.random_range(0.0..2.0 * PI);
    let drift = rng.random_range(-0.15..0.15);
    (0..shape.depth)
        .map(|z| {
            let ph = phase + drift * z as f64;
            let top = (0..shape.width)
                .map(|x| top0 + amp_top * (2.0 * PI * freq * x as f64 / w + ph).sin())
                .collect();
            let bottom = (0..shape.width)
                .map(|x| bottom0 + amp_bottom * (2.0 * PI * 0.5 * freq * x as f64 / w - ph).cos())
                .collect();
            Layout { top, bottom }
        })
        .collect()
}

fn place_blobs(rng: &mut ChaCha8Rng, shape: Shape3, layouts: &[Layout], classes: usize) -> Vec<Blob> {
    let (d, w) = (shape.depth as f64, shape.width as f64);
    let scale = shape.height.min(shape.width) as f64 / 256.0;
    let mid = &layouts[shape.depth / 2];
    let mut blobs = Vec::new();
    let pick_depth = |rng: &mut ChaCha8Rng| {
        let max_half = ((d - 1.0) / 2.0).floor().clamp(0.0, 5.0);
        let half = if max_half >= 2.0 {
            rng.random_range(2..=max_half as usize) as f64
        } else {
            max_half
        };
        let cz = if d > 2.0 * half + 1.0 {
            rng.random_range(half..(d - 1.0 - half))
        } else {
            (d - 1.0) / 2.0
        };
        (cz.round(), half)
    };
    let column = |rng: &mut ChaCha8Rng, rx: f64| {
        let margin = (rx + 4.0).min(w / 2.0 - 1.0);
        rng.random_range(margin..(w - margin).max(margin + 1.0))
    };
    if classes >= 1 {
        let count = rng.random_range(1..=2);
        for _ in 0..count {
            let (cz, half) = pick_depth(rng);
            let rx = rng.random_range(28.0..45.0) * scale;
            let cx = column(rng, rx);
            let xi = (cx as usize).min(shape.width - 1);
            let thickness = mid.bottom[xi] - mid.top[xi];
            let ry = (rng.random_range(20.0..30.0) * scale).min(0.2 * thickness);
            let cy = mid.top[xi] + thickness * rng.random_range(0.38..0.5);
            blobs.push(Blob {
                class_id: 1,
                center: [cz, cy, cx],
                radii: [(half + 1.0) * 1.25, ry, rx],
                half_depth: half,
                intensity: rng.random_range(0.04..0.09),
            });
        }
    }
    if classes >= 2 {
        let (cz, half) = pick_depth(rng);
        let rx = rng.random_range(40.0..65.0) * scale;
        let cx = column(rng, rx);
        let xi = (cx as usize).min(shape.width - 1);
        let ry = rng.random_range(16.0..24.0) * scale;
        blobs.push(Blob {
            class_id: 2,
            center: [cz, mid.bottom[xi] - 0.9 * ry, cx],
            radii: [(half + 1.0) * 1.25, ry, rx],
            half_depth: half,
            intensity: rng.random_range(0.05..0.10),
        });
    }
    if classes >= 3 {
        let (cz, half) = pick_depth(rng);
        let rx = rng.random_range(35.0..60.0) * scale;
        let cx = column(rng, rx);
        let xi = (cx as usize).min(shape.width - 1);
        let ry = rng.random_range(22.0..32.0) * scale;
        blobs.push(Blob {
            class_id: 3,
            center: [cz, mid.bottom[xi] + 0.3 * ry, cx],
            radii: [(half + 1.0) * 1.25, ry, rx],
            half_depth: half,
            intensity: rng.random_range(0.07..0.13),
        });
    }
    blobs
}

fn render_labels(shape: Shape3, blobs: &[Blob]) -> Vec<u8> {
    let mut labels = vec![0u8; shape.len()];
    for blob in blobs {
        for_each_voxel(shape, blob, |i| labels[i] = blob.class_id);
    }
    labels
}

/// Calls `f` with the flat index of every voxel inside `blob`.
fn for_each_voxel(shape: Shape3, blob: &Blob, mut f: impl FnMut(usize)) {
    let z0 = (blob.center[0] - blob.half_depth).floor().max(0.0) as usize;
    let z1 = ((blob.center[0] + blob.half_depth).ceil() as usize).min(shape.depth - 1);
    let y0 = (blob.center[1] - blob.radii[1]).floor().max(0.0) as usize;
    let y1 = ((blob.center[1] + blob.radii[1]).ceil().max(0.0) as usize).min(shape.height - 1);
    let x0 = (blob.center[2] - blob.radii[2]).floor().max(0.0) as usize;
    let x1 = ((blob.center[2] + blob.radii[2]).ceil().max(0.0) as usize).min(shape.width - 1);
    for z in z0..=z1 {
        for y in y0..=y1 {
            for x in x0..=x1 {
                if blob.contains(z, y, x) {
                    f((z * shape.height + y) * shape.width + x);
                }
            }
        }
    }
}

fn render_volume(
    rng: &mut ChaCha8Rng,
    shape: Shape3,
    layouts: &[Layout],
    blobs: &[Blob],
    labels: &[u8],
    profile: &VendorProfile,
) -> Vec<f32> {
    let mut clean = vec![0f32; shape.len()];
    for (z, lay) in layouts.iter().enumerate() {
        for y in 0..shape.height {
            for x in 0..shape.width {
                let (top, bottom) = (lay.top[x], lay.bottom[x]);
                let yf = y as f64;
                let v = if yf < top {
                    VITREOUS
                } else if yf < bottom {
                    let t = (yf - top) / (bottom - top);
                    BANDS.iter().find(|(edge, _)| t < *edge).map_or(BANDS[6].1, |b| b.1)
                } else if yf < bottom + BOTTOM_BAND_PX {
                    BOTTOM_BAND
                } else {
                    let depth = (yf - bottom - BOTTOM_BAND_PX) / shape.height as f64;
                    CHOROID * (1.0 - 1.5 * depth).max(0.25) as f32
                };
                clean[(z * shape.height + y) * shape.width + x] = v;
            }
        }
    }
    for blob in blobs {
        if blob.class_id == 3 {
            // bright rim over the upper boundary of the detachment
            let rim = blob.scaled(1.0 + 4.0 / blob.radii[1].max(4.0));
            for_each_voxel(shape, &rim, |i| {
                let y = (i / shape.width) % shape.height;
                if labels[i] != 3 && (y as f64) < blob.center[1] {
                    clean[i] = BOTTOM_BAND;
                }
            });
        }
    }
    for (i, &l) in labels.iter().enumerate() {
        if l != 0 {
            let (z, y, x) = (i / shape.slice_len(), (i / shape.width) % shape.height, i % shape.width);
            if let Some(b) = blobs.iter().rev().find(|b| b.class_id == l && b.contains(z, y, x)) {
                clean[i] = b.intensity;
            }
        }
    }
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    clean
        .into_iter()
        .map(|v| {
            let speckle = 1.0 + profile.speckle * normal.sample(rng);
            let noisy = v as f64 * speckle + profile.additive * normal.sample(rng);
            noisy.clamp(0.0, 1.0) as f32
        })
        .collect()
}

fn class_dictionary(classes: usize) -> BTreeMap<u8, String> {
    default_classes()
        .into_iter()
        .filter(|(k, _)| (*k as usize) <= classes)
        .collect()
}

pub fn generate_synthetic(config: &SyntheticConfig) -> Result<SyntheticDataset> {
    let shape = config.shape;
    if shape.height < 32 || shape.width < 32 || shape.depth < 1 {
        return Err(Error::Config(format!(
            "synthetic shape {:?} is degenerate; need depth >= 1 and in-plane >= 32",
            shape.as_array()
        )));
    }
    if !(1..=3).contains(&config.classes) {
        return Err(Error::Config(format!(
            "synthetic data supports 1 to 3 classes, got {}",
            config.classes
        )));
    }
    if config.n_volumes == 0 {
        return Err(Error::Config("n_volumes must be positive".into()));
    }
    if !(0.0..=1.0).contains(&config.train_fraction) {
        return Err(Error::Config("train_fraction must lie in [0, 1]".into()));
    }
    let classes = class_dictionary(config.classes);
    let mut samples = Vec::with_capacity(config.n_volumes);
    for v in 0..config.n_volumes {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_mul(1_000_003).wrapping_add(v as u64));
        let profile = &PROFILES[v % PROFILES.len()];
        let spacing = Spacing::new(
            6.0 / shape.depth as f64,
            profile.height_mm / shape.height as f64,
            6.0 / shape.width as f64,
        )?;
        let layouts = layout(&mut rng, shape);
        let blobs = place_blobs(&mut rng, shape, &layouts, config.classes);
        let labels = render_labels(shape, &blobs);
        let voxels = render_volume(&mut rng, shape, &layouts, &blobs, &labels, profile);
        let volume_id = format!("vol_{v:03}");
        let mask_b = if config.dual_annotation {
            let perturbed: Vec<Blob> = blobs
                .iter()
                .map(|b| b.scaled(1.0 + rng.random_range(-0.06..0.06)))
                .collect();
            Some(LabelMask::new(
                volume_id.clone(),
                profile.vendor,
                spacing,
                shape,
                render_labels(shape, &perturbed),
                classes.clone(),
            )?)
        } else {
            None
        };
        samples.push(SyntheticSample {
            volume: Volume::new(volume_id.clone(), profile.vendor, spacing, shape, voxels)?,
            mask: LabelMask::new(volume_id, profile.vendor, spacing, shape, labels, classes.clone())?,
            mask_b,
            blobs,
        });
    }
    let n_train = ((config.n_volumes as f64 * config.train_fraction).round() as usize)
        .clamp(usize::from(config.n_volumes > 0), config.n_volumes);
    Ok(SyntheticDataset {
        config: *config,
        samples,
        n_train,
    })
}
