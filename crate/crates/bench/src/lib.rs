//! Deterministic inputs shared by the benchmarks.

use candle_core::DType;
use octseg::{ModelConfig, SegmentationModel};

pub fn model(config: ModelConfig) -> SegmentationModel {
    SegmentationModel::init(config, 1, DType::F32).expect("valid config")
}

/// Smooth stripes with a little pattern noise, intensities in `[0, 1]`.
pub fn image(side: usize) -> Vec<f32> {
    (0..side * side)
        .map(|i| {
            let (y, x) = ((i / side) as f32, (i % side) as f32);
            0.5 + 0.4 * (y / 9.0).sin() * (x / 23.0).cos() + 0.05 * ((i * 7919 % 97) as f32 / 97.0 - 0.5)
        })
        .collect()
}

/// Label slice with a few rectangular pockets of classes 1 to 3.
pub fn labels(side: usize) -> Vec<u8> {
    let mut out = vec![0u8; side * side];
    let pockets = [(1u8, 0.2, 0.3), (2, 0.5, 0.5), (3, 0.7, 0.2), (1, 0.6, 0.8)];
    for (class, fy, fx) in pockets {
        let (cy, cx) = ((fy * side as f64) as usize, (fx * side as f64) as usize);
        let r = side / 12;
        for y in cy.saturating_sub(r)..(cy + r).min(side) {
            for x in cx.saturating_sub(r)..(cx + r).min(side) {
                out[y * side + x] = class;
            }
        }
    }
    out
}

/// `labels` shifted right by `dx`, a stand-in prediction.
pub fn shifted(labels: &[u8], side: usize, dx: usize) -> Vec<u8> {
    let mut out = vec![0u8; labels.len()];
    for y in 0..side {
        for x in dx..side {
            out[y * side + x] = labels[y * side + x - dx];
        }
    }
    out
}
