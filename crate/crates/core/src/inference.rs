//! Whole-volume prediction, automatic or driven by simulated clicks.

use crate::data::{LabelMask, Volume};
use crate::error::{Error, Result};
use crate::lora::LoraState;
use crate::model::{encoder, ClassLogits, ModelConfig, SegmentationModel};
use crate::prompts::{simulate_points, Connectivity, SliceView};
use crate::training::{decode_batch, stack_images};

/// Slices encoded per forward pass in automatic mode.
const SLICE_BATCH: usize = 4;

#[derive(Debug, Clone, Copy)]
pub enum PredictionMode<'a> {
    /// No prompt: every class from the learned default embedding.
    Automatic,
    /// For each slice and each class present in `reference`, `n` clicks
    /// are simulated on that class and only its output channel is kept.
    SimulatedClicks {
        n: usize,
        seed: u64,
        reference: &'a LabelMask,
        connectivity: Connectivity,
    },
}

fn check_volume(config: &ModelConfig, volume: &Volume) -> Result<()> {
    let s = volume.shape;
    if s.height != config.input_size || s.width != config.input_size {
        return Err(Error::Config(format!(
            "{}: B-scans are {}x{}, the model expects {n}x{n}",
            volume.volume_id,
            s.height,
            s.width,
            n = config.input_size
        )));
    }
    Ok(())
}

/// Seed for the clicks on `(slice, class)` derived from a volume seed.
pub fn click_seed(seed: u64, slice: usize, class_id: u8) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add((slice as u64) << 8)
        .wrapping_add(class_id as u64)
}

/// Predicts a label mask for every B-scan of `volume`.
pub fn predict_volume(
    model: &SegmentationModel,
    lora: Option<&LoraState>,
    volume: &Volume,
    mode: PredictionMode<'_>,
) -> Result<LabelMask> {
    let cfg = &model.config;
    check_volume(cfg, volume)?;
    let mut classes = crate::data::default_classes();
    classes.retain(|&k, _| (k as usize) <= cfg.num_classes);
    let mut out = LabelMask::empty_like(volume, classes);
    let side = cfg.input_size;
    let like = model.weights.get(&format!("{}.patch_embed.weight", crate::model::ENCODER_NS))?;

    match mode {
        PredictionMode::Automatic => {
            let slices: Vec<usize> = (0..volume.shape.depth).collect();
            for chunk in slices.chunks(SLICE_BATCH) {
                let imgs: Vec<&[f32]> = chunk
                    .iter()
                    .map(|&k| volume.slice(k))
                    .collect::<Result<_>>()?;
                for img in &imgs {
                    model.image_tensor(img)?;
                }
                let emb = encoder::forward(cfg, &model.weights, lora, &stack_images(&imgs, side, like)?)?;
                let logits = decode_batch(cfg, &model.weights, &emb, &[])?;
                for (j, &k) in chunk.iter().enumerate() {
                    let labels = ClassLogits {
                        tensor: logits.get(j)?,
                    }
                    .label_map(side)?;
                    out.slice_mut(k)?.copy_from_slice(&labels);
                }
            }
        }
        PredictionMode::SimulatedClicks {
            n,
            seed,
            reference,
            connectivity,
        } => {
            if reference.shape != volume.shape {
                return Err(Error::Validation("reference shape differs from the volume".into()));
            }
            let num_classes = cfg.num_classes as u8;
            for k in 0..volume.shape.depth {
                let ref_slice = reference.slice(k)?;
                let present: Vec<u8> = (1..=num_classes).filter(|c| ref_slice.contains(c)).collect();
                if present.is_empty() {
                    continue;
                }
                let view = SliceView::new(ref_slice, side, side, num_classes)?;
                let embedding = model.encode_image(volume.slice(k)?, lora)?;
                let mut slice = vec![0u8; side * side];
                for class_id in present {
                    let sim = simulate_points(&view, class_id, n, click_seed(seed, k, class_id), connectivity)?;
                    let prompt = model.encode_prompts(&sim.to_prompt_set())?;
                    let mask = model.decode_masks(&embedding, &prompt)?.class_mask(side, class_id)?;
                    for (dst, &m) in slice.iter_mut().zip(&mask) {
                        if m != 0 {
                            *dst = class_id;
                        }
                    }
                }
                out.slice_mut(k)?.copy_from_slice(&slice);
            }
        }
    }
    Ok(out)
}
