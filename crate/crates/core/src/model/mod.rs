//! The three-part promptable segmentation model: a ViT image encoder, a
//! point/box prompt encoder with a learnable no-prompt default, and a
//! two-way transformer mask decoder that emits one logit map per semantic
//! class plus background.

pub mod decoder;
pub mod encoder;
pub mod layers;
pub mod ops;
pub mod params;
pub mod prompt;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::LoraState;
pub use params::{Init, ParamSpec, ParamStore};
pub use prompt::{PointLabel, PromptBox, PromptPoint, PromptSet};

pub const ENCODER_NS: &str = "image_encoder";
pub const PROMPT_NS: &str = "prompt_encoder";
pub const DECODER_NS: &str = "mask_decoder";

/// Architecture sizes. All spatial quantities are in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub input_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub decoder_dim: usize,
    /// Fluid classes, background excluded.
    pub num_classes: usize,
    pub logit_downsample: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: 256,
            patch_size: 16,
            embed_dim: 64,
            num_blocks: 4,
            num_heads: 4,
            mlp_ratio: 4,
            decoder_dim: 64,
            num_classes: 3,
            logit_downsample: 4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.input_size == 0 || self.patch_size == 0 || self.logit_downsample == 0 {
            return fail("sizes must be positive".into());
        }
        if self.input_size % self.patch_size != 0 {
            return fail(format!(
                "input_size {} is not divisible by patch_size {}",
                self.input_size, self.patch_size
            ));
        }
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return fail(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.decoder_dim % self.num_heads != 0 || self.decoder_dim % 4 != 0 {
            return fail(format!(
                "decoder_dim {} must be divisible by 4 and by num_heads {}",
                self.decoder_dim, self.num_heads
            ));
        }
        if self.input_size % self.logit_downsample != 0 {
            return fail(format!(
                "input_size {} is not divisible by logit_downsample {}",
                self.input_size, self.logit_downsample
            ));
        }
        if self.patch_size % self.logit_downsample != 0 {
            return fail("patch_size must be a multiple of logit_downsample".into());
        }
        let up = self.patch_size / self.logit_downsample;
        if up < 2 || !up.is_power_of_two() {
            return fail(format!(
                "patch_size / logit_downsample = {up} must be a power of two >= 2"
            ));
        }
        if self.decoder_dim >> self.upscale_stages() == 0 {
            return fail("decoder_dim too small for the upscaling stages".into());
        }
        if self.num_blocks == 0 || self.mlp_ratio == 0 || self.num_classes == 0 {
            return fail("num_blocks, mlp_ratio and num_classes must be positive".into());
        }
        if self.num_classes > 254 {
            return fail("at most 254 fluid classes fit in an 8-bit label".into());
        }
        Ok(())
    }

    /// Side of the encoder token grid.
    pub fn token_grid(&self) -> usize {
        self.input_size / self.patch_size
    }

    /// Side of the logit grid.
    pub fn logit_grid(&self) -> usize {
        self.input_size / self.logit_downsample
    }

    /// Number of stride-2 transposed convolutions between the two grids.
    pub fn upscale_stages(&self) -> usize {
        (self.patch_size / self.logit_downsample).trailing_zeros() as usize
    }

    /// Output channels of upscale stage `stage`.
    pub fn upscale_channels(&self, stage: usize) -> usize {
        self.decoder_dim >> (stage + 1)
    }

    /// Background plus fluid classes.
    pub fn num_outputs(&self) -> usize {
        self.num_classes + 1
    }

    /// Every base parameter, in initialization order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = encoder::param_specs(self);
        specs.extend(prompt::param_specs(self));
        specs.extend(decoder::param_specs(self));
        specs
    }
}

/// Encoder output for one B-scan, `[decoder_dim, g, g]`.
#[derive(Debug, Clone)]
pub struct ImageEmbedding {
    pub tensor: Tensor,
    pub provenance: Option<EmbeddingProvenance>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EmbeddingProvenance {
    pub volume_id: String,
    pub slice_index: usize,
    pub model_version: String,
}

/// Prompt encoder output: `sparse: [k, decoder_dim]`, `dense: [decoder_dim, g, g]`.
#[derive(Debug, Clone)]
pub struct PromptEmbedding {
    pub sparse: Tensor,
    pub dense: Tensor,
}

impl PromptEmbedding {
    pub fn num_tokens(&self) -> usize {
        self.sparse.dim(0).unwrap_or(0)
    }
}

/// Per-class logits `[C+1, L, L]`; channel 0 is background.
#[derive(Debug, Clone)]
pub struct ClassLogits {
    pub tensor: Tensor,
}

impl ClassLogits {
    pub fn num_channels(&self) -> usize {
        self.tensor.dim(0).unwrap_or(0)
    }

    pub fn side(&self) -> usize {
        self.tensor.dim(1).unwrap_or(0)
    }

    /// Channel-major values as f32.
    pub fn to_vec(&self) -> Result<Vec<f32>> {
        Ok(self
            .tensor
            .flatten_all()?
            .to_dtype(DType::F32)?
            .to_vec1::<f32>()?)
    }

    pub fn min_max(&self) -> Result<(f32, f32)> {
        let v = self.to_vec()?;
        let min = v.iter().copied().fold(f32::INFINITY, f32::min);
        let max = v.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        Ok((min, max))
    }

    /// Per-pixel argmax at `input_size` resolution; ties go to the lower
    /// class index. Each output pixel reads the logit cell whose sample
    /// position (the top-left pixel of the cell) is nearest.
    pub fn label_map(&self, input_size: usize) -> Result<Vec<u8>> {
        let channels = self.num_channels();
        let side = self.side();
        let values = self.to_vec()?;
        let low = argmax_channels(&values, channels, side * side);
        Ok(upsample_nearest(&low, side, input_size))
    }

    /// Binary mask of pixels whose argmax is `class_id`.
    pub fn class_mask(&self, input_size: usize, class_id: u8) -> Result<Vec<u8>> {
        Ok(self
            .label_map(input_size)?
            .into_iter()
            .map(|l| u8::from(l == class_id))
            .collect())
    }
}

/// Argmax over `channels` planes of `plane` values each, lowest index wins ties.
pub fn argmax_channels(values: &[f32], channels: usize, plane: usize) -> Vec<u8> {
    (0..plane)
        .map(|i| {
            let mut best = 0usize;
            let mut best_v = values[i];
            for c in 1..channels {
                let v = values[c * plane + i];
                if v > best_v {
                    best_v = v;
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}

/// Nearest-neighbor upsampling of a `low × low` map sampled at the top-left
/// pixel of each cell, to `high × high`.
pub fn upsample_nearest(low: &[u8], low_side: usize, high_side: usize) -> Vec<u8> {
    let factor = high_side / low_side;
    let index = |p: usize| ((p + factor / 2) / factor).min(low_side - 1);
    let mut out = Vec::with_capacity(high_side * high_side);
    for r in 0..high_side {
        let lr = index(r);
        for c in 0..high_side {
            out.push(low[lr * low_side + index(c)]);
        }
    }
    out
}

/// Model weights plus their architecture.
#[derive(Debug, Clone)]
pub struct SegmentationModel {
    pub config: ModelConfig,
    pub weights: ParamStore,
    pub device: Device,
}

impl SegmentationModel {
    /// Freshly initialized weights, deterministic under `seed`.
    pub fn init(config: ModelConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let device = Device::Cpu;
        let weights = ParamStore::initialize(&config.param_specs(), seed, dtype, &device)?;
        Ok(Self {
            config,
            weights,
            device,
        })
    }

    pub fn from_weights(config: ModelConfig, weights: ParamStore) -> Result<Self> {
        config.validate()?;
        for spec in config.param_specs() {
            let t = weights.get(&spec.name)?;
            if t.dims() != spec.shape.as_slice() {
                return Err(Error::Config(format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    spec.name,
                    t.dims(),
                    spec.shape
                )));
            }
        }
        Ok(Self {
            config,
            weights,
            device: Device::Cpu,
        })
    }

    pub fn dtype(&self) -> DType {
        self.weights.dtype().unwrap_or(DType::F32)
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        Ok(Self {
            config: self.config,
            weights: self.weights.to_dtype(dtype)?,
            device: self.device.clone(),
        })
    }

    /// Checks a flat row-major image and lifts it to a `[1, S, S]` tensor.
    pub fn image_tensor(&self, image: &[f32]) -> Result<Tensor> {
        let s = self.config.input_size;
        if image.len() != s * s {
            return Err(Error::Config(format!(
                "image has {} pixels, expected {s}x{s}",
                image.len()
            )));
        }
        if let Some(bad) = image.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("non-finite pixel at index {bad}")));
        }
        if let Some(bad) = image.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Validation(format!(
                "pixel {bad} = {} is outside [0, 1]",
                image[bad]
            )));
        }
        Ok(Tensor::from_slice(image, (1, s, s), &self.device)?.to_dtype(self.dtype())?)
    }

    pub fn encode_image(&self, image: &[f32], lora: Option<&LoraState>) -> Result<ImageEmbedding> {
        let batch = self.image_tensor(image)?;
        let out = encoder::forward(&self.config, &self.weights, lora, &batch)?;
        Ok(ImageEmbedding {
            tensor: out.squeeze(0)?,
            provenance: None,
        })
    }

    pub fn encode_prompts(&self, prompts: &PromptSet) -> Result<PromptEmbedding> {
        prompt::encode(&self.config, &self.weights, prompts)
    }

    pub fn decode_masks(
        &self,
        embedding: &ImageEmbedding,
        prompt: &PromptEmbedding,
    ) -> Result<ClassLogits> {
        let cfg = &self.config;
        let g = cfg.token_grid();
        let d = cfg.decoder_dim;
        if embedding.tensor.dims() != [d, g, g] {
            return Err(Error::Config(format!(
                "embedding shape {:?}, expected [{d}, {g}, {g}]",
                embedding.tensor.dims()
            )));
        }
        if prompt.sparse.rank() != 2 || prompt.sparse.dim(1)? != d {
            return Err(Error::Config(format!(
                "sparse tokens shape {:?}, expected [k, {d}]",
                prompt.sparse.dims()
            )));
        }
        if prompt.dense.dims() != [d, g, g] {
            return Err(Error::Config(format!(
                "dense embedding shape {:?}, expected [{d}, {g}, {g}]",
                prompt.dense.dims()
            )));
        }
        let logits = decoder::forward(
            cfg,
            &self.weights,
            &embedding.tensor.unsqueeze(0)?,
            &prompt.sparse.unsqueeze(0)?,
            &prompt.dense.unsqueeze(0)?,
        )?;
        Ok(ClassLogits {
            tensor: logits.squeeze(0)?,
        })
    }

    pub fn logits(
        &self,
        image: &[f32],
        prompts: &PromptSet,
        lora: Option<&LoraState>,
    ) -> Result<ClassLogits> {
        let embedding = self.encode_image(image, lora)?;
        let prompt = self.encode_prompts(prompts)?;
        self.decode_masks(&embedding, &prompt)
    }

    /// Full-resolution label map for one B-scan.
    pub fn predict(
        &self,
        image: &[f32],
        prompts: &PromptSet,
        lora: Option<&LoraState>,
    ) -> Result<Vec<u8>> {
        self.logits(image, prompts, lora)?
            .label_map(self.config.input_size)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_grids() {
        let cfg = ModelConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.token_grid(), 16);
        assert_eq!(cfg.logit_grid(), 64);
        assert_eq!(cfg.upscale_stages(), 2);
    }

    #[test]
    fn rejects_indivisible_sizes() {
        let cfg = ModelConfig {
            input_size: 250,
            ..ModelConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let cfg = ModelConfig {
            embed_dim: 66,
            ..ModelConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn argmax_prefers_lower_index_on_ties() {
        // two channels, two pixels; pixel 0 tied, pixel 1 channel 1 wins
        let v = [0.5, 0.0, 0.5, 1.0];
        assert_eq!(argmax_channels(&v, 2, 2), vec![0, 1]);
    }

    #[test]
    fn background_dominant_logits_give_empty_mask() {
        let mut v = vec![0f32; 4 * 8 * 8];
        for x in v.iter_mut().take(64) {
            *x = 10.0;
        }
        let t = Tensor::from_vec(v, (4, 8, 8), &Device::Cpu).unwrap();
        let labels = ClassLogits { tensor: t }.label_map(32).unwrap();
        assert_eq!(labels.len(), 32 * 32);
        assert!(labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn upsampling_maps_sample_positions_to_their_cells() {
        let low: Vec<u8> = (0..4).collect();
        let high = upsample_nearest(&low, 2, 8);
        assert_eq!(high[0], 0);
        assert_eq!(high[4], 1);
        assert_eq!(high[4 * 8], 2);
        assert_eq!(high[4 * 8 + 4], 3);
        assert_eq!(high[7 * 8 + 7], 3);
    }
}
