//! Fine-tuning loop: CE + Dice on the downsampled ground truth, AdamW with
//! warmup and exponential decay, restricted to a regimen's trainable set.

pub mod loss;
pub mod schedule;

use std::fmt::Write as _;
use std::path::PathBuf;

use candle_core::{DType, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::lora::{trainable_parameters, LoraState, Regimen, TrainableOptions};
use crate::model::{decoder, encoder, prompt, ModelConfig, ParamStore, PromptSet, SegmentationModel};
use crate::prompts::{simulate_points, Connectivity, SliceView};
pub use loss::{combined_loss, dice_loss, downsample_labels, LossParts};
pub use schedule::lr_at;

/// Which prompts accompany each training sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum PromptTraining {
    /// Only the learned no-prompt default.
    #[default]
    None,
    /// `n` simulated clicks on one randomly chosen class present in the slice.
    Points { n: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub decay_gamma: f64,
    pub max_steps: usize,
    pub batch_size: usize,
    pub lambda_ce: f64,
    pub lambda_dice: f64,
    pub dice_eps: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub prompts: PromptTraining,
    pub trainable: TrainableOptions,
    /// Emit a log line every this many steps; 0 disables.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 5e-3,
            warmup_steps: 250,
            decay_gamma: 0.9999,
            max_steps: 2000,
            batch_size: 8,
            lambda_ce: 0.2,
            lambda_dice: 0.8,
            dice_eps: 1e-5,
            weight_decay: 0.1,
            seed: 1,
            prompts: PromptTraining::None,
            trainable: TrainableOptions::default(),
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if ((self.lambda_ce + self.lambda_dice) - 1.0).abs() > 1e-9
            || self.lambda_ce < 0.0
            || self.lambda_dice < 0.0
        {
            return fail(format!(
                "loss weights {} + {} must be non-negative and sum to 1",
                self.lambda_ce, self.lambda_dice
            ));
        }
        if !(self.decay_gamma > 0.0 && self.decay_gamma <= 1.0) {
            return fail(format!("decay_gamma {} must lie in (0, 1]", self.decay_gamma));
        }
        if self.warmup_steps >= self.max_steps {
            return fail(format!(
                "warmup_steps {} must be below max_steps {}",
                self.warmup_steps, self.max_steps
            ));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1".into());
        }
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return fail(format!("base_lr {} must be positive", self.base_lr));
        }
        if !(self.dice_eps >= 0.0 && self.weight_decay >= 0.0) {
            return fail("dice_eps and weight_decay must be non-negative".into());
        }
        if let PromptTraining::Points { n: 0 } = self.prompts {
            return fail("prompted training needs at least one click".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub ce: f64,
    pub dice: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub steps: Vec<StepRecord>,
    /// Where the final weights were written, once they are.
    pub checkpoint: Option<PathBuf>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,lr,loss,ce,dice\n");
        for r in &self.steps {
            let _ = writeln!(out, "{},{:e},{:e},{:e},{:e}", r.step, r.lr, r.loss, r.ce, r.dice);
        }
        out
    }
}

/// B-scans with full-resolution labels and their logit-grid subsampling.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub side: usize,
    pub num_classes: u8,
    pub images: Vec<Vec<f32>>,
    pub labels: Vec<Vec<u8>>,
    pub labels_low: Vec<Vec<u8>>,
}

impl TrainingSet {
    /// Every slice of the `split` volumes in `dataset`.
    pub fn from_dataset(dataset: &Dataset, split: Split, config: &ModelConfig) -> Result<Self> {
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for item in dataset.split(split) {
            let shape = item.volume.shape;
            if shape.height != config.input_size || shape.width != config.input_size {
                return Err(Error::Config(format!(
                    "{}: B-scans are {}x{}, the model expects {s}x{s}",
                    item.entry.volume_id,
                    shape.height,
                    shape.width,
                    s = config.input_size
                )));
            }
            for k in 0..shape.depth {
                images.push(item.volume.slice(k)?.to_vec());
                labels.push(item.mask.slice(k)?.to_vec());
            }
        }
        Self::new(images, labels, config)
    }

    pub fn new(images: Vec<Vec<f32>>, labels: Vec<Vec<u8>>, config: &ModelConfig) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Validation("training set is empty".into()));
        }
        if images.len() != labels.len() {
            return Err(Error::Validation("images and labels differ in count".into()));
        }
        let side = config.input_size;
        let num_classes = config.num_classes as u8;
        let mut labels_low = Vec::with_capacity(labels.len());
        for (img, lab) in images.iter().zip(&labels) {
            if img.len() != side * side || lab.len() != side * side {
                return Err(Error::Validation(format!(
                    "training slices must be {side}x{side}"
                )));
            }
            if let Some(bad) = lab.iter().find(|&&l| l > num_classes) {
                return Err(Error::Validation(format!(
                    "label {bad} exceeds {num_classes} classes"
                )));
            }
            labels_low.push(downsample_labels(lab, side, config.logit_downsample)?);
        }
        Ok(Self {
            side,
            num_classes,
            images,
            labels,
            labels_low,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Stacks images `[B, S, S]` in the dtype of `like`.
pub fn stack_images(images: &[&[f32]], side: usize, like: &Tensor) -> Result<Tensor> {
    let flat: Vec<f32> = images.iter().flat_map(|i| i.iter().copied()).collect();
    Ok(Tensor::from_vec(flat, (images.len(), side, side), like.device())?.to_dtype(like.dtype())?)
}

/// Logits `[B, C+1, L, L]` for a batch of image embeddings `[B, D, g, g]`.
///
/// `prompts` is either empty (every sample uses the learned default) or
/// holds one prompt set per sample.
pub fn decode_batch(
    cfg: &ModelConfig,
    params: &ParamStore,
    embeddings: &Tensor,
    prompts: &[PromptSet],
) -> Result<Tensor> {
    let b = embeddings.dim(0)?;
    if prompts.is_empty() {
        let p = prompt::encode(cfg, params, &PromptSet::empty())?;
        let sparse = p.sparse.unsqueeze(0)?.broadcast_as((b, 1, cfg.decoder_dim))?;
        return decoder::forward(cfg, params, embeddings, &sparse.contiguous()?, &p.dense.unsqueeze(0)?);
    }
    if prompts.len() != b {
        return Err(Error::Validation(format!(
            "{} prompt sets for a batch of {b}",
            prompts.len()
        )));
    }
    let outs: Vec<Tensor> = prompts
        .iter()
        .enumerate()
        .map(|(i, ps)| {
            let p = prompt::encode(cfg, params, ps)?;
            decoder::forward(
                cfg,
                params,
                &embeddings.narrow(0, i, 1)?,
                &p.sparse.unsqueeze(0)?,
                &p.dense.unsqueeze(0)?,
            )
        })
        .collect::<Result<_>>()?;
    Ok(Tensor::cat(&outs, 0)?)
}

/// Loss of one batch through the full model; `labels_low` are the
/// concatenated logit-grid label maps.
pub fn batch_loss(
    cfg: &ModelConfig,
    params: &ParamStore,
    lora: Option<&LoraState>,
    images: &Tensor,
    prompts: &[PromptSet],
    labels_low: &[u8],
    config: &TrainConfig,
) -> Result<LossParts> {
    let embeddings = encoder::forward(cfg, params, lora, images)?;
    let logits = decode_batch(cfg, params, &embeddings, prompts)?;
    combined_loss(&logits, labels_low, config.lambda_ce, config.lambda_dice, config.dice_eps)
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: SegmentationModel,
    pub lora: Option<LoraState>,
    pub history: TrainHistory,
    /// Names of the tensors that were optimized.
    pub trained: Vec<String>,
}

fn to_f64(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Epoch-wise shuffled sample order.
struct BatchSampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl BatchSampler {
    fn new(n: usize, seed: u64) -> Self {
        let mut s = Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: (0..n).collect(),
            cursor: n,
        };
        s.refill();
        s
    }

    fn refill(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.cursor = 0;
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.cursor == self.order.len() {
                    self.refill();
                }
                self.cursor += 1;
                self.order[self.cursor - 1]
            })
            .collect()
    }
}

fn sample_prompts(
    data: &TrainingSet,
    batch: &[usize],
    mode: PromptTraining,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<PromptSet>> {
    let PromptTraining::Points { n } = mode else {
        return Ok(Vec::new());
    };
    batch
        .iter()
        .map(|&i| {
            let labels = &data.labels[i];
            let present: Vec<u8> = (1..=data.num_classes)
                .filter(|c| labels.contains(c))
                .collect();
            if present.is_empty() {
                return Ok(PromptSet::empty());
            }
            let class_id = present[rng.random_range(0..present.len())];
            let view = SliceView::new(labels, data.side, data.side, data.num_classes)?;
            let sim = simulate_points(&view, class_id, n, rng.random(), Connectivity::Eight)?;
            Ok(sim.to_prompt_set())
        })
        .collect()
}

/// Optimizes the regimen's trainable tensors; everything else is shared
/// with `model` and left untouched.
pub fn train(
    data: &TrainingSet,
    model: &SegmentationModel,
    lora: Option<&LoraState>,
    regimen: Regimen,
    config: &TrainConfig,
) -> Result<TrainOutput> {
    config.validate()?;
    let cfg = model.config;
    if data.side != cfg.input_size {
        return Err(Error::Config(format!(
            "training slices are {}x{0}, the model expects {1}x{1}",
            data.side, cfg.input_size
        )));
    }
    let lora = match regimen {
        Regimen::LoraSamed => Some(lora.ok_or_else(|| {
            Error::Config("lora_samed needs LoRA adapters".into())
        })?),
        _ => None,
    };
    let names = trainable_parameters(&model.weights, lora, regimen, config.trainable);
    if names.is_empty() {
        return Err(Error::Training(format!(
            "no trainable parameters under regimen {regimen}"
        )));
    }
    if let Some(state) = lora {
        state.check_compatible(&cfg)?;
        if state.factors.dtype() != Some(model.dtype()) {
            return Err(Error::Config("adapter dtype differs from the model".into()));
        }
    }

    let mut params = model.weights.clone();
    let mut adapters = lora.cloned();
    let mut vars = Vec::with_capacity(names.len());
    for name in &names {
        let in_model = model.weights.contains(name);
        let source = if in_model {
            model.weights.get(name)?
        } else {
            lora.expect("adapter names come from the adapter state")
                .factors
                .get(name)?
        };
        let var = Var::from_tensor(source)?;
        let handle = var.as_tensor().clone();
        if in_model {
            params.insert(name.clone(), handle);
        } else if let Some(state) = adapters.as_mut() {
            state.factors.insert(name.clone(), handle);
        }
        vars.push(var);
    }

    let like = model.weights.get(&format!("{}.pos_embed", crate::model::ENCODER_NS))?.clone();
    // With a frozen encoder and no adapters the image embeddings never change.
    let cached: Option<Vec<Tensor>> = if lora.is_none() {
        let mut out = Vec::with_capacity(data.len());
        for chunk in (0..data.len()).collect::<Vec<_>>().chunks(config.batch_size.max(8)) {
            let imgs: Vec<&[f32]> = chunk.iter().map(|&i| data.images[i].as_slice()).collect();
            let emb = encoder::forward(&cfg, &params, None, &stack_images(&imgs, data.side, &like)?)?
                .detach();
            for j in 0..chunk.len() {
                out.push(emb.get(j)?);
            }
        }
        Some(out)
    } else {
        None
    };

    let mut opt = AdamW::new(
        vars,
        ParamsAdamW {
            lr: lr_at(0, config)?,
            weight_decay: config.weight_decay,
            ..ParamsAdamW::default()
        },
    )?;
    let mut sampler = BatchSampler::new(data.len(), config.seed);
    let mut prompt_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut history = TrainHistory::default();
    for step in 0..config.max_steps {
        let lr = lr_at(step, config)?;
        opt.set_learning_rate(lr);
        let batch = sampler.next_batch(config.batch_size);
        let prompts = sample_prompts(data, &batch, config.prompts, &mut prompt_rng)?;
        let labels_low: Vec<u8> = batch
            .iter()
            .flat_map(|&i| data.labels_low[i].iter().copied())
            .collect();
        let embeddings = match &cached {
            Some(cache) => {
                let rows: Vec<&Tensor> = batch.iter().map(|&i| &cache[i]).collect();
                Tensor::stack(&rows, 0)?
            }
            None => {
                let imgs: Vec<&[f32]> = batch.iter().map(|&i| data.images[i].as_slice()).collect();
                encoder::forward(&cfg, &params, adapters.as_ref(), &stack_images(&imgs, data.side, &like)?)?
            }
        };
        let logits = decode_batch(&cfg, &params, &embeddings, &prompts)?;
        let parts = combined_loss(
            &logits,
            &labels_low,
            config.lambda_ce,
            config.lambda_dice,
            config.dice_eps,
        )?;
        let loss = to_f64(&parts.total)?;
        if !loss.is_finite() {
            return Err(Error::Training(format!(
                "loss became {loss} at step {step} (lr {lr:e}); lower base_lr or check the inputs"
            )));
        }
        opt.backward_step(&parts.total)?;
        let record = StepRecord {
            step,
            lr,
            loss,
            ce: to_f64(&parts.ce)?,
            dice: to_f64(&parts.dice)?,
        };
        if config.log_every > 0 && (step % config.log_every == 0 || step + 1 == config.max_steps) {
            log::info!(
                "step {step:>5} lr {lr:.3e} loss {loss:.4} ce {:.4} dice {:.4}",
                record.ce,
                record.dice
            );
        }
        history.steps.push(record);
    }

    // Detach the trained tensors so the result holds plain values.
    for name in &names {
        if model.weights.contains(name) {
            let t = params.get(name)?.detach().copy()?;
            params.insert(name.clone(), t);
        } else if let Some(state) = adapters.as_mut() {
            let t = state.factors.get(name)?.detach().copy()?;
            state.factors.insert(name.clone(), t);
        }
    }
    Ok(TrainOutput {
        model: SegmentationModel::from_weights(cfg, params)?,
        lora: adapters,
        history,
        trained: names,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_invariants() {
        TrainConfig::default().validate().unwrap();
        let bad = |f: fn(&mut TrainConfig)| {
            let mut c = TrainConfig::default();
            f(&mut c);
            assert!(matches!(c.validate(), Err(Error::Config(_))));
        };
        bad(|c| c.lambda_ce = 0.5);
        bad(|c| c.decay_gamma = 0.0);
        bad(|c| c.decay_gamma = 1.5);
        bad(|c| c.warmup_steps = c.max_steps);
        bad(|c| c.batch_size = 0);
    }

    #[test]
    fn sampler_visits_every_sample_each_epoch() {
        let mut s = BatchSampler::new(10, 3);
        let mut seen: Vec<usize> = (0..5).flat_map(|_| s.next_batch(2)).collect();
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        let mut again = BatchSampler::new(10, 3);
        let mut s = BatchSampler::new(10, 3);
        assert_eq!(again.next_batch(7), s.next_batch(7));
    }
}
