//! Low-rank adapters on the query and value projections of every encoder
//! block, weight merging, and the per-regimen trainable parameter sets.
//!
//! An adapted projection computes `W0·x + (alpha/rank)·B·(A·x)` with
//! `A: [rank, d_in]` and `B: [d_out, rank]`. Fresh adapters start with
//! `B = 0`, so injection leaves the model output unchanged.

use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::encoder::projection_weight_name;
use crate::model::layers::Bypass;
use crate::model::params::ParamStore;
use crate::model::prompt::default_embedding_names;
use crate::model::{ModelConfig, DECODER_NS, ENCODER_NS, PROMPT_NS};

pub const LORA_NS: &str = "lora";
pub const DEFAULT_RANK: usize = 4;
pub const DEFAULT_ALPHA: f64 = 4.0;
/// Standard deviation of the down-projection at injection.
pub const A_INIT_STD: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Projection {
    Query,
    Value,
}

impl Projection {
    pub fn short_name(self) -> &'static str {
        match self {
            Projection::Query => "q",
            Projection::Value => "v",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LoraLayerId {
    pub block: usize,
    pub projection: Projection,
}

impl LoraLayerId {
    fn prefix(&self) -> String {
        format!(
            "{LORA_NS}.blocks.{}.attn.{}",
            self.block,
            self.projection.short_name()
        )
    }

    pub fn a_name(&self) -> String {
        format!("{}.a", self.prefix())
    }

    pub fn b_name(&self) -> String {
        format!("{}.b", self.prefix())
    }

    pub fn base_weight_name(&self) -> String {
        projection_weight_name(self.block, self.projection)
    }
}

/// Adapter factors for every registered layer.
#[derive(Debug, Clone)]
pub struct LoraState {
    pub rank: usize,
    pub alpha: f64,
    pub registry: Vec<LoraLayerId>,
    pub factors: ParamStore,
}

/// Registry covering the query and value projection of each block, in order.
pub fn registry_for(num_blocks: usize) -> Vec<LoraLayerId> {
    (0..num_blocks)
        .flat_map(|block| {
            [Projection::Query, Projection::Value]
                .into_iter()
                .map(move |projection| LoraLayerId { block, projection })
        })
        .collect()
}

/// Creates adapters for `cfg` with `A ~ N(0, 0.01²)` and `B = 0`.
pub fn inject_lora(
    cfg: &ModelConfig,
    rank: usize,
    alpha: f64,
    seed: u64,
    dtype: DType,
) -> Result<LoraState> {
    let (d_in, d_out) = (cfg.embed_dim, cfg.embed_dim);
    if rank == 0 || rank >= d_in.min(d_out) {
        return Err(Error::Config(format!(
            "LoRA rank {rank} must satisfy 1 <= rank < {}",
            d_in.min(d_out)
        )));
    }
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::Config(format!("LoRA alpha {alpha} must be positive")));
    }
    let device = Device::Cpu;
    let normal = Normal::new(0.0, A_INIT_STD).expect("valid std");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let registry = registry_for(cfg.num_blocks);
    let mut factors = ParamStore::new();
    for id in &registry {
        let a: Vec<f32> = (0..rank * d_in)
            .map(|_| normal.sample(&mut rng) as f32)
            .collect();
        factors.insert(
            id.a_name(),
            Tensor::from_vec(a, (rank, d_in), &device)?.to_dtype(dtype)?,
        );
        factors.insert(id.b_name(), Tensor::zeros((d_out, rank), dtype, &device)?);
    }
    Ok(LoraState {
        rank,
        alpha,
        registry,
        factors,
    })
}

impl LoraState {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn factor(&self, id: &LoraLayerId) -> Result<(&Tensor, &Tensor)> {
        Ok((self.factors.get(&id.a_name())?, self.factors.get(&id.b_name())?))
    }

    /// Bypass for `(block, projection)` if that layer is registered.
    pub fn bypass(&self, block: usize, projection: Projection) -> Result<Option<Bypass<'_>>> {
        let id = LoraLayerId { block, projection };
        if !self.registry.contains(&id) {
            return Ok(None);
        }
        let (down, up) = self.factor(&id)?;
        Ok(Some(Bypass {
            down,
            up,
            scale: self.scale(),
        }))
    }

    pub fn check_compatible(&self, cfg: &ModelConfig) -> Result<()> {
        for id in &self.registry {
            if id.block >= cfg.num_blocks {
                return Err(Error::Config(format!(
                    "adapter for block {} but the encoder has {} blocks",
                    id.block, cfg.num_blocks
                )));
            }
            let (a, b) = self.factor(id)?;
            if a.dims() != [self.rank, cfg.embed_dim] || b.dims() != [cfg.embed_dim, self.rank] {
                return Err(Error::Config(format!(
                    "adapter {} has shapes {:?}/{:?}, expected [{r}, {e}]/[{e}, {r}]",
                    id.a_name(),
                    a.dims(),
                    b.dims(),
                    r = self.rank,
                    e = cfg.embed_dim
                )));
            }
        }
        Ok(())
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        Ok(Self {
            factors: self.factors.to_dtype(dtype)?,
            ..self.clone()
        })
    }

    /// Returns a copy of `weights` with every adapter folded into its base weight.
    pub fn merge_into(&self, weights: &ParamStore) -> Result<ParamStore> {
        let mut merged = weights.clone();
        for id in &self.registry {
            let name = id.base_weight_name();
            let (a, b) = self.factor(id)?;
            let w = merge_lora(weights.get(&name)?, a, b, self.alpha, self.rank)?;
            merged.insert(name, w);
        }
        Ok(merged)
    }

    /// Parameter count of all factors.
    pub fn num_parameters(&self) -> usize {
        self.factors.numel()
    }
}

fn check_factor_shapes(w0: &Tensor, a: &Tensor, b: &Tensor, rank: usize) -> Result<(usize, usize)> {
    let (d_out, d_in) = w0.dims2()?;
    if a.dims() != [rank, d_in] || b.dims() != [d_out, rank] {
        return Err(Error::Config(format!(
            "LoRA factors {:?}/{:?} do not fit W0 {:?} at rank {rank}",
            a.dims(),
            b.dims(),
            w0.dims()
        )));
    }
    Ok((d_out, d_in))
}

/// `W0·x + (alpha/rank)·B·(A·x)` for a single vector `x: [d_in]`.
pub fn lora_forward(
    x: &Tensor,
    w0: &Tensor,
    a: &Tensor,
    b: &Tensor,
    alpha: f64,
    rank: usize,
) -> Result<Tensor> {
    let (_, d_in) = check_factor_shapes(w0, a, b, rank)?;
    if x.dims() != [d_in] {
        return Err(Error::Config(format!(
            "input shape {:?}, expected [{d_in}]",
            x.dims()
        )));
    }
    let col = x.unsqueeze(1)?;
    let base = w0.matmul(&col)?;
    let delta = b.matmul(&a.matmul(&col)?)?;
    Ok((base + (delta * (alpha / rank as f64))?)?.squeeze(1)?)
}

/// `W0 + (alpha/rank)·B·A`.
pub fn merge_lora(w0: &Tensor, a: &Tensor, b: &Tensor, alpha: f64, rank: usize) -> Result<Tensor> {
    check_factor_shapes(w0, a, b, rank)?;
    let delta = (b.matmul(a)? * (alpha / rank as f64))?;
    Ok((w0 + delta)?)
}

/// `W − (alpha/rank)·B·A`; the inverse of [`merge_lora`].
pub fn unmerge_lora(w: &Tensor, a: &Tensor, b: &Tensor, alpha: f64, rank: usize) -> Result<Tensor> {
    check_factor_shapes(w, a, b, rank)?;
    let delta = (b.matmul(a)? * (alpha / rank as f64))?;
    Ok((w - delta)?)
}

/// Expected adapter parameter count.
pub fn lora_parameter_count(num_blocks: usize, rank: usize, d_in: usize, d_out: usize) -> usize {
    num_blocks * 2 * rank * (d_in + d_out)
}

/// Which parameter subset a fine-tuning run updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regimen {
    ZeroShot,
    DecoderOnly,
    LoraSamed,
}

impl Regimen {
    pub fn as_str(self) -> &'static str {
        match self {
            Regimen::ZeroShot => "zero_shot",
            Regimen::DecoderOnly => "decoder_only",
            Regimen::LoraSamed => "lora_samed",
        }
    }
}

impl fmt::Display for Regimen {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Regimen {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero_shot" => Ok(Regimen::ZeroShot),
            "decoder_only" => Ok(Regimen::DecoderOnly),
            "lora_samed" => Ok(Regimen::LoraSamed),
            other => Err(Error::Validation(format!("unknown regimen `{other}`"))),
        }
    }
}

/// Switches that refine the regimen's trainable set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainableOptions {
    /// Train the no-prompt default embeddings under `decoder_only`.
    pub decoder_only_trains_default_prompt: bool,
}

impl Default for TrainableOptions {
    fn default() -> Self {
        Self {
            decoder_only_trains_default_prompt: true,
        }
    }
}

/// Sorted names of the tensors a regimen optimizes.
///
/// Base encoder tensors never appear. Under `lora_samed` every adapter
/// factor, the whole prompt encoder and the mask decoder are trainable.
pub fn trainable_parameters(
    weights: &ParamStore,
    lora: Option<&LoraState>,
    regimen: Regimen,
    options: TrainableOptions,
) -> Vec<String> {
    let decoder_prefix = format!("{DECODER_NS}.");
    let prompt_prefix = format!("{PROMPT_NS}.");
    let mut names: Vec<String> = match regimen {
        Regimen::ZeroShot => Vec::new(),
        Regimen::DecoderOnly => {
            let defaults = default_embedding_names();
            weights
                .names()
                .filter(|n| {
                    n.starts_with(&decoder_prefix)
                        || (options.decoder_only_trains_default_prompt
                            && defaults.iter().any(|d| d == n))
                })
                .map(str::to_owned)
                .collect()
        }
        Regimen::LoraSamed => {
            let mut v: Vec<String> = weights
                .names()
                .filter(|n| n.starts_with(&decoder_prefix) || n.starts_with(&prompt_prefix))
                .map(str::to_owned)
                .collect();
            if let Some(state) = lora {
                for id in &state.registry {
                    v.push(id.a_name());
                    v.push(id.b_name());
                }
            }
            v
        }
    };
    debug_assert!(names.iter().all(|n| !n.starts_with(ENCODER_NS)));
    names.sort();
    names
}
