//! ViT image encoder: non-overlapping patch projection, learned positional
//! embedding, pre-norm transformer blocks, and a neck that maps tokens to
//! the decoder width.

use candle_core::Tensor;

use super::layers::{self, Bypass};
use super::params::{Init, ParamSpec, ParamStore};
use super::{ModelConfig, ENCODER_NS};
use crate::error::{Error, Result};
use crate::lora::{LoraState, Projection};

fn block_prefix(i: usize) -> String {
    format!("{ENCODER_NS}.blocks.{i}")
}

/// Name of the base weight that a LoRA adapter wraps.
pub fn projection_weight_name(block: usize, projection: Projection) -> String {
    format!("{}.attn.{}.weight", block_prefix(block), projection.short_name())
}

fn linear_specs(prefix: &str, d_in: usize, d_out: usize) -> [ParamSpec; 2] {
    [
        ParamSpec::new(
            format!("{prefix}.weight"),
            &[d_out, d_in],
            Init::Normal {
                std: (d_in as f64).powf(-0.5),
            },
        ),
        ParamSpec::new(format!("{prefix}.bias"), &[d_out], Init::Zeros),
    ]
}

fn norm_specs(prefix: &str, dim: usize) -> [ParamSpec; 2] {
    [
        ParamSpec::new(format!("{prefix}.weight"), &[dim], Init::Ones),
        ParamSpec::new(format!("{prefix}.bias"), &[dim], Init::Zeros),
    ]
}

pub(crate) fn attention_specs(prefix: &str, dim: usize) -> Vec<ParamSpec> {
    ["q", "k", "v", "out"]
        .iter()
        .flat_map(|p| linear_specs(&format!("{prefix}.{p}"), dim, dim))
        .collect()
}

pub(crate) fn mlp_specs(prefix: &str, dim: usize, hidden: usize) -> Vec<ParamSpec> {
    let mut v = linear_specs(&format!("{prefix}.fc1"), dim, hidden).to_vec();
    v.extend(linear_specs(&format!("{prefix}.fc2"), hidden, dim));
    v
}

pub(crate) fn linear(prefix: &str, d_in: usize, d_out: usize) -> Vec<ParamSpec> {
    linear_specs(prefix, d_in, d_out).to_vec()
}

pub(crate) fn norm(prefix: &str, dim: usize) -> Vec<ParamSpec> {
    norm_specs(prefix, dim).to_vec()
}

pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let e = cfg.embed_dim;
    let g = cfg.token_grid();
    let mut specs = linear(
        &format!("{ENCODER_NS}.patch_embed"),
        cfg.patch_size * cfg.patch_size,
        e,
    );
    specs.push(ParamSpec::new(
        format!("{ENCODER_NS}.pos_embed"),
        &[g * g, e],
        Init::Normal { std: 0.02 },
    ));
    for i in 0..cfg.num_blocks {
        let p = block_prefix(i);
        specs.extend(norm(&format!("{p}.norm1"), e));
        specs.extend(attention_specs(&format!("{p}.attn"), e));
        specs.extend(norm(&format!("{p}.norm2"), e));
        specs.extend(mlp_specs(&format!("{p}.mlp"), e, e * cfg.mlp_ratio));
    }
    specs.extend(norm(&format!("{ENCODER_NS}.neck.norm"), e));
    specs.extend(linear(&format!("{ENCODER_NS}.neck.proj"), e, cfg.decoder_dim));
    specs.extend(norm(&format!("{ENCODER_NS}.neck.norm_out"), cfg.decoder_dim));
    specs
}

/// Splits `[B, S, S]` images into `[B, g*g, p*p]` row-major patches.
pub fn patchify(images: &Tensor, patch: usize) -> Result<Tensor> {
    let (b, h, w) = images.dims3()?;
    if h != w || h % patch != 0 {
        return Err(Error::Config(format!(
            "image {h}x{w} cannot be split into {patch}px patches"
        )));
    }
    let g = h / patch;
    Ok(images
        .reshape((b, g, patch, g, patch))?
        .permute((0, 1, 3, 2, 4))?
        .contiguous()?
        .reshape((b, g * g, patch * patch))?)
}

/// Encodes `[B, S, S]` images to `[B, decoder_dim, g, g]`.
pub fn forward(
    cfg: &ModelConfig,
    params: &ParamStore,
    lora: Option<&LoraState>,
    images: &Tensor,
) -> Result<Tensor> {
    let (b, h, w) = images.dims3()?;
    if h != cfg.input_size || w != cfg.input_size {
        return Err(Error::Config(format!(
            "image {h}x{w} does not match input_size {}",
            cfg.input_size
        )));
    }
    if let Some(state) = lora {
        state.check_compatible(cfg)?;
    }
    let g = cfg.token_grid();
    let patches = patchify(images, cfg.patch_size)?;
    let mut x = layers::linear(&patches, params, &format!("{ENCODER_NS}.patch_embed"))?
        .broadcast_add(params.get(&format!("{ENCODER_NS}.pos_embed"))?)?;
    for i in 0..cfg.num_blocks {
        let p = block_prefix(i);
        let normed = layers::layer_norm(&x, params, &format!("{p}.norm1"))?;
        let bypass = |proj: Projection| -> Result<Option<Bypass<'_>>> {
            match lora {
                Some(state) => state.bypass(i, proj),
                None => Ok(None),
            }
        };
        let attn = layers::attention(
            &normed,
            &normed,
            &normed,
            params,
            &format!("{p}.attn"),
            cfg.num_heads,
            bypass(Projection::Query)?,
            bypass(Projection::Value)?,
        )?;
        x = (x + attn)?;
        let normed = layers::layer_norm(&x, params, &format!("{p}.norm2"))?;
        x = (&x + layers::mlp(&normed, params, &format!("{p}.mlp"))?)?;
    }
    let x = layers::layer_norm(&x, params, &format!("{ENCODER_NS}.neck.norm"))?;
    let x = layers::linear(&x, params, &format!("{ENCODER_NS}.neck.proj"))?;
    let x = layers::layer_norm(&x, params, &format!("{ENCODER_NS}.neck.norm_out"))?;
    Ok(x.transpose(1, 2)?
        .contiguous()?
        .reshape((b, cfg.decoder_dim, g, g))?)
}
