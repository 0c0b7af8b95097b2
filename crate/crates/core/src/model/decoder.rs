//! Two-way transformer mask decoder with one output token per semantic
//! class (background included). There is no multi-mask ambiguity branch.

use candle_core::Tensor;

use super::encoder::{attention_specs, linear, mlp_specs, norm};
use super::{layers, ops};
use super::params::{Init, ParamSpec, ParamStore};
use super::prompt::dense_positional_encoding;
use super::{ModelConfig, DECODER_NS};
use crate::error::{Error, Result};

pub const NUM_TWO_WAY_LAYERS: usize = 2;

pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let d = cfg.decoder_dim;
    let mut specs = vec![ParamSpec::new(
        format!("{DECODER_NS}.class_tokens"),
        &[cfg.num_outputs(), d],
        Init::Normal { std: 1.0 },
    )];
    for l in 0..NUM_TWO_WAY_LAYERS {
        let p = format!("{DECODER_NS}.layers.{l}");
        specs.extend(attention_specs(&format!("{p}.self_attn"), d));
        specs.extend(norm(&format!("{p}.norm1"), d));
        specs.extend(attention_specs(&format!("{p}.cross_token_to_image"), d));
        specs.extend(norm(&format!("{p}.norm2"), d));
        specs.extend(mlp_specs(&format!("{p}.mlp"), d, d * cfg.mlp_ratio));
        specs.extend(norm(&format!("{p}.norm3"), d));
        specs.extend(attention_specs(&format!("{p}.cross_image_to_token"), d));
        specs.extend(norm(&format!("{p}.norm4"), d));
    }
    specs.extend(attention_specs(&format!("{DECODER_NS}.final_attn"), d));
    specs.extend(norm(&format!("{DECODER_NS}.final_norm"), d));
    let stages = cfg.upscale_stages();
    let mut c_in = d;
    for s in 0..stages {
        let c_out = cfg.upscale_channels(s);
        let p = format!("{DECODER_NS}.upscale.{s}");
        specs.push(ParamSpec::new(
            format!("{p}.weight"),
            &[c_in, c_out, 2, 2],
            Init::Normal {
                std: (c_in as f64).powf(-0.5),
            },
        ));
        specs.push(ParamSpec::new(format!("{p}.bias"), &[c_out], Init::Zeros));
        if s + 1 < stages {
            specs.extend(norm(&format!("{p}.norm"), c_out));
        }
        c_in = c_out;
    }
    for c in 0..cfg.num_outputs() {
        let p = format!("{DECODER_NS}.heads.{c}");
        specs.extend(linear(&format!("{p}.fc1"), d, d));
        specs.extend(linear(&format!("{p}.fc2"), d, c_in));
    }
    specs
}

fn two_way_layer(
    cfg: &ModelConfig,
    params: &ParamStore,
    layer: usize,
    queries: &Tensor,
    keys: &Tensor,
    query_pe: &Tensor,
    key_pe: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let p = format!("{DECODER_NS}.layers.{layer}");
    let heads = cfg.num_heads;
    let attn = |q: &Tensor, k: &Tensor, v: &Tensor, name: &str| {
        layers::attention(q, k, v, params, &format!("{p}.{name}"), heads, None, None)
    };

    // The first layer replaces the tokens with their self-attention output,
    // so the positional part is not added twice.
    let queries = if layer == 0 {
        attn(queries, queries, queries, "self_attn")?
    } else {
        let q = (queries + query_pe)?;
        (queries + attn(&q, &q, queries, "self_attn")?)?
    };
    let queries = layers::layer_norm(&queries, params, &format!("{p}.norm1"))?;

    let q = (&queries + query_pe)?;
    let k = keys.broadcast_add(key_pe)?;
    let queries = (&queries + attn(&q, &k, keys, "cross_token_to_image")?)?;
    let queries = layers::layer_norm(&queries, params, &format!("{p}.norm2"))?;

    let queries = (&queries + layers::mlp(&queries, params, &format!("{p}.mlp"))?)?;
    let queries = layers::layer_norm(&queries, params, &format!("{p}.norm3"))?;

    let q = (&queries + query_pe)?;
    let k = keys.broadcast_add(key_pe)?;
    let keys = (keys + attn(&k, &q, &queries, "cross_image_to_token")?)?;
    let keys = layers::layer_norm(&keys, params, &format!("{p}.norm4"))?;
    Ok((queries, keys))
}

/// `embedding: [B, D, g, g]`, `sparse: [B, k, D]`, `dense: [B, D, g, g]`
/// (or broadcastable) → logits `[B, C+1, L, L]`.
pub fn forward(
    cfg: &ModelConfig,
    params: &ParamStore,
    embedding: &Tensor,
    sparse: &Tensor,
    dense: &Tensor,
) -> Result<Tensor> {
    let (b, d, g, g2) = embedding.dims4()?;
    if d != cfg.decoder_dim || g != cfg.token_grid() || g2 != g {
        return Err(Error::Config(format!(
            "embedding shape {:?} does not match the decoder",
            embedding.dims()
        )));
    }
    let (sb, _k, sd) = sparse.dims3()?;
    if sb != b || sd != d {
        return Err(Error::Config(format!(
            "sparse tokens shape {:?} do not match batch {b} / width {d}",
            sparse.dims()
        )));
    }
    let n_out = cfg.num_outputs();
    let class_tokens = params
        .get(&format!("{DECODER_NS}.class_tokens"))?
        .unsqueeze(0)?
        .broadcast_as((b, n_out, d))?;
    let tokens = Tensor::cat(&[&class_tokens, sparse], 1)?;

    let src = embedding.broadcast_add(dense)?;
    let keys = src.flatten_from(2)?.transpose(1, 2)?.contiguous()?;
    let key_pe = dense_positional_encoding(cfg, params)?.unsqueeze(0)?;

    let mut queries = tokens.clone();
    let mut keys = keys;
    for l in 0..NUM_TWO_WAY_LAYERS {
        let (q, k) = two_way_layer(cfg, params, l, &queries, &keys, &tokens, &key_pe)?;
        queries = q;
        keys = k;
    }
    let q = (&queries + &tokens)?;
    let k = keys.broadcast_add(&key_pe)?;
    let attn = layers::attention(
        &q,
        &k,
        &keys,
        params,
        &format!("{DECODER_NS}.final_attn"),
        cfg.num_heads,
        None,
        None,
    )?;
    let queries = layers::layer_norm(&(&queries + attn)?, params, &format!("{DECODER_NS}.final_norm"))?;

    // Upscale image features from the token grid to the logit grid.
    let mut up = keys.transpose(1, 2)?.contiguous()?.reshape((b, d, g, g))?;
    let stages = cfg.upscale_stages();
    for s in 0..stages {
        let p = format!("{DECODER_NS}.upscale.{s}");
        let w = params.get(&format!("{p}.weight"))?;
        let bias = params.get(&format!("{p}.bias"))?;
        up = up
            .conv_transpose2d(w, 0, 0, 2, 1)?
            .broadcast_add(&bias.reshape((1, bias.dim(0)?, 1, 1))?)?;
        if s + 1 < stages {
            up = layers::layer_norm_2d(&up, params, &format!("{p}.norm"))?;
        }
        up = ops::gelu(&up)?;
    }
    let (_, c_up, side, _) = up.dims4()?;

    let hyper: Vec<Tensor> = (0..n_out)
        .map(|c| {
            let token = queries.narrow(1, c, 1)?;
            layers::mlp(&token, params, &format!("{DECODER_NS}.heads.{c}"))
        })
        .collect::<Result<_>>()?;
    let hyper = Tensor::cat(&hyper, 1)?;
    let logits = hyper.matmul(&up.reshape((b, c_up, side * side))?)?;
    Ok(logits.reshape((b, n_out, side, side))?)
}
