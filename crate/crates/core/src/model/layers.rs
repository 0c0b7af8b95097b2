//! Differentiable building blocks shared by the encoder and decoder.
//!
//! Every block reads its weights from a [`ParamStore`] under a dotted
//! prefix, so the same code runs for inference (plain tensors) and for
//! training (variable-backed tensors).

use candle_core::{DType, Device, Tensor, D};

use crate::error::Result;
use crate::model::ops::{gelu, scaled_softmax};
use crate::model::params::ParamStore;

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Low-rank bypass factors for one linear projection.
pub struct Bypass<'a> {
    pub down: &'a Tensor,
    pub up: &'a Tensor,
    pub scale: f64,
}

/// `x · Wᵀ + b` over the last dimension of `x`, any leading shape.
pub fn linear(x: &Tensor, params: &ParamStore, prefix: &str) -> Result<Tensor> {
    linear_with_bypass(x, params, prefix, None)
}

pub fn linear_with_bypass(
    x: &Tensor,
    params: &ParamStore,
    prefix: &str,
    bypass: Option<Bypass<'_>>,
) -> Result<Tensor> {
    let weight = params.get(&format!("{prefix}.weight"))?;
    let bias = params.get(&format!("{prefix}.bias"))?;
    let dims = x.dims().to_vec();
    let d_in = *dims.last().expect("linear input has at least one dim");
    let rows = x.elem_count() / d_in;
    let flat = x.reshape((rows, d_in))?;
    let mut out = flat.matmul(&weight.t()?)?;
    if let Some(bypass) = bypass {
        let low = flat.matmul(&bypass.down.t()?)?;
        let delta = low.matmul(&bypass.up.t()?)?;
        out = (out + (delta * bypass.scale)?)?;
    }
    let out = out.broadcast_add(bias)?;
    let mut out_dims = dims;
    *out_dims.last_mut().unwrap() = weight.dim(0)?;
    Ok(out.reshape(out_dims)?)
}

/// Layer normalization over the last dimension.
pub fn layer_norm(x: &Tensor, params: &ParamStore, prefix: &str) -> Result<Tensor> {
    let weight = params.get(&format!("{prefix}.weight"))?;
    let bias = params.get(&format!("{prefix}.bias"))?;
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let normed = centered.broadcast_div(&(var + LAYER_NORM_EPS)?.sqrt()?)?;
    Ok(normed.broadcast_mul(weight)?.broadcast_add(bias)?)
}

/// Layer normalization over the channel axis of a `[B, C, H, W]` map.
pub fn layer_norm_2d(x: &Tensor, params: &ParamStore, prefix: &str) -> Result<Tensor> {
    let weight = params.get(&format!("{prefix}.weight"))?;
    let bias = params.get(&format!("{prefix}.bias"))?;
    let channels = weight.dim(0)?;
    let mean = x.mean_keepdim(1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(1)?;
    let normed = centered.broadcast_div(&(var + LAYER_NORM_EPS)?.sqrt()?)?;
    Ok(normed
        .broadcast_mul(&weight.reshape((1, channels, 1, 1))?)?
        .broadcast_add(&bias.reshape((1, channels, 1, 1))?)?)
}

/// Two-layer perceptron with GELU.
pub fn mlp(x: &Tensor, params: &ParamStore, prefix: &str) -> Result<Tensor> {
    let hidden = gelu(&linear(x, params, &format!("{prefix}.fc1"))?)?;
    linear(&hidden, params, &format!("{prefix}.fc2"))
}

/// Multi-head attention with separate query/key/value/output projections.
///
/// `q_in: [B, Nq, D]`, `k_in, v_in: [B, Nk, D]`. Optional bypasses apply to
/// the query and value projections.
pub fn attention(
    q_in: &Tensor,
    k_in: &Tensor,
    v_in: &Tensor,
    params: &ParamStore,
    prefix: &str,
    num_heads: usize,
    query_bypass: Option<Bypass<'_>>,
    value_bypass: Option<Bypass<'_>>,
) -> Result<Tensor> {
    let q = linear_with_bypass(q_in, params, &format!("{prefix}.q"), query_bypass)?;
    let k = linear(k_in, params, &format!("{prefix}.k"))?;
    let v = linear_with_bypass(v_in, params, &format!("{prefix}.v"), value_bypass)?;
    let (b, nq, dim) = q.dims3()?;
    let nk = k.dim(1)?;
    let head_dim = dim / num_heads;
    let split = |t: &Tensor, n: usize| -> Result<Tensor> {
        Ok(t.reshape((b, n, num_heads, head_dim))?
            .transpose(1, 2)?
            .contiguous()?)
    };
    let q = split(&q, nq)?;
    let k_t = k
        .reshape((b, nk, num_heads, head_dim))?
        .permute((0, 2, 3, 1))?
        .contiguous()?;
    let v = split(&v, nk)?;
    let weights = scaled_softmax(&q.matmul(&k_t)?, 1.0 / (head_dim as f64).sqrt())?;
    let mixed = weights
        .matmul(&v)?
        .transpose(1, 2)?
        .contiguous()?
        .reshape((b, nq, dim))?;
    linear(&mixed, params, &format!("{prefix}.out"))
}

/// Sinusoidal encoding of normalized 2-D coordinates.
///
/// `coords` holds `(x, y)` pairs in `[0, 1]`; the result has `dim` features
/// laid out as `[sin fx, cos fx, sin fy, cos fy]` with `dim / 4`
/// geometrically spaced frequencies between `π` and `π · grid`.
pub fn sinusoidal_coords(
    coords: &[(f64, f64)],
    dim: usize,
    grid: usize,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let n_freq = dim / 4;
    let freqs: Vec<f64> = (0..n_freq)
        .map(|k| {
            let t = if n_freq > 1 {
                k as f64 / (n_freq - 1) as f64
            } else {
                0.0
            };
            std::f64::consts::PI * (grid.max(1) as f64).powf(t)
        })
        .collect();
    let mut data = Vec::with_capacity(coords.len() * dim);
    for &(x, y) in coords {
        data.extend(freqs.iter().map(|f| (f * x).sin()));
        data.extend(freqs.iter().map(|f| (f * x).cos()));
        data.extend(freqs.iter().map(|f| (f * y).sin()));
        data.extend(freqs.iter().map(|f| (f * y).cos()));
    }
    Ok(Tensor::from_vec(data, (coords.len(), dim), device)?.to_dtype(dtype)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sinusoidal_encoding_has_unit_pairs() {
        let enc = sinusoidal_coords(&[(0.3, 0.7)], 16, 8, DType::F64, &Device::Cpu).unwrap();
        let v: Vec<f64> = enc.flatten_all().unwrap().to_vec1().unwrap();
        for k in 0..4 {
            let s = v[k];
            let c = v[4 + k];
            assert!((s * s + c * c - 1.0).abs() < 1e-12);
        }
    }
}
