//! Fused CPU kernels for the two hottest element-wise ops, with fused
//! backward passes. The composed versions allocate one temporary per
//! primitive, which dominates step time at these sizes.

use candle_core::backend::BackendStorage;
use candle_core::{CpuStorage, CustomOp1, CustomOp2, Layout, Shape, Tensor};

use crate::error::Result;

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

trait Float:
    Copy
    + PartialOrd
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
{
    const ZERO: Self;
    fn to_f64(self) -> f64;
    fn from_f64(v: f64) -> Self;
    fn exp(self) -> Self;
}

impl Float for f32 {
    const ZERO: Self = 0.0;
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn exp(self) -> Self {
        f32::exp(self)
    }
}

impl Float for f64 {
    const ZERO: Self = 0.0;
    fn to_f64(self) -> f64 {
        self
    }
    fn from_f64(v: f64) -> Self {
        v
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
}

fn contiguous<'a, T>(data: &'a [T], layout: &Layout, op: &'static str) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => Err(candle_core::Error::RequiresContiguous { op }),
    }
}

fn unsupported(op: &'static str, s: &CpuStorage) -> candle_core::Error {
    candle_core::Error::UnsupportedDTypeForOp(s.dtype(), op)
}

/// `softmax(scale · x)` over the last dimension.
struct ScaledSoftmax {
    scale: f64,
}

fn softmax_rows<T: Float>(x: &[T], row: usize, scale: f64) -> Vec<T> {
    let scale = T::from_f64(scale);
    let mut out = Vec::with_capacity(x.len());
    for r in x.chunks_exact(row) {
        let max = r[1..].iter().fold(r[0], |m, &v| if v > m { v } else { m });
        let start = out.len();
        let mut sum = T::ZERO;
        for &v in r {
            let e = ((v - max) * scale).exp();
            sum = sum + e;
            out.push(e);
        }
        let inv = T::from_f64(1.0 / sum.to_f64());
        for v in &mut out[start..] {
            *v = *v * inv;
        }
    }
    out
}

impl CustomOp1 for ScaledSoftmax {
    fn name(&self) -> &'static str {
        "scaled-softmax"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let row = l.dims().last().copied().unwrap_or(1).max(1);
        let out = match s {
            CpuStorage::F32(d) => CpuStorage::F32(softmax_rows(contiguous(d, l, self.name())?, row, self.scale)),
            CpuStorage::F64(d) => CpuStorage::F64(softmax_rows(contiguous(d, l, self.name())?, row, self.scale)),
            other => return Err(unsupported(self.name(), other)),
        };
        Ok((out, l.shape().clone()))
    }

    fn bwd(&self, _arg: &Tensor, res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let grad = grad.contiguous()?;
        Ok(Some(res.apply_op2_no_bwd(&grad, &ScaledSoftmaxGrad { scale: self.scale })?))
    }
}

/// `scale · y ⊙ (g − Σ g ⊙ y)` per row.
struct ScaledSoftmaxGrad {
    scale: f64,
}

fn softmax_grad_rows<T: Float>(y: &[T], g: &[T], row: usize, scale: f64) -> Vec<T> {
    let scale = T::from_f64(scale);
    let mut out = Vec::with_capacity(y.len());
    for (yr, gr) in y.chunks_exact(row).zip(g.chunks_exact(row)) {
        let dot = yr.iter().zip(gr).fold(T::ZERO, |acc, (&a, &b)| acc + a * b);
        out.extend(yr.iter().zip(gr).map(|(&a, &b)| scale * a * (b - dot)));
    }
    out
}

impl CustomOp2 for ScaledSoftmaxGrad {
    fn name(&self) -> &'static str {
        "scaled-softmax-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let row = l1.dims().last().copied().unwrap_or(1).max(1);
        let n = self.name();
        let out = match (s1, s2) {
            (CpuStorage::F32(y), CpuStorage::F32(g)) => {
                CpuStorage::F32(softmax_grad_rows(contiguous(y, l1, n)?, contiguous(g, l2, n)?, row, self.scale))
            }
            (CpuStorage::F64(y), CpuStorage::F64(g)) => {
                CpuStorage::F64(softmax_grad_rows(contiguous(y, l1, n)?, contiguous(g, l2, n)?, row, self.scale))
            }
            (other, _) => return Err(unsupported(n, other)),
        };
        Ok((out, l1.shape().clone()))
    }
}

/// Exact (erf-based) GELU.
struct Gelu;

fn gelu_values<T: Float>(x: &[T]) -> Vec<T> {
    x.iter()
        .map(|v| {
            let v = v.to_f64();
            T::from_f64(0.5 * v * (1.0 + candle_core::cpu::erf::erf_f64(v * std::f64::consts::FRAC_1_SQRT_2)))
        })
        .collect()
}

fn gelu_grad_values<T: Float>(x: &[T], g: &[T]) -> Vec<T> {
    x.iter()
        .zip(g)
        .map(|(v, g)| {
            let v = v.to_f64();
            let cdf = 0.5 * (1.0 + candle_core::cpu::erf::erf_f64(v * std::f64::consts::FRAC_1_SQRT_2));
            let pdf = FRAC_1_SQRT_2PI * (-0.5 * v * v).exp();
            T::from_f64(g.to_f64() * (cdf + v * pdf))
        })
        .collect()
}

impl CustomOp1 for Gelu {
    fn name(&self) -> &'static str {
        "gelu"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = match s {
            CpuStorage::F32(d) => CpuStorage::F32(gelu_values(contiguous(d, l, self.name())?)),
            CpuStorage::F64(d) => CpuStorage::F64(gelu_values(contiguous(d, l, self.name())?)),
            other => return Err(unsupported(self.name(), other)),
        };
        Ok((out, l.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let grad = grad.contiguous()?;
        Ok(Some(arg.contiguous()?.apply_op2_no_bwd(&grad, &GeluGrad)?))
    }
}

struct GeluGrad;

impl CustomOp2 for GeluGrad {
    fn name(&self) -> &'static str {
        "gelu-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let n = self.name();
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(g)) => {
                CpuStorage::F32(gelu_grad_values(contiguous(x, l1, n)?, contiguous(g, l2, n)?))
            }
            (CpuStorage::F64(x), CpuStorage::F64(g)) => {
                CpuStorage::F64(gelu_grad_values(contiguous(x, l1, n)?, contiguous(g, l2, n)?))
            }
            (other, _) => return Err(unsupported(n, other)),
        };
        Ok((out, l1.shape().clone()))
    }
}

/// `softmax(scale · x)` over the last dimension.
pub fn scaled_softmax(x: &Tensor, scale: f64) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(ScaledSoftmax { scale })?)
}

/// `x · Φ(x)` with the exact normal CDF.
pub fn gelu(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(Gelu)?)
}
