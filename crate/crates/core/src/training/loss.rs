//! Cross-entropy and soft Dice on the logit grid.

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

/// Tolerance on per-pixel channel sums accepted by [`dice_loss`].
pub const NORMALIZATION_TOLERANCE: f64 = 1e-4;

/// Keeps the top-left sample of every `factor × factor` cell of a square
/// label map.
pub fn downsample_labels(labels: &[u8], side: usize, factor: usize) -> Result<Vec<u8>> {
    if labels.len() != side * side {
        return Err(Error::Validation(format!(
            "{} labels for a {side}x{side} map",
            labels.len()
        )));
    }
    if factor == 0 || side % factor != 0 {
        return Err(Error::Config(format!(
            "map side {side} is not divisible by {factor}"
        )));
    }
    let low = side / factor;
    Ok((0..low * low)
        .map(|i| labels[(i / low) * factor * side + (i % low) * factor])
        .collect())
}

/// One-hot encoding `[B, C, L, L]` of `B` stacked `L × L` label maps.
pub fn one_hot(
    labels: &[u8],
    batch: usize,
    channels: usize,
    side: usize,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let plane = side * side;
    if labels.len() != batch * plane {
        return Err(Error::Validation(format!(
            "{} labels for {batch} maps of {side}x{side}",
            labels.len()
        )));
    }
    let mut data = vec![0f32; batch * channels * plane];
    for (i, &l) in labels.iter().enumerate() {
        let l = l as usize;
        if l >= channels {
            return Err(Error::Validation(format!(
                "label {l} outside {channels} channels"
            )));
        }
        let (b, p) = (i / plane, i % plane);
        data[(b * channels + l) * plane + p] = 1.0;
    }
    Ok(Tensor::from_vec(data, (batch, channels, side, side), device)?.to_dtype(dtype)?)
}

/// Log-probabilities over the channel axis of `[B, C, L, L]` logits.
pub fn log_softmax_channels(logits: &Tensor) -> Result<Tensor> {
    let max = logits.max_keepdim(1)?.detach();
    let shifted = logits.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Mean pixelwise cross-entropy.
pub fn cross_entropy(log_probs: &Tensor, target: &Tensor) -> Result<Tensor> {
    let (b, _, h, w) = log_probs.dims4()?;
    let picked = (log_probs * target)?.sum_all()?;
    Ok((picked.neg()? / (b * h * w) as f64)?)
}

/// Soft Dice over the batch, averaged over every channel including
/// background. No normalization check.
pub(crate) fn dice_loss_unchecked(probs: &Tensor, target: &Tensor, eps: f64) -> Result<Tensor> {
    let channels = probs.dim(1)?;
    let inter = (probs * target)?.sum((0, 2, 3))?;
    let p_sum = probs.sum((0, 2, 3))?;
    let g_sum = target.sum((0, 2, 3))?;
    let ratio = ((inter * 2.0)? + eps)?.div(&((p_sum + g_sum)? + eps)?)?;
    Ok((ratio.neg()? + 1.0)?.sum_all()?.affine(1.0 / channels as f64, 0.0)?)
}

fn batched(t: &Tensor) -> Result<Tensor> {
    match t.rank() {
        3 => Ok(t.unsqueeze(0)?),
        4 => Ok(t.clone()),
        r => Err(Error::Validation(format!(
            "expected [C, L, L] or [B, C, L, L], got rank {r}"
        ))),
    }
}

/// Soft Dice loss of `probs` (`[C, L, L]` or `[B, C, L, L]`) against
/// `labels`, averaged over all `C` channels.
pub fn dice_loss(probs: &Tensor, labels: &[u8], eps: f64) -> Result<Tensor> {
    let probs = batched(probs)?;
    let (b, c, h, w) = probs.dims4()?;
    if h != w {
        return Err(Error::Validation(format!("non-square map {h}x{w}")));
    }
    let deviation = (probs.sum(1)? - 1.0)?
        .abs()?
        .max_all()?
        .to_dtype(DType::F64)?
        .to_scalar::<f64>()?;
    if !(deviation <= NORMALIZATION_TOLERANCE) {
        return Err(Error::Validation(format!(
            "probabilities do not sum to one (max deviation {deviation:.3e})"
        )));
    }
    let target = one_hot(labels, b, c, h, probs.dtype(), probs.device())?;
    dice_loss_unchecked(&probs, &target, eps)
}

/// Total loss and its two components, all scalar tensors.
#[derive(Debug, Clone)]
pub struct LossParts {
    pub total: Tensor,
    pub ce: Tensor,
    pub dice: Tensor,
}

/// `λ_ce · CE + λ_dice · Dice` of softmax(`logits`) against `labels`
/// on the logit grid.
pub fn combined_loss(
    logits: &Tensor,
    labels: &[u8],
    lambda_ce: f64,
    lambda_dice: f64,
    eps: f64,
) -> Result<LossParts> {
    let logits = batched(logits)?;
    let (b, c, h, w) = logits.dims4()?;
    if h != w || labels.len() != b * h * w {
        return Err(Error::Validation(format!(
            "{} labels for logits of shape {:?}",
            labels.len(),
            logits.dims()
        )));
    }
    let target = one_hot(labels, b, c, h, logits.dtype(), logits.device())?;
    let log_probs = log_softmax_channels(&logits)?;
    let ce = cross_entropy(&log_probs, &target)?;
    let dice = dice_loss_unchecked(&log_probs.exp()?, &target, eps)?;
    let total = ((&ce * lambda_ce)? + (&dice * lambda_dice)?)?;
    Ok(LossParts { total, ce, dice })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(t: &Tensor) -> f64 {
        t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn downsample_picks_top_left() {
        let map: Vec<u8> = (0..16).collect();
        assert_eq!(downsample_labels(&map, 4, 2).unwrap(), vec![0, 2, 8, 10]);
        assert_eq!(downsample_labels(&[3; 36], 6, 3).unwrap(), vec![3; 4]);
        assert!(matches!(downsample_labels(&map, 4, 3), Err(Error::Config(_))));
    }

    #[test]
    fn uniform_probs_on_background() {
        let probs = Tensor::full(0.5f64, (2, 2, 2), &Device::Cpu).unwrap();
        let v = scalar(&dice_loss(&probs, &[0; 4], 0.0).unwrap());
        assert!((v - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_prediction_is_near_zero() {
        let labels: Vec<u8> = (0..64 * 64).map(|i| (i % 3) as u8).collect();
        let probs = one_hot(&labels, 1, 3, 64, DType::F32, &Device::Cpu).unwrap();
        let v = scalar(&dice_loss(&probs, &labels, 1e-5).unwrap());
        assert!(v < 1e-4);
    }

    #[test]
    fn rejects_unnormalized_probs() {
        let probs = Tensor::full(0.7f32, (2, 2, 2), &Device::Cpu).unwrap();
        assert!(matches!(dice_loss(&probs, &[0; 4], 1e-5), Err(Error::Validation(_))));
    }

    #[test]
    fn pure_cross_entropy_matches_scalar_oracle() {
        let raw = [1.0f64, -0.5, 0.25, 2.0, 0.0, 0.3, -1.0, 0.7];
        let logits = Tensor::from_slice(&raw, (1, 2, 2, 2), &Device::Cpu).unwrap();
        let labels = [0u8, 1, 1, 0];
        let parts = combined_loss(&logits, &labels, 1.0, 0.0, 1e-5).unwrap();
        let mut expected = 0.0;
        for p in 0..4 {
            let (a, b) = (raw[p], raw[4 + p]);
            let z = a.exp() + b.exp();
            let picked = if labels[p] == 0 { a } else { b };
            expected -= (picked.exp() / z).ln();
        }
        expected /= 4.0;
        assert!((scalar(&parts.total) - expected).abs() < 1e-12);
    }

    #[test]
    fn peaked_logits_and_degenerate_targets() {
        let labels: Vec<u8> = (0..16).map(|i| (i % 2) as u8).collect();
        let mut data = vec![0f32; 32];
        for (i, &l) in labels.iter().enumerate() {
            data[l as usize * 16 + i] = 20.0;
        }
        let logits = Tensor::from_vec(data, (1, 2, 4, 4), &Device::Cpu).unwrap();
        let v = scalar(&combined_loss(&logits, &labels, 0.2, 0.8, 1e-5).unwrap().total);
        assert!(v < 1e-3, "{v}");
        for fill in [0u8, 1] {
            let v = scalar(&combined_loss(&logits, &[fill; 16], 0.2, 0.8, 1e-5).unwrap().total);
            assert!(v.is_finite() && v >= 0.0);
        }
        assert!(combined_loss(&logits, &[0; 9], 0.2, 0.8, 1e-5).is_err());
    }
}
