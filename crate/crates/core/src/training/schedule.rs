use super::TrainConfig;
use crate::error::{Error, Result};

/// Linear warmup to `base_lr` over `W` steps, then per-step exponential
/// decay by `γ`.
pub fn lr_at(t: usize, config: &TrainConfig) -> Result<f64> {
    if t >= config.max_steps {
        return Err(Error::Validation(format!(
            "step {t} is outside the schedule of {} steps",
            config.max_steps
        )));
    }
    let w = config.warmup_steps;
    Ok(if t < w {
        config.base_lr * (t + 1) as f64 / w as f64
    } else {
        config.base_lr * config.decay_gamma.powf((t - w) as f64)
    })
}
