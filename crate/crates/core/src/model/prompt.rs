//! Point and box prompts and their token embeddings.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::layers::sinusoidal_coords;
use super::params::{Init, ParamSpec, ParamStore};
use super::{ModelConfig, PromptEmbedding, PROMPT_NS};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointLabel {
    Negative,
    Positive,
}

impl PointLabel {
    fn row(self) -> usize {
        match self {
            PointLabel::Negative => 0,
            PointLabel::Positive => 1,
        }
    }
}

/// A click at pixel column `x`, pixel row `y`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PromptPoint {
    pub x: f64,
    pub y: f64,
    pub label: PointLabel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PromptBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

/// Points and an optional box on one B-scan. Empty means no-prompt mode.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PromptSet {
    #[serde(default)]
    pub points: Vec<PromptPoint>,
    #[serde(default, rename = "box")]
    pub bbox: Option<PromptBox>,
}

impl PromptSet {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty() && self.bbox.is_none()
    }

    pub fn with_point(mut self, x: f64, y: f64, label: PointLabel) -> Self {
        self.points.push(PromptPoint { x, y, label });
        self
    }

    pub fn with_box(mut self, x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        self.bbox = Some(PromptBox {
            x_min,
            y_min,
            x_max,
            y_max,
        });
        self
    }

    /// Sparse tokens this set will produce.
    pub fn num_tokens(&self) -> usize {
        if self.is_empty() {
            1
        } else {
            self.points.len() + if self.bbox.is_some() { 2 } else { 0 }
        }
    }

    pub fn validate(&self, input_size: usize) -> Result<()> {
        let limit = input_size as f64;
        let in_range = |v: f64| v.is_finite() && (0.0..limit).contains(&v);
        for (i, p) in self.points.iter().enumerate() {
            if !in_range(p.x) || !in_range(p.y) {
                return Err(Error::Validation(format!(
                    "point {i} ({}, {}) lies outside [0, {input_size})",
                    p.x, p.y
                )));
            }
        }
        if let Some(b) = &self.bbox {
            if ![b.x_min, b.y_min, b.x_max, b.y_max].iter().all(|&v| in_range(v)) {
                return Err(Error::Validation(format!(
                    "box {b:?} lies outside [0, {input_size})"
                )));
            }
            if b.x_min >= b.x_max || b.y_min >= b.y_max {
                return Err(Error::Validation(format!("box {b:?} is not ordered")));
            }
        }
        Ok(())
    }
}

pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let d = cfg.decoder_dim;
    vec![
        ParamSpec::new(
            format!("{PROMPT_NS}.point_embeddings"),
            &[2, d],
            Init::Normal { std: 1.0 },
        ),
        ParamSpec::new(
            format!("{PROMPT_NS}.corner_embeddings"),
            &[2, d],
            Init::Normal { std: 1.0 },
        ),
        ParamSpec::new(
            format!("{PROMPT_NS}.no_prompt_sparse"),
            &[1, d],
            Init::Normal { std: 1.0 },
        ),
        ParamSpec::new(
            format!("{PROMPT_NS}.no_prompt_dense"),
            &[d],
            Init::Normal { std: 0.02 },
        ),
    ]
}

/// Names of the two trainable no-prompt defaults.
pub fn default_embedding_names() -> [String; 2] {
    [
        format!("{PROMPT_NS}.no_prompt_sparse"),
        format!("{PROMPT_NS}.no_prompt_dense"),
    ]
}

/// Fixed sinusoidal encoding of the token-grid cell centers, `[g*g, D]`.
pub fn dense_positional_encoding(cfg: &ModelConfig, params: &ParamStore) -> Result<Tensor> {
    let g = cfg.token_grid();
    let dense = params.get(&format!("{PROMPT_NS}.no_prompt_dense"))?;
    let coords: Vec<(f64, f64)> = (0..g * g)
        .map(|i| {
            let (r, c) = (i / g, i % g);
            ((c as f64 + 0.5) / g as f64, (r as f64 + 0.5) / g as f64)
        })
        .collect();
    sinusoidal_coords(&coords, cfg.decoder_dim, g, dense.dtype(), dense.device())
}

pub fn encode(cfg: &ModelConfig, params: &ParamStore, prompts: &PromptSet) -> Result<PromptEmbedding> {
    prompts.validate(cfg.input_size)?;
    let d = cfg.decoder_dim;
    let g = cfg.token_grid();
    let dense_default = params.get(&format!("{PROMPT_NS}.no_prompt_dense"))?;
    let dense = dense_default
        .reshape((d, 1, 1))?
        .broadcast_as((d, g, g))?
        .contiguous()?;
    if prompts.is_empty() {
        let sparse = params.get(&format!("{PROMPT_NS}.no_prompt_sparse"))?.clone();
        return Ok(PromptEmbedding { sparse, dense });
    }
    let (dtype, device) = (dense_default.dtype(), dense_default.device());
    let size = cfg.input_size as f64;
    let norm = |x: f64, y: f64| ((x + 0.5) / size, (y + 0.5) / size);
    let mut tokens = Vec::new();
    if !prompts.points.is_empty() {
        let coords: Vec<_> = prompts.points.iter().map(|p| norm(p.x, p.y)).collect();
        let pe = sinusoidal_coords(&coords, d, g, dtype, device)?;
        let table = params.get(&format!("{PROMPT_NS}.point_embeddings"))?;
        let rows: Vec<Tensor> = prompts
            .points
            .iter()
            .map(|p| table.narrow(0, p.label.row(), 1))
            .collect::<candle_core::Result<_>>()?;
        tokens.push((pe + Tensor::cat(&rows, 0)?)?);
    }
    if let Some(b) = &prompts.bbox {
        let coords = [norm(b.x_min, b.y_min), norm(b.x_max, b.y_max)];
        let pe = sinusoidal_coords(&coords, d, g, dtype, device)?;
        let corners = params.get(&format!("{PROMPT_NS}.corner_embeddings"))?;
        tokens.push((pe + corners)?);
    }
    let sparse = Tensor::cat(&tokens, 0)?;
    Ok(PromptEmbedding { sparse, dense })
}
