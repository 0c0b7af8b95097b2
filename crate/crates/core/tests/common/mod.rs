//! Independent oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeSet;

use candle_core::{DType, Device, Tensor, Var};
use octseg::lora::{inject_lora, trainable_parameters, LoraState, Regimen, TrainableOptions};
use octseg::model::{ModelConfig, ParamStore, PointLabel, PromptSet, SegmentationModel};
use octseg::training::{batch_loss, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Reduced architecture used for gradient checks and fast training runs.
pub fn small_config() -> ModelConfig {
    ModelConfig {
        input_size: 32,
        patch_size: 8,
        embed_dim: 8,
        num_blocks: 1,
        num_heads: 2,
        mlp_ratio: 2,
        decoder_dim: 8,
        num_classes: 2,
        logit_downsample: 2,
    }
}

pub fn random_image(rng: &mut impl Rng, side: usize) -> Vec<f32> {
    (0..side * side).map(|_| rng.random::<f32>()).collect()
}

/// Random label map made of a few filled rectangles over noise-free background.
pub fn random_labels(rng: &mut impl Rng, h: usize, w: usize, classes: u8, rects: usize) -> Vec<u8> {
    let mut out = vec![0u8; h * w];
    for _ in 0..rects {
        let class = rng.random_range(1..=classes);
        let (r0, c0) = (rng.random_range(0..h), rng.random_range(0..w));
        let (rh, cw) = (rng.random_range(1..=h / 2), rng.random_range(1..=w / 2));
        for r in r0..(r0 + rh).min(h) {
            for c in c0..(c0 + cw).min(w) {
                out[r * w + c] = class;
            }
        }
    }
    out
}

/// Salt-and-pepper labels: each pixel is `class` with probability `p`.
pub fn speckle_labels(rng: &mut impl Rng, h: usize, w: usize, classes: u8, p: f64) -> Vec<u8> {
    (0..h * w)
        .map(|_| {
            if rng.random_bool(p) {
                rng.random_range(1..=classes)
            } else {
                0
            }
        })
        .collect()
}

/// Components of `class` by iterative depth-first flood fill.
pub fn flood_fill_components(
    labels: &[u8],
    h: usize,
    w: usize,
    class: u8,
    eight: bool,
) -> Vec<BTreeSet<(usize, usize)>> {
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    for start in 0..h * w {
        if labels[start] != class || seen[start] {
            continue;
        }
        let mut comp = BTreeSet::new();
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(i) = stack.pop() {
            let (r, c) = ((i / w) as i64, (i % w) as i64);
            comp.insert((r as usize, c as usize));
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    if (dr, dc) == (0, 0) || (!eight && dr != 0 && dc != 0) {
                        continue;
                    }
                    let (nr, nc) = (r + dr, c + dc);
                    if nr < 0 || nc < 0 || nr >= h as i64 || nc >= w as i64 {
                        continue;
                    }
                    let j = nr as usize * w + nc as usize;
                    if labels[j] == class && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        out.push(comp);
    }
    out
}

/// Per-voxel counting oracle for Dice.
pub fn oracle_dice(pred: &[u8], reference: &[u8], class: u8, valid: Option<&[bool]>) -> Option<f64> {
    let mut x = 0usize;
    let mut y = 0usize;
    let mut both = 0usize;
    for i in 0..pred.len() {
        if let Some(v) = valid {
            if !v[i] {
                continue;
            }
        }
        if pred[i] == class {
            x += 1;
        }
        if reference[i] == class {
            y += 1;
        }
        if pred[i] == class && reference[i] == class {
            both += 1;
        }
    }
    if x + y == 0 {
        None
    } else {
        Some((2 * both) as f64 / (x + y) as f64)
    }
}

pub fn oracle_avd(pred: &[u8], reference: &[u8], class: u8, voxel: f64, valid: Option<&[bool]>) -> f64 {
    let count = |m: &[u8]| {
        m.iter()
            .enumerate()
            .filter(|&(i, &l)| l == class && valid.is_none_or(|v| v[i]))
            .count() as f64
    };
    (count(pred) - count(reference)).abs() * voxel
}

pub fn oracle_consensus(a: &[u8], b: &[u8]) -> Vec<bool> {
    let mut out = Vec::with_capacity(a.len());
    for i in 0..a.len() {
        out.push(a[i] == b[i]);
    }
    out
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, floor)`.
pub fn relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(floor)
}

/// Fixture for the gradient check: a reduced f64 model with non-zero
/// adapters, one sample without prompts and one with points and a box.
pub struct GradFixture {
    pub model: SegmentationModel,
    pub lora: LoraState,
    pub names: Vec<String>,
    images: Vec<Vec<f32>>,
    labels_low: Vec<Vec<u8>>,
    prompts: PromptSet,
    config: TrainConfig,
}

impl GradFixture {
    pub fn new(seed: u64) -> Self {
        let cfg = small_config();
        let model = SegmentationModel::init(cfg, seed, DType::F64).unwrap();
        let mut lora = inject_lora(&cfg, 2, 4.0, seed + 1, DType::F64).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
        for id in lora.registry.clone() {
            let b = lora.factors.get(&id.b_name()).unwrap();
            let values: Vec<f64> = (0..b.elem_count()).map(|_| rng.random_range(-0.3..0.3)).collect();
            let t = Tensor::from_vec(values, b.dims(), &Device::Cpu).unwrap();
            lora.factors.insert(id.b_name(), t);
        }
        let low = cfg.logit_grid();
        let images = (0..2).map(|_| random_image(&mut rng, cfg.input_size)).collect();
        let labels_low = (0..2)
            .map(|_| random_labels(&mut rng, low, low, cfg.num_classes as u8, 3))
            .collect();
        let prompts = PromptSet::empty()
            .with_point(5.0, 7.0, PointLabel::Positive)
            .with_point(20.0, 11.0, PointLabel::Negative)
            .with_box(3.0, 4.0, 25.0, 28.0);
        let names = trainable_parameters(&model.weights, Some(&lora), Regimen::LoraSamed, TrainableOptions::default());
        Self {
            model,
            lora,
            names,
            images,
            labels_low,
            prompts,
            config: TrainConfig::default(),
        }
    }

    fn image(&self, i: usize) -> Tensor {
        let s = self.model.config.input_size;
        Tensor::from_slice(&self.images[i], (1, s, s), &Device::Cpu)
            .unwrap()
            .to_dtype(DType::F64)
            .unwrap()
    }

    /// Summed loss of both samples under the given tensors.
    pub fn loss(&self, params: &ParamStore, lora: &LoraState) -> Tensor {
        let cfg = &self.model.config;
        let a = batch_loss(cfg, params, Some(lora), &self.image(0), &[], &self.labels_low[0], &self.config).unwrap();
        let b = batch_loss(
            cfg,
            params,
            Some(lora),
            &self.image(1),
            std::slice::from_ref(&self.prompts),
            &self.labels_low[1],
            &self.config,
        )
        .unwrap();
        (a.total + b.total).unwrap()
    }

    fn split(&self, overrides: &[(String, Tensor)]) -> (ParamStore, LoraState) {
        let mut params = self.model.weights.clone();
        let mut lora = self.lora.clone();
        for (name, t) in overrides {
            if params.contains(name) {
                params.insert(name.clone(), t.clone());
            } else {
                lora.factors.insert(name.clone(), t.clone());
            }
        }
        (params, lora)
    }

    fn original(&self, name: &str) -> &Tensor {
        self.model
            .weights
            .get(name)
            .or_else(|_| self.lora.factors.get(name))
            .unwrap()
    }

    /// Autograd gradient of every trainable tensor.
    pub fn analytic(&self) -> Vec<(String, Vec<f64>)> {
        let vars: Vec<(String, Var)> = self
            .names
            .iter()
            .map(|n| (n.clone(), Var::from_tensor(self.original(n)).unwrap()))
            .collect();
        let overrides: Vec<(String, Tensor)> = vars.iter().map(|(n, v)| (n.clone(), v.as_tensor().clone())).collect();
        let (params, lora) = self.split(&overrides);
        let grads = self.loss(&params, &lora).backward().unwrap();
        vars.iter()
            .map(|(n, v)| {
                let g = match grads.get(v.as_tensor()) {
                    Some(g) => g.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
                    None => vec![0.0; v.as_tensor().elem_count()],
                };
                (n.clone(), g)
            })
            .collect()
    }

    /// Central finite differences of the loss with respect to `name`.
    pub fn finite_difference(&self, name: &str, step: f64) -> Vec<f64> {
        let base = self.original(name);
        let values = base.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let eval = |i: usize, delta: f64| {
            let mut v = values.clone();
            v[i] += delta;
            let t = Tensor::from_vec(v, base.dims(), &Device::Cpu).unwrap();
            let (params, lora) = self.split(&[(name.to_string(), t)]);
            self.loss(&params, &lora).to_scalar::<f64>().unwrap()
        };
        (0..values.len())
            .map(|i| (eval(i, step) - eval(i, -step)) / (2.0 * step))
            .collect()
    }
}

/// Prints the single line each acceptance criterion reports.
/// Written straight to stderr so the line survives test output capture.
pub fn report(criterion: &str, pass: bool, detail: &str) {
    use std::io::Write;
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr().lock(), "ACCEPTANCE {criterion}: {verdict} ({detail})");
}
