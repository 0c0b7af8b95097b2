#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

use candle_core::DType;
use octseg::checkpoint::save_checkpoint;
use octseg::{ModelConfig, Regimen, SegmentationModel};

pub fn small_config() -> ModelConfig {
    ModelConfig {
        input_size: 32,
        patch_size: 8,
        embed_dim: 8,
        num_blocks: 1,
        num_heads: 2,
        mlp_ratio: 2,
        decoder_dim: 8,
        num_classes: 3,
        logit_downsample: 2,
    }
}

pub fn small_checkpoint(path: &Path) -> SegmentationModel {
    let model = SegmentationModel::init(small_config(), 5, DType::F32).unwrap();
    save_checkpoint(path, &model, None, Regimen::ZeroShot, 0).unwrap();
    model
}

pub fn octseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_octseg"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn octseg")
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Parses the error line a failed run leaves on stderr.
pub fn error_json(out: &Output) -> serde_json::Value {
    let text = stderr(out);
    let last = text.lines().last().unwrap_or_default();
    serde_json::from_str(last).unwrap_or_else(|e| panic!("not a JSON error line ({e}): {text}"))
}
