mod common;

use candle_core::{DType, Device, Tensor};
use common::{random_image, random_labels, small_config};
use octseg::lora::{inject_lora, trainable_parameters, Regimen, TrainableOptions};
use octseg::model::SegmentationModel;
use octseg::training::loss::{combined_loss, dice_loss, downsample_labels};
use octseg::training::schedule::lr_at;
use octseg::training::{train, PromptTraining, TrainConfig, TrainingSet};
use octseg::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny_set(seed: u64, n: usize) -> TrainingSet {
    let cfg = small_config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = (0..n).map(|_| random_image(&mut rng, 32)).collect();
    let labels = (0..n).map(|_| random_labels(&mut rng, 32, 32, 2, 3)).collect();
    TrainingSet::new(images, labels, &cfg).unwrap()
}

fn short_config(steps: usize) -> TrainConfig {
    TrainConfig {
        max_steps: steps,
        warmup_steps: steps / 4,
        batch_size: 2,
        log_every: 0,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_shot_has_nothing_to_train() {
    let cfg = small_config();
    let model = SegmentationModel::init(cfg, 0, DType::F32).unwrap();
    let err = train(&tiny_set(0, 2), &model, None, Regimen::ZeroShot, &short_config(4)).unwrap_err();
    assert!(matches!(err, Error::Training(ref m) if m.contains("no trainable parameters")));
}

#[test]
fn lora_regimen_requires_adapters() {
    let model = SegmentationModel::init(small_config(), 0, DType::F32).unwrap();
    let err = train(&tiny_set(0, 2), &model, None, Regimen::LoraSamed, &short_config(4)).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn non_finite_loss_aborts_with_diagnostic() {
    let cfg = small_config();
    let mut model = SegmentationModel::init(cfg, 0, DType::F32).unwrap();
    let name = "mask_decoder.class_tokens";
    let t = model.weights.get(name).unwrap();
    let nan = Tensor::full(f32::NAN, t.dims(), &Device::Cpu).unwrap();
    model.weights.insert(name, nan);
    let err = train(&tiny_set(0, 2), &model, None, Regimen::DecoderOnly, &short_config(4)).unwrap_err();
    assert!(matches!(err, Error::Training(ref m) if m.contains("step 0")), "{err}");
}

#[test]
fn logged_lr_follows_schedule_and_encoder_stays_frozen() {
    let cfg = small_config();
    let model = SegmentationModel::init(cfg, 3, DType::F32).unwrap();
    let lora = inject_lora(&cfg, 2, 2.0, 4, DType::F32).unwrap();
    let config = TrainConfig {
        prompts: PromptTraining::Points { n: 2 },
        ..short_config(12)
    };
    let out = train(&tiny_set(1, 4), &model, Some(&lora), Regimen::LoraSamed, &config).unwrap();
    assert_eq!(out.history.steps.len(), 12);
    for rec in &out.history.steps {
        assert_eq!(rec.lr, lr_at(rec.step, &config).unwrap());
        assert!(rec.loss >= 0.0 && (0.0..=1.0).contains(&rec.dice));
    }
    for (name, t) in model.weights.iter().filter(|(n, _)| n.starts_with("image_encoder.")) {
        let after = out.model.weights.get(name).unwrap();
        assert_eq!(
            t.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            after.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            "{name}"
        );
    }
    let expected = trainable_parameters(&model.weights, Some(&lora), Regimen::LoraSamed, TrainableOptions::default());
    assert_eq!(out.trained, expected);
    let csv = out.history.to_csv();
    assert!(csv.starts_with("step,lr,loss,ce,dice\n"));
    assert_eq!(csv.lines().count(), 13);
}

#[test]
fn same_seed_same_run() {
    let cfg = small_config();
    let model = SegmentationModel::init(cfg, 3, DType::F32).unwrap();
    let data = tiny_set(2, 4);
    let a = train(&data, &model, None, Regimen::DecoderOnly, &short_config(6)).unwrap();
    let b = train(&data, &model, None, Regimen::DecoderOnly, &short_config(6)).unwrap();
    let losses = |o: &octseg::training::TrainOutput| o.history.steps.iter().map(|s| s.loss).collect::<Vec<_>>();
    assert_eq!(losses(&a), losses(&b));
}

#[test]
fn schedule_edges() {
    let config = TrainConfig::default();
    let w = config.warmup_steps;
    assert_eq!(lr_at(w - 1, &config).unwrap(), config.base_lr);
    assert_eq!(lr_at(w, &config).unwrap(), config.base_lr);
    assert_eq!(lr_at(0, &config).unwrap(), config.base_lr / w as f64);
    assert!(lr_at(config.max_steps, &config).is_err());
}

fn probs_from(values: &[f64], c: usize, side: usize) -> Tensor {
    let t = Tensor::from_slice(values, (c, side, side), &Device::Cpu).unwrap();
    candle_nn::ops::softmax(&t, 0).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn downsample_picks_top_left_sample(
        labels in proptest::collection::vec(0u8..4, 64),
        factor in prop_oneof![Just(1usize), Just(2), Just(4), Just(8)],
    ) {
        let low = downsample_labels(&labels, 8, factor).unwrap();
        let l = 8 / factor;
        prop_assert_eq!(low.len(), l * l);
        for r in 0..l {
            for c in 0..l {
                prop_assert_eq!(low[r * l + c], labels[(r * factor) * 8 + c * factor]);
            }
        }
    }

    #[test]
    fn dice_loss_is_bounded_and_channel_symmetric(
        logits in proptest::collection::vec(-4.0f64..4.0, 3 * 16),
        labels in proptest::collection::vec(0u8..3, 16),
    ) {
        let probs = probs_from(&logits, 3, 4);
        let d = dice_loss(&probs, &labels, 1e-5).unwrap().to_scalar::<f64>().unwrap();
        prop_assert!((0.0..=1.0).contains(&d));
        // relabel channels 1 <-> 2 in both probabilities and targets
        let perm = Tensor::cat(&[probs.narrow(0, 0, 1).unwrap(), probs.narrow(0, 2, 1).unwrap(), probs.narrow(0, 1, 1).unwrap()], 0).unwrap();
        let swapped: Vec<u8> = labels.iter().map(|&l| [0, 2, 1][l as usize]).collect();
        let d2 = dice_loss(&perm, &swapped, 1e-5).unwrap().to_scalar::<f64>().unwrap();
        prop_assert!((d - d2).abs() < 1e-12);
        let total = combined_loss(
            &Tensor::from_slice(&logits, (3, 4, 4), &Device::Cpu).unwrap(),
            &labels, 0.2, 0.8, 1e-5,
        ).unwrap();
        prop_assert!(total.total.to_scalar::<f64>().unwrap() >= 0.0);
    }
}

#[test]
fn unnormalized_probabilities_are_rejected() {
    let probs = Tensor::full(0.5f64, (3, 2, 2), &Device::Cpu).unwrap();
    assert!(matches!(dice_loss(&probs, &[0; 4], 1e-5), Err(Error::Validation(_))));
}
