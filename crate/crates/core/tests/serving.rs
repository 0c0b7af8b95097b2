mod common;

use std::sync::Arc;

use candle_core::DType;
use common::{random_image, small_config};
use octseg::data::{rle_decode, Shape3, Spacing, Vendor, Volume};
use octseg::model::{PointLabel, PromptPoint};
use octseg::serving::{PromptRequest, PromptResponse, SessionStore};
use octseg::{inject_lora, Error, SegmentationModel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn volume(depth: usize) -> Volume {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let voxels = (0..depth).flat_map(|_| random_image(&mut rng, 32)).collect();
    Volume::new(
        "serve",
        Vendor::Topcon,
        Spacing::new(0.2, 0.01, 0.01).unwrap(),
        Shape3::new(depth, 32, 32),
        voxels,
    )
    .unwrap()
}

fn store(capacity: usize) -> (SessionStore, Arc<SegmentationModel>) {
    let model = Arc::new(SegmentationModel::init(small_config(), 1, DType::F32).unwrap());
    (SessionStore::new(capacity).unwrap(), model)
}

fn request(slice: usize) -> PromptRequest {
    PromptRequest {
        session_id: None,
        slice_index: slice,
        class_id: 1,
        points: vec![PromptPoint {
            x: 10.0,
            y: 12.0,
            label: PointLabel::Positive,
        }],
        bbox: None,
    }
}

/// Response with timing and cache fields blanked.
fn stable(mut r: PromptResponse) -> PromptResponse {
    r.latency_ms = 0.0;
    r.cache_hit = false;
    r
}

#[test]
fn second_prompt_hits_the_cache_with_identical_output() {
    let (mut store, model) = store(4);
    let id = store.open(volume(3), "ckpt", model, None).unwrap();
    let s = store.get_mut(&id).unwrap();
    let first = s.handle_prompt(&request(1)).unwrap();
    let second = s.handle_prompt(&request(1)).unwrap();
    assert!(!first.cache_hit && second.cache_hit);
    assert_eq!(stable(first.clone()), stable(second));
    assert_eq!(rle_decode(&first.mask).unwrap().len(), 32 * 32);
    assert_eq!(s.history(1).len(), 2);
    assert!(s.history(0).is_empty());
}

#[test]
fn evicted_embedding_is_recomputed_identically() {
    let (mut store, model) = store(1);
    let id = store.open(volume(3), "ckpt", model, None).unwrap();
    let s = store.get_mut(&id).unwrap();
    let (a, hit) = s.get_or_compute_embedding(0).unwrap();
    assert!(!hit);
    s.get_or_compute_embedding(2).unwrap();
    assert_eq!(s.cache().len(), 1);
    let (b, hit) = s.get_or_compute_embedding(0).unwrap();
    assert!(!hit);
    let flat = |t: &candle_core::Tensor| t.flatten_all().unwrap().to_vec1::<f32>().unwrap();
    assert_eq!(flat(&a.tensor), flat(&b.tensor));
    assert_eq!(b.provenance.unwrap().slice_index, 0);
}

#[test]
fn reopened_session_reproduces_responses() {
    let (mut store, model) = store(4);
    let id = store.open(volume(2), "ckpt", model.clone(), None).unwrap();
    let a = store.get_mut(&id).unwrap().handle_prompt(&request(0)).unwrap();
    store.close(&id).unwrap();
    assert!(matches!(store.get(&id), Err(Error::NotFound(_))));
    let id2 = store.open(volume(2), "ckpt", model, None).unwrap();
    assert_ne!(id, id2);
    let mut b = store.get_mut(&id2).unwrap().handle_prompt(&request(0)).unwrap();
    b.session_id = a.session_id.clone();
    assert_eq!(stable(a), stable(b));
}

#[test]
fn negative_point_adds_a_token_and_adapters_change_the_version() {
    let (mut store, model) = store(4);
    let cfg = model.config;
    let lora = Arc::new(inject_lora(&cfg, 2, 2.0, 0, DType::F32).unwrap());
    let id = store.open(volume(2), "ckpt", model.clone(), None).unwrap();
    let with_lora = store.open(volume(2), "ckpt", model, Some(lora)).unwrap();
    assert_ne!(
        store.get(&id).unwrap().model_version(),
        store.get(&with_lora).unwrap().model_version()
    );
    let s = store.get_mut(&id).unwrap();
    let mut req = request(0);
    let one = s.handle_prompt(&req).unwrap();
    req.points.push(PromptPoint {
        x: 20.0,
        y: 3.0,
        label: PointLabel::Negative,
    });
    let two = s.handle_prompt(&req).unwrap();
    assert_eq!((one.num_prompt_tokens, two.num_prompt_tokens), (1, 2));
}

#[test]
fn bad_requests_are_validation_errors() {
    let (mut store, model) = store(4);
    let id = store.open(volume(2), "ckpt", model.clone(), None).unwrap();
    let s = store.get_mut(&id).unwrap();
    let mut bad_class = request(0);
    bad_class.class_id = 3;
    assert!(matches!(s.handle_prompt(&bad_class), Err(Error::Validation(_))));
    assert!(matches!(s.handle_prompt(&request(5)), Err(Error::Validation(_))));
    let mut off_image = request(0);
    off_image.points[0].x = 40.0;
    assert!(matches!(s.handle_prompt(&off_image), Err(Error::Validation(_))));
    assert!(s.history(0).is_empty());

    let wrong_size = Volume::new(
        "w",
        Vendor::Cirrus,
        Spacing::new(1.0, 1.0, 1.0).unwrap(),
        Shape3::new(1, 16, 16),
        vec![0.0; 256],
    )
    .unwrap();
    assert!(matches!(store.open(wrong_size, "c", model, None), Err(Error::Validation(_))));
    assert!(matches!(store.close("nope"), Err(Error::NotFound(_))));
}

#[test]
fn request_json_uses_box_key() {
    let json = r#"{"slice_index":0,"class_id":2,"points":[{"x":1,"y":2,"label":"positive"}],"box":{"x_min":0,"y_min":0,"x_max":5,"y_max":6}}"#;
    let req: PromptRequest = serde_json::from_str(json).unwrap();
    assert_eq!(req.prompt_set().num_tokens(), 3);
    assert!(serde_json::from_str::<PromptRequest>(r#"{"slice_index":"x"}"#).is_err());
}
