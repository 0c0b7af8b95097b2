use octseg::data::{
    default_classes, generate_synthetic, load_mask, load_volume, rle_decode, rle_encode, save_mask, save_volume,
    write_synthetic, Dataset, LabelMask, Shape3, Spacing, Split, SyntheticConfig, Vendor, Volume,
};
use octseg::data::synthetic::Blob;
use proptest::prelude::*;

fn vendor_strategy() -> impl Strategy<Value = Vendor> {
    prop_oneof![Just(Vendor::Cirrus), Just(Vendor::Spectralis), Just(Vendor::Topcon)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn volume_and_mask_round_trip(
        d in 1usize..4, h in 1usize..9, w in 1usize..9,
        sd in 0.01f64..2.0, sh in 0.001f64..0.1, sw in 0.001f64..0.1,
        vendor in vendor_strategy(),
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let shape = Shape3::new(d, h, w);
        let spacing = Spacing::new(sd, sh, sw).unwrap();
        let voxels: Vec<f32> = (0..shape.len()).map(|_| rng.random()).collect();
        let labels: Vec<u8> = (0..shape.len()).map(|_| rng.random_range(0..4)).collect();
        let volume = Volume::new("rt", vendor, spacing, shape, voxels).unwrap();
        let mask = LabelMask::new("rt", vendor, spacing, shape, labels, default_classes()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_volume(&volume, dir.path().join("v.json")).unwrap();
        save_mask(&mask, dir.path().join("m.json")).unwrap();
        prop_assert_eq!(load_volume(dir.path().join("v.json")).unwrap(), volume);
        prop_assert_eq!(load_mask(dir.path().join("m.json")).unwrap(), mask);
    }

    #[test]
    fn rle_runs_cover_the_slice(h in 1usize..20, w in 1usize..20, seed in any::<u64>(), class in 0u8..4) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let slice: Vec<u8> = (0..h * w).map(|_| rng.random_range(0..4)).collect();
        let rle = rle_encode(&slice, h, w, class).unwrap();
        prop_assert_eq!(rle.runs.iter().map(|&r| r as usize).sum::<usize>(), h * w);
        let back = rle_decode(&rle).unwrap();
        let expected: Vec<u8> = slice.iter().map(|&l| u8::from(l == class)).collect();
        prop_assert_eq!(back, expected);
    }
}

#[test]
fn synthetic_set_writes_and_reloads() {
    let config = SyntheticConfig {
        n_volumes: 8,
        shape: Shape3::new(3, 64, 64),
        classes: 3,
        seed: 1,
        dual_annotation: true,
        train_fraction: 0.75,
    };
    let ds = generate_synthetic(&config).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_synthetic(&ds, dir.path()).unwrap();
    assert_eq!(manifest.entries.len(), 8);
    assert_eq!((manifest.count(Split::Train), manifest.count(Split::Test)), (6, 2));
    let loaded = Dataset::load(dir.path()).unwrap();
    for (item, sample) in loaded.items.iter().zip(&ds.samples) {
        assert_eq!(item.volume, sample.volume);
        assert_eq!(item.mask, sample.mask);
        assert_eq!(item.mask_b, sample.mask_b);
    }
}

fn mean(values: impl Iterator<Item = f32>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values {
        sum += v as f64;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

/// |mean inside `blob` − mean of the background ring around it| on slice `z`.
fn ring_contrast(volume: &Volume, labels: &[u8], blob: &Blob, z: usize) -> Option<f64> {
    let (h, w) = (volume.shape.height, volume.shape.width);
    let mut outer = *blob;
    outer.radii[1] *= 1.6;
    outer.radii[2] *= 1.6;
    let slice = volume.slice(z).unwrap();
    let labs = &labels[z * h * w..(z + 1) * h * w];
    let inside = mean((0..h * w).filter(|&i| blob.contains(z, i / w, i % w)).map(|i| slice[i]))?;
    let ring = mean(
        (0..h * w)
            .filter(|&i| labs[i] == 0 && outer.contains(z, i / w, i % w) && !blob.contains(z, i / w, i % w))
            .map(|i| slice[i]),
    )?;
    Some((inside - ring).abs())
}

#[test]
fn fluid_blobs_stand_out_from_their_surroundings() {
    let margin = 0.05;
    let ds = generate_synthetic(&SyntheticConfig {
        shape: Shape3::new(8, 128, 128),
        ..SyntheticConfig::default()
    })
    .unwrap();
    let (mut fluid, mut control) = (Vec::new(), Vec::new());
    for s in &ds.samples {
        let w = s.volume.shape.width as f64;
        for blob in &s.blobs {
            let z = blob.center[0] as usize;
            if let Some(c) = ring_contrast(&s.volume, &s.mask.labels, blob, z) {
                fluid.push(c);
            }
            // same footprint moved sideways onto fluid-free tissue
            let mut moved = *blob;
            moved.center[2] = (blob.center[2] + w / 2.0) % w;
            let h = s.volume.shape.height;
            let hw = h * s.volume.shape.width;
            let overlaps = (0..hw).any(|i| {
                let (y, x) = (i / s.volume.shape.width, i % s.volume.shape.width);
                s.mask.labels[z * hw + i] != 0 && moved.contains(z, y, x)
            });
            if !overlaps {
                if let Some(c) = ring_contrast(&s.volume, &s.mask.labels, &moved, z) {
                    control.push(c);
                }
            }
        }
    }
    let f = fluid.iter().sum::<f64>() / fluid.len() as f64;
    let c = control.iter().sum::<f64>() / control.len().max(1) as f64;
    assert!(!control.is_empty());
    assert!(f > c + margin, "fluid contrast {f:.3} vs control {c:.3}");
}
