use effdet::bench::pareto_flags;
use effdet::datasets::{letterbox_sample, load_labeled, load_manifest, synth_class_map, synth_shapes, write_labeled};
use effdet::lowlight::{brighten_constant, darken, enhance, Enhancement, PixelImage};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn darken_then_brighten_is_a_net_offset_where_nothing_clamps() {
    for v in 0..=255u8 {
        let img = PixelImage::filled(3, 2, [v; 3]);
        let dark = darken(&img, 120).unwrap();
        for c in [40i64, 80] {
            let out = brighten_constant(&dark, c).unwrap();
            let want = ((v as i64 - 120).max(0) + c).min(255) as u8;
            assert!(out.as_raw().iter().all(|&x| x == want), "v={v} c={c}");
            if (120..=175).contains(&v) {
                assert_eq!(want as i64, v as i64 - 120 + c);
            }
        }
    }
}

#[test]
fn constant_enhancement_matches_brighten() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let data: Vec<u8> = (0..16 * 16 * 3).map(|_| rng.random()).collect();
    let img = PixelImage::new(16, 16, data).unwrap();
    let out = enhance(&img, &Enhancement::constant(80).unwrap()).unwrap();
    assert_eq!(out.image, brighten_constant(&img, 80).unwrap());
    assert!(out.latency_seconds >= 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn random_images_stay_in_range_and_keep_shape(
        w in 1u32..24, h in 1u32..24, seed in any::<u64>(), off in 0i64..=255, c in 0i64..=255
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<u8> = (0..w * h * 3).map(|_| rng.random()).collect();
        let img = PixelImage::new(w, h, data).unwrap();
        let out = brighten_constant(&darken(&img, off).unwrap(), c).unwrap();
        prop_assert_eq!((out.width(), out.height()), (w, h));
        for (&v, &o) in img.as_raw().iter().zip(out.as_raw()) {
            prop_assert_eq!(o as i64, ((v as i64 - off).max(0) + c).min(255));
        }
    }

    #[test]
    fn offsets_outside_a_byte_are_rejected(off in prop_oneof![i64::MIN..0, 256i64..i64::MAX]) {
        let img = PixelImage::filled(1, 1, [7; 3]);
        prop_assert!(darken(&img, off).is_err());
        prop_assert!(brighten_constant(&img, off).is_err());
    }

    #[test]
    fn pareto_flags_match_pairwise_dominance(
        points in prop::collection::vec((0u8..6, 0u8..6), 0..30)
    ) {
        let pts: Vec<(f64, f64)> = points.iter().map(|&(a, l)| (a as f64, l as f64)).collect();
        let oracle: Vec<bool> = pts.iter().map(|p| !pts.iter().any(|q| q.0 > p.0 && q.1 < p.1)).collect();
        prop_assert_eq!(pareto_flags(&pts), oracle);
    }
}

#[test]
fn synthetic_classes_are_balanced() {
    let samples = synth_shapes(1000, 64, 2, 3).unwrap();
    let mut counts = [0usize; 2];
    for s in &samples {
        for b in &s.boxes {
            counts[b.class_id] += 1;
        }
    }
    let mean = (counts[0] + counts[1]) as f64 / 2.0;
    for c in counts {
        assert!((c as f64 - mean).abs() <= 0.1 * mean, "{counts:?}");
    }
}

#[test]
fn synthetic_data_is_seeded() {
    let a = synth_shapes(20, 128, 2, 7).unwrap();
    assert_eq!(a, synth_shapes(20, 128, 2, 7).unwrap());
    assert_ne!(a, synth_shapes(20, 128, 2, 8).unwrap());
    for s in &a {
        for b in &s.boxes {
            assert!(b.bbox.within(128.0, 128.0));
        }
    }
}

#[test]
fn manifest_roundtrip_then_letterbox() {
    let dir = tempfile::tempdir().unwrap();
    let classes = synth_class_map(3).unwrap();
    let samples = synth_shapes(5, 96, 3, 11).unwrap();
    write_labeled(dir.path(), &samples, &classes).unwrap();
    let loaded = load_labeled(&load_manifest(&dir.path().join("manifest.json"), &classes).unwrap()).unwrap();
    assert_eq!(loaded.len(), samples.len());
    for (a, b) in samples.iter().zip(&loaded) {
        assert_eq!(a.image, b.image);
        assert_eq!(a.boxes, b.boxes);
        let (boxed, lb) = letterbox_sample(b, 128).unwrap();
        assert_eq!((boxed.image.width(), boxed.image.height()), (128, 128));
        for (orig, mapped) in b.boxes.iter().zip(&boxed.boxes) {
            let back = lb.unmap_box(&mapped.bbox);
            assert!((back.x_min - orig.bbox.x_min).abs() <= 1.0);
            assert!((back.y_max - orig.bbox.y_max).abs() <= 1.0);
        }
    }
}
