use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use effdet::datasets::{synth_class_map, synth_shapes};
use effdet::detnet::{Detector, InferenceConfig};
use effdet::evalap::{evaluate, EvalImage};
use effdet::lowlight::{brighten_constant, darken};
use effdet::scalecfg::{build_config, DepthSplit, ScalingSpec};
use effdet::tensor::{conv2d, Tensor};

fn conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv2d_3x3");
    for (ch, side) in [(32usize, 32usize), (64, 16)] {
        let x = Tensor::from_vec(ch, side, side, (0..ch * side * side).map(|i| (i % 7) as f32 * 0.1).collect());
        let w: Vec<f32> = (0..ch * ch * 9).map(|i| (i % 5) as f32 * 0.01).collect();
        let b = vec![0.0; ch];
        group.bench_with_input(BenchmarkId::from_parameter(format!("{ch}x{side}x{side}")), &x, |bench, x| {
            bench.iter(|| conv2d(black_box(x), &w, &b, ch, 3, 1))
        });
    }
    group.finish();
}

fn infer(c: &mut Criterion) {
    let mut group = c.benchmark_group("desk_infer");
    group.sample_size(20);
    for phi in 0..=1 {
        let cfg = build_config(&ScalingSpec::with_split(phi, DepthSplit::SHALLOW_FUSION).unwrap())
            .unwrap()
            .desk_scale();
        let det = Detector::new(&cfg, 2, 0).unwrap();
        let img = synth_shapes(1, cfg.input_resolution, 2, 0).unwrap().remove(0).image;
        let icfg = InferenceConfig::new(0.05, 0.5, 100).unwrap();
        group.bench_function(format!("D{phi}(1-5)"), |bench| bench.iter(|| det.infer(black_box(&img), &icfg).unwrap()));
    }
    group.finish();
}

fn eval_and_enhance(c: &mut Criterion) {
    let samples = synth_shapes(50, 128, 4, 1).unwrap();
    let classes = synth_class_map(4).unwrap();
    // Ground truth reused as slightly shifted detections.
    let images: Vec<EvalImage> = samples
        .iter()
        .map(|s| EvalImage {
            image_id: s.id.clone(),
            detections: s
                .boxes
                .iter()
                .enumerate()
                .map(|(i, g)| effdet::Detection {
                    bbox: effdet::BBox::new(g.bbox.x_min + 1.0, g.bbox.y_min, g.bbox.x_max + 1.0, g.bbox.y_max).unwrap(),
                    class_id: g.class_id,
                    score: 0.5 + 0.01 * i as f64,
                })
                .collect(),
            ground_truth: s.boxes.clone(),
        })
        .collect();
    c.bench_function("evaluate_50_images", |b| b.iter(|| evaluate(black_box(&images), &classes).unwrap()));

    let img = &samples[0].image;
    c.bench_function("darken_then_c80_128px", |b| {
        b.iter(|| brighten_constant(&darken(black_box(img), 120).unwrap(), 80).unwrap())
    });
}

criterion_group!(benches, conv, infer, eval_and_enhance);
criterion_main!(benches);
