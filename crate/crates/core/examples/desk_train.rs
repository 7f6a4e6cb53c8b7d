//! Trains a reduced D0(1-5) detector on synthetic shapes and reports AP.
//!
//! `cargo run --release -p effdet-core --example desk_train -- [epochs] [lr] [split]`

use std::time::Instant;

use effdet::datasets::synth_shapes;
use effdet::detnet::{train_with_progress, Detector, InferenceConfig, TrainParams};
use effdet::evalap::{evaluate, EvalImage};
use effdet::scalecfg::{build_config, DepthSplit, ScalingSpec};
use effdet::ClassMap;

fn main() -> effdet::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let epochs = args.get(1).map_or(30, |s| s.parse().unwrap());
    let lr = args.get(2).map_or(0.04, |s| s.parse().unwrap());
    let split: DepthSplit = args.get(3).map_or("1-5", |s| s.as_str()).parse()?;

    let cfg = build_config(&ScalingSpec::budget_variant(0, split)?)?.desk_scale();
    println!("config: {cfg}");
    let train_set = synth_shapes(200, cfg.input_resolution, 2, 7)?;
    let val_set = synth_shapes(50, cfg.input_resolution, 2, 8)?;
    let mut detector = Detector::new(&cfg, 2, 0)?;
    println!("params: {:?}", detector.count_params());
    let params = TrainParams {
        epochs,
        learning_rate: lr,
        ..TrainParams::default()
    };
    let start = Instant::now();
    let classes = ClassMap::from_names(&["a", "b"])?;
    train_with_progress(&mut detector, &train_set, &params, |e, loss| {
        println!("epoch {e}: loss {loss:.4} ({:.0}s)", start.elapsed().as_secs_f64());
    })?;
    let infer = InferenceConfig::new(0.05, 0.5, 100)?;
    let images: Vec<EvalImage> = val_set
        .iter()
        .map(|s| EvalImage {
            image_id: s.id.clone(),
            detections: detector.infer(&s.image, &infer).unwrap(),
            ground_truth: s.boxes.clone(),
        })
        .collect();
    let r = evaluate(&images, &classes)?;
    println!("AP {:.1} AP50 {:.1} AP75 {:.1} in {:.0}s", r.ap, r.ap50, r.ap75, start.elapsed().as_secs_f64());
    Ok(())
}
