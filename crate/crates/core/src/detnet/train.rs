//! Mini-batch SGD with momentum, linear warmup and cosine decay.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::{GroundTruthBox, LabeledImage};
use crate::error::{Error, Result};
use crate::bbox::BBox;

use super::loss::{assign_targets, focal_loss, LossParams};
use super::model::Detector;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainParams {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epochs of linear learning-rate warmup.
    pub warmup_epochs: f64,
    /// Global gradient norm cap; 0 disables clipping.
    pub grad_clip_norm: f64,
    pub horizontal_flip: bool,
    /// Drives shuffling and augmentation; weight init has its own seed.
    pub seed: u64,
    #[serde(skip)]
    pub loss: LossParams,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 8,
            learning_rate: 0.04,
            momentum: 0.9,
            weight_decay: 4e-5,
            warmup_epochs: 1.0,
            grad_clip_norm: 10.0,
            horizontal_flip: true,
            seed: 0,
            loss: LossParams::default(),
        }
    }
}

impl TrainParams {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "invalid optimizer settings lr={} momentum={}",
                self.learning_rate, self.momentum
            )));
        }
        Ok(())
    }

    /// Learning rate at optimizer step `step` of `total_steps`.
    pub fn learning_rate_at(&self, step: usize, total_steps: usize, steps_per_epoch: usize) -> f64 {
        let warmup = (self.warmup_epochs * steps_per_epoch as f64).round() as usize;
        if step < warmup {
            return self.learning_rate * (step + 1) as f64 / warmup as f64;
        }
        let span = total_steps.saturating_sub(warmup).max(1) as f64;
        let progress = (step - warmup) as f64 / span;
        0.5 * self.learning_rate * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Mean per-image loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

fn flip_sample(sample: &LabeledImage) -> (crate::lowlight::PixelImage, Vec<GroundTruthBox>) {
    let image = sample.image.flip_horizontal();
    let w = image.width() as f64;
    let boxes = sample
        .boxes
        .iter()
        .map(|b| GroundTruthBox {
            bbox: BBox::new_unchecked(w - b.bbox.x_max, b.bbox.y_min, w - b.bbox.x_min, b.bbox.y_max),
            class_id: b.class_id,
        })
        .collect();
    (image, boxes)
}

/// Loss and parameter gradient of one image.
pub fn image_gradient(
    detector: &Detector,
    image: &crate::lowlight::PixelImage,
    boxes: &[GroundTruthBox],
    loss: &LossParams,
) -> Result<(f64, Detector)> {
    let x = detector.preprocess(image)?;
    let (out, cache) = detector.forward(x)?;
    let targets = assign_targets(detector.anchors(), boxes);
    let logits: Vec<f64> = out.class_logits.iter().map(|&v| v as f64).collect();
    let offsets: Vec<f64> = out.box_offsets.iter().map(|&v| v as f64).collect();
    let l = focal_loss(&logits, &offsets, &targets, detector.num_classes(), loss);
    let mut grad = detector.zeros_like();
    detector.backward(cache, &l.grad_class, &l.grad_box, &mut grad);
    Ok((l.total, grad))
}

/// Trains in place. The per-image gradients of a batch run in parallel and
/// are summed in batch order, so results do not depend on thread count.
pub fn train(
    detector: &mut Detector,
    samples: &[LabeledImage],
    params: &TrainParams,
) -> Result<TrainHistory> {
    train_with_progress(detector, samples, params, |_, _| {})
}

pub fn train_with_progress(
    detector: &mut Detector,
    samples: &[LabeledImage],
    params: &TrainParams,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<TrainHistory> {
    params.validate()?;
    if samples.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let r = detector.resolution() as u32;
    if let Some(bad) = samples
        .iter()
        .find(|s| s.image.width() != r || s.image.height() != r)
    {
        return Err(Error::Input(format!(
            "sample `{}` is {}x{}, detector expects {r}x{r}; letterbox it first",
            bad.id,
            bad.image.width(),
            bad.image.height()
        )));
    }
    for s in samples {
        if let Some(b) = s.boxes.iter().find(|b| b.class_id >= detector.num_classes()) {
            return Err(Error::Config(format!(
                "sample `{}` uses class {} but the detector has {}",
                s.id,
                b.class_id,
                detector.num_classes()
            )));
        }
    }

    let decay_mask: Vec<bool> = detector
        .params()
        .iter()
        .map(|p| p.name.ends_with(".weight"))
        .collect();
    let mut velocity: Vec<Vec<f32>> = detector
        .params()
        .iter()
        .map(|p| vec![0.0; p.data.len()])
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let steps_per_epoch = samples.len().div_ceil(params.batch_size);
    let total_steps = steps_per_epoch * params.epochs;
    let mut history = TrainHistory::default();
    let mut step = 0;

    for epoch in 0..params.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut rng);
        let flips: Vec<bool> = order
            .iter()
            .map(|_| params.horizontal_flip && rng.random_bool(0.5))
            .collect();
        let mut epoch_loss = 0.0;
        for (batch, batch_flips) in order
            .chunks(params.batch_size)
            .zip(flips.chunks(params.batch_size))
        {
            let frozen: &Detector = detector;
            let results: Vec<Result<(f64, Detector)>> = batch
                .par_iter()
                .zip(batch_flips.par_iter())
                .map(|(&i, &flip)| {
                    let sample = &samples[i];
                    if flip {
                        let (image, boxes) = flip_sample(sample);
                        image_gradient(frozen, &image, &boxes, &params.loss)
                    } else {
                        image_gradient(frozen, &sample.image, &sample.boxes, &params.loss)
                    }
                })
                .collect();
            let mut total: Option<Detector> = None;
            for res in results {
                let (loss, grad) = res?;
                epoch_loss += loss;
                match &mut total {
                    None => total = Some(grad),
                    Some(acc) => {
                        for (a, g) in acc.params_mut().into_iter().zip(grad.params()) {
                            for (x, y) in a.iter_mut().zip(g.data) {
                                *x += *y;
                            }
                        }
                    }
                }
            }
            let mut grad = total.expect("non-empty batch");
            let scale = 1.0 / batch.len() as f32;
            let mut grads = grad.params_mut();
            let mut sq = 0.0f64;
            for g in grads.iter_mut() {
                for v in g.iter_mut() {
                    *v *= scale;
                    sq += (*v as f64) * (*v as f64);
                }
            }
            let norm = sq.sqrt();
            let clip = if params.grad_clip_norm > 0.0 && norm > params.grad_clip_norm {
                (params.grad_clip_norm / norm) as f32
            } else {
                1.0
            };
            let lr = params.learning_rate_at(step, total_steps, steps_per_epoch) as f32;
            let momentum = params.momentum as f32;
            let wd = params.weight_decay as f32;
            for (((p, g), v), &decay) in detector
                .params_mut()
                .into_iter()
                .zip(grads.iter())
                .zip(velocity.iter_mut())
                .zip(&decay_mask)
            {
                for ((w, &gw), vw) in p.iter_mut().zip(g.iter()).zip(v.iter_mut()) {
                    let mut d = gw * clip;
                    if decay {
                        d += wd * *w;
                    }
                    *vw = momentum * *vw + d;
                    *w -= lr * *vw;
                }
            }
            step += 1;
        }
        let mean = epoch_loss / samples.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Config(format!(
                "training diverged at epoch {epoch} (loss {mean}); lower the learning rate"
            )));
        }
        log::info!("epoch {}/{}: loss {mean:.5}", epoch + 1, params.epochs);
        on_epoch(epoch, mean);
        history.epoch_losses.push(mean);
    }
    Ok(history)
}
