use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::lowlight::PixelImage;

use super::anchors;
use super::model::{Detector, RawOutputs};

/// Candidates kept per image before suppression.
const MAX_CANDIDATES: usize = 5000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    /// Detections scoring below this are discarded.
    pub confidence_threshold: f64,
    pub nms_iou_threshold: f64,
    pub max_detections: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            confidence_threshold: 0.4,
            nms_iou_threshold: 0.5,
            max_detections: 100,
        }
    }
}

impl InferenceConfig {
    pub fn new(confidence_threshold: f64, nms_iou_threshold: f64, max_detections: usize) -> Result<Self> {
        let cfg = Self {
            confidence_threshold,
            nms_iou_threshold,
            max_detections,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.confidence_threshold) {
            return Err(Error::Domain(format!(
                "confidence threshold must be in [0, 1], got {}",
                self.confidence_threshold
            )));
        }
        if !(self.nms_iou_threshold > 0.0 && self.nms_iou_threshold <= 1.0) {
            return Err(Error::Domain(format!(
                "NMS IoU threshold must be in (0, 1], got {}",
                self.nms_iou_threshold
            )));
        }
        if self.max_detections == 0 {
            return Err(Error::Domain("max detections must be positive".into()));
        }
        Ok(())
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Descending score; ties keep their original order.
fn by_score_desc(a: &Detection, b: &Detection) -> Ordering {
    b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal)
}

/// Greedy per-class suppression. A detection is dropped when its IoU with an
/// already kept detection of the same class exceeds `iou_threshold`.
pub fn nms(mut detections: Vec<Detection>, iou_threshold: f64) -> Vec<Detection> {
    detections.sort_by(by_score_desc);
    let mut kept: Vec<Detection> = Vec::with_capacity(detections.len());
    for det in detections {
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == det.class_id && k.bbox.iou(&det.bbox) > iou_threshold);
        if !suppressed {
            kept.push(det);
        }
    }
    kept
}

/// Decodes raw outputs into final detections.
pub fn postprocess(
    outputs: &RawOutputs,
    anchor_boxes: &[BBox],
    num_classes: usize,
    resolution: f64,
    cfg: &InferenceConfig,
) -> Vec<Detection> {
    let mut candidates: Vec<(usize, usize, f64)> = Vec::new();
    for (i, &logit) in outputs.class_logits.iter().enumerate() {
        let score = sigmoid(logit as f64);
        if score >= cfg.confidence_threshold {
            candidates.push((i / num_classes, i % num_classes, score));
        }
    }
    if candidates.len() > MAX_CANDIDATES {
        candidates.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap_or(Ordering::Equal));
        candidates.truncate(MAX_CANDIDATES);
    }
    let detections = candidates
        .into_iter()
        .filter_map(|(a, class_id, score)| {
            let o = &outputs.box_offsets[a * 4..a * 4 + 4];
            let offsets = [o[0] as f64, o[1] as f64, o[2] as f64, o[3] as f64];
            let bbox = anchors::decode(&anchor_boxes[a], offsets).clip(resolution, resolution);
            bbox.is_valid().then_some(Detection {
                bbox,
                class_id,
                score,
            })
        })
        .collect();
    let mut kept = nms(detections, cfg.nms_iou_threshold);
    kept.truncate(cfg.max_detections);
    kept
}

impl Detector {
    /// Detections for one image, sorted by descending score.
    pub fn infer(&self, image: &PixelImage, cfg: &InferenceConfig) -> Result<Vec<Detection>> {
        cfg.validate()?;
        let x = self.preprocess(image)?;
        let outputs = self.predict(x)?;
        Ok(postprocess(
            &outputs,
            self.anchors(),
            self.num_classes(),
            self.resolution() as f64,
            cfg,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(x: f64, score: f64, class_id: usize) -> Detection {
        Detection {
            bbox: BBox::new_unchecked(x, 0.0, x + 10.0, 10.0),
            class_id,
            score,
        }
    }

    #[test]
    fn identical_boxes_keep_the_best() {
        let kept = nms(vec![det(0.0, 0.8, 0), det(0.0, 0.9, 0)], 0.5);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.9);
    }

    #[test]
    fn suppression_is_per_class() {
        let kept = nms(vec![det(0.0, 0.8, 0), det(0.0, 0.9, 1), det(30.0, 0.7, 0)], 0.5);
        assert_eq!(kept.len(), 3);
        assert!(kept.windows(2).all(|w| w[0].score >= w[1].score));
    }

    #[test]
    fn config_validation() {
        assert!(InferenceConfig::new(1.1, 0.5, 10).is_err());
        assert!(InferenceConfig::new(0.5, 0.0, 10).is_err());
        assert!(InferenceConfig::new(0.5, 0.5, 0).is_err());
        assert!(InferenceConfig::new(0.0, 1.0, 1).is_ok());
    }

    fn raw(logits: Vec<f32>) -> (RawOutputs, Vec<BBox>) {
        let n = logits.len();
        let anchors = (0..n)
            .map(|i| BBox::new_unchecked(i as f64 * 20.0, 0.0, i as f64 * 20.0 + 16.0, 16.0))
            .collect();
        (
            RawOutputs {
                class_logits: logits,
                box_offsets: vec![0.0; n * 4],
            },
            anchors,
        )
    }

    #[test]
    fn threshold_filters_and_nests() {
        let (out, anchors) = raw(vec![-2.0, 0.0, 1.0, 3.0, 5.0]);
        let at = |tau| {
            postprocess(&out, &anchors, 1, 512.0, &InferenceConfig::new(tau, 0.5, 100).unwrap())
        };
        let low = at(0.4);
        let high = at(0.95);
        assert_eq!(low.len(), 4);
        // sigmoid(3) = 0.9526 and sigmoid(5) = 0.9933
        assert_eq!(high.len(), 2);
        assert!(high.iter().all(|h| low.contains(h)));
        assert!(at(1.0).is_empty());
        assert!(low.iter().all(|d| d.score >= 0.4));
    }

    #[test]
    fn truncates_to_max_detections() {
        let (out, anchors) = raw(vec![4.0; 6]);
        let dets = postprocess(&out, &anchors, 1, 512.0, &InferenceConfig::new(0.1, 0.5, 2).unwrap());
        assert_eq!(dets.len(), 2);
    }
}
