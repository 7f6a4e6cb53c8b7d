//! Anchor assignment and the focal classification + Huber box objective.

use crate::bbox::BBox;
use crate::datasets::GroundTruthBox;

use super::anchors;

pub const POSITIVE_IOU: f64 = 0.5;
pub const NEGATIVE_IOU: f64 = 0.4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParams {
    pub alpha: f64,
    pub gamma: f64,
    pub huber_delta: f64,
    pub box_weight: f64,
}

impl Default for LossParams {
    fn default() -> Self {
        Self {
            alpha: 0.25,
            gamma: 2.0,
            huber_delta: 0.1,
            box_weight: 50.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AnchorLabel {
    Negative,
    Ignore,
    Positive { class_id: usize, offsets: [f64; 4] },
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorTargets {
    pub labels: Vec<AnchorLabel>,
    pub num_positive: usize,
}

/// IoU matching: positive at `>= 0.5`, negative below `0.4`, ignored between.
pub fn assign_targets(anchor_boxes: &[BBox], gts: &[GroundTruthBox]) -> AnchorTargets {
    let mut num_positive = 0;
    let labels = anchor_boxes
        .iter()
        .map(|anchor| {
            let best = gts
                .iter()
                .map(|gt| (anchor.iou(&gt.bbox), gt))
                .fold(None::<(f64, &GroundTruthBox)>, |acc, cur| match acc {
                    Some(a) if a.0 >= cur.0 => Some(a),
                    _ => Some(cur),
                });
            match best {
                Some((iou, gt)) if iou >= POSITIVE_IOU => {
                    num_positive += 1;
                    AnchorLabel::Positive {
                        class_id: gt.class_id,
                        offsets: anchors::encode(anchor, &gt.bbox),
                    }
                }
                Some((iou, _)) if iou >= NEGATIVE_IOU => AnchorLabel::Ignore,
                _ => AnchorLabel::Negative,
            }
        })
        .collect();
    AnchorTargets {
        labels,
        num_positive,
    }
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub total: f64,
    pub classification: f64,
    pub box_regression: f64,
    /// Same layout as the class logits, `num_anchors x num_classes`.
    pub grad_class: Vec<f64>,
    /// Same layout as the box predictions, `num_anchors x 4`.
    pub grad_box: Vec<f64>,
}

/// `log(1 + exp(x))` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
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

/// Focal loss of one logit and its derivative with respect to the logit.
pub fn focal_term(logit: f64, positive: bool, alpha: f64, gamma: f64) -> (f64, f64) {
    let p = sigmoid(logit);
    if positive {
        // -alpha (1-p)^gamma log p
        let log_p = -softplus(-logit);
        let q = 1.0 - p;
        let qg = q.powf(gamma);
        let loss = -alpha * qg * log_p;
        let grad = alpha * qg * (gamma * p * log_p - q);
        (loss, grad)
    } else {
        // -(1-alpha) p^gamma log(1-p)
        let log_q = -softplus(logit);
        let pg = p.powf(gamma);
        let loss = -(1.0 - alpha) * pg * log_q;
        let grad = (1.0 - alpha) * pg * (p - gamma * (1.0 - p) * log_q);
        (loss, grad)
    }
}

fn huber(d: f64, delta: f64) -> (f64, f64) {
    if d.abs() <= delta {
        (0.5 * d * d, d)
    } else {
        (delta * (d.abs() - 0.5 * delta), delta * d.signum())
    }
}

/// Classification is summed over anchors and divided by the positive count;
/// the box term is the Huber loss over positive anchors divided by four times
/// the positive count. With no positive anchors both normalizers are 1.
pub fn focal_loss(
    class_logits: &[f64],
    box_preds: &[f64],
    targets: &AnchorTargets,
    num_classes: usize,
    params: &LossParams,
) -> LossOutput {
    let n = targets.labels.len();
    assert_eq!(class_logits.len(), n * num_classes, "class logits layout");
    assert_eq!(box_preds.len(), n * 4, "box prediction layout");
    let cls_norm = targets.num_positive.max(1) as f64;
    let box_norm = (4 * targets.num_positive).max(1) as f64;

    let mut grad_class = vec![0.0; class_logits.len()];
    let mut grad_box = vec![0.0; box_preds.len()];
    let mut cls_sum = 0.0;
    let mut box_sum = 0.0;
    for (a, label) in targets.labels.iter().enumerate() {
        let target_class = match *label {
            AnchorLabel::Ignore => continue,
            AnchorLabel::Negative => None,
            AnchorLabel::Positive { class_id, offsets } => {
                for (j, &t) in offsets.iter().enumerate() {
                    let (l, g) = huber(box_preds[a * 4 + j] - t, params.huber_delta);
                    box_sum += l;
                    grad_box[a * 4 + j] = params.box_weight * g / box_norm;
                }
                Some(class_id)
            }
        };
        for k in 0..num_classes {
            let idx = a * num_classes + k;
            let (l, g) = focal_term(class_logits[idx], target_class == Some(k), params.alpha, params.gamma);
            cls_sum += l;
            grad_class[idx] = g / cls_norm;
        }
    }
    let classification = cls_sum / cls_norm;
    let box_regression = params.box_weight * box_sum / box_norm;
    LossOutput {
        total: classification + box_regression,
        classification,
        box_regression,
        grad_class,
        grad_box,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logit(p: f64) -> f64 {
        (p / (1.0 - p)).ln()
    }

    #[test]
    fn single_positive_anchor_value() {
        let (l, _) = focal_term(logit(0.9), true, 0.25, 2.0);
        // -0.25 * 0.1^2 * ln(0.9)
        assert!((l - 2.634_012_891_445_657e-4).abs() < 1e-12, "{l}");
    }

    #[test]
    fn perfect_prediction_has_no_loss() {
        let (l, g) = focal_term(40.0, true, 0.25, 2.0);
        assert!(l < 1e-30 && g.abs() < 1e-15);
        let (l, _) = focal_term(-40.0, false, 0.25, 2.0);
        assert!(l < 1e-30);
    }

    #[test]
    fn reduces_to_scaled_cross_entropy() {
        for &x in &[-3.0, -0.2, 0.0, 1.5, 6.0] {
            let p = sigmoid(x);
            let (lp, _) = focal_term(x, true, 0.5, 0.0);
            let (ln, _) = focal_term(x, false, 0.5, 0.0);
            assert!((lp - 0.5 * -(p.ln())).abs() < 1e-12);
            assert!((ln - 0.5 * -((1.0 - p).ln())).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_positive_normalizer_is_one() {
        let targets = AnchorTargets {
            labels: vec![AnchorLabel::Negative, AnchorLabel::Ignore],
            num_positive: 0,
        };
        let out = focal_loss(&[0.0, 3.0], &[0.0; 8], &targets, 1, &LossParams::default());
        let (expected, _) = focal_term(0.0, false, 0.25, 2.0);
        assert!((out.total - expected).abs() < 1e-12);
        assert_eq!(out.grad_class[1], 0.0);
        assert_eq!(out.box_regression, 0.0);
    }

    #[test]
    fn assignment_thresholds() {
        let anchors = [
            BBox::new_unchecked(0.0, 0.0, 10.0, 10.0),
            BBox::new_unchecked(0.0, 0.0, 10.0, 5.5),  // iou 0.55
            BBox::new_unchecked(0.0, 0.0, 10.0, 4.5),  // iou 0.45
            BBox::new_unchecked(50.0, 50.0, 60.0, 60.0),
        ];
        let gt = [GroundTruthBox {
            bbox: BBox::new_unchecked(0.0, 0.0, 10.0, 10.0),
            class_id: 1,
        }];
        let t = assign_targets(&anchors, &gt);
        assert_eq!(t.num_positive, 2);
        assert!(matches!(t.labels[0], AnchorLabel::Positive { class_id: 1, .. }));
        assert!(matches!(t.labels[1], AnchorLabel::Positive { .. }));
        assert_eq!(t.labels[2], AnchorLabel::Ignore);
        assert_eq!(t.labels[3], AnchorLabel::Negative);
    }
}
