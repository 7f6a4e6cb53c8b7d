//! Desk-scale detector realizing an [`ArchitectureConfig`](crate::scalecfg::ArchitectureConfig).

pub mod anchors;
pub mod checkpoint;
pub mod fusion;
pub mod infer;
pub mod layers;
pub mod loss;
pub mod model;
pub mod train;

pub use anchors::generate_anchors;
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use fusion::{fuse_features, normalize_weights, weighted_sum, FusionWeights, FUSION_EPSILON};
pub use infer::{nms, Detection, InferenceConfig};
pub use loss::{assign_targets, focal_loss, AnchorLabel, AnchorTargets, LossOutput, LossParams};
pub use model::{build_detector, Detector, ParamCount, RawOutputs};
pub use train::{train, train_with_progress, TrainHistory, TrainParams};
