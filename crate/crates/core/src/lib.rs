//! Depth-split EfficientDet-style detectors at desk scale.
//!
//! The crate covers compound scaling of the detector family ([`scalecfg`]),
//! a small trainable detector with weighted bidirectional fusion
//! ([`detnet`]), low-light degradation and enhancement ([`lowlight`]),
//! dataset loading and synthesis ([`datasets`]), COCO-style AP
//! ([`evalap`]) and latency/efficiency reporting ([`bench`]).

pub mod bbox;
pub mod bench;
pub mod datasets;
pub mod detnet;
pub mod error;
pub mod evalap;
pub mod kv;
pub mod lowlight;
pub mod scalecfg;
pub mod tensor;

pub use bbox::BBox;
pub use datasets::{AnnotatedSample, ClassMap, GroundTruthBox, LabeledImage};
pub use detnet::{Detection, Detector, InferenceConfig, TrainParams};
pub use error::{Error, Result};
pub use evalap::{EvalImage, EvalResult};
pub use kv::KvRecord;
pub use lowlight::{Enhancement, EnhancementSpec, PixelImage};
pub use scalecfg::{ArchitectureConfig, DepthSplit, ScalingSpec};
