//! Flat `key=value` run configuration.
//!
//! Every command resolves one [`RunConfig`] from defaults, an optional config
//! file and command-line flags, in that order of precedence, and records the
//! result in its run manifest. A manifest (`manifest.json`) or resolved
//! `run.cfg` can be passed back as `--config` to repeat a run.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use effdet::bench::RunManifest;
use effdet::datasets::class_map_by_name;
use effdet::detnet::{InferenceConfig, TrainParams};
use effdet::lowlight::Enhancement;
use effdet::scalecfg::{build_config, ArchitectureConfig, DepthSplit, ScalingSpec};
use effdet::{ClassMap, Error, KvRecord, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Synth,
    Manifest,
    Voc,
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synth" => Ok(Self::Synth),
            "manifest" => Ok(Self::Manifest),
            "voc" => Ok(Self::Voc),
            other => Err(Error::Config(format!(
                "unknown dataset `{other}` (expected synth, manifest or voc)"
            ))),
        }
    }
}

impl std::fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Synth => "synth",
            Self::Manifest => "manifest",
            Self::Voc => "voc",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub phi: i64,
    pub split: DepthSplit,
    /// Apply the desk-scale reduction to resolution and width.
    pub desk_scale: bool,
    pub resolution: Option<u32>,
    pub width: Option<u32>,

    pub dataset: DatasetKind,
    pub dataset_path: Option<PathBuf>,
    /// Defaults to `synthN` for synthetic data.
    pub class_map: Option<String>,
    pub synth_images: usize,
    pub synth_classes: usize,
    pub take_first: Option<usize>,
    pub val_fraction: f64,

    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub warmup_epochs: f64,
    pub grad_clip_norm: f64,
    pub horizontal_flip: bool,

    pub confidence_threshold: f64,
    pub nms_iou_threshold: f64,
    pub max_detections: usize,

    pub darken_offset: i64,
    pub strategies: Vec<String>,
    pub external_cmd: Option<String>,

    pub checkpoints: Vec<PathBuf>,
    pub runs: usize,
    pub warmup: usize,
    pub device_label: Option<String>,

    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainParams::default();
        Self {
            phi: 0,
            split: DepthSplit::SHALLOW_FUSION,
            desk_scale: true,
            resolution: None,
            width: None,
            dataset: DatasetKind::Synth,
            dataset_path: None,
            class_map: None,
            synth_images: 250,
            synth_classes: 2,
            take_first: None,
            val_fraction: 0.2,
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            warmup_epochs: t.warmup_epochs,
            grad_clip_norm: t.grad_clip_norm,
            horizontal_flip: t.horizontal_flip,
            confidence_threshold: 0.05,
            nms_iou_threshold: 0.5,
            max_detections: 100,
            darken_offset: 120,
            strategies: vec!["none".into(), "c=40".into(), "c=80".into()],
            external_cmd: None,
            checkpoints: Vec::new(),
            runs: 30,
            warmup: 5,
            device_label: None,
            seed: 0,
        }
    }
}

fn list<T: Display>(items: &[T]) -> String {
    items.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_list(s: &str) -> Vec<String> {
    s.split(',')
        .map(str::trim)
        .filter(|x| !x.is_empty())
        .map(str::to_string)
        .collect()
}

macro_rules! take {
    ($rec:expr, $cfg:expr, $($key:ident),* $(,)?) => {
        $(
            if let Some(v) = $rec.parse(stringify!($key))? {
                $cfg.$key = v;
            }
        )*
    };
}

macro_rules! take_opt {
    ($rec:expr, $cfg:expr, $($key:ident),* $(,)?) => {
        $(
            if let Some(v) = $rec.parse(stringify!($key))? {
                $cfg.$key = Some(v);
            }
        )*
    };
}

pub const KEYS: &[&str] = &[
    "phi",
    "split",
    "desk_scale",
    "resolution",
    "width",
    "dataset",
    "dataset_path",
    "class_map",
    "synth_images",
    "synth_classes",
    "take_first",
    "val_fraction",
    "epochs",
    "batch_size",
    "learning_rate",
    "momentum",
    "weight_decay",
    "warmup_epochs",
    "grad_clip_norm",
    "horizontal_flip",
    "confidence_threshold",
    "nms_iou_threshold",
    "max_detections",
    "darken_offset",
    "strategies",
    "external_cmd",
    "checkpoints",
    "runs",
    "warmup",
    "device_label",
    "seed",
];

impl RunConfig {
    /// Defaults overridden by the keys present in `rec`. Unknown keys are errors.
    pub fn from_record(rec: &KvRecord) -> Result<Self> {
        let unknown: Vec<&str> = rec.keys().filter(|k| !KEYS.contains(k)).collect();
        if !unknown.is_empty() {
            return Err(Error::Config(format!("unknown config keys: {}", unknown.join(", "))));
        }
        let mut c = Self::default();
        take!(
            rec, c, phi, split, desk_scale, dataset, synth_images, synth_classes, val_fraction, epochs,
            batch_size, learning_rate, momentum, weight_decay, warmup_epochs, grad_clip_norm,
            horizontal_flip, confidence_threshold, nms_iou_threshold, max_detections, darken_offset,
            runs, warmup, seed,
        );
        take_opt!(rec, c, resolution, width, dataset_path, class_map, take_first, external_cmd, device_label);
        if let Some(s) = rec.get("strategies") {
            c.strategies = parse_list(s);
        }
        if let Some(s) = rec.get("checkpoints") {
            c.checkpoints = parse_list(s).into_iter().map(PathBuf::from).collect();
        }
        Ok(c)
    }

    pub fn to_record(&self) -> KvRecord {
        let mut r = KvRecord::new();
        r.set("phi", self.phi);
        r.set("split", self.split);
        r.set("desk_scale", self.desk_scale);
        if let Some(v) = self.resolution {
            r.set("resolution", v);
        }
        if let Some(v) = self.width {
            r.set("width", v);
        }
        r.set("dataset", self.dataset);
        if let Some(v) = &self.dataset_path {
            r.set("dataset_path", v.display());
        }
        if let Some(v) = &self.class_map {
            r.set("class_map", v);
        }
        r.set("synth_images", self.synth_images);
        r.set("synth_classes", self.synth_classes);
        if let Some(v) = self.take_first {
            r.set("take_first", v);
        }
        r.set("val_fraction", self.val_fraction);
        r.set("epochs", self.epochs);
        r.set("batch_size", self.batch_size);
        r.set("learning_rate", self.learning_rate);
        r.set("momentum", self.momentum);
        r.set("weight_decay", self.weight_decay);
        r.set("warmup_epochs", self.warmup_epochs);
        r.set("grad_clip_norm", self.grad_clip_norm);
        r.set("horizontal_flip", self.horizontal_flip);
        r.set("confidence_threshold", self.confidence_threshold);
        r.set("nms_iou_threshold", self.nms_iou_threshold);
        r.set("max_detections", self.max_detections);
        r.set("darken_offset", self.darken_offset);
        r.set("strategies", list(&self.strategies));
        if let Some(v) = &self.external_cmd {
            r.set("external_cmd", v);
        }
        if !self.checkpoints.is_empty() {
            let paths: Vec<String> = self.checkpoints.iter().map(|p| p.display().to_string()).collect();
            r.set("checkpoints", list(&paths));
        }
        r.set("runs", self.runs);
        r.set("warmup", self.warmup);
        if let Some(v) = &self.device_label {
            r.set("device_label", v);
        }
        r.set("seed", self.seed);
        r
    }

    /// Reads a `key=value` file, or the config section of a run manifest
    /// when the path ends in `.json`.
    pub fn load_record(path: &Path) -> Result<KvRecord> {
        if path.extension().is_some_and(|e| e == "json") {
            Ok(RunManifest::read(path)?.config_record())
        } else {
            KvRecord::read(path)
        }
    }

    pub fn scaling_spec(&self) -> Result<ScalingSpec> {
        ScalingSpec::with_split(self.phi, self.split)
    }

    pub fn architecture(&self) -> Result<ArchitectureConfig> {
        let mut cfg = build_config(&self.scaling_spec()?)?;
        if self.desk_scale {
            cfg = cfg.desk_scale();
        }
        if self.resolution.is_some() || self.width.is_some() {
            cfg = cfg.with_size(
                self.resolution.unwrap_or(cfg.input_resolution),
                self.width.unwrap_or(cfg.fused_channels),
            )?;
        }
        Ok(cfg)
    }

    pub fn architecture_name(&self) -> Result<String> {
        Ok(self.scaling_spec()?.name())
    }

    pub fn class_map(&self) -> Result<ClassMap> {
        match (&self.class_map, self.dataset) {
            (Some(name), _) => class_map_by_name(name),
            (None, DatasetKind::Synth) => class_map_by_name(&format!("synth{}", self.synth_classes)),
            (None, _) => Err(Error::Config("class_map is required for manifest and voc datasets".into())),
        }
    }

    pub fn train_params(&self) -> TrainParams {
        TrainParams {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            warmup_epochs: self.warmup_epochs,
            grad_clip_norm: self.grad_clip_norm,
            horizontal_flip: self.horizontal_flip,
            seed: self.seed,
            ..TrainParams::default()
        }
    }

    pub fn inference(&self) -> Result<InferenceConfig> {
        InferenceConfig::new(self.confidence_threshold, self.nms_iou_threshold, self.max_detections)
    }

    /// The study strategies. `external` is appended when a command is set
    /// and the list does not already name it.
    pub fn enhancement_strategies(&self) -> Result<Vec<Enhancement>> {
        let mut out = Vec::new();
        for s in &self.strategies {
            let e = match s.as_str() {
                "none" => Enhancement::None,
                "external" => Enhancement::external(self.external_cmd.as_deref().ok_or_else(|| {
                    Error::Config("strategy `external` needs external_cmd".into())
                })?)?,
                other => {
                    let c = other
                        .strip_prefix("c=")
                        .and_then(|v| v.parse::<i64>().ok())
                        .ok_or_else(|| {
                            Error::Config(format!(
                                "unknown strategy `{other}` (expected none, c=<0..255> or external)"
                            ))
                        })?;
                    Enhancement::constant(c)?
                }
            };
            out.push(e);
        }
        if let Some(cmd) = &self.external_cmd {
            if !self.strategies.iter().any(|s| s == "external") {
                out.push(Enhancement::external(cmd)?);
            }
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        self.architecture()?;
        self.train_params().validate()?;
        self.inference()?;
        self.enhancement_strategies()?;
        if !(0..=255).contains(&self.darken_offset) {
            return Err(Error::Domain(format!("darken_offset must be in [0, 255], got {}", self.darken_offset)));
        }
        if self.runs == 0 {
            return Err(Error::Config("runs must be >= 1".into()));
        }
        if self.dataset != DatasetKind::Synth && self.dataset_path.is_none() {
            return Err(Error::Config(format!("dataset `{}` needs dataset_path", self.dataset)));
        }
        self.class_map()?;
        Ok(())
    }
}
