use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use effdet::KvRecord;

#[derive(Debug, Parser)]
#[command(
    name = "effdet",
    version,
    about = "Depth-split EfficientDet-style detectors: scaling, training, low-light study and benchmarks",
    after_help = "Exit codes: 0 success, 2 usage or invalid configuration, 3 missing input, 4 runtime failure.\n\
                  Errors are also reported as one JSON object on stderr.\n\
                  EFFDET_OUTPUT_ROOT sets the default output root (default: runs)."
)]
pub struct Cli {
    /// Root under which run directories are created
    #[arg(long, global = true, value_name = "DIR")]
    pub output_root: Option<PathBuf>,

    /// Log progress to stderr (RUST_LOG takes precedence)
    #[arg(short, long, global = true)]
    pub verbose: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the architecture configuration for a scaling coefficient and depth split
    Scale(ScaleArgs),
    /// Train a detector and save a checkpoint
    Train(TrainArgs),
    /// Run a checkpoint on images and write detections as JSON lines
    Infer(InferArgs),
    /// Darken and/or enhance one image
    Enhance(EnhanceArgs),
    /// Compute AP, AP50 and AP75 of predicted detections
    Eval(EvalArgs),
    /// Measure per-image latency and build an accuracy/latency report
    Bench(BenchArgs),
    /// Low-light study: darken, enhance, detect and evaluate every detector/strategy pair
    Study(StudyArgs),
}

#[derive(Debug, Args)]
pub struct ScaleArgs {
    /// Scaling coefficient phi (0..=7)
    #[arg(long, allow_negative_numbers = true, default_value_t = 0)]
    pub phi: i64,

    /// Depth split "fusion-head", e.g. 1-5, 3-3 or 5-1
    #[arg(long, default_value = "3-3")]
    pub split: String,

    /// Print one CSV row per phi in 0..=max-phi instead of a single record
    #[arg(long)]
    pub table: bool,

    /// Largest phi listed by --table
    #[arg(long, default_value_t = 3)]
    pub max_phi: u32,

    /// Apply the desk-scale reduction to resolution and width
    #[arg(long)]
    pub desk: bool,
}

/// Options shared by every config-driven command.
#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Config file (key=value) or a previous run's manifest.json
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Seed for data generation, splitting, initialization and shuffling
    #[arg(long)]
    pub seed: Option<u64>,

    /// Write outputs here instead of a fresh run directory
    #[arg(long, value_name = "DIR")]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Scaling coefficient phi
    #[arg(long, allow_negative_numbers = true)]
    pub phi: Option<i64>,

    /// Depth split "fusion-head"
    #[arg(long)]
    pub split: Option<String>,

    /// Keep the full-scale resolution and width instead of the desk-scale reduction
    #[arg(long)]
    pub full_scale: bool,

    /// Override the input resolution (multiple of 128)
    #[arg(long)]
    pub resolution: Option<u32>,

    /// Override the fusion/head width (multiple of 8)
    #[arg(long)]
    pub width: Option<u32>,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Dataset source: synth, manifest or voc
    #[arg(long)]
    pub dataset: Option<String>,

    /// Manifest file or VOC annotation directory
    #[arg(long, value_name = "PATH")]
    pub dataset_path: Option<PathBuf>,

    /// Class map: trash_icra19, wpbb, voc2012 or synth1..synth8
    #[arg(long)]
    pub class_map: Option<String>,

    /// Number of synthetic images generated before splitting
    #[arg(long)]
    pub synth_images: Option<usize>,

    /// Number of synthetic classes (1..=8)
    #[arg(long)]
    pub synth_classes: Option<usize>,

    /// Keep only the first N samples in filename order
    #[arg(long)]
    pub take_first: Option<usize>,

    /// Fraction of samples held out for validation
    #[arg(long)]
    pub val_fraction: Option<f64>,
}

#[derive(Debug, Args)]
pub struct OptimArgs {
    /// Passes over the training split
    #[arg(long)]
    pub epochs: Option<usize>,

    /// Images per SGD step
    #[arg(long)]
    pub batch_size: Option<usize>,

    /// Peak learning rate
    #[arg(long)]
    pub lr: Option<f64>,

    /// SGD momentum
    #[arg(long)]
    pub momentum: Option<f64>,

    /// L2 penalty on weights
    #[arg(long)]
    pub weight_decay: Option<f64>,

    /// Epochs of linear learning-rate warmup before cosine decay
    #[arg(long)]
    pub warmup_epochs: Option<f64>,

    /// Global gradient-norm cap (0 disables)
    #[arg(long)]
    pub grad_clip_norm: Option<f64>,

    /// Disable horizontal-flip augmentation
    #[arg(long)]
    pub no_flip: bool,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    /// Confidence threshold tau; detections scoring below it are dropped
    #[arg(long)]
    pub tau: Option<f64>,

    /// IoU above which NMS suppresses a same-class detection
    #[arg(long)]
    pub nms_iou: Option<f64>,

    /// Detections kept per image after NMS
    #[arg(long)]
    pub max_detections: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
    #[command(flatten)]
    pub detect: DetectArgs,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub detect: DetectArgs,

    /// Trained checkpoint
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,

    /// Run on every image of a dataset manifest
    #[arg(long, value_name = "FILE")]
    pub manifest: Option<PathBuf>,

    /// Detections file (default: detections.jsonl in the run directory)
    #[arg(long, value_name = "FILE")]
    pub pred_out: Option<PathBuf>,

    /// Image files
    pub images: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EnhanceArgs {
    #[command(flatten)]
    pub common: CommonArgs,

    /// Subtract this value from every channel before enhancing
    #[arg(long, default_value_t = 0, allow_negative_numbers = true)]
    pub darken_offset: i64,

    /// Enhancement: none, const or external
    #[arg(long, default_value = "none")]
    pub enhance: String,

    /// Offset added by --enhance const
    #[arg(long, allow_negative_numbers = true)]
    pub c: Option<i64>,

    /// Program run as `<cmd> <input.png> <output.png>` by --enhance external
    #[arg(long, value_name = "CMD")]
    pub external_cmd: Option<String>,

    /// Input image (PNG)
    pub input: PathBuf,
    /// Output image (PNG)
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,

    /// Detections as JSON lines {image, box, class, score}
    #[arg(long, value_name = "FILE")]
    pub pred: PathBuf,

    /// Ground-truth manifest; image keys are its `image` entries
    #[arg(long, value_name = "FILE")]
    pub gt: PathBuf,

    /// Class map of the ground truth
    #[arg(long)]
    pub class_map: Option<String>,

    /// Row label in eval.csv
    #[arg(long, default_value = "model")]
    pub name: String,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub detect: DetectArgs,

    /// Checkpoints to evaluate and time (repeatable)
    #[arg(long = "checkpoint", value_name = "FILE")]
    pub checkpoints: Vec<PathBuf>,

    /// Time untrained desk-scale detectors for phi = 0..=N instead (latency only)
    #[arg(long, value_name = "N")]
    pub sweep_phi: Option<u32>,

    /// Depth split used by --sweep-phi
    #[arg(long)]
    pub split: Option<String>,

    /// Timed runs per detector
    #[arg(long)]
    pub runs: Option<usize>,

    /// Untimed warmup runs per detector
    #[arg(long)]
    pub warmup: Option<usize>,

    /// Free-text device description stored with the measurements
    #[arg(long)]
    pub device_label: Option<String>,
}

#[derive(Debug, Args)]
pub struct StudyArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub detect: DetectArgs,

    /// Trained checkpoints (repeatable)
    #[arg(long = "checkpoint", value_name = "FILE")]
    pub checkpoints: Vec<PathBuf>,

    /// Darkening offset applied to the evaluation images
    #[arg(long, allow_negative_numbers = true)]
    pub darken_offset: Option<i64>,

    /// Comma-separated strategies: none, c=<value>, external
    #[arg(long)]
    pub strategies: Option<String>,

    /// External enhancer; adds an `external` row when set
    #[arg(long, value_name = "CMD")]
    pub external_cmd: Option<String>,
}

fn put<T: std::fmt::Display>(rec: &mut KvRecord, key: &str, v: &Option<T>) {
    if let Some(v) = v {
        rec.set(key, v);
    }
}

impl CommonArgs {
    pub fn apply(&self, rec: &mut KvRecord) {
        put(rec, "seed", &self.seed);
    }
}

impl ModelArgs {
    pub fn apply(&self, rec: &mut KvRecord) {
        put(rec, "phi", &self.phi);
        put(rec, "split", &self.split);
        if self.full_scale {
            rec.set("desk_scale", false);
        }
        put(rec, "resolution", &self.resolution);
        put(rec, "width", &self.width);
    }
}

impl DataArgs {
    pub fn apply(&self, rec: &mut KvRecord) {
        put(rec, "dataset", &self.dataset);
        put(rec, "dataset_path", &self.dataset_path.as_ref().map(|p| p.display()));
        put(rec, "class_map", &self.class_map);
        put(rec, "synth_images", &self.synth_images);
        put(rec, "synth_classes", &self.synth_classes);
        put(rec, "take_first", &self.take_first);
        put(rec, "val_fraction", &self.val_fraction);
    }
}

impl OptimArgs {
    pub fn apply(&self, rec: &mut KvRecord) {
        put(rec, "epochs", &self.epochs);
        put(rec, "batch_size", &self.batch_size);
        put(rec, "learning_rate", &self.lr);
        put(rec, "momentum", &self.momentum);
        put(rec, "weight_decay", &self.weight_decay);
        put(rec, "warmup_epochs", &self.warmup_epochs);
        put(rec, "grad_clip_norm", &self.grad_clip_norm);
        if self.no_flip {
            rec.set("horizontal_flip", false);
        }
    }
}

impl DetectArgs {
    pub fn apply(&self, rec: &mut KvRecord) {
        put(rec, "confidence_threshold", &self.tau);
        put(rec, "nms_iou_threshold", &self.nms_iou);
        put(rec, "max_detections", &self.max_detections);
    }
}
