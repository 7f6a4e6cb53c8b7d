use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde_json::json;

use effdet::bench::{
    create_run_dir, darken_dataset, default_device_label, measure_latency, pareto_report, render_svg,
    run_lowlight_study, write_report_csv, EfficiencyReport, LatencyReport, RunManifest,
};
use effdet::datasets::{
    letterbox, letterbox_sample, load_labeled, load_manifest, load_voc_xml, split_train_val, synth_shapes,
    take_first, LabeledImage,
};
use effdet::detnet::{load_checkpoint, save_checkpoint, train_with_progress, Checkpoint, Detector, InferenceConfig};
use effdet::evalap::{evaluate, read_detections_jsonl, write_detections_jsonl, write_eval_csv, write_eval_json, EvalImage};
use effdet::lowlight::{darken, enhance, Enhancement, PixelImage};
use effdet::scalecfg::{build_config, format_table_row, table, DepthSplit, ScalingSpec, TABLE_HEADER};
use effdet::{ClassMap, Error, EvalResult, KvRecord};

use crate::args::*;
use crate::config::{DatasetKind, RunConfig};

pub const OUTPUT_ROOT_ENV: &str = "EFFDET_OUTPUT_ROOT";

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub kind: &'static str,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            kind: "usage",
            message: message.into(),
        }
    }

    pub fn missing(path: &Path, what: &str) -> Self {
        Self {
            code: 3,
            kind: "missing_input",
            message: format!("{what} not found: {}", path.display()),
        }
    }

    pub fn to_json(&self) -> String {
        json!({"error": self.kind, "code": self.code, "message": self.message}).to_string()
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let (code, kind) = match &e {
            Error::Domain(_) | Error::Config(_) | Error::Parse { .. } | Error::Join(_) => (2, "usage"),
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => (3, "missing_input"),
            _ => (4, "runtime"),
        };
        Self {
            code,
            kind,
            message: e.to_string(),
        }
    }
}

type CmdResult<T = ()> = std::result::Result<T, CliError>;

fn require(path: &Path, what: &str) -> CmdResult {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::missing(path, what))
    }
}

pub fn run(cli: Cli) -> CmdResult {
    let root = cli
        .output_root
        .clone()
        .or_else(|| std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"));
    match cli.command {
        Command::Scale(a) => cmd_scale(&a),
        Command::Train(a) => cmd_train(&a, &root),
        Command::Infer(a) => cmd_infer(&a, &root),
        Command::Enhance(a) => cmd_enhance(&a, &root),
        Command::Eval(a) => cmd_eval(&a, &root),
        Command::Bench(a) => cmd_bench(&a, &root),
        Command::Study(a) => cmd_study(&a, &root),
    }
}

/// Config file, then flags, then validation.
fn resolve(common: &CommonArgs, flags: impl FnOnce(&mut KvRecord)) -> CmdResult<RunConfig> {
    let mut rec = match &common.config {
        Some(path) => {
            require(path, "config file")?;
            RunConfig::load_record(path)?
        }
        None => KvRecord::new(),
    };
    let mut overrides = KvRecord::new();
    common.apply(&mut overrides);
    flags(&mut overrides);
    rec.merge(&overrides);
    let cfg = RunConfig::from_record(&rec)?;
    cfg.validate()?;
    Ok(cfg)
}

fn run_dir(common: &CommonArgs, root: &Path, command: &str) -> CmdResult<PathBuf> {
    match &common.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| CliError {
                code: 4,
                kind: "runtime",
                message: format!("cannot create {}: {e}", dir.display()),
            })?;
            Ok(dir.clone())
        }
        None => Ok(create_run_dir(root, command)?),
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> CmdResult {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    std::fs::write(path, text + "\n").map_err(|e| CliError::from(io_err(path, e)))
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn finish(dir: &Path, manifest: RunManifest, cfg: &RunConfig) -> CmdResult {
    manifest.write(&dir.join("manifest.json"))?;
    cfg.to_record().write(&dir.join("run.cfg"))?;
    Ok(())
}

fn print_summary(value: serde_json::Value) {
    println!("{value}");
}

fn cmd_scale(a: &ScaleArgs) -> CmdResult {
    let split: DepthSplit = a.split.parse()?;
    let desk = |c: effdet::ArchitectureConfig| if a.desk { c.desk_scale() } else { c };
    let mut out = String::new();
    if a.table {
        // validates phi and split even though the table ignores --phi
        ScalingSpec::with_split(a.phi, split)?;
        out.push_str(TABLE_HEADER);
        out.push('\n');
        for (spec, cfg) in table(split, a.max_phi)? {
            out.push_str(&format_table_row(&spec, &desk(cfg)));
            out.push('\n');
        }
    } else {
        let spec = ScalingSpec::with_split(a.phi, split)?;
        let cfg = desk(build_config(&spec)?);
        out.push_str(&format!("architecture={}\n{}", spec.name(), cfg.to_record()));
    }
    print!("{out}");
    Ok(())
}

/// Letterboxed (train, validation) images at `resolution`.
fn load_data(cfg: &RunConfig, resolution: u32) -> CmdResult<(Vec<LabeledImage>, Vec<LabeledImage>, ClassMap)> {
    let classes = cfg.class_map()?;
    let all = match cfg.dataset {
        DatasetKind::Synth => {
            let n = cfg.take_first.map_or(cfg.synth_images, |t| t.min(cfg.synth_images));
            synth_shapes(n, resolution, cfg.synth_classes, cfg.seed)?
        }
        DatasetKind::Manifest | DatasetKind::Voc => {
            let path = cfg.dataset_path.as_ref().expect("validated");
            require(path, "dataset")?;
            let mut samples = if cfg.dataset == DatasetKind::Manifest {
                load_manifest(path, &classes)?
            } else {
                load_voc_xml(path, &classes)?
            };
            if let Some(n) = cfg.take_first {
                samples = take_first(&samples, n);
            }
            load_labeled(&samples)?
                .iter()
                .map(|s| letterbox_sample(s, resolution).map(|(s, _)| s))
                .collect::<effdet::Result<Vec<_>>>()?
        }
    };
    let (train, val) = split_train_val(&all, cfg.val_fraction, cfg.seed)?;
    Ok((train, val, classes))
}

fn evaluate_on(
    detector: &Detector,
    images: &[LabeledImage],
    infer: &InferenceConfig,
    classes: &ClassMap,
) -> effdet::Result<EvalResult> {
    let eval_images = images
        .iter()
        .map(|s| {
            Ok(EvalImage {
                image_id: s.id.clone(),
                detections: detector.infer(&s.image, infer)?,
                ground_truth: s.boxes.clone(),
            })
        })
        .collect::<effdet::Result<Vec<_>>>()?;
    evaluate(&eval_images, classes)
}

fn cmd_train(a: &TrainArgs, root: &Path) -> CmdResult {
    let cfg = resolve(&a.common, |r| {
        a.model.apply(r);
        a.data.apply(r);
        a.optim.apply(r);
        a.detect.apply(r);
    })?;
    let arch = cfg.architecture()?;
    let name = cfg.architecture_name()?;
    let (train_set, val_set, classes) = load_data(&cfg, arch.input_resolution)?;
    let dir = run_dir(&a.common, root, "train")?;
    log::info!("training {name} ({} train / {} val) into {}", train_set.len(), val_set.len(), dir.display());

    let mut detector = Detector::new(&arch, classes.len(), cfg.seed)?;
    let start = Instant::now();
    let history = train_with_progress(&mut detector, &train_set, &cfg.train_params(), |epoch, loss| {
        log::info!("epoch {}: loss {loss:.5} ({:.0}s)", epoch + 1, start.elapsed().as_secs_f64());
    })?;
    let train_seconds = start.elapsed().as_secs_f64();
    let checkpoint = dir.join("model.ckpt");
    save_checkpoint(&checkpoint, &detector, &classes, &name)?;
    write_json(&dir.join("history.json"), &history)?;
    let metrics = if val_set.is_empty() {
        None
    } else {
        let m = evaluate_on(&detector, &val_set, &cfg.inference()?, &classes)?;
        write_eval_json(&dir.join("metrics.json"), &m)?;
        Some(m)
    };
    finish(
        &dir,
        RunManifest::new("train", cfg.seed, &cfg.to_record())
            .with_input("checkpoint", checkpoint.display())
            .with_input("architecture", &name),
        &cfg,
    )?;
    print_summary(json!({
        "run_dir": dir,
        "checkpoint": checkpoint,
        "architecture": name,
        "train_images": train_set.len(),
        "val_images": val_set.len(),
        "final_loss": history.epoch_losses.last(),
        "train_seconds": train_seconds,
        "ap": metrics.as_ref().map(|m| m.ap),
        "ap50": metrics.as_ref().map(|m| m.ap50),
        "ap75": metrics.as_ref().map(|m| m.ap75),
    }));
    Ok(())
}

fn load_ckpt(path: &Path) -> CmdResult<Checkpoint> {
    require(path, "checkpoint")?;
    Ok(load_checkpoint(path)?)
}

/// Image keys of a manifest: entry paths relative to the manifest's directory.
fn manifest_keys(manifest: &Path, classes: &ClassMap) -> CmdResult<Vec<(String, effdet::AnnotatedSample)>> {
    let base = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(load_manifest(manifest, classes)?
        .into_iter()
        .map(|s| {
            let key = s
                .image_path
                .strip_prefix(&base)
                .unwrap_or(&s.image_path)
                .display()
                .to_string();
            (key, s)
        })
        .collect())
}

fn cmd_infer(a: &InferArgs, root: &Path) -> CmdResult {
    let cfg = resolve(&a.common, |r| a.detect.apply(r))?;
    let ck = load_ckpt(&a.checkpoint)?;
    let infer = cfg.inference()?;
    let mut inputs: Vec<(String, PathBuf)> = Vec::new();
    if let Some(m) = &a.manifest {
        require(m, "manifest")?;
        for (key, s) in manifest_keys(m, &ck.classes)? {
            inputs.push((key, s.image_path));
        }
    }
    for p in &a.images {
        inputs.push((p.display().to_string(), p.clone()));
    }
    if inputs.is_empty() {
        return Err(CliError::usage("no input images; pass image paths or --manifest"));
    }
    for (_, p) in &inputs {
        require(p, "image")?;
    }
    let dir = run_dir(&a.common, root, "infer")?;
    let pred_path = a.pred_out.clone().unwrap_or_else(|| dir.join("detections.jsonl"));
    let file = File::create(&pred_path).map_err(|e| CliError::from(io_err(&pred_path, e)))?;
    let mut out = BufWriter::new(file);
    let side = ck.detector.resolution() as u32;
    let mut total = 0;
    for (key, path) in &inputs {
        let image = PixelImage::load(path)?;
        let (boxed, lb) = letterbox(&image, side)?;
        let (w, h) = (image.width() as f64, image.height() as f64);
        let detections: Vec<_> = ck
            .detector
            .infer(&boxed, &infer)?
            .into_iter()
            .filter_map(|mut d| {
                d.bbox = lb.unmap_box(&d.bbox).clip(w, h);
                d.bbox.is_valid().then_some(d)
            })
            .collect();
        total += detections.len();
        write_detections_jsonl(&mut out, key, &detections, &ck.classes)?;
    }
    out.flush().map_err(|e| CliError::from(io_err(&pred_path, e)))?;
    finish(
        &dir,
        RunManifest::new("infer", cfg.seed, &cfg.to_record())
            .with_input("checkpoint", a.checkpoint.display())
            .with_input("images", inputs.iter().map(|(k, _)| k.as_str()).collect::<Vec<_>>().join(","))
            .with_input("detections", pred_path.display()),
        &cfg,
    )?;
    print_summary(json!({
        "run_dir": dir,
        "detections_file": pred_path,
        "images": inputs.len(),
        "detections": total,
        "confidence_threshold": infer.confidence_threshold,
    }));
    Ok(())
}

fn cmd_enhance(a: &EnhanceArgs, root: &Path) -> CmdResult {
    let cfg = resolve(&a.common, |_| {})?;
    let strategy = Enhancement::from_parts(&a.enhance, a.c, a.external_cmd.as_deref())?;
    require(&a.input, "input image")?;
    let image = PixelImage::load(&a.input)?;
    let dark = darken(&image, a.darken_offset)?;
    let result = enhance(&dark, &strategy)?;
    result.image.save(&a.output)?;
    let dir = run_dir(&a.common, root, "enhance")?;
    let manifest = RunManifest::new("enhance", cfg.seed, &cfg.to_record())
        .with_input("input", a.input.display())
        .with_input("output", a.output.display())
        .with_input("darken_offset", a.darken_offset)
        .with_input("enhance", strategy.label());
    finish(&dir, manifest, &cfg)?;
    print_summary(json!({
        "run_dir": dir,
        "output": a.output,
        "strategy": strategy.label(),
        "latency_seconds": result.latency_seconds,
        "timing": result.regime.as_str(),
    }));
    Ok(())
}

fn cmd_eval(a: &EvalArgs, root: &Path) -> CmdResult {
    let cfg = resolve(&a.common, |r| {
        if let Some(c) = &a.class_map {
            r.set("class_map", c);
        }
    })?;
    require(&a.pred, "detections file")?;
    require(&a.gt, "ground-truth manifest")?;
    let classes = cfg.class_map()?;
    let gt = manifest_keys(&a.gt, &classes)?;
    let mut preds = read_detections_jsonl(&a.pred, &classes)?;
    let mut images = Vec::with_capacity(gt.len());
    for (key, sample) in gt {
        images.push(EvalImage {
            detections: preds.remove(&key).unwrap_or_default(),
            image_id: key,
            ground_truth: sample.boxes,
        });
    }
    if !preds.is_empty() {
        let keys: Vec<String> = preds.into_keys().collect();
        return Err(CliError::usage(format!(
            "detections for images absent from the ground truth: {}",
            keys.join(", ")
        )));
    }
    let result = evaluate(&images, &classes)?;
    let dir = run_dir(&a.common, root, "eval")?;
    write_eval_json(&dir.join("eval.json"), &result)?;
    write_eval_csv(&dir.join("eval.csv"), &[(a.name.clone(), result.clone())])?;
    finish(
        &dir,
        RunManifest::new("eval", cfg.seed, &cfg.to_record())
            .with_input("pred", a.pred.display())
            .with_input("gt", a.gt.display()),
        &cfg,
    )?;
    let mut summary = serde_json::to_value(&result).map_err(Error::from)?;
    summary["run_dir"] = json!(dir);
    print_summary(summary);
    Ok(())
}

/// Checkpoints from flags, falling back to the config's list.
fn checkpoint_list(flags: &[PathBuf], cfg: &RunConfig) -> Vec<PathBuf> {
    if flags.is_empty() {
        cfg.checkpoints.clone()
    } else {
        flags.to_vec()
    }
}

/// Distinct row labels: repeated names get a `#n` suffix.
fn unique_labels(labels: Vec<String>) -> Vec<String> {
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    labels
        .into_iter()
        .map(|l| {
            let n = seen.entry(l.clone()).or_insert(0);
            *n += 1;
            if *n == 1 {
                l
            } else {
                format!("{l}#{n}")
            }
        })
        .collect()
}

fn write_latency_csv(path: &Path, reports: &[LatencyReport]) -> CmdResult {
    let mut w = csv::Writer::from_path(path).map_err(Error::from)?;
    let base = reports.first().map_or(1.0, |r| r.mean_ms);
    w.write_record(["architecture", "mean_ms", "std_ms", "ratio_to_first", "num_runs", "warmup_runs", "device"])
        .map_err(Error::from)?;
    for r in reports {
        w.write_record([
            r.architecture.clone(),
            format!("{:.3}", r.mean_ms),
            format!("{:.3}", r.std_ms),
            format!("{:.2}", r.mean_ms / base),
            r.num_runs.to_string(),
            r.warmup_runs.to_string(),
            r.device_label.clone(),
        ])
        .map_err(Error::from)?;
    }
    w.flush().map_err(|e| CliError::from(io_err(path, e)))
}

fn cmd_bench(a: &BenchArgs, root: &Path) -> CmdResult {
    let cfg = resolve(&a.common, |r| {
        a.data.apply(r);
        a.detect.apply(r);
        if let Some(s) = &a.split {
            r.set("split", s);
        }
        if let Some(v) = a.runs {
            r.set("runs", v);
        }
        if let Some(v) = a.warmup {
            r.set("warmup", v);
        }
        if let Some(v) = &a.device_label {
            r.set("device_label", v);
        }
    })?;
    let device = cfg.device_label.clone().unwrap_or_else(default_device_label);
    let infer = cfg.inference()?;
    let checkpoints = checkpoint_list(&a.checkpoints, &cfg);

    if let Some(max_phi) = a.sweep_phi {
        if !checkpoints.is_empty() {
            return Err(CliError::usage("--sweep-phi and checkpoints are mutually exclusive"));
        }
        let mut reports = Vec::new();
        for phi in 0..=max_phi {
            let spec = ScalingSpec::with_split(phi as i64, cfg.split)?;
            let arch = build_config(&spec)?.desk_scale();
            let detector = Detector::new(&arch, 2, cfg.seed)?;
            let images: Vec<PixelImage> = synth_shapes(4, arch.input_resolution, 2, cfg.seed)?
                .into_iter()
                .map(|s| s.image)
                .collect();
            log::info!("timing {} at {}", spec.name(), arch.input_resolution);
            reports.push(measure_latency(&spec.name(), &detector, &images, cfg.runs, cfg.warmup, &infer, &device)?);
        }
        let dir = run_dir(&a.common, root, "bench")?;
        write_latency_csv(&dir.join("latency.csv"), &reports)?;
        write_json(&dir.join("latency.json"), &reports)?;
        finish(
            &dir,
            RunManifest::new("bench", cfg.seed, &cfg.to_record()).with_input("sweep_phi", max_phi),
            &cfg,
        )?;
        print_summary(json!({"run_dir": dir, "latency": reports}));
        return Ok(());
    }

    if checkpoints.is_empty() {
        return Err(CliError::usage("bench needs --checkpoint or --sweep-phi"));
    }
    let loaded: Vec<Checkpoint> = checkpoints.iter().map(|p| load_ckpt(p)).collect::<CmdResult<_>>()?;
    let labels = unique_labels(loaded.iter().map(|c| c.label.clone()).collect());
    let mut evals = Vec::new();
    let mut latencies = Vec::new();
    for (ck, label) in loaded.iter().zip(&labels) {
        let (_, val, _) = load_data(&cfg, ck.detector.resolution() as u32)?;
        if val.is_empty() {
            return Err(CliError::usage("the validation split is empty; raise val_fraction"));
        }
        evals.push((label.clone(), evaluate_on(&ck.detector, &val, &infer, &ck.classes)?));
        let images: Vec<PixelImage> = val.iter().map(|s| s.image.clone()).collect();
        latencies.push(measure_latency(label, &ck.detector, &images, cfg.runs, cfg.warmup, &infer, &device)?);
    }
    let report = pareto_report(&evals, &latencies)?;
    let dir = run_dir(&a.common, root, "bench")?;
    write_outputs(&dir, &report)?;
    write_json(&dir.join("latency.json"), &latencies)?;
    finish(
        &dir,
        RunManifest::new("bench", cfg.seed, &cfg.to_record())
            .with_input("checkpoints", joined(&checkpoints)),
        &cfg,
    )?;
    print_summary(json!({"run_dir": dir, "rows": report.rows.len(), "pareto_optimal": report.pareto_optimal}));
    Ok(())
}

fn joined(paths: &[PathBuf]) -> String {
    paths.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(",")
}

fn write_outputs(dir: &Path, report: &EfficiencyReport) -> CmdResult {
    write_report_csv(&dir.join("report.csv"), report)?;
    std::fs::write(dir.join("frontier.svg"), render_svg(report))
        .map_err(|e| CliError::from(io_err(&dir.join("frontier.svg"), e)))?;
    write_json(&dir.join("report.json"), report)
}

fn cmd_study(a: &StudyArgs, root: &Path) -> CmdResult {
    let cfg = resolve(&a.common, |r| {
        a.data.apply(r);
        a.detect.apply(r);
        if let Some(v) = a.darken_offset {
            r.set("darken_offset", v);
        }
        if let Some(v) = &a.strategies {
            r.set("strategies", v);
        }
        if let Some(v) = &a.external_cmd {
            r.set("external_cmd", v);
        }
    })?;
    let checkpoints = checkpoint_list(&a.checkpoints, &cfg);
    if checkpoints.is_empty() {
        return Err(CliError::usage("study needs at least one --checkpoint"));
    }
    let loaded: Vec<Checkpoint> = checkpoints.iter().map(|p| load_ckpt(p)).collect::<CmdResult<_>>()?;
    let labels = unique_labels(loaded.iter().map(|c| c.label.clone()).collect());
    let strategies = cfg.enhancement_strategies()?;
    let infer = cfg.inference()?;
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (ck, label) in loaded.iter().zip(&labels) {
        let (_, val, _) = load_data(&cfg, ck.detector.resolution() as u32)?;
        if val.is_empty() {
            return Err(CliError::usage("the validation split is empty; raise val_fraction"));
        }
        let dark = darken_dataset(&val, cfg.darken_offset)?;
        let part = run_lowlight_study(&[(label.clone(), &ck.detector)], &dark, &strategies, &infer, &ck.classes)?;
        rows.extend(part.rows);
        failures.extend(part.failures);
    }
    let report = EfficiencyReport::from_rows(rows, failures);
    let dir = run_dir(&a.common, root, "study")?;
    write_outputs(&dir, &report)?;
    finish(
        &dir,
        RunManifest::new("study", cfg.seed, &cfg.to_record()).with_input("checkpoints", joined(&checkpoints)),
        &cfg,
    )?;
    print_summary(json!({
        "run_dir": dir,
        "rows": report.rows.len(),
        "failures": report.failures.len(),
    }));
    Ok(())
}
