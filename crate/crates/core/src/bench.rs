//! Latency measurement and accuracy-versus-latency reporting.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::datasets::{ClassMap, LabeledImage};
use crate::detnet::{Detector, InferenceConfig};
use crate::error::{Error, Result};
use crate::evalap::{evaluate, EvalImage, EvalResult};
use crate::kv::KvRecord;
use crate::lowlight::{darken, enhance, Enhancement, PixelImage, TimingRegime};

/// Serializes timing runs within the process.
static TIMING_LOCK: Mutex<()> = Mutex::new(());

/// Time source for [`time_runs`]. Tests inject fakes.
pub trait Clock {
    fn now(&mut self) -> Duration;
    fn resolution(&self) -> Duration;
}

pub struct MonotonicClock {
    origin: Instant,
    resolution: Duration,
}

impl MonotonicClock {
    pub fn new() -> Self {
        Self {
            origin: Instant::now(),
            resolution: estimate_resolution(),
        }
    }
}

impl Default for MonotonicClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for MonotonicClock {
    fn now(&mut self) -> Duration {
        self.origin.elapsed()
    }

    fn resolution(&self) -> Duration {
        self.resolution
    }
}

/// Smallest observed nonzero step of `Instant`.
pub fn estimate_resolution() -> Duration {
    let mut best = Duration::MAX;
    for _ in 0..64 {
        let a = Instant::now();
        let mut b = Instant::now();
        while b == a {
            b = Instant::now();
        }
        best = best.min(b - a);
    }
    best
}

pub fn default_device_label() -> String {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!("{}-{} cpu, {threads} threads", std::env::consts::OS, std::env::consts::ARCH)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub architecture: String,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub num_runs: usize,
    pub warmup_runs: usize,
    pub device_label: String,
    pub timer_resolution_ns: u64,
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Runs `run(i)` for `warmup_runs` untimed and then `num_runs` timed
/// iterations; returns the timed durations in milliseconds.
pub fn time_runs<C: Clock>(
    clock: &mut C,
    num_runs: usize,
    warmup_runs: usize,
    mut run: impl FnMut(usize) -> Result<()>,
) -> Result<Vec<f64>> {
    if num_runs == 0 {
        return Err(Error::Domain("num_runs must be >= 1".into()));
    }
    let _guard = TIMING_LOCK.lock().unwrap_or_else(|p| p.into_inner());
    for i in 0..warmup_runs {
        run(i)?;
    }
    let mut samples = Vec::with_capacity(num_runs);
    for i in 0..num_runs {
        let start = clock.now();
        run(warmup_runs + i)?;
        let end = clock.now();
        samples.push((end - start).as_secs_f64() * 1e3);
    }
    Ok(samples)
}

/// Batch-1 inference latency, cycling through `images`.
pub fn measure_latency(
    architecture: &str,
    detector: &Detector,
    images: &[PixelImage],
    num_runs: usize,
    warmup_runs: usize,
    cfg: &InferenceConfig,
    device_label: &str,
) -> Result<LatencyReport> {
    measure_latency_with(
        &mut MonotonicClock::new(),
        architecture,
        detector,
        images,
        num_runs,
        warmup_runs,
        cfg,
        device_label,
    )
}

#[allow(clippy::too_many_arguments)]
pub fn measure_latency_with<C: Clock>(
    clock: &mut C,
    architecture: &str,
    detector: &Detector,
    images: &[PixelImage],
    num_runs: usize,
    warmup_runs: usize,
    cfg: &InferenceConfig,
    device_label: &str,
) -> Result<LatencyReport> {
    if images.is_empty() {
        return Err(Error::Input("latency measurement needs at least one image".into()));
    }
    let samples = time_runs(clock, num_runs, warmup_runs, |i| {
        detector.infer(&images[i % images.len()], cfg).map(drop)
    })?;
    let (mean_ms, std_ms) = mean_std(&samples);
    Ok(LatencyReport {
        architecture: architecture.to_string(),
        mean_ms,
        std_ms,
        num_runs,
        warmup_runs,
        device_label: device_label.to_string(),
        timer_resolution_ns: clock.resolution().as_nanos() as u64,
    })
}

/// One accuracy/latency row of an efficiency report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyRow {
    pub architecture: String,
    pub enhancement: String,
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub latency_ms: f64,
    pub latency_std_ms: f64,
    /// Mean per image; 0 without enhancement.
    pub enhancement_latency_ms: f64,
    pub enhancement_timing: TimingRegime,
}

impl EfficiencyRow {
    pub fn total_latency_ms(&self) -> f64 {
        self.latency_ms + self.enhancement_latency_ms
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyFailure {
    pub architecture: String,
    pub enhancement: String,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyReport {
    pub rows: Vec<EfficiencyRow>,
    /// Parallel to `rows`.
    pub pareto_optimal: Vec<bool>,
    /// Pairs that produced no row.
    pub failures: Vec<StudyFailure>,
}

/// Marks points not strictly dominated, i.e. with no other point having both
/// strictly higher AP and strictly lower latency. Input is `(ap, latency)`.
// Negated so that a NaN AP counts as undominated, as in the pairwise definition.
#[allow(clippy::neg_cmp_op_on_partial_ord)]
pub fn pareto_flags(points: &[(f64, f64)]) -> Vec<bool> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| points[a].1.total_cmp(&points[b].1));
    let mut flags = vec![false; points.len()];
    let mut best_faster = f64::NEG_INFINITY;
    let mut i = 0;
    while i < order.len() {
        // equal latencies cannot dominate each other
        let mut j = i;
        while j < order.len() && points[order[j]].1 == points[order[i]].1 {
            j += 1;
        }
        for &k in &order[i..j] {
            flags[k] = !(best_faster > points[k].0);
        }
        for &k in &order[i..j] {
            best_faster = best_faster.max(points[k].0);
        }
        i = j;
    }
    flags
}

impl EfficiencyReport {
    pub fn from_rows(rows: Vec<EfficiencyRow>, failures: Vec<StudyFailure>) -> Self {
        let points: Vec<(f64, f64)> = rows.iter().map(|r| (r.ap, r.total_latency_ms())).collect();
        Self {
            pareto_optimal: pareto_flags(&points),
            rows,
            failures,
        }
    }
}

/// Joins accuracy and latency by architecture name and flags the frontier.
pub fn pareto_report(evals: &[(String, EvalResult)], latencies: &[LatencyReport]) -> Result<EfficiencyReport> {
    let mut offenders: Vec<String> = evals
        .iter()
        .filter(|(k, _)| !latencies.iter().any(|l| &l.architecture == k))
        .map(|(k, _)| format!("{k} (no latency)"))
        .collect();
    offenders.extend(
        latencies
            .iter()
            .filter(|l| !evals.iter().any(|(k, _)| k == &l.architecture))
            .map(|l| format!("{} (no accuracy)", l.architecture)),
    );
    if !offenders.is_empty() {
        return Err(Error::Join(offenders));
    }
    let rows = evals
        .iter()
        .map(|(k, e)| {
            let l = latencies.iter().find(|l| &l.architecture == k).expect("joined");
            EfficiencyRow {
                architecture: k.clone(),
                enhancement: Enhancement::None.label(),
                ap: e.ap,
                ap50: e.ap50,
                ap75: e.ap75,
                latency_ms: l.mean_ms,
                latency_std_ms: l.std_ms,
                enhancement_latency_ms: 0.0,
                enhancement_timing: TimingRegime::InProcess,
            }
        })
        .collect();
    Ok(EfficiencyReport::from_rows(rows, Vec::new()))
}

pub const REPORT_COLUMNS: [&str; 12] = [
    "architecture",
    "enhancement",
    "AP",
    "AP50",
    "AP75",
    "latency_ms",
    "latency_std_ms",
    "enhancement_latency_ms",
    "total_latency_ms",
    "enhancement_timing",
    "pareto_optimal",
    "status",
];

pub fn write_report_csv(path: &Path, report: &EfficiencyReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(REPORT_COLUMNS)?;
    for (r, &p) in report.rows.iter().zip(&report.pareto_optimal) {
        w.write_record([
            r.architecture.clone(),
            r.enhancement.clone(),
            format!("{:.2}", r.ap),
            format!("{:.2}", r.ap50),
            format!("{:.2}", r.ap75),
            format!("{:.3}", r.latency_ms),
            format!("{:.3}", r.latency_std_ms),
            format!("{:.4}", r.enhancement_latency_ms),
            format!("{:.3}", r.total_latency_ms()),
            r.enhancement_timing.as_str().to_string(),
            p.to_string(),
            "ok".to_string(),
        ])?;
    }
    for f in &report.failures {
        let mut rec = vec![String::new(); REPORT_COLUMNS.len()];
        rec[0] = f.architecture.clone();
        rec[1] = f.enhancement.clone();
        rec[11] = format!("failed: {}", f.error.replace('\n', " "));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// AP versus total latency scatter; frontier points are filled and joined.
pub fn render_svg(report: &EfficiencyReport) -> String {
    const W: f64 = 640.0;
    const H: f64 = 420.0;
    const M: f64 = 60.0;
    let max_lat = report
        .rows
        .iter()
        .map(EfficiencyRow::total_latency_ms)
        .fold(0.0, f64::max)
        .max(1e-6)
        * 1.1;
    let x = |lat: f64| M + lat / max_lat * (W - 2.0 * M);
    let y = |ap: f64| H - M - ap / 100.0 * (H - 2.0 * M);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<line x1="{M}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, H - M, W - M, H - M);
    let _ = writeln!(s, r#"<line x1="{M}" y1="{M}" x2="{M}" y2="{}" stroke="black"/>"#, H - M);
    for t in 0..=5 {
        let ap = t as f64 * 20.0;
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{ap}</text>"#, M - 6.0, y(ap) + 4.0);
        let lat = max_lat * t as f64 / 5.0;
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{lat:.1}</text>"#, x(lat), H - M + 16.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">latency (ms)</text>"#, W / 2.0, H - 15.0);
    let _ = writeln!(s, r#"<text x="15" y="{}" transform="rotate(-90 15 {})" text-anchor="middle">AP</text>"#, H / 2.0, H / 2.0);

    let mut frontier: Vec<&EfficiencyRow> = report
        .rows
        .iter()
        .zip(&report.pareto_optimal)
        .filter(|(_, &p)| p)
        .map(|(r, _)| r)
        .collect();
    frontier.sort_by(|a, b| a.total_latency_ms().total_cmp(&b.total_latency_ms()));
    if frontier.len() > 1 {
        let pts: Vec<String> = frontier
            .iter()
            .map(|r| format!("{:.1},{:.1}", x(r.total_latency_ms()), y(r.ap)))
            .collect();
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="steelblue" stroke-dasharray="4 3"/>"#, pts.join(" "));
    }
    for (r, &p) in report.rows.iter().zip(&report.pareto_optimal) {
        let (cx, cy) = (x(r.total_latency_ms()), y(r.ap));
        let fill = if p { "steelblue" } else { "white" };
        let _ = writeln!(s, r#"<circle cx="{cx:.1}" cy="{cy:.1}" r="4" fill="{fill}" stroke="steelblue"/>"#);
        let label = xml_escape(&format!("{} [{}]", r.architecture, r.enhancement));
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}">{label}</text>"#, cx + 6.0, cy - 6.0);
    }
    s.push_str("</svg>\n");
    s
}

/// Darkens every image of a labeled set; annotations are unchanged.
pub fn darken_dataset(samples: &[LabeledImage], offset: i64) -> Result<Vec<LabeledImage>> {
    samples
        .iter()
        .map(|s| {
            Ok(LabeledImage {
                id: s.id.clone(),
                image: darken(&s.image, offset)?,
                boxes: s.boxes.clone(),
            })
        })
        .collect()
}

/// Enhances, detects and evaluates every (detector, strategy) pair.
///
/// Enhancement and detection are timed separately per image. A pair whose
/// enhancement fails is recorded in `failures` and produces no row.
pub fn run_lowlight_study(
    detectors: &[(String, &Detector)],
    darkened: &[LabeledImage],
    strategies: &[Enhancement],
    cfg: &InferenceConfig,
    classes: &ClassMap,
) -> Result<EfficiencyReport> {
    let _guard = TIMING_LOCK.lock().unwrap_or_else(|p| p.into_inner());
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (name, detector) in detectors {
        for strategy in strategies {
            match study_pair(detector, darkened, strategy, cfg, classes) {
                Ok((eval, det_ms, enh_ms, regime)) => {
                    let (latency_ms, latency_std_ms) = mean_std(&det_ms);
                    let (enhancement_latency_ms, _) = mean_std(&enh_ms);
                    rows.push(EfficiencyRow {
                        architecture: name.clone(),
                        enhancement: strategy.label(),
                        ap: eval.ap,
                        ap50: eval.ap50,
                        ap75: eval.ap75,
                        latency_ms,
                        latency_std_ms,
                        enhancement_latency_ms,
                        enhancement_timing: regime,
                    });
                }
                Err(e @ Error::Enhancement(_)) => {
                    log::warn!("{name} with {}: {e}", strategy.label());
                    failures.push(StudyFailure {
                        architecture: name.clone(),
                        enhancement: strategy.label(),
                        error: e.to_string(),
                    });
                }
                Err(e) => return Err(e),
            }
        }
    }
    Ok(EfficiencyReport::from_rows(rows, failures))
}

type PairOutcome = (EvalResult, Vec<f64>, Vec<f64>, TimingRegime);

fn study_pair(
    detector: &Detector,
    darkened: &[LabeledImage],
    strategy: &Enhancement,
    cfg: &InferenceConfig,
    classes: &ClassMap,
) -> Result<PairOutcome> {
    let mut images = Vec::with_capacity(darkened.len());
    let mut det_ms = Vec::with_capacity(darkened.len());
    let mut enh_ms = Vec::with_capacity(darkened.len());
    let mut regime = TimingRegime::InProcess;
    for s in darkened {
        let enhanced = enhance(&s.image, strategy)?;
        enh_ms.push(enhanced.latency_seconds * 1e3);
        regime = enhanced.regime;
        let start = Instant::now();
        let detections = detector.infer(&enhanced.image, cfg)?;
        det_ms.push(start.elapsed().as_secs_f64() * 1e3);
        images.push(EvalImage {
            image_id: s.id.clone(),
            detections,
            ground_truth: s.boxes.clone(),
        });
    }
    Ok((evaluate(&images, classes)?, det_ms, enh_ms, regime))
}

/// Reproducibility record written next to every command's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub created_unix: u64,
    pub device_label: String,
    pub timer_resolution_ns: u64,
    /// Fully resolved configuration, key to value.
    pub config: std::collections::BTreeMap<String, String>,
    /// Command-specific inputs and outputs such as file paths.
    #[serde(default)]
    pub inputs: std::collections::BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, config: &KvRecord) -> Self {
        Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            created_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_secs()),
            device_label: default_device_label(),
            timer_resolution_ns: estimate_resolution().as_nanos() as u64,
            config: config.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
            inputs: Default::default(),
        }
    }

    pub fn with_input(mut self, key: &str, value: impl std::fmt::Display) -> Self {
        self.inputs.insert(key.to_string(), value.to_string());
        self
    }

    /// The configuration back as a key-value record.
    pub fn config_record(&self) -> KvRecord {
        let mut r = KvRecord::new();
        for (k, v) in &self.config {
            r.set(k, v);
        }
        r
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))
    }
}

/// Creates `<root>/<command>-<unix seconds>[-n]`, unique within `root`.
pub fn create_run_dir(root: &Path, command: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let stamp = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs());
    for n in 0.. {
        let name = if n == 0 {
            format!("{command}-{stamp}")
        } else {
            format!("{command}-{stamp}-{n}")
        };
        let dir = root.join(name);
        match std::fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(Error::io(&dir, e)),
        }
    }
    unreachable!()
}
