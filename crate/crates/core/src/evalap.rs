//! COCO-style AP, AP50 and AP75.
//!
//! Per class and IoU threshold, detections are ranked by descending score
//! (ties by image id, then by position in the image's list). Each one claims
//! the unmatched same-image ground truth with the highest IoU at or above the
//! threshold, lower ground-truth index winning IoU ties. Precision is
//! interpolated at the 101 recall points 0, 0.01, ..., 1. AP averages the ten
//! thresholds 0.50, 0.55, ..., 0.95, and classes without ground truth are left
//! out of the macro average.

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::datasets::{ClassMap, GroundTruthBox};
use crate::detnet::Detection;
use crate::error::{Error, Result};

pub const NUM_IOU_THRESHOLDS: usize = 10;
pub const NUM_RECALL_POINTS: usize = 101;
/// Per-class detection cap of the exhaustive evaluator.
pub const BRUTEFORCE_MAX_DETECTIONS: usize = 12;
const BRUTEFORCE_MAX_MATCHINGS: u64 = 50_000_000;

pub fn iou_threshold(i: usize) -> f64 {
    (50.0 + 5.0 * i as f64) / 100.0
}

fn recall_point(i: usize) -> f64 {
    i as f64 / 100.0
}

/// Checked IoU; degenerate boxes are a domain error.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    for bx in [a, b] {
        if !bx.is_valid() {
            return Err(Error::Domain(format!("degenerate box {bx:?}")));
        }
    }
    Ok(a.iou(b))
}

/// Predictions and annotations of one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalImage {
    pub image_id: String,
    pub detections: Vec<Detection>,
    pub ground_truth: Vec<GroundTruthBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class_id: usize,
    pub name: String,
    pub num_ground_truth: usize,
    pub num_detections: usize,
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
}

/// Percentages in [0, 100].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    /// Only classes that have ground truth.
    pub per_class: Vec<ClassAp>,
    /// Set when no class has any ground truth; metrics are then 0.
    pub empty_ground_truth: bool,
}

fn validate(images: &[EvalImage], classes: &ClassMap) -> Result<()> {
    let mut ids = HashSet::new();
    for img in images {
        if !ids.insert(img.image_id.as_str()) {
            return Err(Error::Domain(format!("duplicate image id `{}`", img.image_id)));
        }
        for g in &img.ground_truth {
            if g.class_id >= classes.len() || !g.bbox.is_valid() {
                return Err(Error::Domain(format!(
                    "invalid ground truth {g:?} in image `{}`",
                    img.image_id
                )));
            }
        }
        for d in &img.detections {
            if d.class_id >= classes.len() || !d.bbox.is_valid() || !d.score.is_finite() {
                return Err(Error::Domain(format!(
                    "invalid detection {d:?} in image `{}`",
                    img.image_id
                )));
            }
        }
    }
    Ok(())
}

/// (image, detection index) of every class-`c` detection, best first.
fn ranked(images: &[EvalImage], c: usize) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = images
        .iter()
        .enumerate()
        .flat_map(|(i, img)| {
            img.detections
                .iter()
                .enumerate()
                .filter(move |(_, d)| d.class_id == c)
                .map(move |(j, _)| (i, j))
        })
        .collect();
    out.sort_by(|&(ia, ja), &(ib, jb)| {
        let (a, b) = (&images[ia], &images[ib]);
        b.detections[jb]
            .score
            .total_cmp(&a.detections[ja].score)
            .then_with(|| a.image_id.cmp(&b.image_id))
            .then(ja.cmp(&jb))
    });
    out
}

fn count_gt(images: &[EvalImage], c: usize) -> usize {
    images
        .iter()
        .map(|img| img.ground_truth.iter().filter(|g| g.class_id == c).count())
        .sum()
}

fn interpolated_ap(tp_flags: &[bool], num_gt: usize) -> f64 {
    let mut precision = Vec::with_capacity(tp_flags.len());
    let mut recall = Vec::with_capacity(tp_flags.len());
    let mut tp = 0usize;
    for (k, &hit) in tp_flags.iter().enumerate() {
        tp += hit as usize;
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(tp as f64 / num_gt as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut sum = 0.0;
    let mut k = 0;
    for i in 0..NUM_RECALL_POINTS {
        let r = recall_point(i);
        while k < recall.len() && recall[k] < r {
            k += 1;
        }
        if k < recall.len() {
            sum += precision[k];
        }
    }
    sum / NUM_RECALL_POINTS as f64
}

fn greedy_flags(images: &[EvalImage], order: &[(usize, usize)], c: usize, t: f64) -> Vec<bool> {
    let mut taken: Vec<Vec<bool>> = images
        .iter()
        .map(|img| vec![false; img.ground_truth.len()])
        .collect();
    order
        .iter()
        .map(|&(i, j)| {
            let det = &images[i].detections[j].bbox;
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in images[i].ground_truth.iter().enumerate() {
                if gt.class_id != c || taken[i][g] {
                    continue;
                }
                let v = det.iou(&gt.bbox);
                if v >= t && best.is_none_or(|(_, b)| v > b) {
                    best = Some((g, v));
                }
            }
            if let Some((g, _)) = best {
                taken[i][g] = true;
            }
            best.is_some()
        })
        .collect()
}

fn assemble(classes: &ClassMap, per_class_thresholds: Vec<(usize, usize, usize, [f64; NUM_IOU_THRESHOLDS])>) -> EvalResult {
    if per_class_thresholds.is_empty() {
        return EvalResult {
            ap: 0.0,
            ap50: 0.0,
            ap75: 0.0,
            per_class: Vec::new(),
            empty_ground_truth: true,
        };
    }
    let per_class: Vec<ClassAp> = per_class_thresholds
        .into_iter()
        .map(|(c, num_gt, num_det, aps)| ClassAp {
            class_id: c,
            name: classes.name_of(c).unwrap_or_default().to_string(),
            num_ground_truth: num_gt,
            num_detections: num_det,
            ap: 100.0 * aps.iter().sum::<f64>() / NUM_IOU_THRESHOLDS as f64,
            ap50: 100.0 * aps[0],
            ap75: 100.0 * aps[5],
        })
        .collect();
    let n = per_class.len() as f64;
    EvalResult {
        ap: per_class.iter().map(|c| c.ap).sum::<f64>() / n,
        ap50: per_class.iter().map(|c| c.ap50).sum::<f64>() / n,
        ap75: per_class.iter().map(|c| c.ap75).sum::<f64>() / n,
        per_class,
        empty_ground_truth: false,
    }
}

pub fn evaluate(images: &[EvalImage], classes: &ClassMap) -> Result<EvalResult> {
    validate(images, classes)?;
    let mut rows = Vec::new();
    for c in 0..classes.len() {
        let num_gt = count_gt(images, c);
        if num_gt == 0 {
            continue;
        }
        let order = ranked(images, c);
        let mut aps = [0.0; NUM_IOU_THRESHOLDS];
        for (ti, ap) in aps.iter_mut().enumerate() {
            let flags = greedy_flags(images, &order, c, iou_threshold(ti));
            *ap = interpolated_ap(&flags, num_gt);
        }
        rows.push((c, num_gt, order.len(), aps));
    }
    Ok(assemble(classes, rows))
}

/// Exhaustive reference evaluator for small instances.
///
/// Enumerates every partial one-to-one assignment of detections to
/// same-image ground truth at IoU >= t, keeps the lexicographically best one
/// under the ranking (each detection preferring a match, then higher IoU,
/// then lower ground-truth index), and evaluates precision at each recall
/// point by scanning all ranks. Refuses classes with more than
/// [`BRUTEFORCE_MAX_DETECTIONS`] detections.
pub fn evaluate_bruteforce(images: &[EvalImage], classes: &ClassMap) -> Result<EvalResult> {
    validate(images, classes)?;
    let mut rows = Vec::new();
    for c in 0..classes.len() {
        let num_gt = count_gt(images, c);
        if num_gt == 0 {
            continue;
        }
        let order = ranked(images, c);
        if order.len() > BRUTEFORCE_MAX_DETECTIONS {
            return Err(Error::TooLarge(format!(
                "class {c} has {} detections, limit {BRUTEFORCE_MAX_DETECTIONS}",
                order.len()
            )));
        }
        let mut aps = [0.0; NUM_IOU_THRESHOLDS];
        for (ti, ap) in aps.iter_mut().enumerate() {
            let t = iou_threshold(ti);
            // candidate ground truth per ranked detection, as (key, gt id)
            let options: Vec<Vec<Candidate>> = order
                .iter()
                .map(|&(i, j)| {
                    let det = &images[i].detections[j].bbox;
                    images[i]
                        .ground_truth
                        .iter()
                        .enumerate()
                        .filter(|(_, g)| g.class_id == c)
                        .map(|(g, gt)| (det.iou(&gt.bbox), g))
                        .filter(|&(v, _)| v >= t)
                        .map(|(v, g)| ((v, -(g as i64)), (i, g)))
                        .collect()
                })
                .collect();
            let mut search = Search {
                options: &options,
                used: HashSet::new(),
                current: Vec::new(),
                best: None,
                visited: 0,
            };
            search.run(0)?;
            let best = search.best.expect("the empty matching always exists");
            let flags: Vec<bool> = best.iter().map(Option::is_some).collect();
            *ap = ap_by_definition(&flags, num_gt);
        }
        rows.push((c, num_gt, order.len(), aps));
    }
    Ok(assemble(classes, rows))
}

type Key = Option<(f64, i64)>;
/// Ranking key and (image, ground-truth index) of one admissible match.
type Candidate = ((f64, i64), (usize, usize));

struct Search<'a> {
    options: &'a [Vec<Candidate>],
    used: HashSet<(usize, usize)>,
    current: Vec<Key>,
    best: Option<Vec<Key>>,
    visited: u64,
}

fn key_cmp(a: &Key, b: &Key) -> std::cmp::Ordering {
    match (a, b) {
        (None, None) => std::cmp::Ordering::Equal,
        (None, Some(_)) => std::cmp::Ordering::Less,
        (Some(_), None) => std::cmp::Ordering::Greater,
        (Some(x), Some(y)) => x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)),
    }
}

impl Search<'_> {
    fn run(&mut self, k: usize) -> Result<()> {
        if k == self.options.len() {
            self.visited += 1;
            if self.visited > BRUTEFORCE_MAX_MATCHINGS {
                return Err(Error::TooLarge("too many matchings to enumerate".into()));
            }
            let better = match &self.best {
                None => true,
                Some(best) => {
                    let ord = self
                        .current
                        .iter()
                        .zip(best)
                        .map(|(a, b)| key_cmp(a, b))
                        .find(|o| o.is_ne())
                        .unwrap_or(std::cmp::Ordering::Equal);
                    ord.is_gt()
                }
            };
            if better {
                self.best = Some(self.current.clone());
            }
            return Ok(());
        }
        self.current.push(None);
        self.run(k + 1)?;
        self.current.pop();
        for &(key, gt) in &self.options[k] {
            if self.used.insert(gt) {
                self.current.push(Some(key));
                self.run(k + 1)?;
                self.current.pop();
                self.used.remove(&gt);
            }
        }
        Ok(())
    }
}

/// Interpolated precision at each recall point as the maximum precision over
/// all ranks reaching that recall.
fn ap_by_definition(flags: &[bool], num_gt: usize) -> f64 {
    let points: Vec<(f64, f64)> = (1..=flags.len())
        .map(|k| {
            let tp = flags[..k].iter().filter(|&&f| f).count();
            (tp as f64 / k as f64, tp as f64 / num_gt as f64)
        })
        .collect();
    let mut sum = 0.0;
    for i in 0..NUM_RECALL_POINTS {
        let r = recall_point(i);
        let p = points
            .iter()
            .filter(|(_, rec)| *rec >= r)
            .map(|(p, _)| *p)
            .fold(None, |acc: Option<f64>, p| Some(acc.map_or(p, |a| a.max(p))));
        if let Some(p) = p {
            sum += p;
        }
    }
    sum / NUM_RECALL_POINTS as f64
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum ClassField {
    Id(usize),
    Name(String),
}

#[derive(Debug, Deserialize)]
struct DetectionLine {
    image: String,
    #[serde(rename = "box")]
    bbox: [f64; 4],
    class: ClassField,
    score: f64,
}

/// Reads `{"image", "box": [x_min, y_min, x_max, y_max], "class", "score"}`
/// lines, keyed by image. `class` may be a name or an id.
pub fn read_detections_jsonl(path: &Path, classes: &ClassMap) -> Result<BTreeMap<String, Vec<Detection>>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out: BTreeMap<String, Vec<Detection>> = BTreeMap::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DetectionLine = serde_json::from_str(&line)
            .map_err(|e| Error::parse(path, format!("line {}: {e}", n + 1)))?;
        let class_id = match rec.class {
            ClassField::Id(id) if id < classes.len() => id,
            ClassField::Name(ref name) if classes.id_of(name).is_some() => classes.id_of(name).unwrap(),
            other => return Err(Error::parse(path, format!("line {}: unknown class {other:?}", n + 1))),
        };
        let [x0, y0, x1, y1] = rec.bbox;
        let bbox = BBox::new(x0, y0, x1, y1).map_err(|e| Error::parse(path, format!("line {}: {e}", n + 1)))?;
        out.entry(rec.image).or_default().push(Detection {
            bbox,
            class_id,
            score: rec.score,
        });
    }
    Ok(out)
}

#[derive(Serialize)]
struct DetectionLineOut<'a> {
    image: &'a str,
    #[serde(rename = "box")]
    bbox: [f64; 4],
    class: &'a str,
    score: f64,
}

pub fn write_detections_jsonl(
    out: &mut impl Write,
    image: &str,
    detections: &[Detection],
    classes: &ClassMap,
) -> Result<()> {
    for d in detections {
        let line = DetectionLineOut {
            image,
            bbox: [d.bbox.x_min, d.bbox.y_min, d.bbox.x_max, d.bbox.y_max],
            class: classes.name_of(d.class_id).unwrap_or("?"),
            score: d.score,
        };
        serde_json::to_writer(&mut *out, &line)?;
        writeln!(out).map_err(|e| Error::io("<detections>", e))?;
    }
    Ok(())
}

pub fn write_eval_json(path: &Path, result: &EvalResult) -> Result<()> {
    let json = serde_json::to_string_pretty(result)?;
    std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
}

/// One `architecture,AP,AP50,AP75` row per result, one decimal place.
pub fn write_eval_csv(path: &Path, rows: &[(String, EvalResult)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["architecture", "AP", "AP50", "AP75"])?;
    for (name, r) in rows {
        w.write_record([
            name.clone(),
            format!("{:.1}", r.ap),
            format!("{:.1}", r.ap50),
            format!("{:.1}", r.ap75),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
        BBox::new_unchecked(x0, y0, x1, y1)
    }

    fn det(bbox: BBox, score: f64) -> Detection {
        Detection {
            bbox,
            class_id: 0,
            score,
        }
    }

    fn gt(bbox: BBox) -> GroundTruthBox {
        GroundTruthBox { bbox, class_id: 0 }
    }

    fn one_class() -> ClassMap {
        ClassMap::from_names(&["obj"]).unwrap()
    }

    fn single(dets: Vec<Detection>, gts: Vec<GroundTruthBox>) -> Vec<EvalImage> {
        vec![EvalImage {
            image_id: "img".into(),
            detections: dets,
            ground_truth: gts,
        }]
    }

    #[test]
    fn iou_examples() {
        let a = b(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &b(20.0, 20.0, 30.0, 30.0)).unwrap(), 0.0);
        let v = iou(&a, &b(5.0, 5.0, 15.0, 15.0)).unwrap();
        assert!((v - 25.0 / 175.0).abs() < 1e-12);
        assert!(iou(&a, &b(3.0, 3.0, 3.0, 9.0)).is_err());
    }

    #[test]
    fn partial_overlap_counts_at_50_not_75() {
        // IoU of (0,0,10,10) and (0,0,10,16.6667) = 100 / 166.667 = 0.6
        let images = single(
            vec![det(b(0.0, 0.0, 10.0, 50.0 / 3.0), 0.9)],
            vec![gt(b(0.0, 0.0, 10.0, 10.0))],
        );
        let r = evaluate(&images, &one_class()).unwrap();
        assert_eq!(r.ap50, 100.0);
        assert_eq!(r.ap75, 0.0);
        assert_eq!(r, evaluate_bruteforce(&images, &one_class()).unwrap());
    }

    #[test]
    fn perfect_and_empty() {
        let g = b(1.0, 1.0, 20.0, 20.0);
        let r = evaluate(&single(vec![det(g, 0.5)], vec![gt(g)]), &one_class()).unwrap();
        assert_eq!((r.ap, r.ap50, r.ap75), (100.0, 100.0, 100.0));
        let r = evaluate(&single(vec![], vec![gt(g)]), &one_class()).unwrap();
        assert_eq!((r.ap, r.ap50, r.ap75), (0.0, 0.0, 0.0));
        assert!(!r.empty_ground_truth);
        let r = evaluate(&single(vec![det(g, 0.5)], vec![]), &one_class()).unwrap();
        assert!(r.empty_ground_truth);
        assert_eq!(r.ap, 0.0);
    }

    #[test]
    fn duplicate_is_a_false_positive() {
        // 0.8 IoU: (0,0,10,10) vs (0,0,10,12.5)
        let g = b(0.0, 0.0, 10.0, 10.0);
        let images = single(vec![det(b(0.0, 0.0, 10.0, 12.5), 0.9), det(g, 0.8)], vec![gt(g)]);
        let r = evaluate_bruteforce(&images, &one_class()).unwrap();
        // best detection matches; the duplicate only adds a trailing FP
        assert_eq!(r.ap75, 100.0);
        assert_eq!(r, evaluate(&images, &one_class()).unwrap());
        // duplicate ranked first costs precision at full recall
        let images = single(vec![det(b(50.0, 50.0, 60.0, 60.0), 0.95), det(g, 0.8)], vec![gt(g)]);
        assert_eq!(evaluate(&images, &one_class()).unwrap().ap50, 50.0);
    }

    #[test]
    fn bruteforce_refuses_large_instances() {
        let g = b(0.0, 0.0, 10.0, 10.0);
        let dets = (0..13).map(|i| det(g, i as f64 / 20.0)).collect();
        let r = evaluate_bruteforce(&single(dets, vec![gt(g)]), &one_class());
        assert!(matches!(r, Err(Error::TooLarge(_))));
    }

    #[test]
    fn rejects_bad_inputs() {
        let g = b(0.0, 0.0, 10.0, 10.0);
        let mut images = single(vec![det(g, f64::NAN)], vec![gt(g)]);
        assert!(evaluate(&images, &one_class()).is_err());
        images[0].detections[0].score = 0.5;
        images.push(images[0].clone());
        assert!(evaluate(&images, &one_class()).is_err());
    }

    #[test]
    fn jsonl_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.jsonl");
        let classes = ClassMap::from_names(&["bag", "bottle"]).unwrap();
        let d = Detection {
            bbox: b(1.0, 2.0, 3.0, 4.0),
            class_id: 1,
            score: 0.75,
        };
        let mut buf = Vec::new();
        write_detections_jsonl(&mut buf, "a.png", &[d], &classes).unwrap();
        buf.extend_from_slice(b"{\"image\":\"b.png\",\"box\":[0,0,5,5],\"class\":0,\"score\":0.1}\n");
        std::fs::write(&path, &buf).unwrap();
        let read = read_detections_jsonl(&path, &classes).unwrap();
        assert_eq!(read["a.png"], vec![d]);
        assert_eq!(read["b.png"][0].class_id, 0);
        std::fs::write(&path, "{\"image\":\"a\",\"box\":[0,0,5,5],\"class\":\"sofa\",\"score\":1}\n").unwrap();
        assert!(read_detections_jsonl(&path, &classes).is_err());
    }
}
