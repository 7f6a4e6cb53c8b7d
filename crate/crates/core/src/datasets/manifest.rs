use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::error::{Error, Result};

use super::{AnnotatedSample, ClassMap, GroundTruthBox, LabeledImage};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum ClassRef {
    Id(usize),
    Name(String),
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestBox {
    xmin: f64,
    ymin: f64,
    xmax: f64,
    ymax: f64,
    class: ClassRef,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    image: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    width: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    height: Option<u32>,
    boxes: Vec<ManifestBox>,
}

fn base_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Reads a JSON manifest. Relative image paths resolve against the manifest's
/// directory; missing `width`/`height` are read from the image header.
/// Unlike the XML loader, any invalid entry fails the whole load, since a
/// manifest is usually machine-written.
pub fn load_manifest(path: &Path, classes: &ClassMap) -> Result<Vec<AnnotatedSample>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let entries: Vec<ManifestEntry> =
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))?;
    let base = base_dir(path);
    let mut samples = Vec::with_capacity(entries.len());
    for (i, entry) in entries.into_iter().enumerate() {
        let image_path = base.join(&entry.image);
        let (width, height) = match (entry.width, entry.height) {
            (Some(w), Some(h)) => (w, h),
            _ => image::image_dimensions(&image_path).map_err(|e| {
                Error::parse(path, format!("entry {i}: cannot size {}: {e}", image_path.display()))
            })?,
        };
        let mut boxes = Vec::with_capacity(entry.boxes.len());
        for b in entry.boxes {
            let class_id = match &b.class {
                ClassRef::Id(id) => *id,
                ClassRef::Name(name) => classes.id_of(name).ok_or_else(|| {
                    Error::parse(path, format!("entry {i}: unknown class `{name}`"))
                })?,
            };
            boxes.push(GroundTruthBox {
                bbox: BBox::new_unchecked(b.xmin, b.ymin, b.xmax, b.ymax),
                class_id,
            });
        }
        let sample = AnnotatedSample {
            image_path,
            width,
            height,
            boxes,
        };
        sample
            .validate(classes)
            .map_err(|e| Error::parse(path, format!("entry {i}: {e}")))?;
        samples.push(sample);
    }
    Ok(samples)
}

/// Writes a manifest with class names. Image paths under the manifest's
/// directory are stored relative to it.
pub fn save_manifest(path: &Path, samples: &[AnnotatedSample], classes: &ClassMap) -> Result<()> {
    let base = base_dir(path);
    let mut entries = Vec::with_capacity(samples.len());
    for s in samples {
        s.validate(classes)?;
        let image = s
            .image_path
            .strip_prefix(&base)
            .map(Path::to_path_buf)
            .unwrap_or_else(|_| s.image_path.clone());
        entries.push(ManifestEntry {
            image,
            width: Some(s.width),
            height: Some(s.height),
            boxes: s
                .boxes
                .iter()
                .map(|b| ManifestBox {
                    xmin: b.bbox.x_min,
                    ymin: b.bbox.y_min,
                    xmax: b.bbox.x_max,
                    ymax: b.bbox.y_max,
                    class: ClassRef::Name(classes.name_of(b.class_id).expect("validated").to_string()),
                })
                .collect(),
        });
    }
    let json = serde_json::to_string_pretty(&entries)?;
    std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
}

/// Saves in-memory images as PNGs in `dir` plus a `manifest.json` describing them.
pub fn write_labeled(dir: &Path, images: &[LabeledImage], classes: &ClassMap) -> Result<Vec<AnnotatedSample>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut samples = Vec::with_capacity(images.len());
    for img in images {
        let file: String = img
            .id
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' { c } else { '_' })
            .collect();
        let image_path = dir.join(format!("{file}.png"));
        img.image.save(&image_path)?;
        samples.push(AnnotatedSample {
            image_path,
            width: img.image.width(),
            height: img.image.height(),
            boxes: img.boxes.clone(),
        });
    }
    save_manifest(&dir.join("manifest.json"), &samples, classes)?;
    Ok(samples)
}

/// Loads every sample's pixels.
pub fn load_labeled(samples: &[AnnotatedSample]) -> Result<Vec<LabeledImage>> {
    samples.iter().map(AnnotatedSample::load).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::synth_shapes;

    #[test]
    fn synthetic_roundtrip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let classes = ClassMap::from_names(&["a", "b"]).unwrap();
        let images = synth_shapes(3, 64, 2, 1).unwrap();
        let written = write_labeled(dir.path(), &images, &classes).unwrap();
        let loaded = load_manifest(&dir.path().join("manifest.json"), &classes).unwrap();
        assert_eq!(written, loaded);
        let back = load_labeled(&loaded).unwrap();
        for (a, b) in images.iter().zip(&back) {
            assert_eq!(a.image, b.image);
            assert_eq!(a.boxes, b.boxes);
        }
    }

    #[test]
    fn accepts_ids_or_names_and_validates() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let classes = ClassMap::from_names(&["bag", "bottle"]).unwrap();
        std::fs::write(
            &path,
            r#"[{"image":"x.png","width":50,"height":40,
                 "boxes":[{"xmin":1,"ymin":2,"xmax":10,"ymax":20,"class":"bottle"},
                          {"xmin":1,"ymin":2,"xmax":10,"ymax":20,"class":0}]}]"#,
        )
        .unwrap();
        let s = load_manifest(&path, &classes).unwrap();
        assert_eq!(s[0].boxes[0].class_id, 1);
        assert_eq!(s[0].boxes[1].class_id, 0);
        assert_eq!(s[0].image_path, dir.path().join("x.png"));

        for bad in [
            r#"[{"image":"x.png","width":50,"height":40,"boxes":[{"xmin":10,"ymin":2,"xmax":1,"ymax":20,"class":0}]}]"#,
            r#"[{"image":"x.png","width":5,"height":4,"boxes":[{"xmin":1,"ymin":2,"xmax":10,"ymax":20,"class":0}]}]"#,
            r#"[{"image":"x.png","width":50,"height":40,"boxes":[{"xmin":1,"ymin":2,"xmax":10,"ymax":20,"class":"sofa"}]}]"#,
            r#"[{"image":"x.png","width":50,"height":40,"boxes":[{"xmin":1,"ymin":2,"xmax":10,"ymax":20,"class":7}]}]"#,
            r#"{"image":"x.png"}"#,
        ] {
            std::fs::write(&path, bad).unwrap();
            assert!(matches!(load_manifest(&path, &classes), Err(Error::Parse { .. })), "{bad}");
        }
    }
}
