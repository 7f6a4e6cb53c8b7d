//! Detection datasets: annotation types, class maps, loaders and the
//! synthetic shapes generator used for desk-scale training.

mod letterbox;
mod manifest;
mod synth;
mod voc;

use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::lowlight::PixelImage;

pub use letterbox::{letterbox, letterbox_sample, Letterbox};
pub use manifest::{load_labeled, load_manifest, save_manifest, write_labeled};
pub use synth::{synth_class_map, synth_shapes, SYNTH_MAX_CLASSES, SYNTH_MIN_RESOLUTION};
pub use voc::load_voc_xml;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthBox {
    pub bbox: BBox,
    pub class_id: usize,
}

impl GroundTruthBox {
    pub fn new(bbox: BBox, class_id: usize) -> Result<Self> {
        if !bbox.is_valid() {
            return Err(Error::Domain(format!("degenerate ground-truth box {bbox:?}")));
        }
        Ok(Self { bbox, class_id })
    }
}

/// An image on disk with its annotations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedSample {
    pub image_path: PathBuf,
    pub width: u32,
    pub height: u32,
    pub boxes: Vec<GroundTruthBox>,
}

impl AnnotatedSample {
    /// Checks box geometry, image bounds and class ids.
    pub fn validate(&self, classes: &ClassMap) -> Result<()> {
        validate_boxes(&self.boxes, self.width, self.height, classes)
    }

    pub fn load(&self) -> Result<LabeledImage> {
        let image = PixelImage::load(&self.image_path)?;
        if image.width() != self.width || image.height() != self.height {
            return Err(Error::Input(format!(
                "{} is {}x{}, annotation says {}x{}",
                self.image_path.display(),
                image.width(),
                image.height(),
                self.width,
                self.height
            )));
        }
        Ok(LabeledImage {
            id: self.image_path.display().to_string(),
            image,
            boxes: self.boxes.clone(),
        })
    }
}

/// An in-memory image with its annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub id: String,
    pub image: PixelImage,
    pub boxes: Vec<GroundTruthBox>,
}

pub(crate) fn validate_boxes(
    boxes: &[GroundTruthBox],
    width: u32,
    height: u32,
    classes: &ClassMap,
) -> Result<()> {
    for b in boxes {
        if !b.bbox.is_valid() {
            return Err(Error::Domain(format!("degenerate box {:?}", b.bbox)));
        }
        if !b.bbox.within(width as f64, height as f64) {
            return Err(Error::Domain(format!(
                "box {:?} exceeds the {width}x{height} image",
                b.bbox
            )));
        }
        if b.class_id >= classes.len() {
            return Err(Error::Domain(format!(
                "class id {} outside a map of {} classes",
                b.class_id,
                classes.len()
            )));
        }
    }
    Ok(())
}

/// Ordered class names; ids are positions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct ClassMap {
    names: Vec<String>,
}

impl ClassMap {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::Config("class map is empty".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for n in &names {
            if n.trim().is_empty() {
                return Err(Error::Config("class names must be nonempty".into()));
            }
            if !seen.insert(n.as_str()) {
                return Err(Error::Config(format!("duplicate class name `{n}`")));
            }
        }
        Ok(Self { names })
    }

    pub fn from_names(names: &[&str]) -> Result<Self> {
        Self::new(names.iter().map(|s| s.to_string()).collect())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn name_of(&self, id: usize) -> Option<&str> {
        self.names.get(id).map(String::as_str)
    }
}

impl TryFrom<Vec<String>> for ClassMap {
    type Error = Error;

    fn try_from(names: Vec<String>) -> Result<Self> {
        Self::new(names)
    }
}

impl From<ClassMap> for Vec<String> {
    fn from(map: ClassMap) -> Self {
        map.names
    }
}

const VOC_CLASSES: [&str; 20] = [
    "aeroplane",
    "bicycle",
    "bird",
    "boat",
    "bottle",
    "bus",
    "car",
    "cat",
    "chair",
    "cow",
    "diningtable",
    "dog",
    "horse",
    "motorbike",
    "person",
    "pottedplant",
    "sheep",
    "sofa",
    "train",
    "tvmonitor",
];

/// The named maps: `trash_icra19`, `wpbb` and `voc2012`.
pub fn builtin_class_maps() -> BTreeMap<&'static str, ClassMap> {
    let mut maps = BTreeMap::new();
    maps.insert(
        "trash_icra19",
        ClassMap::from_names(&["bio", "plastic", "rov"]).expect("valid"),
    );
    maps.insert("wpbb", ClassMap::from_names(&["bag", "bottle"]).expect("valid"));
    maps.insert("voc2012", ClassMap::from_names(&VOC_CLASSES).expect("valid"));
    maps
}

/// Looks up a builtin map, or `synthN` for the first N synthetic classes.
pub fn class_map_by_name(name: &str) -> Result<ClassMap> {
    if let Some(n) = name.strip_prefix("synth") {
        let n: usize = n
            .parse()
            .map_err(|_| Error::Config(format!("unknown class map `{name}`")))?;
        return synth::synth_class_map(n);
    }
    builtin_class_maps().remove(name).ok_or_else(|| {
        Error::Config(format!(
            "unknown class map `{name}` (known: trash_icra19, wpbb, voc2012, synth1..synth8)"
        ))
    })
}

/// The first `n` samples; fewer when the set is smaller.
pub fn take_first<T: Clone>(samples: &[T], n: usize) -> Vec<T> {
    if n > samples.len() {
        log::info!("requested {n} samples, dataset has {}", samples.len());
    }
    samples[..n.min(samples.len())].to_vec()
}

/// Seeded split into (train, validation). Both parts keep input order.
pub fn split_train_val<T: Clone>(samples: &[T], val_fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if !(0.0..=1.0).contains(&val_fraction) {
        return Err(Error::Domain(format!(
            "validation fraction must be in [0, 1], got {val_fraction}"
        )));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = (samples.len() as f64 * val_fraction).round() as usize;
    let mut is_val = vec![false; samples.len()];
    for &i in &order[..n_val] {
        is_val[i] = true;
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (s, v) in samples.iter().zip(is_val) {
        if v {
            val.push(s.clone());
        } else {
            train.push(s.clone());
        }
    }
    Ok((train, val))
}
