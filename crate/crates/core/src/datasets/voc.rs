use std::path::{Path, PathBuf};

use crate::bbox::BBox;
use crate::error::{Error, Result};

use super::{AnnotatedSample, ClassMap, GroundTruthBox};

fn child<'a>(node: roxmltree::Node<'a, 'a>, name: &str) -> Option<roxmltree::Node<'a, 'a>> {
    node.children().find(|c| c.has_tag_name(name))
}

fn number(node: roxmltree::Node, name: &str) -> std::result::Result<f64, String> {
    let text = child(node, name)
        .and_then(|n| n.text())
        .ok_or_else(|| format!("missing <{name}>"))?;
    text.trim()
        .parse()
        .map_err(|_| format!("<{name}> is not a number: `{}`", text.trim()))
}

fn parse_annotation(
    text: &str,
    image_dir: &Path,
    classes: &ClassMap,
) -> std::result::Result<AnnotatedSample, String> {
    let doc = roxmltree::Document::parse(text).map_err(|e| e.to_string())?;
    let root = doc.root_element();
    let filename = child(root, "filename")
        .and_then(|n| n.text())
        .ok_or("missing <filename>")?
        .trim()
        .to_string();
    let size = child(root, "size").ok_or("missing <size>")?;
    let width = number(size, "width")?;
    let height = number(size, "height")?;
    if !(width >= 1.0 && height >= 1.0) {
        return Err(format!("invalid image size {width}x{height}"));
    }
    let mut boxes = Vec::new();
    for obj in root.children().filter(|c| c.has_tag_name("object")) {
        let name = child(obj, "name")
            .and_then(|n| n.text())
            .ok_or("object without <name>")?
            .trim();
        let class_id = classes
            .id_of(name)
            .ok_or_else(|| format!("class `{name}` is not in the class map"))?;
        let bb = child(obj, "bndbox").ok_or("object without <bndbox>")?;
        let bbox = BBox::new(
            number(bb, "xmin")?,
            number(bb, "ymin")?,
            number(bb, "xmax")?,
            number(bb, "ymax")?,
        )
        .map_err(|e| e.to_string())?;
        boxes.push(GroundTruthBox { bbox, class_id });
    }
    let sample = AnnotatedSample {
        image_path: image_dir.join(filename),
        width: width as u32,
        height: height as u32,
        boxes,
    };
    sample.validate(classes).map_err(|e| e.to_string())?;
    Ok(sample)
}

/// Parses every `*.xml` file in `dir`, in filename order.
///
/// Images are resolved against a sibling `JPEGImages` directory when one
/// exists (the VOC layout), otherwise against `dir` itself. Files with
/// malformed geometry or unknown classes are skipped with a warning.
pub fn load_voc_xml(dir: &Path, classes: &ClassMap) -> Result<Vec<AnnotatedSample>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files: Vec<PathBuf> = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("xml")) {
            files.push(path);
        }
    }
    files.sort();
    let image_dir = dir
        .parent()
        .map(|p| p.join("JPEGImages"))
        .filter(|p| p.is_dir())
        .unwrap_or_else(|| dir.to_path_buf());

    let mut samples = Vec::with_capacity(files.len());
    for path in files {
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        match parse_annotation(&text, &image_dir, classes) {
            Ok(s) => samples.push(s),
            Err(msg) => log::warn!("skipping {}: {msg}", path.display()),
        }
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn xml(file: &str, objects: &[(&str, [i32; 4])]) -> String {
        let mut s = format!(
            "<annotation><folder>x</folder><filename>{file}</filename>\
             <size><width>300</width><height>400</height><depth>3</depth></size>"
        );
        for (name, b) in objects {
            s += &format!(
                "<object><name>{name}</name><difficult>0</difficult><bndbox>\
                 <xmin>{}</xmin><ymin>{}</ymin><xmax>{}</xmax><ymax>{}</ymax>\
                 </bndbox></object>",
                b[0], b[1], b[2], b[3]
            );
        }
        s + "</annotation>"
    }

    #[test]
    fn parses_sorts_and_skips() {
        let dir = tempfile::tempdir().unwrap();
        let classes = ClassMap::from_names(&["bag", "bottle"]).unwrap();
        std::fs::write(dir.path().join("b.xml"), xml("b.jpg", &[("bottle", [10, 20, 110, 220])])).unwrap();
        std::fs::write(dir.path().join("a.xml"), xml("a.jpg", &[("bag", [1, 1, 5, 5]), ("bag", [2, 2, 9, 9])])).unwrap();
        std::fs::write(dir.path().join("c.xml"), xml("c.jpg", &[("bag", [50, 20, 10, 220])])).unwrap();
        std::fs::write(dir.path().join("d.xml"), xml("d.jpg", &[("sofa", [1, 1, 5, 5])])).unwrap();
        std::fs::write(dir.path().join("e.xml"), "<annotation>").unwrap();
        std::fs::write(dir.path().join("notes.txt"), "ignored").unwrap();

        let samples = load_voc_xml(dir.path(), &classes).unwrap();
        assert_eq!(samples.len(), 2);
        assert!(samples[0].image_path.ends_with("a.jpg"));
        assert_eq!(samples[1].boxes.len(), 1);
        let b = samples[1].boxes[0];
        assert_eq!(b.class_id, 1);
        assert_eq!(b.bbox, BBox::new_unchecked(10.0, 20.0, 110.0, 220.0));
        assert_eq!((samples[1].width, samples[1].height), (300, 400));
    }

    #[test]
    fn empty_and_missing_directories() {
        let dir = tempfile::tempdir().unwrap();
        let classes = ClassMap::from_names(&["bag"]).unwrap();
        assert!(load_voc_xml(dir.path(), &classes).unwrap().is_empty());
        assert!(matches!(
            load_voc_xml(&dir.path().join("nope"), &classes),
            Err(Error::Io { .. })
        ));
    }
}
