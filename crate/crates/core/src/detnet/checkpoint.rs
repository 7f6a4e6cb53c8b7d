//! Single-file detector checkpoints.
//!
//! Layout: the 8-byte magic `EDETCKPT`, a little-endian `u32` format version,
//! a little-endian `u64` header length, a JSON header, then every tensor as
//! little-endian `f32` in header order. The header carries the architecture
//! record, a free-text label, the class names and the name/shape of each
//! tensor.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datasets::ClassMap;
use crate::error::{Error, Result};
use crate::kv::KvRecord;
use crate::scalecfg::ArchitectureConfig;

use super::model::Detector;

pub const MAGIC: &[u8; 8] = b"EDETCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: String,
    #[serde(default)]
    label: String,
    classes: Vec<String>,
    tensors: Vec<TensorEntry>,
}

/// A loaded checkpoint.
#[derive(Debug)]
pub struct Checkpoint {
    pub detector: Detector,
    pub classes: ClassMap,
    /// Architecture name given at save time, e.g. `D0(1-5)`.
    pub label: String,
}

pub fn save_checkpoint(path: &Path, detector: &Detector, classes: &ClassMap, label: &str) -> Result<()> {
    if classes.len() != detector.num_classes() {
        return Err(Error::Checkpoint(format!(
            "class map has {} names, detector has {} classes",
            classes.len(),
            detector.num_classes()
        )));
    }
    let params = detector.params();
    let header = Header {
        config: detector.config().to_record().to_string(),
        label: label.to_string(),
        classes: classes.names().to_vec(),
        tensors: params
            .iter()
            .map(|p| TensorEntry {
                name: p.name.clone(),
                shape: p.shape.clone(),
            })
            .collect(),
    };
    let header = serde_json::to_vec(&header)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(header.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&header).map_err(io)?;
    for p in &params {
        for v in p.data.iter() {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let bad = |msg: String| Error::Checkpoint(format!("{}: {msg}", path.display()));
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| bad("truncated header".into()))?;
    if &magic != MAGIC {
        return Err(bad("not a detector checkpoint".into()));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)
        .map_err(|_| bad("truncated header".into()))?;
    let version = u32::from_le_bytes(u32buf);
    if version != FORMAT_VERSION {
        return Err(bad(format!("unsupported format version {version}")));
    }
    let mut u64buf = [0u8; 8];
    r.read_exact(&mut u64buf)
        .map_err(|_| bad("truncated header".into()))?;
    let header_len = u64::from_le_bytes(u64buf) as usize;
    if header_len > 64 << 20 {
        return Err(bad(format!("implausible header length {header_len}")));
    }
    let mut header = vec![0u8; header_len];
    r.read_exact(&mut header)
        .map_err(|_| bad("truncated header".into()))?;
    let header: Header = serde_json::from_slice(&header)?;
    let record: KvRecord = header.config.parse()?;
    let config = ArchitectureConfig::from_record(&record)?;
    let classes = ClassMap::new(header.classes)?;
    let mut detector = Detector::new(&config, classes.len(), 0)?;

    let expected: Vec<(String, Vec<usize>)> = detector
        .params()
        .iter()
        .map(|p| (p.name.clone(), p.shape.clone()))
        .collect();
    if expected.len() != header.tensors.len() {
        return Err(bad(format!(
            "{} tensors stored, architecture needs {}",
            header.tensors.len(),
            expected.len()
        )));
    }
    for ((name, shape), entry) in expected.iter().zip(&header.tensors) {
        if name != &entry.name || shape != &entry.shape {
            return Err(bad(format!(
                "tensor `{}` {:?} does not match architecture tensor `{name}` {shape:?}",
                entry.name, entry.shape
            )));
        }
    }
    for p in detector.params_mut() {
        let mut bytes = vec![0u8; p.len() * 4];
        r.read_exact(&mut bytes)
            .map_err(|_| bad("truncated tensor data".into()))?;
        for (dst, chunk) in p.iter_mut().zip(bytes.chunks_exact(4)) {
            *dst = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
        }
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(|e| Error::io(path, e))? != 0 {
        return Err(bad("trailing bytes after tensor data".into()));
    }
    Ok(Checkpoint {
        detector,
        classes,
        label: header.label,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Detector {
        Detector::new(&ArchitectureConfig::new(128, 0, 16, 1, 1).unwrap(), 2, 9).unwrap()
    }

    #[test]
    fn roundtrip_preserves_parameters() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let d = tiny();
        let classes = ClassMap::new(vec!["bag".into(), "bottle".into()]).unwrap();
        save_checkpoint(&path, &d, &classes, "D0(1-5)").unwrap();
        let ck = load_checkpoint(&path).unwrap();
        let back = ck.detector;
        assert_eq!(ck.classes, classes);
        assert_eq!(ck.label, "D0(1-5)");
        assert_eq!(back.config(), d.config());
        for (a, b) in d.params().iter().zip(back.params()) {
            assert_eq!(a.data, b.data);
        }
    }

    #[test]
    fn rejects_corrupt_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let classes = ClassMap::new(vec!["bag".into(), "bottle".into()]).unwrap();
        save_checkpoint(&path, &tiny(), &classes, "tiny").unwrap();
        let bytes = std::fs::read(&path).unwrap();

        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));

        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        std::fs::write(&path, &wrong).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));

        let mut version = bytes.clone();
        version[8] = 9;
        std::fs::write(&path, &version).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));

        let mut extra = bytes;
        extra.push(0);
        std::fs::write(&path, &extra).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));

        let one_class = ClassMap::new(vec!["bag".into()]).unwrap();
        assert!(save_checkpoint(&path, &tiny(), &one_class, "tiny").is_err());
    }
}
