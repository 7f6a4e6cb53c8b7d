//! Low-light simulation and enhancement.
//!
//! Darkening subtracts a constant from every channel value, brightening adds
//! one; both clamp to the 8-bit range at each step. Anything more elaborate
//! runs as an external program that reads one PNG and writes another.

use std::fmt;
use std::path::Path;
use std::process::Command;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Offset used to simulate low-light captures.
pub const DEFAULT_DARKEN_OFFSET: u8 = 120;

/// 8-bit RGB image, row-major, interleaved channels.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PixelImage {
    width: u32,
    height: u32,
    data: Vec<u8>,
}

impl PixelImage {
    pub fn new(width: u32, height: u32, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Input(format!("image dimensions must be positive, got {width}x{height}")));
        }
        let expected = width as usize * height as usize * 3;
        if data.len() != expected {
            return Err(Error::Input(format!(
                "{width}x{height} RGB image needs {expected} bytes, got {}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Self {
        let data = rgb.repeat(width as usize * height as usize);
        Self::new(width, height, data).expect("positive dimensions")
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn as_raw(&self) -> &[u8] {
        &self.data
    }

    pub fn into_raw(self) -> Vec<u8> {
        self.data
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn flip_horizontal(&self) -> Self {
        let w = self.width as usize;
        let mut data = Vec::with_capacity(self.data.len());
        for row in self.data.chunks_exact(w * 3) {
            for px in row.chunks_exact(3).rev() {
                data.extend_from_slice(px);
            }
        }
        Self { data, ..*self }
    }

    fn map_values(&self, f: impl Fn(u8) -> u8) -> Self {
        Self {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| match e {
                image::ImageError::IoError(io) => Error::io(path, io),
                other => Error::parse(path, other.to_string()),
            })?
            .to_rgb8();
        let (w, h) = img.dimensions();
        Self::new(w, h, img.into_raw())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let buf = image::RgbImage::from_raw(self.width, self.height, self.data.clone())
            .expect("buffer length checked at construction");
        buf.save(path).map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Image(other),
        })
    }
}

fn check_offset(name: &str, value: i64) -> Result<u8> {
    u8::try_from(value).map_err(|_| Error::Domain(format!("{name} must be in [0, 255], got {value}")))
}

/// Subtracts `offset` from every channel value, clamping at 0.
pub fn darken(image: &PixelImage, offset: i64) -> Result<PixelImage> {
    let offset = check_offset("darken offset", offset)?;
    Ok(image.map_values(|v| v.saturating_sub(offset)))
}

/// Adds `c` to every channel value, clamping at 255.
pub fn brighten_constant(image: &PixelImage, c: i64) -> Result<PixelImage> {
    let c = check_offset("brightening constant", c)?;
    Ok(image.map_values(|v| v.saturating_add(c)))
}

/// Program plus leading arguments; the input and output image paths are appended.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExternalCommand {
    pub program: String,
    pub args: Vec<String>,
}

impl FromStr for ExternalCommand {
    type Err = Error;

    /// Splits on whitespace; no shell quoting.
    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split_whitespace().map(str::to_string);
        let program = parts
            .next()
            .ok_or_else(|| Error::Domain("external enhancer command is empty".into()))?;
        Ok(Self {
            program,
            args: parts.collect(),
        })
    }
}

impl fmt::Display for ExternalCommand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.program)?;
        for a in &self.args {
            write!(f, " {a}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Enhancement {
    None,
    Constant { c: u8 },
    External(ExternalCommand),
}

impl Enhancement {
    pub fn constant(c: i64) -> Result<Self> {
        Ok(Self::Constant {
            c: check_offset("brightening constant", c)?,
        })
    }

    pub fn external(command: &str) -> Result<Self> {
        Ok(Self::External(command.parse()?))
    }

    /// Short label used in report rows.
    pub fn label(&self) -> String {
        match self {
            Self::None => "none".into(),
            Self::Constant { c } => format!("c={c}"),
            Self::External(cmd) => format!("external:{}", cmd.program),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Constant { .. } => "const",
            Self::External(_) => "external",
        }
    }

    /// Builds a strategy from the CLI vocabulary `none | const | external`.
    pub fn from_parts(kind: &str, c: Option<i64>, external_cmd: Option<&str>) -> Result<Self> {
        match kind {
            "none" => Ok(Self::None),
            "const" | "constant" | "constant_c" => Self::constant(
                c.ok_or_else(|| Error::Config("constant enhancement needs a value for c".into()))?,
            ),
            "external" => Self::external(external_cmd.ok_or_else(|| {
                Error::Config("external enhancement needs a command".into())
            })?),
            other => Err(Error::Config(format!(
                "unknown enhancement `{other}` (expected none, const or external)"
            ))),
        }
    }
}

/// Darkening offset plus the enhancement applied afterwards.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnhancementSpec {
    pub darken_offset: u8,
    pub strategy: Enhancement,
}

impl EnhancementSpec {
    pub fn new(darken_offset: i64, strategy: Enhancement) -> Result<Self> {
        Ok(Self {
            darken_offset: check_offset("darken offset", darken_offset)?,
            strategy,
        })
    }
}

/// What an enhancement latency measurement includes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimingRegime {
    /// Pixel arithmetic only.
    InProcess,
    /// Temp-file writes, process launch and result decoding included.
    ExternalProcess,
}

impl TimingRegime {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::InProcess => "in_process",
            Self::ExternalProcess => "external_process",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Enhanced {
    pub image: PixelImage,
    pub latency_seconds: f64,
    pub regime: TimingRegime,
}

/// Applies one enhancement strategy and times it.
pub fn enhance(image: &PixelImage, strategy: &Enhancement) -> Result<Enhanced> {
    match strategy {
        Enhancement::None => Ok(Enhanced {
            image: image.clone(),
            latency_seconds: 0.0,
            regime: TimingRegime::InProcess,
        }),
        Enhancement::Constant { c } => {
            let start = Instant::now();
            let out = brighten_constant(image, *c as i64)?;
            Ok(Enhanced {
                image: out,
                latency_seconds: start.elapsed().as_secs_f64(),
                regime: TimingRegime::InProcess,
            })
        }
        Enhancement::External(cmd) => run_external(image, cmd),
    }
}

fn run_external(image: &PixelImage, cmd: &ExternalCommand) -> Result<Enhanced> {
    let dir = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
    let input = dir.path().join("input.png");
    let output = dir.path().join("output.png");
    let start = Instant::now();
    image.save(&input)?;
    let result = Command::new(&cmd.program)
        .args(&cmd.args)
        .arg(&input)
        .arg(&output)
        .output()
        .map_err(|e| Error::Enhancement(format!("could not launch `{cmd}`: {e}")))?;
    if !result.status.success() {
        return Err(Error::Enhancement(format!(
            "`{cmd}` exited with {}: {}",
            result.status,
            String::from_utf8_lossy(&result.stderr).trim()
        )));
    }
    if !output.exists() {
        return Err(Error::Enhancement(format!(
            "`{cmd}` did not write {}; stderr: {}",
            output.display(),
            String::from_utf8_lossy(&result.stderr).trim()
        )));
    }
    let enhanced = PixelImage::load(&output)
        .map_err(|e| Error::Enhancement(format!("unreadable output from `{cmd}`: {e}")))?;
    let latency_seconds = start.elapsed().as_secs_f64();
    if enhanced.width() != image.width() || enhanced.height() != image.height() {
        return Err(Error::Enhancement(format!(
            "`{cmd}` changed dimensions from {}x{} to {}x{}",
            image.width(),
            image.height(),
            enhanced.width(),
            enhanced.height()
        )));
    }
    Ok(Enhanced {
        image: enhanced,
        latency_seconds,
        regime: TimingRegime::ExternalProcess,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gray(v: u8) -> PixelImage {
        PixelImage::filled(2, 2, [v, v, v])
    }

    #[test]
    fn darken_examples() {
        assert_eq!(darken(&gray(200), 120).unwrap(), gray(80));
        assert_eq!(darken(&gray(100), 120).unwrap(), gray(0));
        assert_eq!(darken(&gray(77), 0).unwrap(), gray(77));
        assert!(darken(&gray(1), 256).is_err());
        assert!(darken(&gray(1), -1).is_err());
    }

    #[test]
    fn brighten_examples() {
        assert_eq!(brighten_constant(&gray(80), 40).unwrap(), gray(120));
        assert_eq!(brighten_constant(&gray(240), 80).unwrap(), gray(255));
        assert_eq!(brighten_constant(&gray(9), 0).unwrap(), gray(9));
        assert!(brighten_constant(&gray(1), 300).is_err());
    }

    #[test]
    fn enhance_strategies() {
        let dark = darken(&gray(200), 120).unwrap();
        let none = enhance(&dark, &Enhancement::None).unwrap();
        assert_eq!(none.image, dark);
        assert_eq!(none.latency_seconds, 0.0);
        let c80 = enhance(&dark, &Enhancement::constant(80).unwrap()).unwrap();
        assert_eq!(c80.image, gray(160));
        assert_eq!(c80.regime, TimingRegime::InProcess);
    }

    #[test]
    fn external_copy_stub_roundtrips() {
        let mut img = gray(10);
        img.set_pixel(1, 0, [200, 3, 90]);
        let out = enhance(&img, &Enhancement::external("cp").unwrap()).unwrap();
        assert_eq!(out.image, img);
        assert!(out.latency_seconds > 0.0);
        assert_eq!(out.regime, TimingRegime::ExternalProcess);
    }

    #[test]
    fn external_failures_carry_diagnostics() {
        let err = enhance(&gray(1), &Enhancement::external("false").unwrap()).unwrap_err();
        assert!(matches!(err, Error::Enhancement(_)));
        // `true` succeeds but writes nothing
        let err = enhance(&gray(1), &Enhancement::external("true").unwrap()).unwrap_err();
        assert!(err.to_string().contains("did not write"));
        let err = enhance(&gray(1), &Enhancement::external("/nonexistent/enhancer").unwrap()).unwrap_err();
        assert!(err.to_string().contains("could not launch"));
        assert!(Enhancement::external("   ").is_err());
    }

    #[test]
    fn strategy_parsing() {
        assert_eq!(Enhancement::from_parts("none", None, None).unwrap(), Enhancement::None);
        assert_eq!(
            Enhancement::from_parts("const", Some(40), None).unwrap(),
            Enhancement::Constant { c: 40 }
        );
        assert!(Enhancement::from_parts("const", None, None).is_err());
        assert!(Enhancement::from_parts("external", None, None).is_err());
        assert!(Enhancement::from_parts("gan", None, None).is_err());
        assert!(EnhancementSpec::new(300, Enhancement::None).is_err());
    }

    #[test]
    fn image_validation_and_flip() {
        assert!(PixelImage::new(0, 2, vec![]).is_err());
        assert!(PixelImage::new(2, 2, vec![0; 11]).is_err());
        let img = PixelImage::new(2, 1, vec![1, 2, 3, 4, 5, 6]).unwrap();
        assert_eq!(img.flip_horizontal().as_raw(), &[4, 5, 6, 1, 2, 3]);
    }

    proptest! {
        #[test]
        fn order_and_range_preserved(a in 0u8..=255, b in 0u8..=255, off in 0i64..=255) {
            let (lo, hi) = (a.min(b), a.max(b));
            let img = PixelImage::new(2, 1, vec![lo, lo, lo, hi, hi, hi]).unwrap();
            let d = darken(&img, off).unwrap();
            let e = brighten_constant(&img, off).unwrap();
            prop_assert!(d.as_raw()[0] <= d.as_raw()[3]);
            prop_assert!(e.as_raw()[0] <= e.as_raw()[3]);
            prop_assert_eq!((d.width(), d.height()), (2, 1));
        }
    }
}
