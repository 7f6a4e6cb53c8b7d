//! Compound scaling of the detector family.
//!
//! A single coefficient `phi` grows input resolution, backbone tier, fused
//! channel width, fusion depth and head depth together. The fusion and head
//! depths start from a configurable split of the parent (phi = 0) network,
//! e.g. `(1; 5)` puts one fusion layer and five head convolutions in D0.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kv::KvRecord;

/// Largest scaling coefficient of the family (D7).
pub const MAX_PHI: u32 = 7;

/// Width of the parent network's fusion layers and subnets.
pub const BASE_WIDTH: f64 = 64.0;
pub const WIDTH_GROWTH: f64 = 1.35;
pub const BASE_RESOLUTION: u32 = 512;
pub const RESOLUTION_STEP: u32 = 128;

/// Fusion/head layer budget shared by the studied parent variants.
pub const VARIANT_LAYER_BUDGET: u32 = 6;

const PUBLISHED_WIDTHS: [u32; 4] = [64, 88, 112, 160];

fn check_phi(phi: i64) -> Result<u32> {
    if phi < 0 {
        return Err(Error::Domain(format!("scaling coefficient must be >= 0, got {phi}")));
    }
    u32::try_from(phi).map_err(|_| Error::Domain(format!("scaling coefficient {phi} too large")))
}

/// Unrounded fused-channel width, `64 * 1.35^phi`.
pub fn raw_width(phi: i64) -> Result<f64> {
    let phi = check_phi(phi)?;
    Ok(BASE_WIDTH * WIDTH_GROWTH.powi(phi as i32))
}

/// Channel width actually used by the network.
///
/// The published family widths are used verbatim for `phi <= 3`; they do not
/// follow from any single rounding of [`raw_width`] (112 < 116.64). Beyond
/// that the raw width is rounded to the nearest multiple of 8, ties up.
pub fn snapped_width(phi: i64) -> Result<u32> {
    let raw = raw_width(phi)?;
    match PUBLISHED_WIDTHS.get(phi as usize) {
        Some(&w) => Ok(w),
        None => Ok(round_to_multiple_of_8(raw)),
    }
}

pub(crate) fn round_to_multiple_of_8(value: f64) -> u32 {
    ((value / 8.0 + 0.5).floor() as u32).max(1) * 8
}

pub fn resolution(phi: i64) -> Result<u32> {
    let phi = check_phi(phi)?;
    Ok(BASE_RESOLUTION + phi * RESOLUTION_STEP)
}

/// How the parent network divides its layers between fusion and heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DepthSplit {
    pub fusion_layers: u32,
    pub head_convs: u32,
}

impl DepthSplit {
    /// The original parent: three fusion layers, three head convolutions.
    pub const BASELINE: DepthSplit = DepthSplit::new(3, 3);
    /// Shallow fusion, deep heads.
    pub const SHALLOW_FUSION: DepthSplit = DepthSplit::new(1, 5);
    /// Deep fusion, shallow heads.
    pub const DEEP_FUSION: DepthSplit = DepthSplit::new(5, 1);

    pub const STUDIED: [DepthSplit; 3] =
        [Self::SHALLOW_FUSION, Self::BASELINE, Self::DEEP_FUSION];

    pub const fn new(fusion_layers: u32, head_convs: u32) -> Self {
        Self {
            fusion_layers,
            head_convs,
        }
    }
}

impl fmt::Display for DepthSplit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.fusion_layers, self.head_convs)
    }
}

impl FromStr for DepthSplit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Domain(format!("depth split must look like `1-5`, got `{s}`"));
        let (a, b) = s.trim().split_once(['-', ';', ',']).ok_or_else(bad)?;
        let fusion_layers: u32 = a.trim().parse().map_err(|_| bad())?;
        let head_convs: u32 = b.trim().parse().map_err(|_| bad())?;
        if fusion_layers == 0 || head_convs == 0 {
            return Err(Error::Domain(format!(
                "depth split entries must be >= 1, got `{s}`"
            )));
        }
        Ok(Self::new(fusion_layers, head_convs))
    }
}

/// Scaling coefficient plus the parent's depth split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ScalingSpec {
    phi: u32,
    n_bifpn_0: u32,
    n_headconv_0: u32,
}

impl ScalingSpec {
    pub fn new(phi: i64, n_bifpn_0: u32, n_headconv_0: u32) -> Result<Self> {
        let phi = check_phi(phi)?;
        if phi > MAX_PHI {
            return Err(Error::Domain(format!(
                "scaling coefficient must be in 0..={MAX_PHI}, got {phi}"
            )));
        }
        if n_bifpn_0 == 0 || n_headconv_0 == 0 {
            return Err(Error::Domain(format!(
                "parent depths must be >= 1, got ({n_bifpn_0}; {n_headconv_0})"
            )));
        }
        Ok(Self {
            phi,
            n_bifpn_0,
            n_headconv_0,
        })
    }

    /// A studied variant: the parent's depths must sum to the shared layer budget.
    pub fn budget_variant(phi: i64, split: DepthSplit) -> Result<Self> {
        if split.fusion_layers + split.head_convs != VARIANT_LAYER_BUDGET {
            return Err(Error::Domain(format!(
                "variant split {split} does not sum to {VARIANT_LAYER_BUDGET}"
            )));
        }
        Self::new(phi, split.fusion_layers, split.head_convs)
    }

    pub fn with_split(phi: i64, split: DepthSplit) -> Result<Self> {
        Self::new(phi, split.fusion_layers, split.head_convs)
    }

    pub fn phi(&self) -> u32 {
        self.phi
    }

    pub fn n_bifpn_0(&self) -> u32 {
        self.n_bifpn_0
    }

    pub fn n_headconv_0(&self) -> u32 {
        self.n_headconv_0
    }

    pub fn split(&self) -> DepthSplit {
        DepthSplit::new(self.n_bifpn_0, self.n_headconv_0)
    }

    /// Conventional name, e.g. `D3(1-5)`.
    pub fn name(&self) -> String {
        format!("D{}({})", self.phi, self.split())
    }
}

/// `(fusion depth, head depth)`: the fusion stack grows by one layer per
/// step of phi, the heads by one convolution every three steps.
pub fn depths(spec: &ScalingSpec) -> (u32, u32) {
    (spec.n_bifpn_0 + spec.phi, spec.n_headconv_0 + spec.phi / 3)
}

/// One resolved member of the family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ArchitectureConfig {
    pub input_resolution: u32,
    pub backbone_tier: u32,
    pub fused_channels: u32,
    pub bifpn_depth: u32,
    pub head_depth: u32,
}

impl ArchitectureConfig {
    pub const KEYS: [&'static str; 5] = [
        "input_resolution",
        "backbone_tier",
        "fused_channels",
        "bifpn_depth",
        "head_depth",
    ];

    pub fn new(
        input_resolution: u32,
        backbone_tier: u32,
        fused_channels: u32,
        bifpn_depth: u32,
        head_depth: u32,
    ) -> Result<Self> {
        let cfg = Self {
            input_resolution,
            backbone_tier,
            fused_channels,
            bifpn_depth,
            head_depth,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_resolution == 0 || self.input_resolution % RESOLUTION_STEP != 0 {
            return Err(Error::Config(format!(
                "input resolution must be a positive multiple of {RESOLUTION_STEP}, got {}",
                self.input_resolution
            )));
        }
        if self.backbone_tier > MAX_PHI {
            return Err(Error::Config(format!(
                "backbone tier must be in 0..={MAX_PHI}, got {}",
                self.backbone_tier
            )));
        }
        if self.fused_channels == 0 || self.fused_channels % 8 != 0 {
            return Err(Error::Config(format!(
                "fused channels must be a positive multiple of 8, got {}",
                self.fused_channels
            )));
        }
        if self.bifpn_depth == 0 || self.head_depth == 0 {
            return Err(Error::Config(format!(
                "fusion and head depth must be >= 1, got ({}, {})",
                self.bifpn_depth, self.head_depth
            )));
        }
        Ok(())
    }

    /// Shrinks a family member to desk scale: the resolution loses the
    /// constant 384-pixel offset (512 becomes 128) and the width is halved
    /// and snapped to a multiple of 8. Depths and tier are unchanged.
    pub fn desk_scale(&self) -> Self {
        Self {
            input_resolution: self
                .input_resolution
                .saturating_sub(BASE_RESOLUTION - RESOLUTION_STEP)
                .max(RESOLUTION_STEP),
            fused_channels: round_to_multiple_of_8(self.fused_channels as f64 / 2.0),
            ..*self
        }
    }

    /// Same architecture with overridden resolution and width.
    pub fn with_size(&self, input_resolution: u32, fused_channels: u32) -> Result<Self> {
        Self::new(
            input_resolution,
            self.backbone_tier,
            fused_channels,
            self.bifpn_depth,
            self.head_depth,
        )
    }

    pub fn to_record(&self) -> KvRecord {
        let mut rec = KvRecord::new();
        rec.set("input_resolution", self.input_resolution);
        rec.set("backbone_tier", self.backbone_tier);
        rec.set("fused_channels", self.fused_channels);
        rec.set("bifpn_depth", self.bifpn_depth);
        rec.set("head_depth", self.head_depth);
        rec
    }

    pub fn from_record(rec: &KvRecord) -> Result<Self> {
        let get = |key: &str| -> Result<u32> {
            rec.parse::<u32>(key)?
                .ok_or_else(|| Error::Config(format!("missing key `{key}`")))
        };
        Self::new(
            get("input_resolution")?,
            get("backbone_tier")?,
            get("fused_channels")?,
            get("bifpn_depth")?,
            get("head_depth")?,
        )
    }
}

impl fmt::Display for ArchitectureConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_record())
    }
}

pub fn build_config(spec: &ScalingSpec) -> Result<ArchitectureConfig> {
    let phi = spec.phi as i64;
    let (bifpn_depth, head_depth) = depths(spec);
    ArchitectureConfig::new(
        resolution(phi)?,
        spec.phi,
        snapped_width(phi)?,
        bifpn_depth,
        head_depth,
    )
}

/// Rows `D0..=D{max_phi}` of the scaling table for one split.
pub fn table(split: DepthSplit, max_phi: u32) -> Result<Vec<(ScalingSpec, ArchitectureConfig)>> {
    (0..=max_phi.min(MAX_PHI))
        .map(|phi| {
            let spec = ScalingSpec::with_split(phi as i64, split)?;
            Ok((spec, build_config(&spec)?))
        })
        .collect()
}

/// Column header of [`format_table_row`].
pub const TABLE_HEADER: &str = "architecture,input_size,backbone,w_bifpn_cb,d_bifpn,d_cb";

pub fn format_table_row(spec: &ScalingSpec, cfg: &ArchitectureConfig) -> String {
    format!(
        "{},{},B{},{},{},{}",
        spec.name(),
        cfg.input_resolution,
        cfg.backbone_tier,
        cfg.fused_channels,
        cfg.bifpn_depth,
        cfg.head_depth
    )
}
