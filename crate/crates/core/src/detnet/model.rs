//! The detector: pyramid backbone stand-in, stacked fusion layers, and the
//! class and box subnets shared across pyramid levels.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::lowlight::PixelImage;
use crate::scalecfg::{round_to_multiple_of_8, ArchitectureConfig};
use crate::tensor::{self, Tensor};

use super::anchors::{self, ANCHORS_PER_CELL, MAX_LEVEL, MIN_LEVEL, NUM_LEVELS};
use super::fusion::{BifpnCache, BifpnLayer};
use super::layers::{
    backward_chain, forward_chain, Conv2d, ConvAct, ConvActCache, ParamRef, Parameterized,
};

/// Stem plus four stride-2 stages (strides 2, 4, 8, 16, 32).
const STAGE_WIDTHS: [f64; 5] = [16.0, 24.0, 40.0, 80.0, 112.0];
const TIER_WIDTH_MULT: [f64; 8] = [1.0, 1.0, 1.1, 1.2, 1.4, 1.6, 1.8, 2.0];
const TIER_DEPTH_MULT: [f64; 8] = [1.0, 1.1, 1.2, 1.4, 1.8, 2.2, 2.6, 3.1];
/// Prior foreground probability used to initialize the class bias.
const CLASS_PRIOR: f32 = 0.01;
const PREDICTOR_STD: f32 = 0.01;

pub const PIXEL_MEAN: f32 = 0.5;
pub const PIXEL_STD: f32 = 0.25;

/// Channel widths of the backbone stem and stages for a tier.
pub fn backbone_widths(tier: u32) -> [usize; 5] {
    let mult = TIER_WIDTH_MULT[tier as usize];
    STAGE_WIDTHS.map(|w| round_to_multiple_of_8(w * mult) as usize)
}

/// Stride-1 residual blocks following each stage's downsampling convolution.
pub fn backbone_repeats(tier: u32) -> usize {
    TIER_DEPTH_MULT[tier as usize].round() as usize
}

/// Strided convolutional pyramid standing in for the backbone of a tier.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub stem: ConvAct,
    pub stages: Vec<Vec<ConvAct>>,
}

pub struct BackboneCache {
    stem: ConvActCache,
    stages: Vec<Vec<ConvActCache>>,
}

impl Backbone {
    fn new(tier: u32, rng: &mut ChaCha8Rng) -> Self {
        let widths = backbone_widths(tier);
        let repeats = backbone_repeats(tier);
        let stem = ConvAct::new(3, widths[0], 2, false, rng);
        let stages = (1..widths.len())
            .map(|i| {
                let mut stage = vec![ConvAct::new(widths[i - 1], widths[i], 2, false, rng)];
                stage.extend((0..repeats).map(|_| ConvAct::new(widths[i], widths[i], 1, true, rng)));
                stage
            })
            .collect();
        Self { stem, stages }
    }

    fn zeros_like(&self) -> Self {
        Self {
            stem: self.stem.zeros_like(),
            stages: self
                .stages
                .iter()
                .map(|s| s.iter().map(ConvAct::zeros_like).collect())
                .collect(),
        }
    }

    /// Returns C3, C4, C5 (strides 8, 16, 32).
    fn forward(&self, x: Tensor) -> ([Tensor; 3], BackboneCache) {
        let (mut x, stem) = self.stem.forward(x);
        let mut taps = Vec::with_capacity(3);
        let mut stages = Vec::with_capacity(self.stages.len());
        for (i, stage) in self.stages.iter().enumerate() {
            let (y, caches) = forward_chain(stage, x);
            stages.push(caches);
            if i >= 1 {
                taps.push(y.clone());
            }
            x = y;
        }
        let taps: [Tensor; 3] = taps.try_into().expect("three tapped stages");
        (taps, BackboneCache { stem, stages })
    }

    fn backward(&self, cache: &BackboneCache, dtaps: [Tensor; 3], grad: &mut Backbone) {
        let [d3, d4, d5] = dtaps;
        let mut pending = [None, Some(d3), Some(d4), Some(d5)];
        let mut carry: Option<Tensor> = None;
        for i in (0..self.stages.len()).rev() {
            let mut d = pending[i].take();
            if let Some(c) = carry.take() {
                match &mut d {
                    Some(acc) => acc.add_assign(&c),
                    None => d = Some(c),
                }
            }
            let d = d.expect("gradient reaches every stage");
            carry = backward_chain(&self.stages[i], &cache.stages[i], d, &mut grad.stages[i], true);
        }
        let d = carry.expect("stem gradient");
        self.stem.backward(&cache.stem, &d, &mut grad.stem, false);
    }
}

impl Parameterized for Backbone {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
        self.stem.collect(&format!("{prefix}.stem"), out);
        for (i, stage) in self.stages.iter().enumerate() {
            for (j, block) in stage.iter().enumerate() {
                block.collect(&format!("{prefix}.stage{}.{j}", i + 1), out);
            }
        }
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Vec<f32>>) {
        self.stem.collect_mut(out);
        for stage in &mut self.stages {
            for block in stage {
                block.collect_mut(out);
            }
        }
    }
}

/// Input projections to the fused width plus the stacked fusion layers.
#[derive(Debug, Clone)]
pub struct FusionNeck {
    /// 1x1 projections of C3, C4, C5, and of C5 for the extra P6 level.
    pub projections: Vec<Conv2d>,
    pub layers: Vec<BifpnLayer>,
}

pub struct NeckCache {
    c5: Tensor,
    p6_argmax: Vec<u32>,
    p6_pre_shape: (usize, usize, usize),
    p7_argmax: Vec<u32>,
    layers: Vec<BifpnCache>,
}

impl FusionNeck {
    fn new(in_widths: [usize; 3], channels: usize, depth: usize, rng: &mut ChaCha8Rng) -> Self {
        let projections = [in_widths[0], in_widths[1], in_widths[2], in_widths[2]]
            .into_iter()
            .map(|c| Conv2d::new(c, channels, 1, 1, rng))
            .collect();
        let layers = (0..depth).map(|_| BifpnLayer::new(channels, rng)).collect();
        Self {
            projections,
            layers,
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            projections: self.projections.iter().map(Conv2d::zeros_like).collect(),
            layers: self.layers.iter().map(BifpnLayer::zeros_like).collect(),
        }
    }

    fn num_params(&self) -> usize {
        self.projections.iter().map(Conv2d::num_params).sum::<usize>()
            + self.layers.iter().map(BifpnLayer::num_params).sum::<usize>()
    }

    fn forward(&self, taps: &[Tensor; 3]) -> (Vec<Tensor>, NeckCache) {
        let p3 = self.projections[0].forward(&taps[0]);
        let p4 = self.projections[1].forward(&taps[1]);
        let p5 = self.projections[2].forward(&taps[2]);
        let p6_pre = self.projections[3].forward(&taps[2]);
        let p6_pre_shape = (p6_pre.channels, p6_pre.height, p6_pre.width);
        let (p6, p6_argmax) = tensor::maxpool2(&p6_pre);
        let (p7, p7_argmax) = tensor::maxpool2(&p6);
        let mut levels = vec![p3, p4, p5, p6, p7];
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (out, cache) = layer.forward(levels);
            caches.push(cache);
            levels = out;
        }
        let cache = NeckCache {
            c5: taps[2].clone(),
            p6_argmax,
            p6_pre_shape,
            p7_argmax,
            layers: caches,
        };
        (levels, cache)
    }

    fn backward(
        &self,
        cache: &NeckCache,
        taps: &[Tensor; 3],
        mut dlevels: Vec<Tensor>,
        grad: &mut FusionNeck,
    ) -> [Tensor; 3] {
        for i in (0..self.layers.len()).rev() {
            dlevels = self.layers[i].backward(&cache.layers[i], dlevels, &mut grad.layers[i]);
        }
        let [dp3, dp4, dp5, mut dp6, dp7]: [Tensor; 5] =
            dlevels.try_into().expect("five pyramid levels");
        let (c, h, w) = (dp6.channels, dp6.height, dp6.width);
        dp6.add_assign(&tensor::maxpool2_backward(&dp7, &cache.p7_argmax, (c, h, w)));
        let dp6_pre = tensor::maxpool2_backward(&dp6, &cache.p6_argmax, cache.p6_pre_shape);
        let (g, rest) = grad.projections.split_at_mut(1);
        let dc3 = self.projections[0]
            .backward(&taps[0], &dp3, &mut g[0], true)
            .expect("input grad");
        let (g1, rest) = rest.split_at_mut(1);
        let dc4 = self.projections[1]
            .backward(&taps[1], &dp4, &mut g1[0], true)
            .expect("input grad");
        let (g2, g3) = rest.split_at_mut(1);
        let mut dc5 = self.projections[2]
            .backward(&taps[2], &dp5, &mut g2[0], true)
            .expect("input grad");
        let dc5b = self.projections[3]
            .backward(&cache.c5, &dp6_pre, &mut g3[0], true)
            .expect("input grad");
        dc5.add_assign(&dc5b);
        [dc3, dc4, dc5]
    }
}

impl Parameterized for FusionNeck {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
        for (i, p) in self.projections.iter().enumerate() {
            p.collect(&format!("{prefix}.proj_p{}", i + MIN_LEVEL as usize), out);
        }
        for (i, layer) in self.layers.iter().enumerate() {
            layer.collect(&format!("{prefix}.layer{i}"), out);
        }
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Vec<f32>>) {
        for p in &mut self.projections {
            p.collect_mut(out);
        }
        for layer in &mut self.layers {
            layer.collect_mut(out);
        }
    }
}

/// A prediction subnet: `depth` 3x3 conv + SiLU blocks and a linear predictor.
#[derive(Debug, Clone)]
pub struct Subnet {
    pub convs: Vec<ConvAct>,
    pub predictor: Conv2d,
}

impl Subnet {
    fn new(
        channels: usize,
        depth: usize,
        outputs: usize,
        bias: f32,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let convs = (0..depth)
            .map(|_| ConvAct::new(channels, channels, 1, false, rng))
            .collect();
        let mut predictor = Conv2d::with_std(channels, outputs, 3, 1, PREDICTOR_STD, rng);
        predictor.bias.fill(bias);
        Self { convs, predictor }
    }

    fn zeros_like(&self) -> Self {
        Self {
            convs: self.convs.iter().map(ConvAct::zeros_like).collect(),
            predictor: self.predictor.zeros_like(),
        }
    }

    fn num_params(&self) -> usize {
        self.convs.iter().map(|c| c.conv.num_params()).sum::<usize>() + self.predictor.num_params()
    }

    fn forward(&self, x: Tensor) -> (Tensor, (Vec<ConvActCache>, Tensor)) {
        let (h, caches) = forward_chain(&self.convs, x);
        let y = self.predictor.forward(&h);
        (y, (caches, h))
    }

    fn backward(
        &self,
        cache: &(Vec<ConvActCache>, Tensor),
        dout: &Tensor,
        grad: &mut Subnet,
    ) -> Tensor {
        let dh = self
            .predictor
            .backward(&cache.1, dout, &mut grad.predictor, true)
            .expect("input grad");
        backward_chain(&self.convs, &cache.0, dh, &mut grad.convs, true).expect("input grad")
    }
}

impl Parameterized for Subnet {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
        for (i, c) in self.convs.iter().enumerate() {
            c.collect(&format!("{prefix}.conv{i}"), out);
        }
        self.predictor.collect(&format!("{prefix}.predictor"), out);
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Vec<f32>>) {
        for c in &mut self.convs {
            c.collect_mut(out);
        }
        self.predictor.collect_mut(out);
    }
}

/// Learnable scalar counts by component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub backbone: usize,
    pub fusion: usize,
    pub heads: usize,
}

impl ParamCount {
    pub fn total(&self) -> usize {
        self.backbone + self.fusion + self.heads
    }

    /// Fusion plus heads: the part governed by the depth split.
    pub fn fusion_and_heads(&self) -> usize {
        self.fusion + self.heads
    }
}

/// Raw network outputs flattened in anchor order.
#[derive(Debug, Clone)]
pub struct RawOutputs {
    /// `num_anchors x num_classes`
    pub class_logits: Vec<f32>,
    /// `num_anchors x 4`
    pub box_offsets: Vec<f32>,
}

/// Everything the backward pass needs from one forward pass.
pub struct ForwardCache {
    taps: [Tensor; 3],
    backbone: BackboneCache,
    neck: NeckCache,
    class_heads: Vec<(Vec<ConvActCache>, Tensor)>,
    box_heads: Vec<(Vec<ConvActCache>, Tensor)>,
    level_sides: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Detector {
    config: ArchitectureConfig,
    num_classes: usize,
    pub backbone: Backbone,
    pub neck: FusionNeck,
    pub class_net: Subnet,
    pub box_net: Subnet,
    anchors: Vec<BBox>,
}

/// Builds a freshly initialized detector for `config`.
pub fn build_detector(config: &ArchitectureConfig, num_classes: usize, seed: u64) -> Result<Detector> {
    Detector::new(config, num_classes, seed)
}

impl Detector {
    pub fn new(config: &ArchitectureConfig, num_classes: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if num_classes == 0 {
            return Err(Error::Config("a detector needs at least one class".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let widths = backbone_widths(config.backbone_tier);
        let channels = config.fused_channels as usize;
        let backbone = Backbone::new(config.backbone_tier, &mut rng);
        let neck = FusionNeck::new(
            [widths[2], widths[3], widths[4]],
            channels,
            config.bifpn_depth as usize,
            &mut rng,
        );
        let prior_bias = -((1.0 - CLASS_PRIOR) / CLASS_PRIOR).ln();
        let head_depth = config.head_depth as usize;
        let class_net = Subnet::new(
            channels,
            head_depth,
            ANCHORS_PER_CELL * num_classes,
            prior_bias,
            &mut rng,
        );
        let box_net = Subnet::new(channels, head_depth, ANCHORS_PER_CELL * 4, 0.0, &mut rng);
        Ok(Self {
            config: *config,
            num_classes,
            backbone,
            neck,
            class_net,
            box_net,
            anchors: anchors::generate_anchors(config),
        })
    }

    pub fn config(&self) -> &ArchitectureConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn anchors(&self) -> &[BBox] {
        &self.anchors
    }

    pub fn resolution(&self) -> usize {
        self.config.input_resolution as usize
    }

    /// Same architecture with every learnable value set to zero; used as a
    /// gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config,
            num_classes: self.num_classes,
            backbone: self.backbone.zeros_like(),
            neck: self.neck.zeros_like(),
            class_net: self.class_net.zeros_like(),
            box_net: self.box_net.zeros_like(),
            anchors: Vec::new(),
        }
    }

    pub fn count_params(&self) -> ParamCount {
        let mut backbone = Vec::new();
        self.backbone.collect("backbone", &mut backbone);
        ParamCount {
            backbone: backbone.iter().map(|p| p.data.len()).sum(),
            fusion: self.neck.num_params(),
            heads: self.class_net.num_params() + self.box_net.num_params(),
        }
    }

    /// Named learnable tensors in canonical order.
    pub fn params(&self) -> Vec<ParamRef<'_>> {
        let mut out = Vec::new();
        self.backbone.collect("backbone", &mut out);
        self.neck.collect("fusion", &mut out);
        self.class_net.collect("class_net", &mut out);
        self.box_net.collect("box_net", &mut out);
        out
    }

    /// Mutable learnable tensors in the order of [`Detector::params`].
    pub fn params_mut(&mut self) -> Vec<&mut Vec<f32>> {
        let mut out = Vec::new();
        self.backbone.collect_mut(&mut out);
        self.neck.collect_mut(&mut out);
        self.class_net.collect_mut(&mut out);
        self.box_net.collect_mut(&mut out);
        out
    }

    /// Converts an RGB image to the normalized network input.
    pub fn preprocess(&self, image: &PixelImage) -> Result<Tensor> {
        let r = self.resolution();
        if image.width() as usize != r || image.height() as usize != r {
            return Err(Error::Input(format!(
                "image is {}x{}, detector expects {r}x{r}",
                image.width(),
                image.height()
            )));
        }
        Ok(image_to_tensor(image))
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let r = self.resolution();
        if x.channels != 3 {
            return Err(Error::Input(format!("expected 3 channels, got {}", x.channels)));
        }
        if x.height != r || x.width != r {
            return Err(Error::Input(format!(
                "input is {}x{}, detector expects {r}x{r}",
                x.width, x.height
            )));
        }
        Ok(())
    }

    /// Forward pass keeping the activations needed for [`Detector::backward`].
    pub fn forward(&self, x: Tensor) -> Result<(RawOutputs, ForwardCache)> {
        self.check_input(&x)?;
        let (taps, backbone) = self.backbone.forward(x);
        let (levels, neck) = self.neck.forward(&taps);
        let level_sides: Vec<usize> = levels.iter().map(|t| t.height).collect();
        let mut class_heads = Vec::with_capacity(NUM_LEVELS);
        let mut box_heads = Vec::with_capacity(NUM_LEVELS);
        let mut class_maps = Vec::with_capacity(NUM_LEVELS);
        let mut box_maps = Vec::with_capacity(NUM_LEVELS);
        for level in levels {
            let (c, cc) = self.class_net.forward(level.clone());
            let (b, bc) = self.box_net.forward(level);
            class_maps.push(c);
            box_maps.push(b);
            class_heads.push(cc);
            box_heads.push(bc);
        }
        let outputs = RawOutputs {
            class_logits: flatten_levels(&class_maps),
            box_offsets: flatten_levels(&box_maps),
        };
        debug_assert_eq!(outputs.box_offsets.len(), self.anchors.len() * 4);
        let cache = ForwardCache {
            taps,
            backbone,
            neck,
            class_heads,
            box_heads,
            level_sides,
        };
        Ok((outputs, cache))
    }

    /// Raw outputs only.
    pub fn predict(&self, x: Tensor) -> Result<RawOutputs> {
        Ok(self.forward(x)?.0)
    }

    /// Accumulates parameter gradients into `grad` (a [`Detector::zeros_like`]).
    pub fn backward(
        &self,
        cache: ForwardCache,
        grad_class: &[f64],
        grad_box: &[f64],
        grad: &mut Detector,
    ) {
        let class_per_cell = ANCHORS_PER_CELL * self.num_classes;
        let box_per_cell = ANCHORS_PER_CELL * 4;
        let dclass = unflatten_levels(grad_class, &cache.level_sides, class_per_cell);
        let dbox = unflatten_levels(grad_box, &cache.level_sides, box_per_cell);
        let mut dlevels = Vec::with_capacity(NUM_LEVELS);
        for (l, (dc, db)) in dclass.iter().zip(&dbox).enumerate() {
            let mut d = self
                .class_net
                .backward(&cache.class_heads[l], dc, &mut grad.class_net);
            d.add_assign(&self.box_net.backward(&cache.box_heads[l], db, &mut grad.box_net));
            dlevels.push(d);
        }
        let dtaps = self
            .neck
            .backward(&cache.neck, &cache.taps, dlevels, &mut grad.neck);
        self.backbone
            .backward(&cache.backbone, dtaps, &mut grad.backbone);
    }
}

pub fn image_to_tensor(image: &PixelImage) -> Tensor {
    let (w, h) = (image.width() as usize, image.height() as usize);
    let mut t = Tensor::zeros(3, h, w);
    let plane = w * h;
    for (i, px) in image.as_raw().chunks_exact(3).enumerate() {
        for (c, &v) in px.iter().enumerate() {
            t.data[c * plane + i] = (v as f32 / 255.0 - PIXEL_MEAN) / PIXEL_STD;
        }
    }
    t
}

/// `[C, s, s]` maps to a flat `(level, y, x, channel)` vector.
fn flatten_levels(maps: &[Tensor]) -> Vec<f32> {
    let total: usize = maps.iter().map(|m| m.data.len()).sum();
    let mut out = Vec::with_capacity(total);
    for m in maps {
        let plane = m.plane();
        for p in 0..plane {
            out.extend((0..m.channels).map(|c| m.data[c * plane + p]));
        }
    }
    out
}

fn unflatten_levels(flat: &[f64], sides: &[usize], channels: usize) -> Vec<Tensor> {
    let mut offset = 0;
    sides
        .iter()
        .map(|&side| {
            let plane = side * side;
            let mut t = Tensor::zeros(channels, side, side);
            for p in 0..plane {
                for c in 0..channels {
                    t.data[c * plane + p] = flat[offset + p * channels + c] as f32;
                }
            }
            offset += plane * channels;
            t
        })
        .collect()
}

/// Spatial side of each pyramid level output for a resolution.
pub fn pyramid_sides(resolution: u32) -> Vec<usize> {
    (MIN_LEVEL..=MAX_LEVEL)
        .map(|l| anchors::level_side(resolution, l))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalecfg::{build_config, ScalingSpec};

    fn small(bifpn: u32, head: u32) -> ArchitectureConfig {
        ArchitectureConfig::new(128, 0, 16, bifpn, head).unwrap()
    }

    #[test]
    fn builds_requested_depths() {
        let d = Detector::new(&build_config(&ScalingSpec::new(0, 1, 5).unwrap()).unwrap(), 20, 0).unwrap();
        assert_eq!(d.neck.layers.len(), 1);
        assert_eq!(d.class_net.convs.len(), 5);
        assert_eq!(d.box_net.convs.len(), 5);
        let d = Detector::new(&build_config(&ScalingSpec::new(0, 3, 3).unwrap()).unwrap(), 20, 0).unwrap();
        assert_eq!((d.neck.layers.len(), d.class_net.convs.len()), (3, 3));
        let d = Detector::new(&build_config(&ScalingSpec::new(3, 5, 1).unwrap()).unwrap(), 3, 0).unwrap();
        assert_eq!((d.neck.layers.len(), d.box_net.convs.len()), (8, 2));
        assert_eq!(d.class_net.predictor.out_channels, 27);
    }

    #[test]
    fn rejects_bad_configs() {
        let bad = ArchitectureConfig {
            input_resolution: 200,
            ..small(1, 1)
        };
        assert!(matches!(Detector::new(&bad, 2, 0), Err(Error::Config(_))));
        assert!(Detector::new(&small(1, 1), 0, 0).is_err());
    }

    #[test]
    fn output_layout_matches_anchors() {
        let d = Detector::new(&small(1, 1), 3, 1).unwrap();
        let x = Tensor::zeros(3, 128, 128);
        let out = d.predict(x).unwrap();
        assert_eq!(out.class_logits.len(), d.anchors().len() * 3);
        assert_eq!(out.box_offsets.len(), d.anchors().len() * 4);
        assert!(d.predict(Tensor::zeros(1, 128, 128)).is_err());
        assert!(d.predict(Tensor::zeros(3, 256, 256)).is_err());
    }

    #[test]
    fn flatten_roundtrip() {
        let maps = vec![
            Tensor::from_vec(2, 2, 2, (0..8).map(|v| v as f32).collect()),
            Tensor::from_vec(2, 1, 1, vec![8.0, 9.0]),
        ];
        let flat = flatten_levels(&maps);
        assert_eq!(flat, vec![0.0, 4.0, 1.0, 5.0, 2.0, 6.0, 3.0, 7.0, 8.0, 9.0]);
        let back = unflatten_levels(
            &flat.iter().map(|&v| v as f64).collect::<Vec<_>>(),
            &[2, 1],
            2,
        );
        assert_eq!(back, maps);
    }

    #[test]
    fn single_conv_param_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(Conv2d::new(64, 64, 3, 1, &mut rng).num_params(), 36928);
    }

    #[test]
    fn params_and_params_mut_agree() {
        let mut d = Detector::new(&small(2, 2), 2, 0).unwrap();
        let lens: Vec<usize> = d.params().iter().map(|p| p.data.len()).collect();
        let shapes_ok = d
            .params()
            .iter()
            .all(|p| p.shape.iter().product::<usize>() == p.data.len());
        assert!(shapes_ok);
        let mut_lens: Vec<usize> = d.params_mut().iter().map(|p| p.len()).collect();
        assert_eq!(lens, mut_lens);
        assert_eq!(lens.iter().sum::<usize>(), d.count_params().total());
    }

    /// Whole-network gradient against finite differences on a few parameters.
    #[test]
    fn backward_matches_finite_differences() {
        let cfg = small(1, 1);
        let mut d = Detector::new(&cfg, 2, 5).unwrap();
        let img = Tensor::from_vec(
            3,
            128,
            128,
            (0..3 * 128 * 128).map(|i| ((i * 7919) % 1000) as f32 / 500.0 - 1.0).collect(),
        );
        // objective: weighted sum of the outputs
        let (out, cache) = d.forward(img.clone()).unwrap();
        let wc: Vec<f64> = (0..out.class_logits.len()).map(|i| ((i % 7) as f64 - 3.0) * 1e-2).collect();
        let wb: Vec<f64> = (0..out.box_offsets.len()).map(|i| ((i % 5) as f64 - 2.0) * 1e-2).collect();
        let objective = |d: &Detector| -> f64 {
            let o = d.predict(img.clone()).unwrap();
            o.class_logits.iter().zip(&wc).map(|(a, b)| *a as f64 * b).sum::<f64>()
                + o.box_offsets.iter().zip(&wb).map(|(a, b)| *a as f64 * b).sum::<f64>()
        };
        let mut grad = d.zeros_like();
        d.backward(cache, &wc, &wb, &mut grad);
        let analytic: Vec<Vec<f32>> = grad.params().iter().map(|p| p.data.clone()).collect();
        let names: Vec<String> = d.params().iter().map(|p| p.name.clone()).collect();
        let probes = [
            ("backbone.stem.weight", 5usize),
            ("backbone.stage2.1.weight", 17),
            ("fusion.proj_p6.weight", 3),
            ("fusion.layer0.node4.edge_weights", 2),
            ("fusion.layer0.node0.conv.bias", 1),
            ("class_net.conv0.weight", 11),
            ("box_net.predictor.bias", 4),
        ];
        for (name, idx) in probes {
            let t = names.iter().position(|n| n == name).unwrap_or_else(|| panic!("{name}"));
            let h = 1e-2f32;
            let orig = d.params_mut()[t][idx];
            d.params_mut()[t][idx] = orig + h;
            let fp = objective(&d);
            d.params_mut()[t][idx] = orig - h;
            let fm = objective(&d);
            d.params_mut()[t][idx] = orig;
            let fd = (fp - fm) / (2.0 * h as f64);
            let a = analytic[t][idx] as f64;
            let tol = 2e-2 * fd.abs().max(a.abs()).max(1e-2);
            assert!((fd - a).abs() < tol, "{name}[{idx}]: fd {fd} vs analytic {a}");
        }
    }
}
