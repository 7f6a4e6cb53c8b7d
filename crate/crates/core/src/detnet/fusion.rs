//! Weighted bidirectional feature fusion.
//!
//! Each fusion node blends its inputs with fast normalized weights
//! `w_i' = max(w_i, 0) / (sum_j max(w_j, 0) + eps)` and then applies a 3x3
//! convolution and SiLU. A layer has a top-down pass (P7 to P3) followed by
//! a bottom-up pass (P3 to P7); intermediate levels also receive their own
//! input through a skip edge.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

use super::layers::{ConvAct, ConvActCache, ParamRef, Parameterized};

pub const FUSION_EPSILON: f32 = 1e-4;

/// Normalized fusion weights in double precision.
pub fn normalize_weights(raw: &[f64]) -> Vec<f64> {
    let clamped: Vec<f64> = raw.iter().map(|w| w.max(0.0)).collect();
    let denom: f64 = clamped.iter().sum::<f64>() + FUSION_EPSILON as f64;
    clamped.into_iter().map(|w| w / denom).collect()
}

/// Raw learnable per-edge weights of one fusion node.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionWeights {
    pub raw: Vec<f32>,
}

impl FusionWeights {
    pub fn ones(n: usize) -> Self {
        Self { raw: vec![1.0; n] }
    }

    pub fn normalized(&self) -> Vec<f32> {
        let denom: f32 = self.raw.iter().map(|w| w.max(0.0)).sum::<f32>() + FUSION_EPSILON;
        self.raw.iter().map(|w| w.max(0.0) / denom).collect()
    }

    /// Gradient of the raw weights given `g_i = <dL/dsum, input_i>`.
    fn backward(&self, input_dots: &[f64]) -> Vec<f32> {
        let clamped: Vec<f64> = self.raw.iter().map(|w| w.max(0.0) as f64).collect();
        let denom: f64 = clamped.iter().sum::<f64>() + FUSION_EPSILON as f64;
        let mixed: f64 = input_dots.iter().zip(&clamped).map(|(g, r)| g * r).sum();
        self.raw
            .iter()
            .zip(input_dots)
            .map(|(&w, &g)| {
                if w > 0.0 {
                    (g / denom - mixed / (denom * denom)) as f32
                } else {
                    0.0
                }
            })
            .collect()
    }
}

/// Normalized weighted sum of equally shaped maps (the fusion before its convolution).
pub fn weighted_sum(inputs: &[Tensor], weights: &FusionWeights) -> Result<Tensor> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::Domain("fusion needs at least one input".into()))?;
    if weights.raw.len() != inputs.len() {
        return Err(Error::Domain(format!(
            "{} fusion weights for {} inputs",
            weights.raw.len(),
            inputs.len()
        )));
    }
    if inputs.iter().any(|t| !t.same_shape(first)) {
        return Err(Error::Domain("fusion inputs must share one shape".into()));
    }
    let mut out = first.zeros_like();
    for (x, w) in inputs.iter().zip(weights.normalized()) {
        out.add_scaled(x, w);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resample {
    Same,
    /// From the next coarser level.
    Up,
    /// From the next finer level.
    Down,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Edge {
    pub src: usize,
    pub resample: Resample,
}

/// Feature slots of one layer: 0..5 are the inputs P3..P7; node `i` writes slot `5 + i`.
const LAYER_INPUTS: usize = 5;
const TOPOLOGY: [&[Edge]; 8] = {
    use Resample::*;
    const fn e(src: usize, resample: Resample) -> Edge {
        Edge { src, resample }
    }
    [
        &[e(3, Same), e(4, Up)],            // 5: P6 top-down
        &[e(2, Same), e(5, Up)],            // 6: P5 top-down
        &[e(1, Same), e(6, Up)],            // 7: P4 top-down
        &[e(0, Same), e(7, Up)],            // 8: P3 out
        &[e(1, Same), e(7, Same), e(8, Down)],  // 9: P4 out
        &[e(2, Same), e(6, Same), e(9, Down)],  // 10: P5 out
        &[e(3, Same), e(5, Same), e(10, Down)], // 11: P6 out
        &[e(4, Same), e(11, Down)],         // 12: P7 out
    ]
};
const OUTPUT_SLOTS: [usize; 5] = [8, 9, 10, 11, 12];

#[derive(Debug, Clone)]
pub struct FusionNode {
    pub edges: Vec<Edge>,
    pub weights: FusionWeights,
    pub conv: ConvAct,
}

/// Max-pool switches plus the pre-pool shape.
type PoolTrace = (Vec<u32>, (usize, usize, usize));

#[derive(Debug, Clone)]
pub struct FusionNodeCache {
    inputs: Vec<Tensor>,
    argmax: Vec<Option<PoolTrace>>,
    conv: ConvActCache,
}

fn resample(x: &Tensor, how: Resample) -> (Tensor, Option<PoolTrace>) {
    match how {
        Resample::Same => (x.clone(), None),
        Resample::Up => (tensor::upsample2(x), None),
        Resample::Down => {
            let (y, argmax) = tensor::maxpool2(x);
            (y, Some((argmax, (x.channels, x.height, x.width))))
        }
    }
}

impl FusionNode {
    pub fn new<R: Rng>(edges: Vec<Edge>, channels: usize, rng: &mut R) -> Self {
        let n = edges.len();
        Self {
            edges,
            weights: FusionWeights::ones(n),
            conv: ConvAct::new(channels, channels, 1, false, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            edges: self.edges.clone(),
            weights: FusionWeights {
                raw: vec![0.0; self.weights.raw.len()],
            },
            conv: self.conv.zeros_like(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.weights.raw.len() + self.conv.conv.num_params()
    }

    fn forward(&self, slots: &[Tensor]) -> (Tensor, FusionNodeCache) {
        let (inputs, argmax): (Vec<_>, Vec<_>) = self
            .edges
            .iter()
            .map(|e| resample(&slots[e.src], e.resample))
            .unzip();
        let sum = weighted_sum(&inputs, &self.weights).expect("topology yields matching shapes");
        let (y, conv) = self.conv.forward(sum);
        (y, FusionNodeCache { inputs, argmax, conv })
    }

    /// Returns the gradient for each edge's source slot.
    fn backward(
        &self,
        cache: &FusionNodeCache,
        dout: &Tensor,
        grad: &mut FusionNode,
    ) -> Vec<Tensor> {
        let dsum = self
            .conv
            .backward(&cache.conv, dout, &mut grad.conv, true)
            .expect("input gradient requested");
        let dots: Vec<f64> = cache.inputs.iter().map(|x| dsum.dot(x)).collect();
        for (g, d) in grad.weights.raw.iter_mut().zip(self.weights.backward(&dots)) {
            *g += d;
        }
        let norm = self.weights.normalized();
        self.edges
            .iter()
            .zip(&norm)
            .zip(&cache.argmax)
            .map(|((edge, &w), argmax)| {
                let mut d = dsum.clone();
                d.data.iter_mut().for_each(|v| *v *= w);
                match edge.resample {
                    Resample::Same => d,
                    Resample::Up => tensor::upsample2_backward(&d),
                    Resample::Down => {
                        let (idx, shape) = argmax.as_ref().expect("pooling indices cached");
                        tensor::maxpool2_backward(&d, idx, *shape)
                    }
                }
            })
            .collect()
    }
}

/// Fuses pre-resampled inputs through a node: weighted sum, convolution, SiLU.
pub fn fuse_features(inputs: &[Tensor], node: &FusionNode) -> Result<Tensor> {
    let sum = weighted_sum(inputs, &node.weights)?;
    if sum.channels != node.conv.conv.in_channels {
        return Err(Error::Domain(format!(
            "fusion node expects {} channels, got {}",
            node.conv.conv.in_channels, sum.channels
        )));
    }
    Ok(node.conv.forward(sum).0)
}

impl Parameterized for FusionNode {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
        out.push(ParamRef {
            name: format!("{prefix}.edge_weights"),
            shape: vec![self.weights.raw.len()],
            data: &self.weights.raw,
        });
        self.conv.collect(&format!("{prefix}.conv"), out);
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Vec<f32>>) {
        out.push(&mut self.weights.raw);
        self.conv.collect_mut(out);
    }
}

/// One stacked bidirectional fusion layer over P3..P7.
#[derive(Debug, Clone)]
pub struct BifpnLayer {
    pub nodes: Vec<FusionNode>,
}

pub type BifpnCache = Vec<FusionNodeCache>;

impl BifpnLayer {
    pub fn new<R: Rng>(channels: usize, rng: &mut R) -> Self {
        Self {
            nodes: TOPOLOGY
                .iter()
                .map(|edges| FusionNode::new(edges.to_vec(), channels, rng))
                .collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            nodes: self.nodes.iter().map(FusionNode::zeros_like).collect(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.nodes.iter().map(FusionNode::num_params).sum()
    }

    pub fn forward(&self, levels: Vec<Tensor>) -> (Vec<Tensor>, BifpnCache) {
        assert_eq!(levels.len(), LAYER_INPUTS);
        let mut slots = levels;
        let mut caches = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let (y, cache) = node.forward(&slots);
            slots.push(y);
            caches.push(cache);
        }
        let mut slots: Vec<Option<Tensor>> = slots.into_iter().map(Some).collect();
        let outputs = OUTPUT_SLOTS
            .iter()
            .map(|&s| slots[s].take().expect("output slot filled"))
            .collect();
        (outputs, caches)
    }

    /// Gradient for the five input levels given gradients of the five outputs.
    pub fn backward(
        &self,
        caches: &BifpnCache,
        doutputs: Vec<Tensor>,
        grad: &mut BifpnLayer,
    ) -> Vec<Tensor> {
        let mut slot_grads: Vec<Option<Tensor>> = vec![None; LAYER_INPUTS + self.nodes.len()];
        for (&slot, d) in OUTPUT_SLOTS.iter().zip(doutputs) {
            slot_grads[slot] = Some(d);
        }
        for i in (0..self.nodes.len()).rev() {
            let dout = slot_grads[LAYER_INPUTS + i]
                .take()
                .expect("every fusion node feeds the outputs");
            let node = &self.nodes[i];
            let dins = node.backward(&caches[i], &dout, &mut grad.nodes[i]);
            for (edge, d) in node.edges.iter().zip(dins) {
                match &mut slot_grads[edge.src] {
                    Some(acc) => acc.add_assign(&d),
                    empty => *empty = Some(d),
                }
            }
        }
        slot_grads
            .into_iter()
            .take(LAYER_INPUTS)
            .map(|g| g.expect("every input level is consumed"))
            .collect()
    }
}

impl Parameterized for BifpnLayer {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
        for (i, node) in self.nodes.iter().enumerate() {
            node.collect(&format!("{prefix}.node{i}"), out);
        }
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Vec<f32>>) {
        for node in &mut self.nodes {
            node.collect_mut(out);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn map(value: f32) -> Tensor {
        Tensor::from_vec(2, 2, 2, vec![value; 8])
    }

    #[test]
    fn equal_weights_average() {
        let m = Tensor::from_vec(1, 1, 3, vec![1.0, -2.0, 3.5]);
        let out = weighted_sum(&[m.clone(), m.clone()], &FusionWeights { raw: vec![1.0, 1.0] }).unwrap();
        for (a, b) in out.data.iter().zip(&m.data) {
            assert!((a - b).abs() < 1e-3);
        }
    }

    #[test]
    fn negative_weight_is_clamped() {
        let out = weighted_sum(&[map(1.0), map(100.0)], &FusionWeights { raw: vec![2.0, -5.0] }).unwrap();
        // 2 / (2 + 1e-4) of the first map, nothing from the second
        let expected = 2.0 / (2.0 + 1e-4);
        assert!(out.data.iter().all(|&v| (v as f64 - expected).abs() < 1e-6));
    }

    #[test]
    fn three_to_one_blend() {
        let out = weighted_sum(&[map(1.0), map(0.0)], &FusionWeights { raw: vec![3.0, 1.0] }).unwrap();
        let b = weighted_sum(&[map(0.0), map(1.0)], &FusionWeights { raw: vec![3.0, 1.0] }).unwrap();
        // 3 / 4.0001 and 1 / 4.0001
        assert!((out.data[0] as f64 - 0.749_981_250_5).abs() < 1e-6);
        assert!((b.data[0] as f64 - 0.249_993_750_2).abs() < 1e-6);
        assert!((out.data[0] - 0.75).abs() < 1e-4 && (b.data[0] - 0.25).abs() < 1e-4);
    }

    #[test]
    fn empty_or_mismatched_inputs_fail() {
        assert!(weighted_sum(&[], &FusionWeights { raw: vec![] }).is_err());
        assert!(weighted_sum(&[map(1.0)], &FusionWeights { raw: vec![1.0, 1.0] }).is_err());
        let other = Tensor::zeros(2, 4, 4);
        assert!(weighted_sum(&[map(1.0), other], &FusionWeights::ones(2)).is_err());
    }

    #[test]
    fn fuse_features_applies_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let node = FusionNode::new(vec![], 2, &mut rng);
        let node = FusionNode {
            weights: FusionWeights::ones(2),
            ..node
        };
        let out = fuse_features(&[map(1.0), map(1.0)], &node).unwrap();
        assert_eq!((out.channels, out.height, out.width), (2, 2, 2));
        assert!(fuse_features(&[], &node).is_err());
    }

    #[test]
    fn weight_gradient_matches_finite_differences() {
        let w = FusionWeights { raw: vec![0.7, 1.9, -0.3] };
        let dots = [0.4, -1.2, 2.0];
        let g = w.backward(&dots);
        // objective: sum_i dots_i * normalized_i
        let f = |raw: &[f64]| -> f64 {
            normalize_weights(raw).iter().zip(&dots).map(|(a, b)| a * b).sum()
        };
        for i in 0..2 {
            let mut p: Vec<f64> = w.raw.iter().map(|&v| v as f64).collect();
            let mut m = p.clone();
            p[i] += 1e-5;
            m[i] -= 1e-5;
            let fd = (f(&p) - f(&m)) / 2e-5;
            assert!((fd - g[i] as f64).abs() < 1e-4, "{fd} vs {}", g[i]);
        }
        assert_eq!(g[2], 0.0);
    }

    #[test]
    fn layer_preserves_pyramid_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layer = BifpnLayer::new(8, &mut rng);
        let levels: Vec<Tensor> = (0..5).map(|l| Tensor::zeros(8, 16 >> l, 16 >> l)).collect();
        let (out, caches) = layer.forward(levels.clone());
        for (o, i) in out.iter().zip(&levels) {
            assert!(o.same_shape(i));
        }
        let mut grad = layer.zeros_like();
        let dins = layer.backward(&caches, out.iter().map(Tensor::zeros_like).collect(), &mut grad);
        for (d, i) in dins.iter().zip(&levels) {
            assert!(d.same_shape(i));
        }
    }
}
