use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{self, Tensor};

/// Learnable tensor handed to optimizers and checkpoints.
pub struct ParamRef<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a Vec<f32>,
}

/// Components that own learnable tensors.
///
/// `collect` and `collect_mut` must visit tensors in the same order.
pub trait Parameterized {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a>>);
    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Vec<f32>>);
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Conv2d {
    /// He-normal weights, zero bias.
    pub fn new<R: Rng>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = (in_channels * kernel * kernel) as f32;
        let std = (2.0 / fan_in).sqrt();
        Self::with_std(in_channels, out_channels, kernel, stride, std, rng)
    }

    pub fn with_std<R: Rng>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        std: f32,
        rng: &mut R,
    ) -> Self {
        let normal = Normal::new(0.0f32, std).expect("finite std");
        let len = out_channels * in_channels * kernel * kernel;
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            weight: (0..len).map(|_| normal.sample(rng)).collect(),
            bias: vec![0.0; out_channels],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: vec![0.0; self.weight.len()],
            bias: vec![0.0; self.bias.len()],
            ..*self
        }
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        debug_assert_eq!(x.channels, self.in_channels);
        tensor::conv2d(x, &self.weight, &self.bias, self.out_channels, self.kernel, self.stride)
    }

    pub fn backward(
        &self,
        x: &Tensor,
        dout: &Tensor,
        grad: &mut Conv2d,
        need_input_grad: bool,
    ) -> Option<Tensor> {
        tensor::conv2d_backward(
            x,
            &self.weight,
            self.kernel,
            self.stride,
            dout,
            &mut grad.weight,
            &mut grad.bias,
            need_input_grad,
        )
    }
}

impl Parameterized for Conv2d {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
        out.push(ParamRef {
            name: format!("{prefix}.weight"),
            shape: vec![self.out_channels, self.in_channels, self.kernel, self.kernel],
            data: &self.weight,
        });
        out.push(ParamRef {
            name: format!("{prefix}.bias"),
            shape: vec![self.out_channels],
            data: &self.bias,
        });
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Vec<f32>>) {
        out.push(&mut self.weight);
        out.push(&mut self.bias);
    }
}

/// Convolution followed by SiLU, optionally with an identity shortcut.
#[derive(Debug, Clone)]
pub struct ConvAct {
    pub conv: Conv2d,
    pub residual: bool,
}

#[derive(Debug, Clone)]
pub struct ConvActCache {
    input: Tensor,
    pre: Tensor,
}

impl ConvAct {
    pub fn new<R: Rng>(
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        residual: bool,
        rng: &mut R,
    ) -> Self {
        assert!(!residual || (in_channels == out_channels && stride == 1));
        Self {
            conv: Conv2d::new(in_channels, out_channels, 3, stride, rng),
            residual,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            conv: self.conv.zeros_like(),
            residual: self.residual,
        }
    }

    pub fn forward(&self, x: Tensor) -> (Tensor, ConvActCache) {
        let pre = self.conv.forward(&x);
        let mut y = tensor::silu(&pre);
        if self.residual {
            y.add_assign(&x);
        }
        (y, ConvActCache { input: x, pre })
    }

    pub fn backward(
        &self,
        cache: &ConvActCache,
        dout: &Tensor,
        grad: &mut ConvAct,
        need_input_grad: bool,
    ) -> Option<Tensor> {
        let dpre = tensor::silu_backward(&cache.pre, dout);
        let dx = self
            .conv
            .backward(&cache.input, &dpre, &mut grad.conv, need_input_grad || self.residual);
        match dx {
            Some(mut dx) if self.residual => {
                dx.add_assign(dout);
                need_input_grad.then_some(dx)
            }
            other => other,
        }
    }
}

impl Parameterized for ConvAct {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
        self.conv.collect(prefix, out);
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Vec<f32>>) {
        self.conv.collect_mut(out);
    }
}

/// Runs a chain of blocks, keeping every cache.
pub fn forward_chain(blocks: &[ConvAct], mut x: Tensor) -> (Tensor, Vec<ConvActCache>) {
    let mut caches = Vec::with_capacity(blocks.len());
    for block in blocks {
        let (y, cache) = block.forward(x);
        caches.push(cache);
        x = y;
    }
    (x, caches)
}

pub fn backward_chain(
    blocks: &[ConvAct],
    caches: &[ConvActCache],
    mut dout: Tensor,
    grads: &mut [ConvAct],
    need_input_grad: bool,
) -> Option<Tensor> {
    for i in (0..blocks.len()).rev() {
        let need = i > 0 || need_input_grad;
        dout = blocks[i].backward(&caches[i], &dout, &mut grads[i], need)?;
    }
    Some(dout)
}
