//! Single-image CHW feature maps and the handful of kernels the detector needs.
//!
//! Convolutions go through im2col and a single-precision GEMM. Every kernel
//! has a matching backward pass; none of them keep hidden state.

/// Dense `channels x height x width` feature map, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), channels * height * width, "tensor size mismatch");
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.channels, self.height, self.width)
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn add_scaled(&mut self, other: &Tensor, scale: f32) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * *b;
        }
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| *a as f64 * *b as f64)
            .sum()
    }
}

/// `c = a * b + beta * c` for row-major `a: m x k`, `b: k x n`, with optional
/// transposition expressed through strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_transposed: bool,
    b: &[f32],
    b_transposed: bool,
    beta: f32,
    c: &mut [f32],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_transposed { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_transposed { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slice lengths checked above cover every index the strides reach.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Output side of a `kernel`-wide convolution with "same" padding.
pub fn conv_out_side(side: usize, kernel: usize, stride: usize) -> usize {
    let pad = kernel / 2;
    (side + 2 * pad - kernel) / stride + 1
}

fn im2col(x: &Tensor, kernel: usize, stride: usize, oh: usize, ow: usize) -> Vec<f32> {
    let pad = kernel as isize / 2;
    let n = oh * ow;
    let mut col = vec![0.0f32; x.channels * kernel * kernel * n];
    for c in 0..x.channels {
        let src = &x.data[c * x.plane()..(c + 1) * x.plane()];
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (c * kernel + ky) * kernel + kx;
                let dst = &mut col[row * n..(row + 1) * n];
                for oy in 0..oh {
                    let iy = (oy * stride) as isize + ky as isize - pad;
                    if iy < 0 || iy >= x.height as isize {
                        continue;
                    }
                    let src_row = &src[iy as usize * x.width..(iy as usize + 1) * x.width];
                    let dst_row = &mut dst[oy * ow..(oy + 1) * ow];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * stride) as isize + kx as isize - pad;
                        if ix >= 0 && ix < x.width as isize {
                            *d = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im(col: &[f32], dx: &mut Tensor, kernel: usize, stride: usize, oh: usize, ow: usize) {
    let pad = kernel as isize / 2;
    let n = oh * ow;
    let (h, w) = (dx.height, dx.width);
    for c in 0..dx.channels {
        let dst = &mut dx.data[c * h * w..(c + 1) * h * w];
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (c * kernel + ky) * kernel + kx;
                let src = &col[row * n..(row + 1) * n];
                for oy in 0..oh {
                    let iy = (oy * stride) as isize + ky as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * stride) as isize + kx as isize - pad;
                        if ix >= 0 && ix < w as isize {
                            dst_row[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Square convolution with "same" padding. `weight` is `out_c x (in_c * k * k)`.
pub fn conv2d(
    x: &Tensor,
    weight: &[f32],
    bias: &[f32],
    out_channels: usize,
    kernel: usize,
    stride: usize,
) -> Tensor {
    let oh = conv_out_side(x.height, kernel, stride);
    let ow = conv_out_side(x.width, kernel, stride);
    let n = oh * ow;
    let k = x.channels * kernel * kernel;
    let mut out = vec![0.0f32; out_channels * n];
    for (o, row) in out.chunks_exact_mut(n).enumerate() {
        row.fill(bias[o]);
    }
    if kernel == 1 && stride == 1 {
        gemm(out_channels, k, n, weight, false, &x.data, false, 1.0, &mut out);
    } else {
        let col = im2col(x, kernel, stride, oh, ow);
        gemm(out_channels, k, n, weight, false, &col, false, 1.0, &mut out);
    }
    Tensor::from_vec(out_channels, oh, ow, out)
}

/// Accumulates weight and bias gradients; returns the input gradient when asked.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    x: &Tensor,
    weight: &[f32],
    kernel: usize,
    stride: usize,
    dout: &Tensor,
    dweight: &mut [f32],
    dbias: &mut [f32],
    need_input_grad: bool,
) -> Option<Tensor> {
    let out_channels = dout.channels;
    let (oh, ow) = (dout.height, dout.width);
    let n = oh * ow;
    let k = x.channels * kernel * kernel;
    for (o, row) in dout.data.chunks_exact(n).enumerate() {
        dbias[o] += row.iter().sum::<f32>();
    }
    let direct = kernel == 1 && stride == 1;
    let col_storage;
    let col: &[f32] = if direct {
        &x.data
    } else {
        col_storage = im2col(x, kernel, stride, oh, ow);
        &col_storage
    };
    gemm(out_channels, n, k, &dout.data, false, col, true, 1.0, dweight);
    if !need_input_grad {
        return None;
    }
    if direct {
        let mut dx = vec![0.0f32; k * n];
        gemm(k, out_channels, n, weight, true, &dout.data, false, 0.0, &mut dx);
        return Some(Tensor::from_vec(x.channels, x.height, x.width, dx));
    }
    let mut dcol = vec![0.0f32; k * n];
    gemm(k, out_channels, n, weight, true, &dout.data, false, 0.0, &mut dcol);
    let mut dx = x.zeros_like();
    col2im(&dcol, &mut dx, kernel, stride, oh, ow);
    Some(dx)
}

#[inline]
fn sigmoid(v: f32) -> f32 {
    1.0 / (1.0 + (-v).exp())
}

/// Swish / SiLU, `x * sigmoid(x)`.
pub fn silu(x: &Tensor) -> Tensor {
    Tensor {
        data: x.data.iter().map(|&v| v * sigmoid(v)).collect(),
        ..*x
    }
}

pub fn silu_backward(pre: &Tensor, dout: &Tensor) -> Tensor {
    Tensor {
        data: pre
            .data
            .iter()
            .zip(&dout.data)
            .map(|(&v, &g)| {
                let s = sigmoid(v);
                g * s * (1.0 + v * (1.0 - s))
            })
            .collect(),
        ..*pre
    }
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2(x: &Tensor) -> Tensor {
    let (h, w) = (x.height * 2, x.width * 2);
    let mut out = Tensor::zeros(x.channels, h, w);
    for c in 0..x.channels {
        let src = &x.data[c * x.plane()..(c + 1) * x.plane()];
        let dst = &mut out.data[c * h * w..(c + 1) * h * w];
        for y in 0..h {
            let src_row = &src[(y / 2) * x.width..(y / 2 + 1) * x.width];
            for (xx, d) in dst[y * w..(y + 1) * w].iter_mut().enumerate() {
                *d = src_row[xx / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward(dout: &Tensor) -> Tensor {
    let (h, w) = (dout.height / 2, dout.width / 2);
    let mut dx = Tensor::zeros(dout.channels, h, w);
    for c in 0..dout.channels {
        let src = &dout.data[c * dout.plane()..(c + 1) * dout.plane()];
        let dst = &mut dx.data[c * h * w..(c + 1) * h * w];
        for y in 0..dout.height {
            for xx in 0..dout.width {
                dst[(y / 2) * w + xx / 2] += src[y * dout.width + xx];
            }
        }
    }
    dx
}

/// 2x2 max pooling with stride 2. Also returns the flat argmax of every output.
pub fn maxpool2(x: &Tensor) -> (Tensor, Vec<u32>) {
    let (h, w) = (x.height / 2, x.width / 2);
    let mut out = Tensor::zeros(x.channels, h, w);
    let mut argmax = vec![0u32; out.data.len()];
    for c in 0..x.channels {
        let base = c * x.plane();
        for y in 0..h {
            for xx in 0..w {
                let mut best = base + (2 * y) * x.width + 2 * xx;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * y + dy) * x.width + 2 * xx + dx;
                    if x.data[idx] > x.data[best] {
                        best = idx;
                    }
                }
                let o = c * h * w + y * w + xx;
                out.data[o] = x.data[best];
                argmax[o] = best as u32;
            }
        }
    }
    (out, argmax)
}

pub fn maxpool2_backward(dout: &Tensor, argmax: &[u32], input_shape: (usize, usize, usize)) -> Tensor {
    let (c, h, w) = input_shape;
    let mut dx = Tensor::zeros(c, h, w);
    for (g, &idx) in dout.data.iter().zip(argmax) {
        dx.data[idx as usize] += *g;
    }
    dx
}
