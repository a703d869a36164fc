//! Dense building blocks with explicit backward passes: 3x3 convolution,
//! adaptive average pooling, bilinear resampling, and affine layers.
//!
//! Feature maps are channel-major (`C x H x W`).

use crate::linalg::{gemm, gemm_slice, Mat, MatRef, Scalar};
use crate::par::Exec;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![T::zero(); channels * height * width],
        }
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let p = self.plane();
        &self.data[c * p..(c + 1) * p]
    }

    /// `C x HW` view.
    pub fn as_mat(&self) -> MatRef<'_, T> {
        MatRef::new(&self.data, self.channels, self.plane())
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }

    /// Stacks the channels of `self` then `other`.
    pub fn concat(&self, other: &Self) -> Self {
        assert_eq!((self.height, self.width), (other.height, other.width));
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Self {
            channels: self.channels + other.channels,
            height: self.height,
            width: self.width,
            data,
        }
    }

    /// Inverse of [`FeatureMap::concat`] for gradients.
    pub fn split(self, first_channels: usize) -> (Self, Self) {
        let p = self.plane();
        let mut data = self.data;
        let rest = data.split_off(first_channels * p);
        (
            Self {
                channels: first_channels,
                height: self.height,
                width: self.width,
                data,
            },
            Self {
                channels: self.channels - first_channels,
                height: self.height,
                width: self.width,
                data: rest,
            },
        )
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert!(self.same_shape(other));
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Unfolds 3x3 zero-padded neighbourhoods into a `(C*9) x HW` matrix.
pub fn im2col<T: Scalar>(exec: Exec, x: &FeatureMap<T>) -> Mat<T> {
    let (h, w) = (x.height, x.width);
    let plane = h * w;
    let mut cols = Mat::zeros(x.channels * 9, plane);
    exec.chunks_mut(&mut cols.data, plane, |row, out| {
        let (ci, tap) = (row / 9, row % 9);
        let (dy, dx) = (tap as isize / 3 - 1, tap as isize % 3 - 1);
        let src = x.channel(ci);
        for y in 0..h {
            let sy = y as isize + dy;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            let srow = &src[sy as usize * w..(sy as usize + 1) * w];
            let orow = &mut out[y * w..(y + 1) * w];
            for (xo, o) in orow.iter_mut().enumerate() {
                let sx = xo as isize + dx;
                if sx >= 0 && sx < w as isize {
                    *o = srow[sx as usize];
                }
            }
        }
    });
    cols
}

/// Adjoint of [`im2col`].
pub fn col2im<T: Scalar>(exec: Exec, cols: &Mat<T>, channels: usize, h: usize, w: usize) -> FeatureMap<T> {
    let plane = h * w;
    let mut out = FeatureMap::zeros(channels, h, w);
    exec.chunks_mut(&mut out.data, plane, |ci, dst| {
        for tap in 0..9 {
            let (dy, dx) = (tap as isize / 3 - 1, tap as isize % 3 - 1);
            let src = cols.row(ci * 9 + tap);
            for y in 0..h {
                let sy = y as isize + dy;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                let srow = &src[y * w..(y + 1) * w];
                let drow = &mut dst[sy as usize * w..(sy as usize + 1) * w];
                for (xo, &g) in srow.iter().enumerate() {
                    let sx = xo as isize + dx;
                    if sx >= 0 && sx < w as isize {
                        drow[sx as usize] += g;
                    }
                }
            }
        }
    });
    out
}

/// Cached state of one convolution for the backward pass.
pub struct ConvCache<T> {
    pub cols: Mat<T>,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
}

/// 3x3, stride 1, zero padding. `weight` is `out x (in*9)` row-major.
pub fn conv3x3_forward<T: Scalar>(
    exec: Exec,
    x: &FeatureMap<T>,
    weight: &[T],
    bias: &[T],
) -> (FeatureMap<T>, ConvCache<T>) {
    let cout = bias.len();
    assert_eq!(weight.len(), cout * x.channels * 9, "conv weight shape");
    let cols = im2col(exec, x);
    let mut out = FeatureMap::zeros(cout, x.height, x.width);
    gemm_slice(
        T::one(),
        MatRef::new(weight, cout, x.channels * 9),
        cols.view(),
        T::zero(),
        &mut out.data,
    );
    let plane = out.plane();
    for (c, &b) in bias.iter().enumerate() {
        for v in &mut out.data[c * plane..(c + 1) * plane] {
            *v += b;
        }
    }
    (
        out,
        ConvCache {
            cols,
            in_channels: x.channels,
            height: x.height,
            width: x.width,
        },
    )
}

/// Accumulates weight/bias gradients and returns the input gradient.
pub fn conv3x3_backward<T: Scalar>(
    exec: Exec,
    cache: &ConvCache<T>,
    weight: &[T],
    grad_out: &FeatureMap<T>,
    grad_weight: &mut [T],
    grad_bias: &mut [T],
    need_input_grad: bool,
) -> Option<FeatureMap<T>> {
    let cout = grad_out.channels;
    let k = cache.in_channels * 9;
    let go = grad_out.as_mat();
    gemm_slice(T::one(), go, cache.cols.t(), T::one(), grad_weight);
    for (c, gb) in grad_bias.iter_mut().enumerate() {
        *gb += grad_out.channel(c).iter().copied().sum::<T>();
    }
    if !need_input_grad {
        return None;
    }
    let mut dcols = Mat::zeros(k, grad_out.plane());
    gemm(T::one(), MatRef::new(weight, cout, k).t(), go, T::zero(), &mut dcols);
    Some(col2im(exec, &dcols, cache.in_channels, cache.height, cache.width))
}

pub fn relu<T: Scalar>(x: &mut FeatureMap<T>) {
    for v in &mut x.data {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Zeroes gradient entries where the post-ReLU activation is not positive.
pub fn relu_backward<T: Scalar>(activation: &[T], grad: &mut [T]) {
    for (g, &a) in grad.iter_mut().zip(activation) {
        if a <= T::zero() {
            *g = T::zero();
        }
    }
}

fn pool_bins(input: usize, output: usize) -> Vec<(usize, usize)> {
    (0..output)
        .map(|i| {
            let start = i * input / output;
            let end = ((i + 1) * input).div_ceil(output);
            (start, end)
        })
        .collect()
}

/// Adaptive average pooling to `oh x ow` (bin `i` covers
/// `[floor(i*in/out), ceil((i+1)*in/out))`).
pub fn adaptive_avg_pool<T: Scalar>(exec: Exec, x: &FeatureMap<T>, oh: usize, ow: usize) -> FeatureMap<T> {
    let rb = pool_bins(x.height, oh);
    let cb = pool_bins(x.width, ow);
    let mut out = FeatureMap::zeros(x.channels, oh, ow);
    exec.chunks_mut(&mut out.data, oh * ow, |c, dst| {
        let src = x.channel(c);
        for (i, &(r0, r1)) in rb.iter().enumerate() {
            for (j, &(c0, c1)) in cb.iter().enumerate() {
                let mut s = T::zero();
                for r in r0..r1 {
                    for v in &src[r * x.width + c0..r * x.width + c1] {
                        s += *v;
                    }
                }
                dst[i * ow + j] = s / T::of(((r1 - r0) * (c1 - c0)) as f64);
            }
        }
    });
    out
}

pub fn adaptive_avg_pool_backward<T: Scalar>(
    exec: Exec,
    grad_out: &FeatureMap<T>,
    in_h: usize,
    in_w: usize,
) -> FeatureMap<T> {
    let rb = pool_bins(in_h, grad_out.height);
    let cb = pool_bins(in_w, grad_out.width);
    let mut out = FeatureMap::zeros(grad_out.channels, in_h, in_w);
    exec.chunks_mut(&mut out.data, in_h * in_w, |c, dst| {
        let g = grad_out.channel(c);
        for (i, &(r0, r1)) in rb.iter().enumerate() {
            for (j, &(c0, c1)) in cb.iter().enumerate() {
                let share = g[i * grad_out.width + j] / T::of(((r1 - r0) * (c1 - c0)) as f64);
                for r in r0..r1 {
                    for v in &mut dst[r * in_w + c0..r * in_w + c1] {
                        *v += share;
                    }
                }
            }
        }
    });
    out
}

/// Source taps for half-pixel-centred linear interpolation along one axis.
fn linear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear resampling to `oh x ow`.
pub fn bilinear_resize<T: Scalar>(exec: Exec, x: &FeatureMap<T>, oh: usize, ow: usize) -> FeatureMap<T> {
    let ry = linear_taps(x.height, oh);
    let rx = linear_taps(x.width, ow);
    let mut out = FeatureMap::zeros(x.channels, oh, ow);
    exec.chunks_mut(&mut out.data, oh * ow, |c, dst| {
        let src = x.channel(c);
        for (i, &(y0, y1, ly)) in ry.iter().enumerate() {
            let (ly, hy) = (T::of(ly), T::of(1.0 - ly));
            for (j, &(x0, x1, lx)) in rx.iter().enumerate() {
                let (lx, hx) = (T::of(lx), T::of(1.0 - lx));
                let top = src[y0 * x.width + x0] * hx + src[y0 * x.width + x1] * lx;
                let bot = src[y1 * x.width + x0] * hx + src[y1 * x.width + x1] * lx;
                dst[i * ow + j] = top * hy + bot * ly;
            }
        }
    });
    out
}

pub fn bilinear_resize_backward<T: Scalar>(
    exec: Exec,
    grad_out: &FeatureMap<T>,
    in_h: usize,
    in_w: usize,
) -> FeatureMap<T> {
    let ry = linear_taps(in_h, grad_out.height);
    let rx = linear_taps(in_w, grad_out.width);
    let mut out = FeatureMap::zeros(grad_out.channels, in_h, in_w);
    exec.chunks_mut(&mut out.data, in_h * in_w, |c, dst| {
        let g = grad_out.channel(c);
        for (i, &(y0, y1, ly)) in ry.iter().enumerate() {
            let (ly, hy) = (T::of(ly), T::of(1.0 - ly));
            for (j, &(x0, x1, lx)) in rx.iter().enumerate() {
                let (lx, hx) = (T::of(lx), T::of(1.0 - lx));
                let v = g[i * grad_out.width + j];
                dst[y0 * in_w + x0] += v * hy * hx;
                dst[y0 * in_w + x1] += v * hy * lx;
                dst[y1 * in_w + x0] += v * ly * hx;
                dst[y1 * in_w + x1] += v * ly * lx;
            }
        }
    });
    out
}

/// `x * W + b` with `W` stored `in x out`.
pub fn linear_forward<T: Scalar>(x: MatRef<'_, T>, weight: &[T], bias: &[T]) -> Mat<T> {
    let out_dim = bias.len();
    let mut y = Mat::zeros(x.rows, out_dim);
    gemm(T::one(), x, MatRef::new(weight, x.cols, out_dim), T::zero(), &mut y);
    y.add_row_bias(bias);
    y
}

/// Accumulates parameter gradients; returns the input gradient if requested.
pub fn linear_backward<T: Scalar>(
    x: MatRef<'_, T>,
    weight: &[T],
    grad_out: &Mat<T>,
    grad_weight: &mut [T],
    grad_bias: &mut [T],
    need_input_grad: bool,
) -> Option<Mat<T>> {
    let out_dim = grad_out.cols;
    gemm_slice(T::one(), x.t(), grad_out.view(), T::one(), grad_weight);
    grad_out.sum_rows_into(grad_bias);
    need_input_grad.then(|| {
        let mut gx = Mat::zeros(x.rows, x.cols);
        gemm(T::one(), grad_out.view(), MatRef::new(weight, x.cols, out_dim).t(), T::zero(), &mut gx);
        gx
    })
}
