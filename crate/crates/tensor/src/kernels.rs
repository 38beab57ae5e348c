//! Raw compute kernels over `NCHW` buffers. The graph layer owns shape checking.

use crate::scalar::{pairwise_sum, Scalar};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_h: usize,
    pub in_w: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn patch(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    /// 1x1 stride-1 convolutions read the input directly as the column matrix.
    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<T: Scalar>(g: &ConvGeometry, x: &[T], col: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    let k = g.kernel;
    for c in 0..g.in_ch {
        let xc = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut col[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.in_h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &xc[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.in_w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(g: &ConvGeometry, col: &[T], dx: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    let k = g.kernel;
    for c in 0..g.in_ch {
        let dxc = &mut dx[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &col[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst = &mut dxc[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            dst[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Scalar>(
    g: &ConvGeometry,
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
) -> Tensor<T> {
    let n = x.shape()[0];
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    let patch = g.patch();
    let mut out = vec![T::zero(); n * g.out_ch * plane];
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); patch * plane] };
    for s in 0..n {
        let xs = x.sample(s);
        let cols: &[T] = if g.is_pointwise() {
            xs
        } else {
            im2col(g, xs, &mut col);
            &col
        };
        let o = &mut out[s * g.out_ch * plane..(s + 1) * g.out_ch * plane];
        if let Some(b) = b {
            for (oc, chunk) in o.chunks_mut(plane).enumerate() {
                chunk.fill(b.data()[oc]);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        T::gemm(g.out_ch, patch, plane, T::one(), w.data(), false, cols, false, beta, o);
    }
    Tensor::from_vec(&[n, g.out_ch, oh, ow], out)
}

/// Returns `(dx, dw, db)`; each is computed only when requested.
pub fn conv2d_backward<T: Scalar>(
    g: &ConvGeometry,
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>) {
    let n = x.shape()[0];
    let plane = g.out_h() * g.out_w();
    let patch = g.patch();
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut dw = need_dw.then(|| Tensor::zeros(w.shape()));
    let mut db = need_db.then(|| Tensor::zeros(&[g.out_ch]));
    let mut col = vec![T::zero(); if g.is_pointwise() { 0 } else { patch * plane }];
    let mut dcol = vec![T::zero(); if need_dx && !g.is_pointwise() { patch * plane } else { 0 }];
    for s in 0..n {
        let dys = dy.sample(s);
        if let Some(dw) = dw.as_mut() {
            let xs = x.sample(s);
            let cols: &[T] = if g.is_pointwise() {
                xs
            } else {
                im2col(g, xs, &mut col);
                &col
            };
            // dW (out x patch) += dY (out x plane) * cols^T (plane x patch)
            T::gemm(g.out_ch, plane, patch, T::one(), dys, false, cols, true, T::one(), dw.data_mut());
        }
        if let Some(db) = db.as_mut() {
            for (oc, chunk) in dys.chunks(plane).enumerate() {
                db.data_mut()[oc] += pairwise_sum(chunk);
            }
        }
        if let Some(dx) = dx.as_mut() {
            let per = x.len() / n;
            let dxs = &mut dx.data_mut()[s * per..(s + 1) * per];
            if g.is_pointwise() {
                T::gemm(patch, g.out_ch, plane, T::one(), w.data(), true, dys, false, T::one(), dxs);
            } else {
                // dcols (patch x plane) = W^T (patch x out) * dY (out x plane)
                T::gemm(patch, g.out_ch, plane, T::one(), w.data(), true, dys, false, T::zero(), &mut dcol);
                col2im(g, &dcol, dxs);
            }
        }
    }
    (dx, dw, db)
}

/// Per-channel batch statistics `(mean, biased variance)` over `N, H, W`.
pub fn channel_moments<T: Scalar>(x: &Tensor<T>) -> (Vec<T>, Vec<T>) {
    let (n, c, h, w) = x.dims4();
    let plane = h * w;
    let count = T::of((n * plane) as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    let mut buf = Vec::with_capacity(n * plane);
    for ch in 0..c {
        buf.clear();
        for s in 0..n {
            let off = (s * c + ch) * plane;
            buf.extend_from_slice(&x.data()[off..off + plane]);
        }
        let m = pairwise_sum(&buf) / count;
        for v in buf.iter_mut() {
            *v = (*v - m) * (*v - m);
        }
        mean[ch] = m;
        var[ch] = pairwise_sum(&buf) / count;
    }
    (mean, var)
}

pub fn upsample_nearest2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); n * c * oh * ow];
    for p in 0..n * c {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..oh {
            for xx in 0..ow {
                dst[y * ow + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
    Tensor::from_vec(&[n, c, oh, ow], out)
}

pub fn upsample_nearest2_backward<T: Scalar>(dy: &Tensor<T>) -> Tensor<T> {
    let (n, c, oh, ow) = dy.dims4();
    let (h, w) = (oh / 2, ow / 2);
    let mut out = vec![T::zero(); n * c * h * w];
    for p in 0..n * c {
        let src = &dy.data()[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for y in 0..oh {
            for xx in 0..ow {
                dst[(y / 2) * w + xx / 2] += src[y * ow + xx];
            }
        }
    }
    Tensor::from_vec(&[n, c, h, w], out)
}

pub fn avg_pool2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::of(0.25);
    let mut out = vec![T::zero(); n * c * oh * ow];
    for p in 0..n * c {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..oh {
            for xx in 0..ow {
                let (sy, sx) = (2 * y, 2 * xx);
                dst[y * ow + xx] = (src[sy * w + sx]
                    + src[sy * w + sx + 1]
                    + src[(sy + 1) * w + sx]
                    + src[(sy + 1) * w + sx + 1])
                    * quarter;
            }
        }
    }
    Tensor::from_vec(&[n, c, oh, ow], out)
}

pub fn avg_pool2_backward<T: Scalar>(dy: &Tensor<T>, in_h: usize, in_w: usize) -> Tensor<T> {
    let (n, c, oh, ow) = dy.dims4();
    let quarter = T::of(0.25);
    let mut out = vec![T::zero(); n * c * in_h * in_w];
    for p in 0..n * c {
        let src = &dy.data()[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut out[p * in_h * in_w..(p + 1) * in_h * in_w];
        for y in 0..oh {
            for xx in 0..ow {
                let g = src[y * ow + xx] * quarter;
                let (sy, sx) = (2 * y, 2 * xx);
                dst[sy * in_w + sx] += g;
                dst[sy * in_w + sx + 1] += g;
                dst[(sy + 1) * in_w + sx] += g;
                dst[(sy + 1) * in_w + sx + 1] += g;
            }
        }
    }
    Tensor::from_vec(&[n, c, in_h, in_w], out)
}

/// Valid-mode 1-D correlation along the last axis (`Axis::Width`) or the
/// second to last (`Axis::Height`) of a rank-4 tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Height,
    Width,
}

pub fn filter_valid<T: Scalar>(x: &Tensor<T>, taps: &[T], axis: Axis) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let k = taps.len();
    let (oh, ow) = match axis {
        Axis::Height => (h + 1 - k, w),
        Axis::Width => (h, w + 1 - k),
    };
    let mut out = vec![T::zero(); n * c * oh * ow];
    for p in 0..n * c {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..oh {
            for xx in 0..ow {
                let mut acc = T::zero();
                for (t, &tap) in taps.iter().enumerate() {
                    let v = match axis {
                        Axis::Height => src[(y + t) * w + xx],
                        Axis::Width => src[y * w + xx + t],
                    };
                    acc += tap * v;
                }
                dst[y * ow + xx] = acc;
            }
        }
    }
    Tensor::from_vec(&[n, c, oh, ow], out)
}

pub fn filter_valid_backward<T: Scalar>(
    dy: &Tensor<T>,
    taps: &[T],
    axis: Axis,
    in_h: usize,
    in_w: usize,
) -> Tensor<T> {
    let (n, c, oh, ow) = dy.dims4();
    let mut out = vec![T::zero(); n * c * in_h * in_w];
    for p in 0..n * c {
        let src = &dy.data()[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut out[p * in_h * in_w..(p + 1) * in_h * in_w];
        for y in 0..oh {
            for xx in 0..ow {
                let g = src[y * ow + xx];
                for (t, &tap) in taps.iter().enumerate() {
                    match axis {
                        Axis::Height => dst[(y + t) * in_w + xx] += tap * g,
                        Axis::Width => dst[y * in_w + xx + t] += tap * g,
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[n, c, in_h, in_w], out)
}

pub fn channel_softmax<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let plane = h * w;
    let mut out = vec![T::zero(); x.len()];
    for s in 0..n {
        let base = s * c * plane;
        for i in 0..plane {
            let mut m = T::neg_infinity();
            for ch in 0..c {
                m = m.max(x.data()[base + ch * plane + i]);
            }
            let mut z = T::zero();
            for ch in 0..c {
                let e = (x.data()[base + ch * plane + i] - m).exp();
                out[base + ch * plane + i] = e;
                z += e;
            }
            for ch in 0..c {
                out[base + ch * plane + i] /= z;
            }
        }
    }
    Tensor::from_vec(x.shape(), out)
}

pub fn channel_softmax_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = y.dims4();
    let plane = h * w;
    let mut out = vec![T::zero(); y.len()];
    for s in 0..n {
        let base = s * c * plane;
        for i in 0..plane {
            let mut dot = T::zero();
            for ch in 0..c {
                let j = base + ch * plane + i;
                dot += y.data()[j] * dy.data()[j];
            }
            for ch in 0..c {
                let j = base + ch * plane + i;
                out[j] = y.data()[j] * (dy.data()[j] - dot);
            }
        }
    }
    Tensor::from_vec(y.shape(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(g: &ConvGeometry, x: &Tensor<f64>, w: &Tensor<f64>) -> Tensor<f64> {
        let n = x.shape()[0];
        let (oh, ow) = (g.out_h(), g.out_w());
        Tensor::from_fn(&[n, g.out_ch, oh, ow], |idx| {
            let ox = idx % ow;
            let oy = (idx / ow) % oh;
            let oc = (idx / (ow * oh)) % g.out_ch;
            let s = idx / (ow * oh * g.out_ch);
            let mut acc = 0.0;
            for c in 0..g.in_ch {
                for ki in 0..g.kernel {
                    for kj in 0..g.kernel {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if iy < 0 || ix < 0 || iy >= g.in_h as isize || ix >= g.in_w as isize {
                            continue;
                        }
                        let xv = x.data()[((s * g.in_ch + c) * g.in_h + iy as usize) * g.in_w + ix as usize];
                        let wv = w.data()[((oc * g.in_ch + c) * g.kernel + ki) * g.kernel + kj];
                        acc += xv * wv;
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn conv_matches_direct_loops() {
        for &(k, stride, pad) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0), (4, 2, 1)] {
            let g = ConvGeometry { in_ch: 3, out_ch: 4, kernel: k, stride, pad, in_h: 7, in_w: 6 };
            let x = Tensor::from_fn(&[2, 3, 7, 6], |i| ((i * 37 % 11) as f64 - 5.0) / 7.0);
            let w = Tensor::from_fn(&[4, 3, k, k], |i| ((i * 13 % 7) as f64 - 3.0) / 5.0);
            let got = conv2d_forward(&g, &x, &w, None);
            let want = naive_conv(&g, &x, &w);
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn moments_of_constant_channel() {
        let x = Tensor::<f64>::full(&[2, 1, 3, 3], 4.0);
        let (m, v) = channel_moments(&x);
        assert_eq!(m, vec![4.0]);
        assert_eq!(v, vec![0.0]);
    }
}
