//! Forward/backward kernels on raw tensors. The graph ops in `ops` wrap these;
//! they are public so model code can run the same arithmetic outside a graph.

use crate::{Scalar, Tensor};

/// Output spatial extent of a convolution.
pub fn conv_out_len(len: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (len + 2 * pad - kernel) / stride + 1
}

/// Unfolds one `[c, h, w]` sample into a `[c*k*k, ho*wo]` column matrix.
#[allow(clippy::too_many_arguments)]
pub fn im2col<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    cols: &mut [T],
) {
    let ho = conv_out_len(h, k, stride, pad);
    let wo = conv_out_len(w, k, stride, pad);
    let plane = ho * wo;
    for ci in 0..c {
        let src = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * plane;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let dst = &mut cols[row + oy * wo..row + (oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let srow = &src[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            srow[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into a `[c, h, w]` sample.
#[allow(clippy::too_many_arguments)]
pub fn col2im<T: Scalar>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    x: &mut [T],
) {
    let ho = conv_out_len(h, k, stride, pad);
    let wo = conv_out_len(w, k, stride, pad);
    let plane = ho * wo;
    for ci in 0..c {
        let dst = &mut x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * plane;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &cols[row + oy * wo..row + (oy + 1) * wo];
                    for (ox, &v) in src.iter().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[iy as usize * w + ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Geometry of a 2-D convolution over `[n, ci, h, w]` with `[co, ci, k, k]` weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub ci: usize,
    pub h: usize,
    pub w: usize,
    pub co: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            conv_out_len(self.h, self.k, self.stride, self.pad),
            conv_out_len(self.w, self.k, self.stride, self.pad),
        )
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

pub fn conv2d_forward<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T], b: Option<&[T]>) -> Vec<T> {
    let (ho, wo) = g.out_hw();
    let plane = ho * wo;
    let kk = g.ci * g.k * g.k;
    let mut out = vec![T::zero(); g.n * g.co * plane];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); kk * plane]
    };
    for s in 0..g.n {
        let xs = &x[s * g.ci * g.h * g.w..(s + 1) * g.ci * g.h * g.w];
        let ys = &mut out[s * g.co * plane..(s + 1) * g.co * plane];
        if let Some(b) = b {
            for (co, chunk) in ys.chunks_mut(plane).enumerate() {
                chunk.fill(b[co]);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        let cm: &[T] = if g.is_pointwise() {
            xs
        } else {
            im2col(xs, g.ci, g.h, g.w, g.k, g.stride, g.pad, &mut cols);
            &cols
        };
        T::gemm(g.co, kk, plane, T::one(), w, kk, 1, cm, plane, 1, beta, ys, plane, 1);
    }
    out
}

/// Returns `(dx, dw, db)` for upstream gradient `dy`.
pub fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    dy: &[T],
    need_dx: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (ho, wo) = g.out_hw();
    let plane = ho * wo;
    let kk = g.ci * g.k * g.k;
    let mut dx = if need_dx {
        vec![T::zero(); x.len()]
    } else {
        Vec::new()
    };
    let mut dw = vec![T::zero(); w.len()];
    let mut db = vec![T::zero(); g.co];
    let pointwise = g.is_pointwise();
    let mut cols = vec![T::zero(); if pointwise { 0 } else { kk * plane }];
    let mut dcols = vec![T::zero(); if pointwise || !need_dx { 0 } else { kk * plane }];
    let sample = g.ci * g.h * g.w;
    for s in 0..g.n {
        let xs = &x[s * sample..(s + 1) * sample];
        let dys = &dy[s * g.co * plane..(s + 1) * g.co * plane];
        for (co, chunk) in dys.chunks(plane).enumerate() {
            db[co] += chunk.iter().copied().sum::<T>();
        }
        let cm: &[T] = if pointwise {
            xs
        } else {
            im2col(xs, g.ci, g.h, g.w, g.k, g.stride, g.pad, &mut cols);
            &cols
        };
        // dW += dY * cols^T
        T::gemm(g.co, plane, kk, T::one(), dys, plane, 1, cm, 1, plane, T::one(), &mut dw, kk, 1);
        if need_dx {
            let dxs = &mut dx[s * sample..(s + 1) * sample];
            if pointwise {
                T::gemm(kk, g.co, plane, T::one(), w, 1, kk, dys, plane, 1, T::one(), dxs, plane, 1);
            } else {
                T::gemm(kk, g.co, plane, T::one(), w, 1, kk, dys, plane, 1, T::zero(), &mut dcols, plane, 1);
                col2im(&dcols, g.ci, g.h, g.w, g.k, g.stride, g.pad, dxs);
            }
        }
    }
    (dx, dw, db)
}

/// One output coordinate's two source taps and weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Taps<T> {
    pub i0: usize,
    pub i1: usize,
    pub w0: T,
    pub w1: T,
}

/// Per-axis bilinear taps with half-pixel centers (align-corners = false).
pub fn bilinear_taps<T: Scalar>(in_len: usize, out_len: usize) -> Vec<Taps<T>> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = if i0 + 1 < in_len { i0 + 1 } else { i0 };
            let l1 = src - i0 as f64;
            let l1 = if i1 == i0 { 0.0 } else { l1 };
            Taps {
                i0,
                i1,
                w0: T::lit(1.0 - l1),
                w1: T::lit(l1),
            }
        })
        .collect()
}

/// Bilinear resize of every `[h, w]` plane in `x` (rank 4) to `[oh, ow]`.
pub fn resize_bilinear<T: Scalar>(x: &Tensor<T>, oh: usize, ow: usize) -> Tensor<T> {
    let (n, c, h, w) = x.dims4().expect("resize_bilinear expects rank 4");
    let ty = bilinear_taps::<T>(h, oh);
    let tx = bilinear_taps::<T>(w, ow);
    let src = x.data();
    let mut out = vec![T::zero(); n * c * oh * ow];
    for p in 0..n * c {
        let plane = &src[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (oy, a) in ty.iter().enumerate() {
            let r0 = &plane[a.i0 * w..(a.i0 + 1) * w];
            let r1 = &plane[a.i1 * w..(a.i1 + 1) * w];
            for (ox, b) in tx.iter().enumerate() {
                let top = r0[b.i0] * b.w0 + r0[b.i1] * b.w1;
                let bot = r1[b.i0] * b.w0 + r1[b.i1] * b.w1;
                dst[oy * ow + ox] = top * a.w0 + bot * a.w1;
            }
        }
    }
    Tensor::from_vec(&[n, c, oh, ow], out).expect("shape")
}

/// Adjoint of [`resize_bilinear`] from an `[n, c, oh, ow]` gradient to `[n, c, h, w]`.
pub fn resize_bilinear_backward<T: Scalar>(dy: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let (n, c, oh, ow) = dy.dims4().expect("rank 4");
    let ty = bilinear_taps::<T>(h, oh);
    let tx = bilinear_taps::<T>(w, ow);
    let mut out = vec![T::zero(); n * c * h * w];
    for p in 0..n * c {
        let g = &dy.data()[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for (oy, a) in ty.iter().enumerate() {
            for (ox, b) in tx.iter().enumerate() {
                let v = g[oy * ow + ox];
                dst[a.i0 * w + b.i0] += v * a.w0 * b.w0;
                dst[a.i0 * w + b.i1] += v * a.w0 * b.w1;
                dst[a.i1 * w + b.i0] += v * a.w1 * b.w0;
                dst[a.i1 * w + b.i1] += v * a.w1 * b.w1;
            }
        }
    }
    Tensor::from_vec(&[n, c, h, w], out).expect("shape")
}

/// Non-overlapping `k x k` average pooling; spatial dims must be divisible by `k`.
pub fn avg_pool<T: Scalar>(x: &Tensor<T>, k: usize) -> Tensor<T> {
    let (n, c, h, w) = x.dims4().expect("avg_pool expects rank 4");
    assert!(h % k == 0 && w % k == 0, "avg_pool: {h}x{w} not divisible by {k}");
    let (oh, ow) = (h / k, w / k);
    let inv = T::one() / T::lit((k * k) as f64);
    let mut out = vec![T::zero(); n * c * oh * ow];
    for p in 0..n * c {
        let plane = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = T::zero();
                for dy in 0..k {
                    let row = &plane[(oy * k + dy) * w + ox * k..(oy * k + dy) * w + ox * k + k];
                    for &v in row {
                        acc += v;
                    }
                }
                dst[oy * ow + ox] = acc * inv;
            }
        }
    }
    Tensor::from_vec(&[n, c, oh, ow], out).expect("shape")
}

pub fn avg_pool_backward<T: Scalar>(dy: &Tensor<T>, k: usize) -> Tensor<T> {
    let (n, c, oh, ow) = dy.dims4().expect("rank 4");
    let (h, w) = (oh * k, ow * k);
    let inv = T::one() / T::lit((k * k) as f64);
    let mut out = vec![T::zero(); n * c * h * w];
    for p in 0..n * c {
        let g = &dy.data()[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] = g[(y / k) * ow + x / k] * inv;
            }
        }
    }
    Tensor::from_vec(&[n, c, h, w], out).expect("shape")
}

/// Axis-aligned box in image pixels, `(x, y)` top-left, width, height.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoiBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

/// Sparse bilinear sampling plan of RoI-Align: for every output cell of every
/// box, the feature-plane offsets and weights that average into it.
#[derive(Clone, Debug)]
pub struct RoiPlan<T> {
    pub out: usize,
    pub h: usize,
    pub w: usize,
    /// `starts[cell]..starts[cell + 1]` indexes `taps` for cell `(r, py, px)`.
    starts: Vec<usize>,
    taps: Vec<(usize, T)>,
}

impl<T: Scalar> RoiPlan<T> {
    /// Plans RoI-Align over an `h x w` feature plane at the given stride, with
    /// `sampling x sampling` bilinear samples per output bin in continuous
    /// coordinates (pixel centers at half-integers, no quantization).
    pub fn new(boxes: &[RoiBox], h: usize, w: usize, stride: f64, out: usize, sampling: usize) -> Self {
        let mut starts = Vec::with_capacity(boxes.len() * out * out + 1);
        let mut taps = Vec::new();
        let inv = 1.0 / (sampling * sampling) as f64;
        for b in boxes {
            let x0 = b.x / stride - 0.5;
            let y0 = b.y / stride - 0.5;
            let bw = b.w / stride / out as f64;
            let bh = b.h / stride / out as f64;
            for py in 0..out {
                for px in 0..out {
                    starts.push(taps.len());
                    for sy in 0..sampling {
                        let yy = y0 + (py as f64 + (sy as f64 + 0.5) / sampling as f64) * bh;
                        for sx in 0..sampling {
                            let xx = x0 + (px as f64 + (sx as f64 + 0.5) / sampling as f64) * bw;
                            push_bilinear(&mut taps, yy, xx, h, w, inv);
                        }
                    }
                }
            }
        }
        starts.push(taps.len());
        Self {
            out,
            h,
            w,
            starts,
            taps,
        }
    }

    pub fn num_boxes(&self) -> usize {
        (self.starts.len() - 1) / (self.out * self.out)
    }

    /// `[1, c, h, w]` features to `[boxes, c, out, out]`.
    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let (_, c, h, w) = x.dims4().expect("rank 4");
        assert_eq!((h, w), (self.h, self.w), "RoiPlan built for another plane size");
        let cells = self.out * self.out;
        let nb = self.num_boxes();
        let mut out = vec![T::zero(); nb * c * cells];
        for r in 0..nb {
            for ch in 0..c {
                let plane = &x.data()[ch * h * w..(ch + 1) * h * w];
                for cell in 0..cells {
                    let id = r * cells + cell;
                    let mut acc = T::zero();
                    for &(off, wt) in &self.taps[self.starts[id]..self.starts[id + 1]] {
                        acc += plane[off] * wt;
                    }
                    out[(r * c + ch) * cells + cell] = acc;
                }
            }
        }
        Tensor::from_vec(&[nb, c, self.out, self.out], out).expect("shape")
    }

    pub fn backward(&self, dy: &Tensor<T>, c: usize) -> Tensor<T> {
        let cells = self.out * self.out;
        let nb = self.num_boxes();
        let (h, w) = (self.h, self.w);
        let mut dx = vec![T::zero(); c * h * w];
        for r in 0..nb {
            for ch in 0..c {
                let plane = &mut dx[ch * h * w..(ch + 1) * h * w];
                for cell in 0..cells {
                    let id = r * cells + cell;
                    let g = dy.data()[(r * c + ch) * cells + cell];
                    for &(off, wt) in &self.taps[self.starts[id]..self.starts[id + 1]] {
                        plane[off] += g * wt;
                    }
                }
            }
        }
        Tensor::from_vec(&[1, c, h, w], dx).expect("shape")
    }
}

fn push_bilinear<T: Scalar>(taps: &mut Vec<(usize, T)>, y: f64, x: f64, h: usize, w: usize, scale: f64) {
    if y < -1.0 || y > h as f64 || x < -1.0 || x > w as f64 {
        return;
    }
    let (mut y, mut x) = (y.max(0.0), x.max(0.0));
    let mut y0 = y.floor() as usize;
    let mut x0 = x.floor() as usize;
    let (y1, x1);
    if y0 >= h - 1 {
        y0 = h - 1;
        y1 = h - 1;
        y = y0 as f64;
    } else {
        y1 = y0 + 1;
    }
    if x0 >= w - 1 {
        x0 = w - 1;
        x1 = w - 1;
        x = x0 as f64;
    } else {
        x1 = x0 + 1;
    }
    let ly = y - y0 as f64;
    let lx = x - x0 as f64;
    let (hy, hx) = (1.0 - ly, 1.0 - lx);
    for (off, wt) in [
        (y0 * w + x0, hy * hx),
        (y0 * w + x1, hy * lx),
        (y1 * w + x0, ly * hx),
        (y1 * w + x1, ly * lx),
    ] {
        if wt != 0.0 {
            taps.push((off, T::lit(wt * scale)));
        }
    }
}

/// Softmax over axis 1 of a `[n, k, ...]` tensor.
pub fn softmax_axis1<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let shape = x.shape();
    let (n, k) = (shape[0], shape[1]);
    let inner: usize = shape[2..].iter().product();
    let mut out = vec![T::zero(); x.numel()];
    let d = x.data();
    for s in 0..n {
        for p in 0..inner {
            let idx = |c: usize| (s * k + c) * inner + p;
            let m = (0..k).map(|c| d[idx(c)]).fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for c in 0..k {
                let e = (d[idx(c)] - m).exp();
                out[idx(c)] = e;
                z += e;
            }
            for c in 0..k {
                out[idx(c)] /= z;
            }
        }
    }
    Tensor::from_vec(shape, out).expect("shape")
}

pub fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}
