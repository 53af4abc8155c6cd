//! Forward and backward numeric kernels behind the autodiff tape.
//!
//! These operate on plain [`Tensor`]s and know nothing about graphs. Layouts
//! are NCHW throughout.

use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

/// Geometry of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_len(&self, len: usize, k: usize) -> usize {
        (len + 2 * self.pad - k) / self.stride + 1
    }
}

fn is_pointwise(kh: usize, kw: usize, g: ConvGeom) -> bool {
    kh == 1 && kw == 1 && g.stride == 1 && g.pad == 0
}

/// Unfolds one `c x h x w` image into a `(c*kh*kw) x (oh*ow)` column matrix.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    img: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    g: ConvGeom,
    oh: usize,
    ow: usize,
    cols: &mut [T],
) {
    let plane = oh * ow;
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &img[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    for (ox, slot) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *slot = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back into an image, accumulating.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    g: ConvGeom,
    oh: usize,
    ow: usize,
    img: &mut [T],
) {
    let plane = oh * ow;
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (ci * h + iy as usize) * w;
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            img[base + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation `x (N,Cin,H,W) * w (Cout,Cin,kh,kw) + b`.
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    g: ConvGeom,
) -> Tensor<T> {
    let (n, c, h, wd) = x.dims4();
    let (co, ci, kh, kw) = w.dims4();
    assert_eq!(c, ci, "conv2d channel mismatch: input {c}, weight {ci}");
    let (oh, ow) = (g.out_len(h, kh), g.out_len(wd, kw));
    let k = ci * kh * kw;
    let plane = oh * ow;
    let mut out = Tensor::zeros(&[n, co, oh, ow]);
    let pointwise = is_pointwise(kh, kw, g);
    let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); k * plane] };
    let in_img = c * h * wd;
    for b in 0..n {
        let img = &x.data()[b * in_img..(b + 1) * in_img];
        let colm: &[T] = if pointwise {
            img
        } else {
            im2col(img, c, h, wd, kh, kw, g, oh, ow, &mut cols);
            &cols
        };
        let dst = &mut out.data_mut()[b * co * plane..(b + 1) * co * plane];
        T::gemm(co, k, plane, T::one(), w.data(), (k, 1), colm, (plane, 1), T::zero(), dst, (plane, 1));
        if let Some(bias) = bias {
            for (o, &bv) in bias.data().iter().enumerate() {
                for v in &mut dst[o * plane..(o + 1) * plane] {
                    *v += bv;
                }
            }
        }
    }
    out
}

/// Optional gradients with respect to `(x, w, b)`.
pub type ConvGrads<T> = (Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>);

/// Gradients of [`conv2d_forward`] with respect to `(x, w, b)`.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad_out: &Tensor<T>,
    g: ConvGeom,
    need_x: bool,
    need_w: bool,
    need_b: bool,
) -> ConvGrads<T> {
    let (n, c, h, wd) = x.dims4();
    let (co, _, kh, kw) = w.dims4();
    let (_, _, oh, ow) = grad_out.dims4();
    let k = c * kh * kw;
    let plane = oh * ow;
    let in_img = c * h * wd;
    let pointwise = is_pointwise(kh, kw, g);
    let mut gx = need_x.then(|| Tensor::zeros(x.shape()));
    let mut gw = need_w.then(|| Tensor::zeros(w.shape()));
    let mut gb = need_b.then(|| Tensor::zeros(&[co]));
    let mut cols = vec![T::zero(); if pointwise { 0 } else { k * plane }];
    let mut gcols = vec![T::zero(); if need_x && !pointwise { k * plane } else { 0 }];
    for b in 0..n {
        let gout = &grad_out.data()[b * co * plane..(b + 1) * co * plane];
        let img = &x.data()[b * in_img..(b + 1) * in_img];
        if let Some(gw) = gw.as_mut() {
            let colm: &[T] = if pointwise {
                img
            } else {
                im2col(img, c, h, wd, kh, kw, g, oh, ow, &mut cols);
                &cols
            };
            // gw (co x k) += gout (co x plane) * colm^T (plane x k)
            T::gemm(co, plane, k, T::one(), gout, (plane, 1), colm, (1, plane), T::one(), gw.data_mut(), (k, 1));
        }
        if let Some(gb) = gb.as_mut() {
            for (o, slot) in gb.data_mut().iter_mut().enumerate() {
                *slot += gout[o * plane..(o + 1) * plane].iter().copied().sum::<T>();
            }
        }
        if let Some(gx) = gx.as_mut() {
            let dst = &mut gx.data_mut()[b * in_img..(b + 1) * in_img];
            if pointwise {
                // dx (c x plane) = w^T (c x co) * gout (co x plane)
                T::gemm(c, co, plane, T::one(), w.data(), (1, k), gout, (plane, 1), T::zero(), dst, (plane, 1));
            } else {
                T::gemm(k, co, plane, T::one(), w.data(), (1, k), gout, (plane, 1), T::zero(), &mut gcols, (plane, 1));
                col2im(&gcols, c, h, wd, kh, kw, g, oh, ow, dst);
            }
        }
    }
    (gx, gw, gb)
}

/// One bilinear tap along an axis: `out = (1 - frac) * in[lo] + frac * in[hi]`.
#[derive(Clone, Copy, Debug)]
pub struct Tap<T> {
    pub lo: usize,
    pub hi: usize,
    pub frac: T,
}

/// Half-pixel-center sampling positions (corners not aligned).
pub fn bilinear_taps<T: Scalar>(in_len: usize, out_len: usize) -> Vec<Tap<T>> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            let frac = if lo == hi { 0.0 } else { src - lo as f64 };
            Tap { lo, hi, frac: lit(frac) }
        })
        .collect()
}

/// Bilinear resize of `planes` stacked `h x w` planes to `oh x ow`.
pub fn resize_planes<T: Scalar>(data: &[T], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
    if h == oh && w == ow {
        return data.to_vec();
    }
    let ty = bilinear_taps::<T>(h, oh);
    let tx = bilinear_taps::<T>(w, ow);
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        let src = &data[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (y, a) in ty.iter().enumerate() {
            let r0 = &src[a.lo * w..(a.lo + 1) * w];
            let r1 = &src[a.hi * w..(a.hi + 1) * w];
            for (x, b) in tx.iter().enumerate() {
                let top = r0[b.lo] + (r0[b.hi] - r0[b.lo]) * b.frac;
                let bot = r1[b.lo] + (r1[b.hi] - r1[b.lo]) * b.frac;
                dst[y * ow + x] = top + (bot - top) * a.frac;
            }
        }
    }
    out
}

/// Adjoint of [`resize_planes`].
pub fn resize_planes_backward<T: Scalar>(
    grad: &[T],
    planes: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    if h == oh && w == ow {
        return grad.to_vec();
    }
    let ty = bilinear_taps::<T>(h, oh);
    let tx = bilinear_taps::<T>(w, ow);
    let one = T::one();
    let mut out = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let g = &grad[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for (y, a) in ty.iter().enumerate() {
            for (x, b) in tx.iter().enumerate() {
                let v = g[y * ow + x];
                let top = v * (one - a.frac);
                let bot = v * a.frac;
                dst[a.lo * w + b.lo] += top * (one - b.frac);
                dst[a.lo * w + b.hi] += top * b.frac;
                dst[a.hi * w + b.lo] += bot * (one - b.frac);
                dst[a.hi * w + b.hi] += bot * b.frac;
            }
        }
    }
    out
}

/// Per-channel batch statistics `(mean, biased variance)` over N, H, W.
pub fn channel_stats<T: Scalar>(x: &Tensor<T>) -> (Vec<T>, Vec<T>) {
    let (n, c, h, w) = x.dims4();
    let plane = h * w;
    let count = T::from_usize(n * plane).unwrap();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for b in 0..n {
            let off = (b * c + ch) * plane;
            s += x.data()[off..off + plane].iter().copied().sum::<T>();
        }
        let m = s / count;
        let mut v = T::zero();
        for b in 0..n {
            let off = (b * c + ch) * plane;
            for &e in &x.data()[off..off + plane] {
                v += (e - m) * (e - m);
            }
        }
        mean[ch] = m;
        var[ch] = v / count;
    }
    (mean, var)
}

/// Applies `y = gamma * (x - mean) * inv_std + beta` per channel.
pub fn channel_affine<T: Scalar>(x: &Tensor<T>, mean: &[T], inv_std: &[T], gamma: &[T], beta: &[T]) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let plane = h * w;
    let mut out = x.clone();
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            let scale = gamma[ch] * inv_std[ch];
            let shift = beta[ch] - mean[ch] * scale;
            for v in &mut out.data_mut()[off..off + plane] {
                *v = *v * scale + shift;
            }
        }
    }
    out
}
