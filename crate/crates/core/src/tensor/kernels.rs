//! Forward and backward kernels on raw tensors.
//!
//! Parallel loops split work by independent output blocks and each output
//! element is reduced in a fixed order, so results do not depend on the
//! number of worker threads.

use std::sync::atomic::{AtomicU64, Ordering};

use rayon::prelude::*;

use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Counts multiply-accumulate operations performed by instrumented kernels.
#[derive(Debug, Default)]
pub struct MacCounter(AtomicU64);

impl MacCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&self, n: u64) {
        self.0.fetch_add(n, Ordering::Relaxed);
    }

    pub fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.0.store(0, Ordering::Relaxed);
    }
}

pub(crate) fn count(counter: Option<&MacCounter>, n: usize) {
    if let Some(c) = counter {
        c.add(n as u64);
    }
}

// ---------------------------------------------------------------------------
// convolution

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
    pub hp: usize,
    pub wp: usize,
}

impl ConvGeom {
    pub fn new(x: [usize; 4], weight: [usize; 4], stride: usize, pad: usize) -> Result<Self> {
        let [n, c_in, h, w] = x;
        let [c_out, wc_in, kh, kw] = weight;
        if wc_in != c_in {
            return Err(Error::shape("conv2d", &x, &weight));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(Error::invalid("conv2d", format!("kernel must be square and odd, got {kh}x{kw}")));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be at least 1"));
        }
        let (hp, wp) = (h + 2 * pad, w + 2 * pad);
        if hp < kh || wp < kw {
            return Err(Error::shape("conv2d", &x, &weight));
        }
        Ok(Self {
            n,
            c_in,
            h,
            w,
            c_out,
            k: kh,
            stride,
            pad,
            ho: (hp - kh) / stride + 1,
            wo: (wp - kw) / stride + 1,
            hp,
            wp,
        })
    }

    pub fn out_dims(&self) -> [usize; 4] {
        [self.n, self.c_out, self.ho, self.wo]
    }

    fn weight_len(&self) -> usize {
        self.c_out * self.c_in * self.k * self.k
    }
}

/// Copies `[n, c, h, w]` data into a zero-bordered `[n, c, h + 2p, w + 2p]` buffer.
pub fn pad_zero<T: Element>(x: &[T], [n, c, h, w]: [usize; 4], pad: usize) -> Vec<T> {
    if pad == 0 {
        return x.to_vec();
    }
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let mut out = vec![T::zero(); n * c * hp * wp];
    out.par_chunks_mut(hp * wp)
        .zip(x.par_chunks(h * w))
        .for_each(|(dst, src)| {
            for y in 0..h {
                dst[(y + pad) * wp + pad..][..w].copy_from_slice(&src[y * w..][..w]);
            }
        });
    out
}

fn crop_pad<T: Element>(xp: &[T], [n, c, h, w]: [usize; 4], pad: usize) -> Vec<T> {
    if pad == 0 {
        return xp.to_vec();
    }
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let mut out = vec![T::zero(); n * c * h * w];
    out.par_chunks_mut(h * w)
        .zip(xp.par_chunks(hp * wp))
        .for_each(|(dst, src)| {
            for y in 0..h {
                dst[y * w..][..w].copy_from_slice(&src[(y + pad) * wp + pad..][..w]);
            }
        });
    out
}

/// Convolution core. `weights` holds one `[c_out, c_in, k, k]` bank when
/// `per_sample` is false, or `n` consecutive banks when it is true; `bias`
/// follows the same convention with `c_out` values per bank.
pub(crate) fn conv_forward_impl<T: Element>(
    xp: &[T],
    g: &ConvGeom,
    weights: &[T],
    bias: Option<&[T]>,
    per_sample: bool,
    counter: Option<&MacCounter>,
) -> Vec<T> {
    let ConvGeom {
        c_in,
        c_out,
        k,
        stride,
        ho,
        wo,
        hp,
        wp,
        ..
    } = *g;
    let plane = ho * wo;
    let mut out = vec![T::zero(); g.n * c_out * plane];
    out.par_chunks_mut(plane).enumerate().for_each(|(i, dst)| {
        let (b, o) = (i / c_out, i % c_out);
        let bank = if per_sample { b } else { 0 };
        let wbase = bank * g.weight_len() + o * c_in * k * k;
        if let Some(bias) = bias {
            dst.fill(bias[bank * c_out + o]);
        }
        for ci in 0..c_in {
            let src = &xp[(b * c_in + ci) * hp * wp..][..hp * wp];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = weights[wbase + (ci * k + ky) * k + kx];
                    for oy in 0..ho {
                        let row = &src[(oy * stride + ky) * wp + kx..];
                        let drow = &mut dst[oy * wo..][..wo];
                        if stride == 1 {
                            for (d, &v) in drow.iter_mut().zip(&row[..wo]) {
                                *d += wv * v;
                            }
                        } else {
                            for (ox, d) in drow.iter_mut().enumerate() {
                                *d += wv * row[ox * stride];
                            }
                        }
                    }
                }
            }
        }
        count(counter, c_in * k * k * plane);
    });
    out
}

pub(crate) struct ConvGrads<T> {
    pub x: Option<Vec<T>>,
    pub w: Option<Vec<T>>,
    pub b: Option<Vec<T>>,
}

pub(crate) fn conv_backward_impl<T: Element>(
    xp: &[T],
    g: &ConvGeom,
    weights: &[T],
    per_sample: bool,
    grad_out: &[T],
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let ConvGeom {
        n,
        c_in,
        c_out,
        k,
        stride,
        ho,
        wo,
        hp,
        wp,
        ..
    } = *g;
    let plane = ho * wo;

    let dx = need.0.then(|| {
        let mut dxp = vec![T::zero(); n * c_in * hp * wp];
        dxp.par_chunks_mut(hp * wp).enumerate().for_each(|(i, dst)| {
            let (b, ci) = (i / c_in, i % c_in);
            let bank = if per_sample { b } else { 0 };
            for o in 0..c_out {
                let gsrc = &grad_out[(b * c_out + o) * plane..][..plane];
                let wbase = bank * g.weight_len() + (o * c_in + ci) * k * k;
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = weights[wbase + ky * k + kx];
                        for oy in 0..ho {
                            let grow = &gsrc[oy * wo..][..wo];
                            let drow = &mut dst[(oy * stride + ky) * wp + kx..];
                            if stride == 1 {
                                for (d, &gv) in drow[..wo].iter_mut().zip(grow) {
                                    *d += wv * gv;
                                }
                            } else {
                                for (ox, &gv) in grow.iter().enumerate() {
                                    drow[ox * stride] += wv * gv;
                                }
                            }
                        }
                    }
                }
            }
        });
        crop_pad(&dxp, [n, c_in, g.h, g.w], g.pad)
    });

    let dw = need.1.then(|| {
        let banks = if per_sample { n } else { 1 };
        let mut dw = vec![T::zero(); banks * g.weight_len()];
        dw.par_chunks_mut(k * k).enumerate().for_each(|(i, dst)| {
            let bank = i / (c_out * c_in);
            let (o, ci) = ((i / c_in) % c_out, i % c_in);
            let batches = if per_sample { bank..bank + 1 } else { 0..n };
            for ky in 0..k {
                for kx in 0..k {
                    let mut acc = T::zero();
                    for b in batches.clone() {
                        let gsrc = &grad_out[(b * c_out + o) * plane..][..plane];
                        let src = &xp[(b * c_in + ci) * hp * wp..][..hp * wp];
                        for oy in 0..ho {
                            let grow = &gsrc[oy * wo..][..wo];
                            let row = &src[(oy * stride + ky) * wp + kx..];
                            if stride == 1 {
                                for (&gv, &v) in grow.iter().zip(&row[..wo]) {
                                    acc += gv * v;
                                }
                            } else {
                                for (ox, &gv) in grow.iter().enumerate() {
                                    acc += gv * row[ox * stride];
                                }
                            }
                        }
                    }
                    dst[ky * k + kx] = acc;
                }
            }
        });
        dw
    });

    let db = need.2.then(|| {
        let banks = if per_sample { n } else { 1 };
        (0..banks * c_out)
            .map(|i| {
                let (bank, o) = (i / c_out, i % c_out);
                let batches = if per_sample { bank..bank + 1 } else { 0..n };
                let mut acc = T::zero();
                for b in batches {
                    for &v in &grad_out[(b * c_out + o) * plane..][..plane] {
                        acc += v;
                    }
                }
                acc
            })
            .collect()
    });

    ConvGrads { x: dx, w: dw, b: db }
}

/// Standard 2-D convolution (cross-correlation) with zero padding.
pub fn conv2d<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&[T]>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    conv2d_counted(x, weight, bias, stride, pad, None)
}

pub fn conv2d_counted<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&[T]>,
    stride: usize,
    pad: usize,
    counter: Option<&MacCounter>,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(x.dims(), weight.dims(), stride, pad)?;
    if let Some(b) = bias {
        if b.len() != g.c_out {
            return Err(Error::shape("conv2d", &[b.len()], &[g.c_out]));
        }
    }
    let xp = pad_zero(x.data(), x.dims(), pad);
    let out = conv_forward_impl(&xp, &g, weight.data(), bias, false, counter);
    Tensor::new(g.out_dims(), out)
}

// ---------------------------------------------------------------------------
// elementwise and reductions

pub fn relu<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Softmax across the channel axis at every `(n, y, x)` position.
pub fn softmax_channels<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.dims();
    let plane = h * w;
    let mut out = Tensor::zeros(x.dims());
    let src = x.data();
    let dst = out.data_mut();
    for b in 0..n {
        for p in 0..plane {
            let at = |ch: usize| (b * c + ch) * plane + p;
            let max = (0..c).map(|ch| src[at(ch)]).fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for ch in 0..c {
                let e = (src[at(ch)] - max).exp();
                dst[at(ch)] = e;
                sum += e;
            }
            for ch in 0..c {
                dst[at(ch)] = dst[at(ch)] / sum;
            }
        }
    }
    out
}

/// Softmax of a plain vector with max subtraction.
pub fn softmax<T: Element>(logits: &[T]) -> Vec<T> {
    let t = Tensor::new([1, logits.len(), 1, 1], logits.to_vec()).expect("length matches");
    softmax_channels(&t).into_data()
}

pub fn global_avg_pool<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.dims();
    if h * w == 0 {
        return Err(Error::invalid("global_avg_pool", "empty spatial extent"));
    }
    let denom = T::of((h * w) as f64);
    let data = x
        .data()
        .chunks(h * w)
        .map(|plane| plane.iter().copied().sum::<T>() / denom)
        .collect();
    Tensor::new([n, c, 1, 1], data)
}

pub fn concat_channels<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, ca, h, w] = a.dims();
    let [nb, cb, hb, wb] = b.dims();
    if (n, h, w) != (nb, hb, wb) {
        return Err(Error::shape("concat", &a.dims(), &b.dims()));
    }
    let mut data = Vec::with_capacity(a.numel() + b.numel());
    for s in 0..n {
        data.extend_from_slice(&a.data()[s * ca * h * w..][..ca * h * w]);
        data.extend_from_slice(&b.data()[s * cb * h * w..][..cb * h * w]);
    }
    Tensor::new([n, ca + cb, h, w], data)
}

// ---------------------------------------------------------------------------
// resampling

/// Sub-pixel rearrangement `[n, c·r², h, w] -> [n, c, h·r, w·r]`.
pub fn pixel_shuffle<T: Element>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let [n, cr, h, w] = x.dims();
    if r == 0 || cr % (r * r) != 0 {
        return Err(Error::invalid(
            "pixel_shuffle",
            format!("{cr} channels not divisible by r^2 = {}", r * r),
        ));
    }
    let c = cr / (r * r);
    let mut out = vec![T::zero(); x.numel()];
    let src = x.data();
    for (i, dst) in out.iter_mut().enumerate() {
        let (b, ch, y, xx) = unravel(i, [n, c, h * r, w * r]);
        let sc = ch * r * r + (y % r) * r + xx % r;
        *dst = src[((b * cr + sc) * h + y / r) * w + xx / r];
    }
    Tensor::new([n, c, h * r, w * r], out)
}

/// Inverse of [`pixel_shuffle`].
pub fn pixel_unshuffle<T: Element>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let [n, c, hr, wr] = x.dims();
    if r == 0 || hr % r != 0 || wr % r != 0 {
        return Err(Error::invalid("pixel_unshuffle", format!("{hr}x{wr} not divisible by {r}")));
    }
    let (h, w) = (hr / r, wr / r);
    let mut out = vec![T::zero(); x.numel()];
    for (i, &v) in x.data().iter().enumerate() {
        let (b, ch, y, xx) = unravel(i, [n, c, hr, wr]);
        let sc = ch * r * r + (y % r) * r + xx % r;
        out[((b * c * r * r + sc) * h + y / r) * w + xx / r] = v;
    }
    Tensor::new([n, c * r * r, h, w], out)
}

#[inline]
fn unravel(i: usize, [_, c, h, w]: [usize; 4]) -> (usize, usize, usize, usize) {
    let x = i % w;
    let y = (i / w) % h;
    let ch = (i / (w * h)) % c;
    let b = i / (w * h * c);
    (b, ch, y, x)
}

/// Linear interpolation taps along one axis, `align_corners = false`, edge-clamped.
pub(crate) fn bilinear_taps(len: usize, s: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..len * s)
        .map(|i| {
            let src = ((i as f64 + 0.5) / s as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            let l1 = src - i0 as f64;
            (i0, i1, 1.0 - l1, l1)
        })
        .collect()
}

pub fn bilinear_upsample<T: Element>(x: &Tensor<T>, s: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.dims();
    if s == 0 {
        return Err(Error::invalid("bilinear_upsample", "scale must be at least 1"));
    }
    if s == 1 {
        return Ok(Tensor::new(x.dims(), x.data().to_vec())?);
    }
    let ty = bilinear_taps(h, s);
    let tx = bilinear_taps(w, s);
    let (ho, wo) = (h * s, w * s);
    let mut out = vec![T::zero(); n * c * ho * wo];
    out.par_chunks_mut(ho * wo)
        .zip(x.data().par_chunks(h * w))
        .for_each(|(dst, src)| {
            for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                let (wy0, wy1) = (T::of(wy0), T::of(wy1));
                for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                    let (wx0, wx1) = (T::of(wx0), T::of(wx1));
                    let top = wx0 * src[y0 * w + x0] + wx1 * src[y0 * w + x1];
                    let bot = wx0 * src[y1 * w + x0] + wx1 * src[y1 * w + x1];
                    dst[oy * wo + ox] = wy0 * top + wy1 * bot;
                }
            }
        });
    Tensor::new([n, c, ho, wo], out)
}

pub(crate) fn bilinear_backward<T: Element>(dims: [usize; 4], s: usize, grad_out: &[T]) -> Vec<T> {
    let [n, c, h, w] = dims;
    if s == 1 {
        return grad_out.to_vec();
    }
    let ty = bilinear_taps(h, s);
    let tx = bilinear_taps(w, s);
    let (ho, wo) = (h * s, w * s);
    let mut dx = vec![T::zero(); n * c * h * w];
    dx.par_chunks_mut(h * w)
        .zip(grad_out.par_chunks(ho * wo))
        .for_each(|(dst, g)| {
            for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                let (wy0, wy1) = (T::of(wy0), T::of(wy1));
                for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                    let (wx0, wx1) = (T::of(wx0), T::of(wx1));
                    let gv = g[oy * wo + ox];
                    dst[y0 * w + x0] += wy0 * wx0 * gv;
                    dst[y0 * w + x1] += wy0 * wx1 * gv;
                    dst[y1 * w + x0] += wy1 * wx0 * gv;
                    dst[y1 * w + x1] += wy1 * wx1 * gv;
                }
            }
        });
    dx
}

/// Keys cubic convolution weight with `a = -0.5`.
fn cubic(t: f64) -> f64 {
    const A: f64 = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        ((A + 2.0) * t - (A + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((A * t - 5.0 * A) * t + 8.0 * A) * t - 4.0 * A
    } else {
        0.0
    }
}

/// Bicubic upsampling (`align_corners = false`, edge-clamped); forward only,
/// used as the interpolation baseline.
pub fn bicubic_upsample<T: Element>(x: &Tensor<T>, s: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.dims();
    if s == 0 {
        return Err(Error::invalid("bicubic_upsample", "scale must be at least 1"));
    }
    let taps = |len: usize| -> Vec<([usize; 4], [f64; 4])> {
        (0..len * s)
            .map(|i| {
                let src = (i as f64 + 0.5) / s as f64 - 0.5;
                let base = src.floor();
                let frac = src - base;
                let mut idx = [0usize; 4];
                let mut wt = [0f64; 4];
                for j in 0..4 {
                    let p = base as isize - 1 + j as isize;
                    idx[j] = p.clamp(0, len as isize - 1) as usize;
                    wt[j] = cubic(frac - (j as f64 - 1.0));
                }
                (idx, wt)
            })
            .collect()
    };
    let ty = taps(h);
    let tx = taps(w);
    let (ho, wo) = (h * s, w * s);
    let mut out = vec![T::zero(); n * c * ho * wo];
    out.par_chunks_mut(ho * wo)
        .zip(x.data().par_chunks(h * w))
        .for_each(|(dst, src)| {
            for (oy, (iy, wy)) in ty.iter().enumerate() {
                for (ox, (ix, wx)) in tx.iter().enumerate() {
                    let mut acc = 0.0;
                    for a in 0..4 {
                        let mut row = 0.0;
                        for b in 0..4 {
                            row += wx[b] * src[iy[a] * w + ix[b]].to_f64_lossy();
                        }
                        acc += wy[a] * row;
                    }
                    dst[oy * wo + ox] = T::of(acc);
                }
            }
        });
    Tensor::new([n, c, ho, wo], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(dims: [usize; 4], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(dims, |_, _, _, _| rng.gen_range(-1.0..1.0))
    }

    /// Six nested loops over the unpadded input with explicit bounds checks.
    fn conv_loops(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], stride: usize, pad: usize) -> Tensor<f64> {
        let [n, ci, h, wd] = x.dims();
        let [co, _, k, _] = w.dims();
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        Tensor::from_fn([n, co, ho, wo], |bb, o, oy, ox| {
            let mut acc = b[o];
            for c in 0..ci {
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                            acc += w.at(o, c, ky, kx) * x.at(bb, c, iy as usize, ix as usize);
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn conv_zero_padding_counts() {
        let x = Tensor::<f64>::full([1, 1, 3, 3], 1.0);
        let w = Tensor::<f64>::full([1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &w, None, 1, 1).unwrap();
        assert_eq!(y.dims(), [1, 1, 3, 3]);
        assert_eq!(y.at(0, 0, 1, 1), 9.0);
        assert_eq!(y.at(0, 0, 0, 0), 4.0);
        assert_eq!(y.at(0, 0, 0, 1), 6.0);
    }

    #[test]
    fn conv_delta_kernel_is_identity() {
        let x = random([2, 3, 5, 6], 1);
        let w = Tensor::from_fn([3, 3, 3, 3], |o, i, y, xx| if o == i && y == 1 && xx == 1 { 1.0 } else { 0.0 });
        let y = conv2d(&x, &w, None, 1, 1).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_matches_loop_reference() {
        let x = random([2, 3, 5, 5], 2);
        let w = random([4, 3, 3, 3], 3);
        let b = vec![0.1, -0.2, 0.3, 0.0];
        for (stride, pad) in [(1, 1), (1, 0), (2, 1), (2, 0)] {
            let fast = conv2d(&x, &w, Some(&b), stride, pad).unwrap();
            let slow = conv_loops(&x, &w, &b, stride, pad);
            assert_eq!(fast.dims(), slow.dims());
            for (a, e) in fast.data().iter().zip(slow.data()) {
                assert!((a - e).abs() <= 1e-6 * e.abs().max(1.0), "{a} vs {e}");
            }
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = random([1, 2, 4, 4], 0);
        let w = random([1, 3, 3, 3], 0);
        let err = conv2d(&x, &w, None, 1, 1).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 2, 4, 4]") && msg.contains("[1, 3, 3, 3]"), "{msg}");
    }

    #[test]
    fn relu_examples() {
        let x = Tensor::new([1, 3, 1, 1], vec![-1.0f32, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0f64; 4]), vec![0.25; 4]);
        let big = softmax(&[1000.0f64, 0.0]);
        assert!(big.iter().all(|v| v.is_finite()));
        assert!((big[0] - 1.0).abs() < 1e-12 && big[1] < 1e-300);
        let p = softmax(&[1.0f64, 2.0, 3.0]);
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for (i, v) in p.iter().enumerate() {
            assert!((v - ((i + 1) as f64).exp() / z).abs() < 1e-9);
        }
    }

    #[test]
    fn pixel_shuffle_ordering() {
        let x = Tensor::new([1, 4, 1, 1], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let y = pixel_shuffle(&x, 2).unwrap();
        assert_eq!(y.dims(), [1, 1, 2, 2]);
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);
        let x = random([2, 3, 4, 5], 9);
        assert_eq!(pixel_shuffle(&x, 1).unwrap(), x);
        assert!(pixel_shuffle(&random([1, 3, 2, 2], 0), 2).is_err());
    }

    #[test]
    fn bilinear_examples() {
        let x = Tensor::new([1, 1, 2, 2], vec![0.0f64, 1.0, 0.0, 1.0]).unwrap();
        let y = bilinear_upsample(&x, 2).unwrap();
        for row in y.data().chunks(4) {
            assert_eq!(row, &[0.0, 0.25, 0.75, 1.0]);
        }
        let c = Tensor::<f64>::full([1, 2, 3, 4], 0.3);
        let up = bilinear_upsample(&c, 3).unwrap();
        assert_eq!(up.dims(), [1, 2, 9, 12]);
        assert!(up.data().iter().all(|&v| (v - 0.3).abs() < 1e-15));
        let r = random([1, 2, 3, 3], 4);
        assert_eq!(bilinear_upsample(&r, 1).unwrap(), r);
    }

    #[test]
    fn bicubic_preserves_constants() {
        let c = Tensor::<f64>::full([1, 1, 4, 4], 0.7);
        let up = bicubic_upsample(&c, 2).unwrap();
        assert!(up.data().iter().all(|&v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn pool_examples() {
        let x = Tensor::new([1, 1, 2, 2], vec![1.0f64, 3.0, 5.0, 7.0]).unwrap();
        assert_eq!(global_avg_pool(&x).unwrap().data(), &[4.0]);
        let r = random([2, 3, 4, 5], 5);
        let p = global_avg_pool(&r).unwrap();
        for b in 0..2 {
            for c in 0..3 {
                let mut s = 0.0;
                for y in 0..4 {
                    for x in 0..5 {
                        s += r.at(b, c, y, x);
                    }
                }
                assert!((p.at(b, c, 0, 0) - s / 20.0).abs() < 1e-6);
            }
        }
    }
}
