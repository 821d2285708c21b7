//! Raw forward/backward kernels behind the dynamic filter layers.

use rayon::prelude::*;

use super::FilterLayout;
use crate::error::{Error, Result};
use crate::tensor::kernels::{self, count, ConvGeom, MacCounter};
use crate::tensor::{Element, Tensor};

pub(crate) const STANDARDIZE_EPS: f64 = 1e-5;

// ---------------------------------------------------------------------------
// attention-aggregated convolution

struct Bank {
    k_count: usize,
    geom: ConvGeom,
}

fn bank_geometry<T: Element>(
    x: &Tensor<T>,
    pi: &Tensor<T>,
    w_bank: &Tensor<T>,
    b_bank: &Tensor<T>,
    pad: usize,
) -> Result<Bank> {
    let [n, kc, ph, pw] = pi.dims();
    if n != x.dims()[0] || ph != 1 || pw != 1 || kc == 0 {
        return Err(Error::shape("global_dyn_conv", &pi.dims(), &x.dims()));
    }
    let [rows, c_in, kh, kw] = w_bank.dims();
    if rows % kc != 0 {
        return Err(Error::shape("global_dyn_conv", &w_bank.dims(), &pi.dims()));
    }
    let c_out = rows / kc;
    if b_bank.dims() != [kc, c_out, 1, 1] {
        return Err(Error::shape("global_dyn_conv", &b_bank.dims(), &[kc, c_out, 1, 1]));
    }
    let geom = ConvGeom::new(x.dims(), [c_out, c_in, kh, kw], 1, pad)?;
    Ok(Bank { k_count: kc, geom })
}

/// Per-sample weighted sum of the kernel bank: `out[b] = Σ_k pi[b, k] · bank[k]`.
fn aggregate<T: Element>(pi: &[T], bank: &[T], n: usize, k_count: usize) -> Vec<T> {
    let len = bank.len() / k_count;
    let mut out = vec![T::zero(); n * len];
    for (b, dst) in out.chunks_mut(len).enumerate() {
        for kk in 0..k_count {
            let p = pi[b * k_count + kk];
            for (d, &w) in dst.iter_mut().zip(&bank[kk * len..][..len]) {
                *d += p * w;
            }
        }
    }
    out
}

pub(crate) fn aggregated_conv_forward<T: Element>(
    x: &Tensor<T>,
    pi: &Tensor<T>,
    w_bank: &Tensor<T>,
    b_bank: &Tensor<T>,
    pad: usize,
    counter: Option<&MacCounter>,
) -> Result<Tensor<T>> {
    let Bank { k_count, geom } = bank_geometry(x, pi, w_bank, b_bank, pad)?;
    let n = geom.n;
    let weights = aggregate(pi.data(), w_bank.data(), n, k_count);
    let bias = aggregate(pi.data(), b_bank.data(), n, k_count);
    let xp = kernels::pad_zero(x.data(), x.dims(), pad);
    let out = kernels::conv_forward_impl(&xp, &geom, &weights, Some(&bias), true, counter);
    Tensor::new(geom.out_dims(), out)
}

/// Gradients for `[x, pi, w_bank, b_bank]`, each present when requested.
pub(crate) fn aggregated_conv_backward<T: Element>(
    x: &Tensor<T>,
    pi: &Tensor<T>,
    w_bank: &Tensor<T>,
    b_bank: &Tensor<T>,
    pad: usize,
    grad_out: &[T],
    need: [bool; 4],
) -> [Option<Vec<T>>; 4] {
    let Bank { k_count, geom } = bank_geometry(x, pi, w_bank, b_bank, pad).expect("validated in forward");
    let n = geom.n;
    let weights = aggregate(pi.data(), w_bank.data(), n, k_count);
    let xp = kernels::pad_zero(x.data(), x.dims(), pad);
    let need_agg = need[1] || need[2] || need[3];
    let gr = kernels::conv_backward_impl(&xp, &geom, &weights, true, grad_out, (need[0], need_agg, need_agg));

    let (mut dpi, mut dwb, mut dbb) = (None, None, None);
    if let (Some(dw), Some(db)) = (gr.w, gr.b) {
        let wlen = w_bank.numel() / k_count;
        let blen = b_bank.numel() / k_count;
        let p = pi.data();
        if need[1] {
            let mut g = vec![T::zero(); n * k_count];
            for b in 0..n {
                for kk in 0..k_count {
                    let mut acc = T::zero();
                    for (&d, &w) in dw[b * wlen..][..wlen].iter().zip(&w_bank.data()[kk * wlen..][..wlen]) {
                        acc += d * w;
                    }
                    for (&d, &w) in db[b * blen..][..blen].iter().zip(&b_bank.data()[kk * blen..][..blen]) {
                        acc += d * w;
                    }
                    g[b * k_count + kk] = acc;
                }
            }
            dpi = Some(g);
        }
        let spread = |src: &[T], len: usize| {
            let mut g = vec![T::zero(); k_count * len];
            g.par_chunks_mut(len).enumerate().for_each(|(kk, dst)| {
                for b in 0..n {
                    let pv = p[b * k_count + kk];
                    for (d, &s) in dst.iter_mut().zip(&src[b * len..][..len]) {
                        *d += pv * s;
                    }
                }
            });
            g
        };
        if need[2] {
            dwb = Some(spread(&dw, wlen));
        }
        if need[3] {
            dbb = Some(spread(&db, blen));
        }
    }
    [gr.x, dpi, dwb, dbb]
}

// ---------------------------------------------------------------------------
// filter standardization

struct FilterShape {
    n: usize,
    filters: usize,
    taps: usize,
    out_dims: [usize; 4],
}

fn filter_shape(dims: [usize; 4], layout: FilterLayout) -> Result<FilterShape> {
    let [n, c, h, w] = dims;
    let k = layout.k();
    let taps = k * k;
    if k % 2 == 0 {
        return Err(Error::invalid("standardize_filters", format!("filter size {k} must be odd")));
    }
    match layout {
        FilterLayout::PerPixel { .. } => {
            if c != taps {
                return Err(Error::shape("standardize_filters", &dims, &[n, taps, h, w]));
            }
            Ok(FilterShape {
                n,
                filters: h * w,
                taps,
                out_dims: [n, h * w, k, k],
            })
        }
        FilterLayout::PerChannel { .. } => {
            if h != 1 || w != 1 || c % taps != 0 {
                return Err(Error::shape("standardize_filters", &dims, &[n, c, 1, 1]));
            }
            Ok(FilterShape {
                n,
                filters: c / taps,
                taps,
                out_dims: [n, c / taps, k, k],
            })
        }
    }
}

/// Flat input index of tap `t` of filter `f` in sample `b`.
#[inline]
fn src_index(layout: FilterLayout, s: &FilterShape, b: usize, f: usize, t: usize) -> usize {
    match layout {
        FilterLayout::PerPixel { .. } => (b * s.taps + t) * s.filters + f,
        FilterLayout::PerChannel { .. } => (b * s.filters + f) * s.taps + t,
    }
}

/// Gathers every filter into contiguous `[n * filters, taps]` rows.
fn gather<T: Element>(x: &[T], layout: FilterLayout, s: &FilterShape) -> Vec<T> {
    let mut rows = vec![T::zero(); s.n * s.filters * s.taps];
    for b in 0..s.n {
        for f in 0..s.filters {
            for t in 0..s.taps {
                rows[(b * s.filters + f) * s.taps + t] = x[src_index(layout, s, b, f, t)];
            }
        }
    }
    rows
}

/// Centered values and `1 / sqrt(var + eps)` of one filter; an exactly
/// constant filter centers to all zeros.
fn center<T: Element>(row: &[T], centered: &mut [T]) -> T {
    let first = row[0];
    if row.iter().all(|&v| v == first) {
        centered.fill(T::zero());
    } else {
        let mean = row.iter().copied().sum::<T>() / T::of(row.len() as f64);
        for (c, &v) in centered.iter_mut().zip(row) {
            *c = v - mean;
        }
    }
    let var = centered.iter().map(|&c| c * c).sum::<T>() / T::of(row.len() as f64);
    T::one() / (var + T::of(STANDARDIZE_EPS)).sqrt()
}

/// Standardizes each predicted k×k filter to zero mean and unit variance,
/// then multiplies by the learnable scalar `scale`.
pub(crate) fn standardize_forward<T: Element>(
    x: &Tensor<T>,
    scale: &Tensor<T>,
    layout: FilterLayout,
    counter: Option<&MacCounter>,
) -> Result<Tensor<T>> {
    if scale.numel() != 1 {
        return Err(Error::shape("standardize_filters", &scale.dims(), &[1, 1, 1, 1]));
    }
    let s = filter_shape(x.dims(), layout)?;
    let gamma = scale.data()[0];
    let mut out = gather(x.data(), layout, &s);
    out.par_chunks_mut(s.taps).for_each(|row| {
        let mut centered = vec![T::zero(); row.len()];
        let inv = center(row, &mut centered);
        for (o, &c) in row.iter_mut().zip(&centered) {
            *o = gamma * c * inv;
        }
    });
    count(counter, out.len());
    Tensor::new(s.out_dims, out)
}

pub(crate) fn standardize_backward<T: Element>(
    x: &Tensor<T>,
    scale: &Tensor<T>,
    layout: FilterLayout,
    grad_out: &[T],
) -> (Vec<T>, Vec<T>) {
    let s = filter_shape(x.dims(), layout).expect("validated in forward");
    let gamma = scale.data()[0];
    let rows = gather(x.data(), layout, &s);
    let taps = s.taps;
    let inv_t = T::one() / T::of(taps as f64);
    let mut dx_rows = vec![T::zero(); rows.len()];
    let mut dscale = T::zero();
    for (i, (row, drow)) in rows.chunks(taps).zip(dx_rows.chunks_mut(taps)).enumerate() {
        let g = &grad_out[i * taps..][..taps];
        let mut centered = vec![T::zero(); taps];
        let inv = center(row, &mut centered);
        let xhat: Vec<T> = centered.iter().map(|&c| c * inv).collect();
        let mut mean_g = T::zero();
        let mut mean_gx = T::zero();
        for t in 0..taps {
            dscale += g[t] * xhat[t];
            mean_g += g[t] * gamma;
            mean_gx += g[t] * gamma * xhat[t];
        }
        mean_g = mean_g * inv_t;
        mean_gx = mean_gx * inv_t;
        for t in 0..taps {
            drow[t] = inv * (g[t] * gamma - mean_g - xhat[t] * mean_gx);
        }
    }
    let mut dx = vec![T::zero(); rows.len()];
    for b in 0..s.n {
        for f in 0..s.filters {
            for t in 0..taps {
                dx[src_index(layout, &s, b, f, t)] = dx_rows[(b * s.filters + f) * taps + t];
            }
        }
    }
    (dx, vec![dscale])
}

// ---------------------------------------------------------------------------
// local decoupled filtering

pub(crate) struct LocalGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
    wp: usize,
    hp: usize,
}

pub(crate) fn local_geometry<T: Element>(x: &Tensor<T>, dsp: &Tensor<T>, dch: &Tensor<T>) -> Result<LocalGeom> {
    let [n, c, h, w] = x.dims();
    let k = dch.dims()[2];
    if k % 2 == 0 || dch.dims() != [n, c, k, k] {
        return Err(Error::shape("local_dyn_conv", &dch.dims(), &[n, c, k, k]));
    }
    if dsp.dims() != [n, h * w, k, k] {
        return Err(Error::shape("local_dyn_conv", &dsp.dims(), &[n, h * w, k, k]));
    }
    let pad = k / 2;
    Ok(LocalGeom {
        n,
        c,
        h,
        w,
        k,
        pad,
        wp: w + 2 * pad,
        hp: h + 2 * pad,
    })
}

/// `out(r, i) = Σ_{j ∈ Ω(i)} dsp_i[p_i - p_j] · dch_r[p_i - p_j] · x(r, j)`.
///
/// Filter element `(a, b)` holds offset `p_i - p_j = (a - pad, b - pad)`, so
/// in padded coordinates the input tap sits at `(y + 2·pad - a, x + 2·pad - b)`.
pub(crate) fn local_dyn_conv_forward<T: Element>(
    x: &Tensor<T>,
    dsp: &Tensor<T>,
    dch: &Tensor<T>,
    counter: Option<&MacCounter>,
) -> Result<Tensor<T>> {
    let g = local_geometry(x, dsp, dch)?;
    let LocalGeom {
        c, h, w, k, pad, wp, hp, ..
    } = g;
    let taps = k * k;
    let xp = kernels::pad_zero(x.data(), x.dims(), pad);
    let mut out = vec![T::zero(); x.numel()];
    out.par_chunks_mut(h * w).enumerate().for_each(|(i, dst)| {
        let (b, r) = (i / c, i % c);
        let src = &xp[i * hp * wp..][..hp * wp];
        let ch = &dch.data()[(b * c + r) * taps..][..taps];
        let sp = &dsp.data()[b * h * w * taps..][..h * w * taps];
        for y in 0..h {
            for xx in 0..w {
                let p = y * w + xx;
                let f = &sp[p * taps..][..taps];
                let mut acc = T::zero();
                for a in 0..k {
                    let row = (y + 2 * pad - a) * wp + 2 * pad + xx;
                    for bb in 0..k {
                        let t = a * k + bb;
                        acc += f[t] * ch[t] * src[row - bb];
                    }
                }
                dst[p] = acc;
            }
        }
        count(counter, h * w * taps);
    });
    Tensor::new(x.dims(), out)
}

/// Gradients for `[x, dsp, dch]`.
pub(crate) fn local_dyn_conv_backward<T: Element>(
    x: &Tensor<T>,
    dsp: &Tensor<T>,
    dch: &Tensor<T>,
    grad_out: &[T],
    need: [bool; 3],
) -> [Option<Vec<T>>; 3] {
    let geom = local_geometry(x, dsp, dch).expect("validated in forward");
    let LocalGeom {
        n,
        c,
        h,
        w,
        k,
        pad,
        wp,
        hp,
    } = geom;
    let taps = k * k;
    let plane = h * w;
    let xp = kernels::pad_zero(x.data(), x.dims(), pad);
    let at = |y: usize, xx: usize, a: usize, bb: usize| (y + 2 * pad - a) * wp + (xx + 2 * pad - bb);

    let dx = need[0].then(|| {
        let mut dxp = vec![T::zero(); n * c * hp * wp];
        dxp.par_chunks_mut(hp * wp).enumerate().for_each(|(i, dst)| {
            let b = i / c;
            let gsrc = &grad_out[i * plane..][..plane];
            let ch = &dch.data()[i * taps..][..taps];
            let sp = &dsp.data()[b * plane * taps..][..plane * taps];
            for y in 0..h {
                for xx in 0..w {
                    let p = y * w + xx;
                    let gv = gsrc[p];
                    for a in 0..k {
                        for bb in 0..k {
                            let t = a * k + bb;
                            dst[at(y, xx, a, bb)] += gv * sp[p * taps + t] * ch[t];
                        }
                    }
                }
            }
        });
        let mut dx = vec![T::zero(); x.numel()];
        for (d, s) in dx.chunks_mut(plane).zip(dxp.chunks(hp * wp)) {
            for y in 0..h {
                d[y * w..][..w].copy_from_slice(&s[(y + pad) * wp + pad..][..w]);
            }
        }
        dx
    });

    let dsp_grad = need[1].then(|| {
        let mut g = vec![T::zero(); dsp.numel()];
        g.par_chunks_mut(taps).enumerate().for_each(|(i, dst)| {
            let (b, p) = (i / plane, i % plane);
            let (y, xx) = (p / w, p % w);
            for r in 0..c {
                let gv = grad_out[(b * c + r) * plane + p];
                let src = &xp[(b * c + r) * hp * wp..][..hp * wp];
                let ch = &dch.data()[(b * c + r) * taps..][..taps];
                for a in 0..k {
                    for bb in 0..k {
                        let t = a * k + bb;
                        dst[t] += gv * ch[t] * src[at(y, xx, a, bb)];
                    }
                }
            }
        });
        g
    });

    let dch_grad = need[2].then(|| {
        let mut g = vec![T::zero(); dch.numel()];
        g.par_chunks_mut(taps).enumerate().for_each(|(i, dst)| {
            let b = i / c;
            let gsrc = &grad_out[i * plane..][..plane];
            let src = &xp[i * hp * wp..][..hp * wp];
            let sp = &dsp.data()[b * plane * taps..][..plane * taps];
            for y in 0..h {
                for xx in 0..w {
                    let p = y * w + xx;
                    let gv = gsrc[p];
                    for a in 0..k {
                        for bb in 0..k {
                            let t = a * k + bb;
                            dst[t] += gv * sp[p * taps + t] * src[at(y, xx, a, bb)];
                        }
                    }
                }
            }
        });
        g
    });

    [dx, dsp_grad, dch_grad]
}
