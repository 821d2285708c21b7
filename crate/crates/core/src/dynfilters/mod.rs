//! Global and local dynamic filter layers.
//!
//! The global layer convolves each sample with its own kernel, a convex
//! combination `Σ_k π_k(x) W_k` of `K` learned kernels whose weights come from
//! a squeeze-and-excitation style attention branch.
//!
//! The local layer predicts a k×k spatial filter for every pixel and a k×k
//! filter for every channel, and applies their elementwise product at each
//! `(channel, pixel)` pair. Materializing the filters costs `n·k² + c·k²`
//! values per sample, against `n·c'·c·k²` multiply-accumulates for a
//! standard convolution.

pub(crate) mod ops;

use crate::error::{Error, Result};
use crate::tensor::kernels::{self, MacCounter};
use crate::tensor::{Element, Tape, Tensor, Var};

/// How predicted filter coefficients are laid out in the branch output.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FilterLayout {
    /// `[n, k², h, w]` conv output, one filter per pixel, emitted as `[n, h·w, k, k]`.
    PerPixel { k: usize },
    /// `[n, c·k², 1, 1]` conv output, one filter per channel, emitted as `[n, c, k, k]`.
    PerChannel { k: usize },
}

impl FilterLayout {
    pub fn k(self) -> usize {
        match self {
            FilterLayout::PerPixel { k } | FilterLayout::PerChannel { k } => k,
        }
    }
}

/// Width of the attention bottleneck for `c` input channels.
pub fn reduced_channels(c: usize) -> usize {
    (c / 4).max(1)
}

// ---------------------------------------------------------------------------
// parameter sets

/// Parameters of the global dynamic filter layer, generic over the handle
/// type: [`Tensor`] for owned values, [`Var`] once bound to a tape, or
/// `[usize; 4]` for shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalDynFilterParams<P> {
    pub attn_reduce_w: P,
    pub attn_reduce_b: P,
    pub attn_logits_w: P,
    pub attn_logits_b: P,
    /// `K` kernels stacked as `[K·c_out, c_in, k, k]`.
    pub kernels: P,
    /// `K` bias vectors as `[K, c_out, 1, 1]`.
    pub biases: P,
}

impl<P> GlobalDynFilterParams<P> {
    pub const FIELDS: [&'static str; 6] = [
        "attn_reduce_w",
        "attn_reduce_b",
        "attn_logits_w",
        "attn_logits_b",
        "kernels",
        "biases",
    ];

    pub fn fields(&self) -> [(&'static str, &P); 6] {
        [
            ("attn_reduce_w", &self.attn_reduce_w),
            ("attn_reduce_b", &self.attn_reduce_b),
            ("attn_logits_w", &self.attn_logits_w),
            ("attn_logits_b", &self.attn_logits_b),
            ("kernels", &self.kernels),
            ("biases", &self.biases),
        ]
    }

    pub fn try_from_fields<E>(mut f: impl FnMut(&'static str) -> Result<P, E>) -> Result<Self, E> {
        Ok(Self {
            attn_reduce_w: f("attn_reduce_w")?,
            attn_reduce_b: f("attn_reduce_b")?,
            attn_logits_w: f("attn_logits_w")?,
            attn_logits_b: f("attn_logits_b")?,
            kernels: f("kernels")?,
            biases: f("biases")?,
        })
    }

    pub fn map<Q>(&self, mut f: impl FnMut(&'static str, &P) -> Q) -> GlobalDynFilterParams<Q> {
        let [a, b, c, d, e, g] = self.fields();
        GlobalDynFilterParams {
            attn_reduce_w: f(a.0, a.1),
            attn_reduce_b: f(b.0, b.1),
            attn_logits_w: f(c.0, c.1),
            attn_logits_b: f(d.0, d.1),
            kernels: f(e.0, e.1),
            biases: f(g.0, g.1),
        }
    }
}

impl GlobalDynFilterParams<[usize; 4]> {
    pub fn shapes(c_in: usize, c_out: usize, kernels: usize, k: usize) -> Self {
        let r = reduced_channels(c_in);
        Self {
            attn_reduce_w: [r, c_in, 1, 1],
            attn_reduce_b: [1, r, 1, 1],
            attn_logits_w: [kernels, r, 1, 1],
            attn_logits_b: [1, kernels, 1, 1],
            kernels: [kernels * c_out, c_in, k, k],
            biases: [kernels, c_out, 1, 1],
        }
    }
}

impl<T: Element> GlobalDynFilterParams<Tensor<T>> {
    pub fn bind(&self, tape: &mut Tape<T>) -> GlobalDynFilterParams<Var> {
        self.map(|_, t| tape.leaf(t.clone()))
    }

    pub fn kernel_count(&self) -> usize {
        self.biases.dims()[0]
    }
}

/// Parameters of the local decoupled dynamic filter layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalDynFilterParams<P> {
    /// 1×1 conv `c -> k²` predicting one filter per pixel.
    pub spatial_w: P,
    pub spatial_b: P,
    pub spatial_scale: P,
    pub channel_reduce_w: P,
    pub channel_reduce_b: P,
    /// 1×1 conv `c/4 -> c·k²` predicting one filter per channel.
    pub channel_expand_w: P,
    pub channel_expand_b: P,
    pub channel_scale: P,
}

impl<P> LocalDynFilterParams<P> {
    pub const FIELDS: [&'static str; 8] = [
        "spatial_w",
        "spatial_b",
        "spatial_scale",
        "channel_reduce_w",
        "channel_reduce_b",
        "channel_expand_w",
        "channel_expand_b",
        "channel_scale",
    ];

    pub fn fields(&self) -> [(&'static str, &P); 8] {
        [
            ("spatial_w", &self.spatial_w),
            ("spatial_b", &self.spatial_b),
            ("spatial_scale", &self.spatial_scale),
            ("channel_reduce_w", &self.channel_reduce_w),
            ("channel_reduce_b", &self.channel_reduce_b),
            ("channel_expand_w", &self.channel_expand_w),
            ("channel_expand_b", &self.channel_expand_b),
            ("channel_scale", &self.channel_scale),
        ]
    }

    pub fn try_from_fields<E>(mut f: impl FnMut(&'static str) -> Result<P, E>) -> Result<Self, E> {
        Ok(Self {
            spatial_w: f("spatial_w")?,
            spatial_b: f("spatial_b")?,
            spatial_scale: f("spatial_scale")?,
            channel_reduce_w: f("channel_reduce_w")?,
            channel_reduce_b: f("channel_reduce_b")?,
            channel_expand_w: f("channel_expand_w")?,
            channel_expand_b: f("channel_expand_b")?,
            channel_scale: f("channel_scale")?,
        })
    }

    pub fn map<Q>(&self, mut f: impl FnMut(&'static str, &P) -> Q) -> LocalDynFilterParams<Q> {
        let fs = self.fields();
        let mut it = fs.iter().map(|(n, p)| f(n, p));
        let mut next = || it.next().expect("eight fields");
        LocalDynFilterParams {
            spatial_w: next(),
            spatial_b: next(),
            spatial_scale: next(),
            channel_reduce_w: next(),
            channel_reduce_b: next(),
            channel_expand_w: next(),
            channel_expand_b: next(),
            channel_scale: next(),
        }
    }
}

impl LocalDynFilterParams<[usize; 4]> {
    pub fn shapes(c: usize, k: usize) -> Self {
        let r = reduced_channels(c);
        Self {
            spatial_w: [k * k, c, 1, 1],
            spatial_b: [1, k * k, 1, 1],
            spatial_scale: [1, 1, 1, 1],
            channel_reduce_w: [r, c, 1, 1],
            channel_reduce_b: [1, r, 1, 1],
            channel_expand_w: [c * k * k, r, 1, 1],
            channel_expand_b: [1, c * k * k, 1, 1],
            channel_scale: [1, 1, 1, 1],
        }
    }
}

impl<T: Element> LocalDynFilterParams<Tensor<T>> {
    pub fn bind(&self, tape: &mut Tape<T>) -> LocalDynFilterParams<Var> {
        self.map(|_, t| tape.leaf(t.clone()))
    }

    pub fn filter_size(&self) -> usize {
        (self.spatial_w.dims()[0] as f64).sqrt().round() as usize
    }
}

// ---------------------------------------------------------------------------
// tape builders

/// Records the attention branch; returns `π` as `[n, K, 1, 1]`.
pub fn record_attention<T: Element>(tape: &mut Tape<T>, x: Var, p: &GlobalDynFilterParams<Var>) -> Result<Var> {
    let c_in = tape.dims(x)[1];
    let expect = tape.dims(p.attn_reduce_w)[1];
    if c_in != expect {
        return Err(Error::shape("attention_weights", &tape.dims(x), &tape.dims(p.attn_reduce_w)));
    }
    let pooled = tape.global_avg_pool(x)?;
    let hidden = tape.conv2d(pooled, p.attn_reduce_w, Some(p.attn_reduce_b), 1, 0)?;
    let hidden = tape.relu(hidden);
    let logits = tape.conv2d(hidden, p.attn_logits_w, Some(p.attn_logits_b), 1, 0)?;
    Ok(tape.softmax_channels(logits))
}

/// Records `conv(x, Σ_k π_k W_k, Σ_k π_k b_k)` with same padding. The outer
/// nonlinearity is left to the caller.
pub fn record_global_dyn_conv<T: Element>(
    tape: &mut Tape<T>,
    x: Var,
    p: &GlobalDynFilterParams<Var>,
) -> Result<Var> {
    let pi = record_attention(tape, x, p)?;
    let k = tape.dims(p.kernels)[2];
    tape.aggregated_conv(x, pi, p.kernels, p.biases, k / 2)
}

/// Records both filter-prediction branches; returns `(dsp, dch)`.
pub fn record_local_filters<T: Element>(
    tape: &mut Tape<T>,
    x: Var,
    p: &LocalDynFilterParams<Var>,
) -> Result<(Var, Var)> {
    let c = tape.dims(x)[1];
    if tape.dims(p.spatial_w)[1] != c || tape.dims(p.channel_reduce_w)[1] != c {
        return Err(Error::shape("predict_local_filters", &tape.dims(x), &tape.dims(p.spatial_w)));
    }
    let taps = tape.dims(p.spatial_w)[0];
    let k = (taps as f64).sqrt().round() as usize;
    if k * k != taps || tape.dims(p.channel_expand_w)[0] != c * taps {
        return Err(Error::shape(
            "predict_local_filters",
            &tape.dims(p.channel_expand_w),
            &[c * taps, tape.dims(p.channel_reduce_w)[0], 1, 1],
        ));
    }
    let spatial = tape.conv2d(x, p.spatial_w, Some(p.spatial_b), 1, 0)?;
    let dsp = tape.standardize_filters(spatial, p.spatial_scale, FilterLayout::PerPixel { k })?;

    let pooled = tape.global_avg_pool(x)?;
    let hidden = tape.conv2d(pooled, p.channel_reduce_w, Some(p.channel_reduce_b), 1, 0)?;
    let hidden = tape.relu(hidden);
    let channel = tape.conv2d(hidden, p.channel_expand_w, Some(p.channel_expand_b), 1, 0)?;
    let dch = tape.standardize_filters(channel, p.channel_scale, FilterLayout::PerChannel { k })?;
    Ok((dsp, dch))
}

/// Records filter prediction followed by local filtering of `x`.
pub fn record_local_dyn_filter<T: Element>(
    tape: &mut Tape<T>,
    x: Var,
    p: &LocalDynFilterParams<Var>,
) -> Result<Var> {
    let (dsp, dch) = record_local_filters(tape, x, p)?;
    tape.local_dyn_conv(x, dsp, dch)
}

// ---------------------------------------------------------------------------
// tensor-level entry points

/// Per-sample attention weights `π`, shaped `[n, K, 1, 1]`; each row sums to 1.
pub fn attention_weights<T: Element>(x: &Tensor<T>, p: &GlobalDynFilterParams<Tensor<T>>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let pv = p.bind(&mut tape);
    let pi = record_attention(&mut tape, xv, &pv)?;
    Ok(tape.into_value(pi))
}

pub fn global_dyn_conv<T: Element>(x: &Tensor<T>, p: &GlobalDynFilterParams<Tensor<T>>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let pv = p.bind(&mut tape);
    let y = record_global_dyn_conv(&mut tape, xv, &pv)?;
    Ok(tape.into_value(y))
}

/// Global dynamic convolution with externally supplied attention weights.
pub fn global_dyn_conv_with_weights<T: Element>(
    x: &Tensor<T>,
    pi: &Tensor<T>,
    p: &GlobalDynFilterParams<Tensor<T>>,
) -> Result<Tensor<T>> {
    let k = p.kernels.dims()[2];
    ops::aggregated_conv_forward(x, pi, &p.kernels, &p.biases, k / 2, None)
}

/// Predicted `(dsp [n, h·w, k, k], dch [n, c, k, k])`.
pub fn predict_local_filters<T: Element>(
    x: &Tensor<T>,
    p: &LocalDynFilterParams<Tensor<T>>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let pv = p.bind(&mut tape);
    let (dsp, dch) = record_local_filters(&mut tape, xv, &pv)?;
    Ok((tape.value(dsp).clone(), tape.value(dch).clone()))
}

pub fn local_dyn_conv<T: Element>(x: &Tensor<T>, dsp: &Tensor<T>, dch: &Tensor<T>) -> Result<Tensor<T>> {
    ops::local_dyn_conv_forward(x, dsp, dch, None)
}

/// Direct evaluation of the local filtering sum: for every output position the
/// combined filter `W(r, i)[Δ] = dsp_i[Δ] · dch_r[Δ]` is materialized, then
/// applied over the window with explicit bounds checks. Intended for tests.
pub fn local_dyn_conv_reference<T: Element>(x: &Tensor<T>, dsp: &Tensor<T>, dch: &Tensor<T>) -> Result<Tensor<T>> {
    ops::local_geometry(x, dsp, dch)?;
    let [n, c, h, w] = x.dims();
    let k = dch.dims()[2];
    let half = (k / 2) as isize;
    let mut combined = vec![T::zero(); k * k];
    let mut out = Tensor::zeros(x.dims());
    for b in 0..n {
        for r in 0..c {
            for iy in 0..h {
                for ix in 0..w {
                    let i = iy * w + ix;
                    for dy in -half..=half {
                        for dx in -half..=half {
                            let (a, bb) = ((dy + half) as usize, (dx + half) as usize);
                            combined[a * k + bb] = dsp.at(b, i, a, bb) * dch.at(b, r, a, bb);
                        }
                    }
                    let mut acc = T::zero();
                    for jy in 0..h as isize {
                        for jx in 0..w as isize {
                            // offset p_i - p_j
                            let (dy, dx) = (iy as isize - jy, ix as isize - jx);
                            if dy.abs() > half || dx.abs() > half {
                                continue;
                            }
                            let (a, bb) = ((dy + half) as usize, (dx + half) as usize);
                            acc += combined[a * k + bb] * x.at(b, r, jy as usize, jx as usize);
                        }
                    }
                    let idx = out.index(b, r, iy, ix);
                    out.data_mut()[idx] = acc;
                }
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// cost accounting

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    /// Coefficients materialized by the local layer's filter prediction.
    LocalDynamicFilter,
    /// Multiply-accumulates of the local layer's filter application.
    LocalFilterApplication,
    StandardConv,
}

/// Closed-form cost per sample for a layer over `n_pixels` positions.
pub fn mac_count(kind: LayerKind, n_pixels: u64, c_in: u64, c_out: u64, k: u64) -> u64 {
    match kind {
        LayerKind::LocalDynamicFilter => n_pixels * k * k + c_in * k * k,
        LayerKind::LocalFilterApplication => n_pixels * c_in * k * k,
        LayerKind::StandardConv => n_pixels * c_out * c_in * k * k,
    }
}

/// Counters filled by [`local_dyn_filter_instrumented`].
#[derive(Debug, Default)]
pub struct LocalFilterCounters {
    pub materialized: MacCounter,
    pub applied: MacCounter,
}

/// Forward pass of the local layer that counts materialized filter
/// coefficients and filter-application multiply-accumulates.
pub fn local_dyn_filter_instrumented<T: Element>(
    x: &Tensor<T>,
    p: &LocalDynFilterParams<Tensor<T>>,
    counters: &LocalFilterCounters,
) -> Result<Tensor<T>> {
    let k = p.filter_size();
    let spatial = kernels::conv2d(x, &p.spatial_w, Some(p.spatial_b.data()), 1, 0)?;
    let dsp = ops::standardize_forward(
        &spatial,
        &p.spatial_scale,
        FilterLayout::PerPixel { k },
        Some(&counters.materialized),
    )?;
    let pooled = kernels::global_avg_pool(x)?;
    let hidden = kernels::relu(&kernels::conv2d(
        &pooled,
        &p.channel_reduce_w,
        Some(p.channel_reduce_b.data()),
        1,
        0,
    )?);
    let channel = kernels::conv2d(&hidden, &p.channel_expand_w, Some(p.channel_expand_b.data()), 1, 0)?;
    let dch = ops::standardize_forward(
        &channel,
        &p.channel_scale,
        FilterLayout::PerChannel { k },
        Some(&counters.materialized),
    )?;
    ops::local_dyn_conv_forward(x, &dsp, &dch, Some(&counters.applied))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::kernels::conv2d;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(dims: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(dims, |_, _, _, _| rng.gen_range(-1.0..1.0))
    }

    fn global_params(c_in: usize, c_out: usize, kc: usize, k: usize, rng: &mut ChaCha8Rng) -> GlobalDynFilterParams<Tensor<f64>> {
        GlobalDynFilterParams::shapes(c_in, c_out, kc, k).map(|_, &d| random(d, rng))
    }

    fn local_params(c: usize, k: usize, rng: &mut ChaCha8Rng) -> LocalDynFilterParams<Tensor<f64>> {
        LocalDynFilterParams::shapes(c, k).map(|_, &d| random(d, rng))
    }

    /// Aggregates the kernels explicitly and convolves each sample with loops.
    fn aggregation_oracle(x: &Tensor<f64>, pi: &Tensor<f64>, p: &GlobalDynFilterParams<Tensor<f64>>) -> Tensor<f64> {
        let [n, c_in, h, w] = x.dims();
        let kc = pi.dims()[1];
        let [rows, _, k, _] = p.kernels.dims();
        let c_out = rows / kc;
        let half = (k / 2) as isize;
        Tensor::from_fn([n, c_out, h, w], |b, o, y, xx| {
            let mut acc: f64 = (0..kc).map(|j| pi.at(b, j, 0, 0) * p.biases.at(j, o, 0, 0)).sum();
            for ci in 0..c_in {
                for ky in 0..k {
                    for kx in 0..k {
                        let wagg: f64 = (0..kc).map(|j| pi.at(b, j, 0, 0) * p.kernels.at(j * c_out + o, ci, ky, kx)).sum();
                        let iy = y as isize + ky as isize - half;
                        let ix = xx as isize + kx as isize - half;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            acc += wagg * x.at(b, ci, iy as usize, ix as usize);
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn zero_logit_layer_gives_uniform_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = global_params(8, 8, 4, 3, &mut rng);
        p.attn_logits_w = Tensor::zeros(p.attn_logits_w.dims());
        p.attn_logits_b = Tensor::zeros(p.attn_logits_b.dims());
        let pi = attention_weights(&random([3, 8, 5, 5], &mut rng), &p).unwrap();
        assert!(pi.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn single_kernel_matches_conv2d() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = global_params(4, 6, 1, 3, &mut rng);
        let x = random([2, 4, 6, 5], &mut rng);
        let pi = attention_weights(&x, &p).unwrap();
        assert!(pi.data().iter().all(|&v| v == 1.0));
        let y = global_dyn_conv(&x, &p).unwrap();
        let reference = conv2d(&x, &p.kernels, Some(p.biases.data()), 1, 1).unwrap();
        assert!(y.max_abs_diff(&reference) < 1e-7);
    }

    #[test]
    fn identical_kernels_ignore_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = global_params(4, 4, 3, 3, &mut rng);
        let one = random([4, 4, 3, 3], &mut rng);
        let bias = random([1, 4, 1, 1], &mut rng);
        let mut bank = Vec::new();
        let mut biases = Vec::new();
        for _ in 0..3 {
            bank.extend_from_slice(one.data());
            biases.extend_from_slice(bias.data());
        }
        p.kernels = Tensor::new([12, 4, 3, 3], bank).unwrap();
        p.biases = Tensor::new([3, 4, 1, 1], biases).unwrap();
        let x = random([2, 4, 5, 5], &mut rng);
        let y = global_dyn_conv(&x, &p).unwrap();
        let reference = conv2d(&x, &one, Some(bias.data()), 1, 1).unwrap();
        assert!(y.max_abs_diff(&reference) < 1e-6);
    }

    #[test]
    fn aggregation_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..5 {
            let p = global_params(4, 3, 4, 3, &mut rng);
            let x = random([2, 4, 5, 6], &mut rng);
            let pi = attention_weights(&x, &p).unwrap();
            let y = global_dyn_conv(&x, &p).unwrap();
            assert!(y.max_abs_diff(&aggregation_oracle(&x, &pi, &p)) < 1e-6);
        }
    }

    #[test]
    fn linear_in_input_with_frozen_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = global_params(4, 4, 4, 3, &mut rng);
        let x = random([1, 4, 5, 5], &mut rng);
        let pi = attention_weights(&x, &p).unwrap();
        let x2 = x.map(|v| 2.0 * v);
        let y1 = global_dyn_conv_with_weights(&x, &pi, &p).unwrap();
        let y2 = global_dyn_conv_with_weights(&x2, &pi, &p).unwrap();
        let zero = Tensor::zeros(x.dims());
        let bias = global_dyn_conv_with_weights(&zero, &pi, &p).unwrap();
        for i in 0..y1.numel() {
            let lhs = y2.data()[i] - bias.data()[i];
            let rhs = 2.0 * (y1.data()[i] - bias.data()[i]);
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_channel_mismatch_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = global_params(8, 8, 4, 3, &mut rng);
        assert!(attention_weights(&random([1, 4, 3, 3], &mut rng), &p).is_err());
    }

    #[test]
    fn zero_branches_give_zero_filters() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = LocalDynFilterParams::shapes(4, 3).map(|name, &d| {
            if name.ends_with("scale") {
                Tensor::full(d, 1.0)
            } else {
                Tensor::zeros(d)
            }
        });
        let (dsp, dch) = predict_local_filters(&random([2, 4, 5, 5], &mut rng), &p).unwrap();
        assert!(dsp.data().iter().chain(dch.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn predicted_filters_are_standardized() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut p = local_params(4, 3, &mut rng);
        p.spatial_scale = Tensor::scalar(0.7);
        p.channel_scale = Tensor::scalar(1.3);
        let x = random([2, 4, 5, 6], &mut rng);
        let (dsp, dch) = predict_local_filters(&x, &p).unwrap();
        assert_eq!(dsp.dims(), [2, 30, 3, 3]);
        assert_eq!(dch.dims(), [2, 4, 3, 3]);
        for (t, scale) in [(&dsp, 0.7f64), (&dch, 1.3)] {
            for f in t.data().chunks(9) {
                let mean = f.iter().sum::<f64>() / 9.0;
                let var = f.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 9.0;
                assert!(mean.abs() < 1e-6);
                // scale² · v/(v + eps) for raw variance v, so slightly under scale²
                assert!(var <= scale * scale && var > 0.99 * scale * scale, "{var}");
            }
        }
    }

    #[test]
    fn delta_and_ones_filters_are_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random([2, 3, 4, 5], &mut rng);
        let dsp = Tensor::from_fn([2, 20, 3, 3], |_, _, a, b| if a == 1 && b == 1 { 1.0 } else { 0.0 });
        let dch = Tensor::full([2, 3, 3, 3], 1.0);
        assert_eq!(local_dyn_conv(&x, &dsp, &dch).unwrap(), x);
        assert_eq!(local_dyn_conv_reference(&x, &dsp, &dch).unwrap(), x);
    }

    #[test]
    fn uniform_filters_give_box_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = random([1, 2, 5, 4], &mut rng);
        let dsp = Tensor::full([1, 20, 3, 3], 1.0 / 9.0);
        let dch = Tensor::full([1, 2, 3, 3], 1.0);
        let y = local_dyn_conv(&x, &dsp, &dch).unwrap();
        let boxed = conv2d(&x, &Tensor::from_fn([2, 2, 3, 3], |o, i, _, _| if o == i { 1.0 / 9.0 } else { 0.0 }), None, 1, 1).unwrap();
        assert!(y.max_abs_diff(&boxed) < 1e-12);
    }

    #[test]
    fn zero_channel_filter_annihilates() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random([1, 2, 4, 4], &mut rng);
        let dsp = random([1, 16, 3, 3], &mut rng);
        let dch = Tensor::zeros([1, 2, 3, 3]);
        assert!(local_dyn_conv_reference(&x, &dsp, &dch).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fifty_random_triples_match_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..50 {
            let x = random([1, 4, 6, 6], &mut rng);
            let dsp = random([1, 36, 3, 3], &mut rng);
            let dch = random([1, 4, 3, 3], &mut rng);
            let fast = local_dyn_conv(&x, &dsp, &dch).unwrap();
            let slow = local_dyn_conv_reference(&x, &dsp, &dch).unwrap();
            assert!(fast.max_abs_diff(&slow) < 1e-6);
        }
    }

    #[test]
    fn local_shape_mismatch_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = random([1, 4, 6, 6], &mut rng);
        assert!(local_dyn_conv(&x, &random([1, 35, 3, 3], &mut rng), &random([1, 4, 3, 3], &mut rng)).is_err());
        assert!(local_dyn_conv(&x, &random([1, 36, 3, 3], &mut rng), &random([1, 3, 3, 3], &mut rng)).is_err());
    }

    #[test]
    fn worked_complexity_example() {
        assert_eq!(mac_count(LayerKind::LocalDynamicFilter, 64, 8, 8, 3), 648);
        assert_eq!(mac_count(LayerKind::StandardConv, 64, 8, 8, 3), 36864);
        assert_eq!(mac_count(LayerKind::LocalDynamicFilter, 1, 1, 5, 1), 2);
        assert_eq!(mac_count(LayerKind::StandardConv, 1, 1, 5, 1), 5);
        for c_out in 1..10 {
            assert_eq!(mac_count(LayerKind::LocalDynamicFilter, 64, 8, c_out, 3), 648);
        }
    }

    #[test]
    fn instrumented_counts_follow_formulas() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let p = local_params(8, 3, &mut rng);
        let x = random([1, 8, 8, 8], &mut rng);
        let counters = LocalFilterCounters::default();
        local_dyn_filter_instrumented(&x, &p, &counters).unwrap();
        assert_eq!(counters.materialized.get(), 648);
        assert_eq!(counters.applied.get(), mac_count(LayerKind::LocalFilterApplication, 64, 8, 8, 3));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn local_matches_reference_on_random_shapes(
            h in 3usize..=8, w in 3usize..=8, c in 1usize..=8, big in any::<bool>(), seed in any::<u64>()
        ) {
            let k = if big { 5 } else { 3 };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random([1, c, h, w], &mut rng);
            let dsp = random([1, h * w, k, k], &mut rng);
            let dch = random([1, c, k, k], &mut rng);
            let fast = local_dyn_conv(&x, &dsp, &dch).unwrap();
            let slow = local_dyn_conv_reference(&x, &dsp, &dch).unwrap();
            prop_assert!(fast.max_abs_diff(&slow) < 1e-6);
        }

        #[test]
        fn attention_rows_on_simplex(scale in 0.01f64..1e3, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = global_params(8, 8, 4, 3, &mut rng);
            let x = random([2, 8, 4, 4], &mut rng).map(|v| v * scale);
            let pi = attention_weights(&x, &p).unwrap();
            for row in pi.data().chunks(4) {
                prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }

        #[test]
        fn scaling_logits_keeps_argmax(scale in 0.01f64..100.0, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let logits: Vec<f64> = (0..4).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let scaled: Vec<f64> = logits.iter().map(|v| v * scale).collect();
            let argmax = |v: &[f64]| v.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
            prop_assert_eq!(argmax(&kernels::softmax(&logits)), argmax(&kernels::softmax(&scaled)));
        }
    }
}
