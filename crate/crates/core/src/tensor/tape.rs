use std::collections::hash_map::DefaultHasher;
use std::hash::Hasher;

use super::kernels::{self, ConvGeom};
use super::{Element, Tensor};
use crate::dynfilters::ops as dynops;
use crate::dynfilters::FilterLayout;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// A recorded operation together with the inputs its backward rule needs.
#[derive(Clone, Debug)]
pub enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    /// Convolution with a per-sample kernel `Σ_k π[n, k] · bank[k]`.
    AggregatedConv {
        x: Var,
        pi: Var,
        w_bank: Var,
        b_bank: Var,
        pad: usize,
    },
    Relu(Var),
    Add(Var, Var),
    Scale(Var, f64),
    Concat(Var, Var),
    GlobalAvgPool(Var),
    SoftmaxChannels(Var),
    PixelShuffle(Var, usize),
    BilinearUpsample(Var, usize),
    StandardizeFilters {
        x: Var,
        scale: Var,
        layout: FilterLayout,
    },
    LocalDynConv {
        x: Var,
        dsp: Var,
        dch: Var,
    },
    Sum(Var),
    WeightedSum(Var, Vec<f64>),
    MeanAbsDiff(Var, Var),
    RootMeanSquareDiff(Var, Var),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::AggregatedConv { .. } => "global_dyn_conv",
            Op::Relu(_) => "relu",
            Op::Add(..) => "add",
            Op::Scale(..) => "scale",
            Op::Concat(..) => "concat",
            Op::GlobalAvgPool(_) => "global_avg_pool",
            Op::SoftmaxChannels(_) => "softmax",
            Op::PixelShuffle(..) => "pixel_shuffle",
            Op::BilinearUpsample(..) => "bilinear_upsample",
            Op::StandardizeFilters { .. } => "standardize_filters",
            Op::LocalDynConv { .. } => "local_dyn_conv",
            Op::Sum(_) => "sum",
            Op::WeightedSum(..) => "weighted_sum",
            Op::MeanAbsDiff(..) => "l1_loss",
            Op::RootMeanSquareDiff(..) => "rmse_loss",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match *self {
            Op::Leaf => vec![],
            Op::Conv2d { x, w, b, .. } => [Some(x), Some(w), b].into_iter().flatten().collect(),
            Op::AggregatedConv {
                x, pi, w_bank, b_bank, ..
            } => vec![x, pi, w_bank, b_bank],
            Op::Relu(a)
            | Op::Scale(a, _)
            | Op::GlobalAvgPool(a)
            | Op::SoftmaxChannels(a)
            | Op::PixelShuffle(a, _)
            | Op::BilinearUpsample(a, _)
            | Op::Sum(a)
            | Op::WeightedSum(a, _) => vec![a],
            Op::StandardizeFilters { x, scale, .. } => vec![x, scale],
            Op::LocalDynConv { x, dsp, dch } => vec![x, dsp, dch],
            Op::Add(a, b) | Op::Concat(a, b) | Op::MeanAbsDiff(a, b) | Op::RootMeanSquareDiff(a, b) => {
                vec![a, b]
            }
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of a forward computation, replayed in reverse by
/// [`Tape::backward`].
pub struct Tape<T: Element = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input or parameter. Gradients are tracked when the tensor
    /// was created with `requires_grad(true)`.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let requires_grad = t.is_requires_grad();
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> [usize; 4] {
        self.nodes[v.0].value.dims()
    }

    pub fn op(&self, v: Var) -> &Op {
        &self.nodes[v.0].op
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn into_value(mut self, v: Var) -> Tensor<T> {
        self.nodes.swap_remove(v.0).value
    }

    fn push(&mut self, value: Tensor<T>, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Name of the first recorded operation whose output is not finite.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.nodes
            .iter()
            .find(|n| !n.value.all_finite())
            .map(|n| n.op.name())
    }

    /// Hash of the activation pattern of every piecewise-linear operation
    /// (ReLU inputs, L1 residual signs). Equal signatures mean two forward
    /// passes sit on the same linear piece.
    pub fn kink_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            let (a, b) = match node.op {
                Op::Relu(a) => (a, None),
                Op::MeanAbsDiff(a, b) => (a, Some(b)),
                _ => continue,
            };
            let av = self.nodes[a.0].value.data();
            let mut word = 0u64;
            for (i, &v) in av.iter().enumerate() {
                let d = match b {
                    Some(b) => v - self.nodes[b.0].value.data()[i],
                    None => v,
                };
                word = (word << 1) | u64::from(d > T::zero());
                if i % 64 == 63 {
                    h.write_u64(word);
                }
            }
            h.write_u64(word);
        }
        h.finish()
    }

    // ---------------------------------------------------------------------
    // operations

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let bias = match b {
            Some(b) => {
                let bt = self.value(b);
                let c_out = self.dims(w)[0];
                if bt.numel() != c_out {
                    return Err(Error::shape("conv2d", &bt.dims(), &[c_out]));
                }
                Some(bt.data())
            }
            None => None,
        };
        let out = kernels::conv2d(self.value(x), self.value(w), bias, stride, pad)?;
        Ok(self.push(out, Op::Conv2d { x, w, b, stride, pad }))
    }

    /// Same-padded convolution (`pad = (k - 1) / 2`).
    pub fn conv2d_same(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let k = self.dims(w)[2];
        self.conv2d(x, w, b, 1, k / 2)
    }

    pub fn aggregated_conv(&mut self, x: Var, pi: Var, w_bank: Var, b_bank: Var, pad: usize) -> Result<Var> {
        let out = dynops::aggregated_conv_forward(
            self.value(x),
            self.value(pi),
            self.value(w_bank),
            self.value(b_bank),
            pad,
            None,
        )?;
        Ok(self.push(
            out,
            Op::AggregatedConv {
                x,
                pi,
                w_bank,
                b_bank,
                pad,
            },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = kernels::relu(self.value(x));
        self.push(out, Op::Relu(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.dims() != tb.dims() {
            return Err(Error::shape("add", &ta.dims(), &tb.dims()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(ta.dims(), data)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let f = T::of(s);
        let out = self.value(a).map(|v| v * f);
        self.push(out, Op::Scale(a, s))
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::concat_channels(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Concat(a, b)))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let out = kernels::global_avg_pool(self.value(x))?;
        Ok(self.push(out, Op::GlobalAvgPool(x)))
    }

    pub fn softmax_channels(&mut self, x: Var) -> Var {
        let out = kernels::softmax_channels(self.value(x));
        self.push(out, Op::SoftmaxChannels(x))
    }

    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let out = kernels::pixel_shuffle(self.value(x), r)?;
        Ok(self.push(out, Op::PixelShuffle(x, r)))
    }

    pub fn bilinear_upsample(&mut self, x: Var, s: usize) -> Result<Var> {
        let out = kernels::bilinear_upsample(self.value(x), s)?;
        Ok(self.push(out, Op::BilinearUpsample(x, s)))
    }

    pub fn standardize_filters(&mut self, x: Var, scale: Var, layout: FilterLayout) -> Result<Var> {
        let out = dynops::standardize_forward(self.value(x), self.value(scale), layout, None)?;
        Ok(self.push(out, Op::StandardizeFilters { x, scale, layout }))
    }

    pub fn local_dyn_conv(&mut self, x: Var, dsp: Var, dch: Var) -> Result<Var> {
        let out = dynops::local_dyn_conv_forward(self.value(x), self.value(dsp), self.value(dch), None)?;
        Ok(self.push(out, Op::LocalDynConv { x, dsp, dch }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// `Σ_i x_i · weights_i`, a scalar projection used to test non-scalar ops.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<f64>) -> Result<Var> {
        let t = self.value(x);
        if weights.len() != t.numel() {
            return Err(Error::shape("weighted_sum", &t.dims(), &[weights.len()]));
        }
        let s: T = t.data().iter().zip(&weights).map(|(&v, &w)| v * T::of(w)).sum();
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum(x, weights)))
    }

    /// Mean absolute error between two equally shaped tensors.
    pub fn mean_abs_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.dims() != tb.dims() {
            return Err(Error::shape("l1_loss", &ta.dims(), &tb.dims()));
        }
        let n = T::of(ta.numel() as f64);
        let s: T = ta.data().iter().zip(tb.data()).map(|(&x, &y)| (x - y).abs()).sum();
        Ok(self.push(Tensor::scalar(s / n), Op::MeanAbsDiff(a, b)))
    }

    pub fn root_mean_square_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.dims() != tb.dims() {
            return Err(Error::shape("rmse_loss", &ta.dims(), &tb.dims()));
        }
        let n = T::of(ta.numel() as f64);
        let s: T = ta.data().iter().zip(tb.data()).map(|(&x, &y)| (x - y) * (x - y)).sum();
        Ok(self.push(Tensor::scalar((s / n).sqrt()), Op::RootMeanSquareDiff(a, b)))
    }

    // ---------------------------------------------------------------------
    // reverse pass

    /// Propagates `d loss / d v` to every recorded value that requires a
    /// gradient. Gradients from fan-out are summed.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let dims = self.dims(loss);
        if dims.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(dims));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            let contributions = self.local_grads(id, &g);
            for (input, dg) in contributions {
                accumulate(&mut grads[input.0], dg);
            }
            self.nodes[id].value.set_grad(g);
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn local_grads(&self, id: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let mut out = Vec::new();
        match self.nodes[id].op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride, pad } => {
                let (tx, tw) = (self.value(x), self.value(w));
                let geom = ConvGeom::new(tx.dims(), tw.dims(), stride, pad).expect("validated in forward");
                let xp = kernels::pad_zero(tx.data(), tx.dims(), pad);
                let need_b = b.map(|b| self.needs(b)).unwrap_or(false);
                let gr = kernels::conv_backward_impl(
                    &xp,
                    &geom,
                    tw.data(),
                    false,
                    g,
                    (self.needs(x), self.needs(w), need_b),
                );
                push_some(&mut out, x, gr.x);
                push_some(&mut out, w, gr.w);
                if let Some(b) = b {
                    push_some(&mut out, b, gr.b);
                }
            }
            Op::AggregatedConv {
                x,
                pi,
                w_bank,
                b_bank,
                pad,
            } => {
                let gr = dynops::aggregated_conv_backward(
                    self.value(x),
                    self.value(pi),
                    self.value(w_bank),
                    self.value(b_bank),
                    pad,
                    g,
                    [self.needs(x), self.needs(pi), self.needs(w_bank), self.needs(b_bank)],
                );
                push_some(&mut out, x, gr[0].clone());
                push_some(&mut out, pi, gr[1].clone());
                push_some(&mut out, w_bank, gr[2].clone());
                push_some(&mut out, b_bank, gr[3].clone());
            }
            Op::Relu(a) => {
                let xa = self.value(a).data();
                let d = g
                    .iter()
                    .zip(xa)
                    .map(|(&gv, &v)| if v > T::zero() { gv } else { T::zero() })
                    .collect();
                out.push((a, d));
            }
            Op::Add(a, b) => {
                if self.needs(a) {
                    out.push((a, g.to_vec()));
                }
                if self.needs(b) {
                    out.push((b, g.to_vec()));
                }
            }
            Op::Scale(a, s) => {
                let f = T::of(s);
                out.push((a, g.iter().map(|&v| v * f).collect()));
            }
            Op::Concat(a, b) => {
                let [n, ca, h, w] = self.dims(a);
                let cb = self.dims(b)[1];
                let (la, lb) = (ca * h * w, cb * h * w);
                let mut ga = Vec::with_capacity(n * la);
                let mut gb = Vec::with_capacity(n * lb);
                for s in 0..n {
                    let chunk = &g[s * (la + lb)..][..la + lb];
                    ga.extend_from_slice(&chunk[..la]);
                    gb.extend_from_slice(&chunk[la..]);
                }
                if self.needs(a) {
                    out.push((a, ga));
                }
                if self.needs(b) {
                    out.push((b, gb));
                }
            }
            Op::GlobalAvgPool(a) => {
                let [_, _, h, w] = self.dims(a);
                let inv = T::one() / T::of((h * w) as f64);
                let d = g.iter().flat_map(|&gv| std::iter::repeat(gv * inv).take(h * w)).collect();
                out.push((a, d));
            }
            Op::SoftmaxChannels(a) => {
                let y = &self.nodes[id].value;
                let [n, c, h, w] = y.dims();
                let plane = h * w;
                let yd = y.data();
                let mut d = vec![T::zero(); yd.len()];
                for b in 0..n {
                    for p in 0..plane {
                        let at = |ch: usize| (b * c + ch) * plane + p;
                        let dot: T = (0..c).map(|ch| g[at(ch)] * yd[at(ch)]).sum();
                        for ch in 0..c {
                            d[at(ch)] = yd[at(ch)] * (g[at(ch)] - dot);
                        }
                    }
                }
                out.push((a, d));
            }
            Op::PixelShuffle(a, r) => {
                let gt = Tensor::new(self.nodes[id].value.dims(), g.to_vec()).expect("grad matches output");
                let d = kernels::pixel_unshuffle(&gt, r).expect("output dims divisible by r");
                out.push((a, d.into_data()));
            }
            Op::BilinearUpsample(a, s) => {
                out.push((a, kernels::bilinear_backward(self.dims(a), s, g)));
            }
            Op::StandardizeFilters { x, scale, layout } => {
                let (dx, ds) = dynops::standardize_backward(self.value(x), self.value(scale), layout, g);
                if self.needs(x) {
                    out.push((x, dx));
                }
                if self.needs(scale) {
                    out.push((scale, ds));
                }
            }
            Op::LocalDynConv { x, dsp, dch } => {
                let gr = dynops::local_dyn_conv_backward(
                    self.value(x),
                    self.value(dsp),
                    self.value(dch),
                    g,
                    [self.needs(x), self.needs(dsp), self.needs(dch)],
                );
                let [gx, gs, gc] = gr;
                push_some(&mut out, x, gx);
                push_some(&mut out, dsp, gs);
                push_some(&mut out, dch, gc);
            }
            Op::Sum(a) => {
                out.push((a, vec![g[0]; self.value(a).numel()]));
            }
            Op::WeightedSum(a, ref weights) => {
                out.push((a, weights.iter().map(|&w| g[0] * T::of(w)).collect()));
            }
            Op::MeanAbsDiff(a, b) => {
                let (ta, tb) = (self.value(a).data(), self.value(b).data());
                let inv = g[0] / T::of(ta.len() as f64);
                let da: Vec<T> = ta
                    .iter()
                    .zip(tb)
                    .map(|(&x, &y)| {
                        let d = x - y;
                        if d > T::zero() {
                            inv
                        } else if d < T::zero() {
                            -inv
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                if self.needs(b) {
                    out.push((b, da.iter().map(|&v| -v).collect()));
                }
                if self.needs(a) {
                    out.push((a, da));
                }
            }
            Op::RootMeanSquareDiff(a, b) => {
                let (ta, tb) = (self.value(a).data(), self.value(b).data());
                let r = self.nodes[id].value.data()[0];
                let denom = T::of(ta.len() as f64) * r;
                let da: Vec<T> = ta
                    .iter()
                    .zip(tb)
                    .map(|(&x, &y)| if r > T::zero() { g[0] * (x - y) / denom } else { T::zero() })
                    .collect();
                if self.needs(b) {
                    out.push((b, da.iter().map(|&v| -v).collect()));
                }
                if self.needs(a) {
                    out.push((a, da));
                }
            }
        }
        out.retain(|(v, _)| self.needs(*v));
        out
    }
}

fn push_some<T>(out: &mut Vec<(Var, Vec<T>)>, v: Var, g: Option<Vec<T>>) {
    if let Some(g) = g {
        out.push((v, g));
    }
}

fn accumulate<T: Element>(slot: &mut Option<Vec<T>>, g: Vec<T>) {
    match slot {
        None => *slot = Some(g),
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(g) {
                *a += v;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_rule() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full([1, 2, 2, 2], 0.5).requires_grad(true));
        let y = tape.scale(x, 2.0);
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        assert!(tape.grad(x).unwrap().iter().all(|&g| g == 2.0));
    }

    #[test]
    fn fan_out_accumulates() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full([1, 1, 2, 2], 3.0).requires_grad(true));
        let y = tape.add(x, x).unwrap();
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        assert!(tape.grad(x).unwrap().iter().all(|&g| g == 2.0));
    }

    #[test]
    fn relu_gradient_convention() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new([1, 3, 1, 1], vec![2.0, -1.0, 0.0]).unwrap().requires_grad(true));
        let y = tape.relu(x);
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn non_scalar_backward_rejected() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros([1, 1, 2, 2]).requires_grad(true));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn every_tracked_input_gets_a_grad() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full([1, 2, 3, 3], 0.1).requires_grad(true));
        let w = tape.leaf(Tensor::full([2, 2, 3, 3], 0.2).requires_grad(true));
        let c = tape.leaf(Tensor::full([1, 2, 3, 3], 0.3));
        let y = tape.conv2d_same(x, w, None).unwrap();
        let z = tape.relu(y);
        let s = tape.add(z, c).unwrap();
        let loss = tape.sum(s);
        tape.backward(loss).unwrap();
        for v in [x, w, y, z, s] {
            assert!(tape.grad(v).is_some(), "{v:?}");
        }
        assert!(tape.grad(c).is_none());
    }

    #[test]
    fn l1_gradient_is_scaled_sign() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::new([1, 1, 1, 4], vec![1.0, -1.0, 0.5, 2.0]).unwrap().requires_grad(true));
        let b = tape.leaf(Tensor::new([1, 1, 1, 4], vec![0.0, 0.0, 1.0, 1.0]).unwrap());
        let l = tape.mean_abs_diff(a, b).unwrap();
        assert_eq!(tape.value(l).data()[0], (1.0 + 1.0 + 0.5 + 1.0) / 4.0);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[0.25, -0.25, -0.25, 0.25]);
    }
}
