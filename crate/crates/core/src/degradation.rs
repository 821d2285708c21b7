//! Synthetic LR generation: `y = (x ⊛ k)↓s + n`.
//!
//! Images are `[n, 3, h, w]` tensors with values in `[0, 1]`. Noise levels are
//! quoted on the 0–255 scale and divided by 255 when applied.

use std::f64::consts::PI;
use std::str::FromStr;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Kernel size used for isotropic blur.
pub const ISOTROPIC_KERNEL_SIZE: usize = 21;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KernelParams {
    pub sigma_x: f64,
    pub sigma_y: f64,
    pub theta: f64,
}

/// A normalized, non-negative, odd-sized blur kernel stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct BlurKernel {
    size: usize,
    coeffs: Vec<f64>,
    params: Option<KernelParams>,
}

impl BlurKernel {
    /// Builds a kernel from raw coefficients, which must be non-negative and
    /// sum to one within `1e-9`.
    pub fn from_coeffs(size: usize, coeffs: Vec<f64>) -> Result<Self> {
        if size % 2 == 0 || coeffs.len() != size * size {
            return Err(Error::invalid(
                "blur_kernel",
                format!("need an odd size and size² coefficients, got size {size} with {}", coeffs.len()),
            ));
        }
        if coeffs.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::invalid("blur_kernel", "coefficients must be finite and non-negative"));
        }
        let sum: f64 = coeffs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("blur_kernel", format!("coefficients sum to {sum}, not 1")));
        }
        Ok(Self { size, coeffs, params: None })
    }

    /// The 1×1 identity kernel.
    pub fn delta() -> Self {
        Self { size: 1, coeffs: vec![1.0], params: None }
    }

    fn normalized(size: usize, mut coeffs: Vec<f64>, params: KernelParams) -> Self {
        let sum: f64 = coeffs.iter().sum();
        coeffs.iter_mut().for_each(|v| *v /= sum);
        Self { size, coeffs, params: Some(params) }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn radius(&self) -> usize {
        self.size / 2
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn params(&self) -> Option<KernelParams> {
        self.params
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.coeffs[i * self.size + j]
    }

    pub fn transpose(&self) -> Self {
        let s = self.size;
        let coeffs = (0..s * s).map(|p| self.at(p % s, p / s)).collect();
        Self { coeffs, ..self.clone() }
    }

    /// Counter-clockwise rotation by 90°.
    pub fn rotate90(&self) -> Self {
        let s = self.size;
        let coeffs = (0..s * s).map(|p| self.at(p % s, s - 1 - p / s)).collect();
        Self { coeffs, ..self.clone() }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        if self.size != other.size {
            return f64::INFINITY;
        }
        self.coeffs.iter().zip(&other.coeffs).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

fn check_size(op: &'static str, size: usize) -> Result<()> {
    if size % 2 == 0 {
        return Err(Error::invalid(op, format!("kernel size must be odd, got {size}")));
    }
    Ok(())
}

pub fn make_isotropic_gaussian(sigma: f64, size: usize) -> Result<BlurKernel> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::invalid("make_isotropic_gaussian", format!("sigma must be positive, got {sigma}")));
    }
    check_size("make_isotropic_gaussian", size)?;
    let c = (size / 2) as f64;
    let coeffs = (0..size * size)
        .map(|p| {
            let (i, j) = ((p / size) as f64 - c, (p % size) as f64 - c);
            (-(i * i + j * j) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    Ok(BlurKernel::normalized(size, coeffs, KernelParams { sigma_x: sigma, sigma_y: sigma, theta: 0.0 }))
}

/// Gaussian with covariance `R(θ)·diag(σ1², σ2²)·R(θ)ᵀ`. Coordinates are
/// `(x, y) = (column, row)` offsets from the center.
pub fn make_anisotropic_gaussian(sigma1: f64, sigma2: f64, theta: f64, size: usize) -> Result<BlurKernel> {
    if !(sigma1 > 0.0 && sigma2 > 0.0) || !(sigma1.is_finite() && sigma2.is_finite() && theta.is_finite()) {
        return Err(Error::invalid(
            "make_anisotropic_gaussian",
            format!("sigmas must be positive, got ({sigma1}, {sigma2})"),
        ));
    }
    check_size("make_anisotropic_gaussian", size)?;
    let (s, co) = theta.sin_cos();
    let (v1, v2) = (sigma1 * sigma1, sigma2 * sigma2);
    let (a, b, d) = (co * co * v1 + s * s * v2, co * s * (v1 - v2), s * s * v1 + co * co * v2);
    let det = a * d - b * b;
    if !(det > 1e-12 * (a * d).max(f64::MIN_POSITIVE)) {
        return Err(Error::invalid("make_anisotropic_gaussian", "covariance is singular"));
    }
    let (ia, ib, id) = (d / det, -b / det, a / det);
    let c = (size / 2) as f64;
    let coeffs = (0..size * size)
        .map(|p| {
            let (y, x) = ((p / size) as f64 - c, (p % size) as f64 - c);
            (-0.5 * (ia * x * x + 2.0 * ib * x * y + id * y * y)).exp()
        })
        .collect();
    Ok(BlurKernel::normalized(size, coeffs, KernelParams { sigma_x: sigma1, sigma_y: sigma2, theta }))
}

/// Inclusive width range of the eight evaluation kernels for a scale.
pub fn gaussian8_range(scale: usize) -> Result<(f64, f64)> {
    match scale {
        2 => Ok((0.80, 1.60)),
        3 => Ok((1.35, 2.40)),
        4 => Ok((1.80, 3.20)),
        _ => Err(Error::invalid("gaussian8_kernels", format!("unsupported scale {scale}"))),
    }
}

pub fn gaussian8_widths(scale: usize) -> Result<[f64; 8]> {
    let (lo, hi) = gaussian8_range(scale)?;
    Ok(std::array::from_fn(|i| lo + (hi - lo) * i as f64 / 7.0))
}

pub fn gaussian8_kernels(scale: usize) -> Result<Vec<BlurKernel>> {
    gaussian8_widths(scale)?
        .iter()
        .map(|&s| make_isotropic_gaussian(s, ISOTROPIC_KERNEL_SIZE))
        .collect()
}

fn check_blur<T: Element>(op: &'static str, img: &Tensor<T>, size: usize) -> Result<()> {
    let [_, _, h, w] = img.dims();
    if size > h || size > w {
        return Err(Error::invalid(op, format!("kernel {size}×{size} larger than image {h}×{w}")));
    }
    Ok(())
}

/// One channel plane padded by `r` on every side with its edge values.
fn replicate_pad<T: Element>(src: &[T], h: usize, w: usize, r: usize) -> Vec<T> {
    let pw = w + 2 * r;
    let mut out = Vec::with_capacity((h + 2 * r) * pw);
    for py in 0..h + 2 * r {
        let row = &src[py.saturating_sub(r).min(h - 1) * w..][..w];
        out.extend(std::iter::repeat(row[0]).take(r));
        out.extend_from_slice(row);
        out.extend(std::iter::repeat(row[w - 1]).take(r));
    }
    out
}

/// Blurred values at `(y0 + s·i, x0 + s·j)` for an `oh × ow` grid.
fn blur_sampled<T: Element>(
    img: &Tensor<T>,
    k: &BlurKernel,
    s: usize,
    (y0, x0): (usize, usize),
    (oh, ow): (usize, usize),
) -> Result<Tensor<T>> {
    let [n, c, h, w] = img.dims();
    let (ks, r) = (k.size, k.radius());
    let coeffs: Vec<T> = k.coeffs.iter().map(|&v| T::of(v)).collect();
    let pw = w + 2 * r;
    let mut out = vec![T::zero(); n * c * oh * ow];
    out.par_chunks_mut(oh * ow).zip(img.data().par_chunks(h * w)).for_each(|(dst, src)| {
        let padded = replicate_pad(src, h, w, r);
        for i in 0..oh {
            let y = y0 + s * i;
            for j in 0..ow {
                let x = x0 + s * j;
                let mut acc = T::zero();
                for ki in 0..ks {
                    let row = &padded[(y + ki) * pw + x..][..ks];
                    for (cf, v) in coeffs[ki * ks..][..ks].iter().zip(row) {
                        acc += *cf * *v;
                    }
                }
                dst[i * ow + j] = acc;
            }
        }
    });
    Tensor::new([n, c, oh, ow], out)
}

/// Channelwise correlation with edge-replicate padding.
pub fn blur<T: Element>(img: &Tensor<T>, k: &BlurKernel) -> Result<Tensor<T>> {
    check_blur("blur", img, k.size)?;
    let [_, _, h, w] = img.dims();
    blur_sampled(img, k, 1, (0, 0), (h, w))
}

/// `s_fold_downsample(blur(img, k), s)` restricted to an `oh × ow` window
/// of the LR grid starting at LR position `(y0, x0)`, without computing the
/// discarded samples.
pub fn blur_downsample_window<T: Element>(
    img: &Tensor<T>,
    k: &BlurKernel,
    s: usize,
    (y0, x0): (usize, usize),
    (oh, ow): (usize, usize),
) -> Result<Tensor<T>> {
    check_blur("blur", img, k.size)?;
    let [_, _, h, w] = img.dims();
    if s == 0 || h % s != 0 || w % s != 0 {
        return Err(Error::invalid("s_fold_downsample", format!("{h}×{w} is not divisible by {s}")));
    }
    if y0 + oh > h / s || x0 + ow > w / s {
        return Err(Error::invalid(
            "blur_downsample_window",
            format!("window {oh}×{ow} at ({y0}, {x0}) leaves the {}×{} LR grid", h / s, w / s),
        ));
    }
    blur_sampled(img, k, s, (y0 * s, x0 * s), (oh, ow))
}

/// Keeps the top-left sample of every `s×s` block.
pub fn s_fold_downsample<T: Element>(img: &Tensor<T>, s: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = img.dims();
    if s == 0 || h % s != 0 || w % s != 0 {
        return Err(Error::invalid("s_fold_downsample", format!("{h}×{w} is not divisible by {s}")));
    }
    Ok(Tensor::from_fn([n, c, h / s, w / s], |b, ch, y, x| img.at(b, ch, y * s, x * s)))
}

/// Crops the bottom and right edges so both sides are multiples of `s`.
pub fn crop_to_multiple<T: Element>(img: &Tensor<T>, s: usize) -> Tensor<T> {
    let [n, c, h, w] = img.dims();
    let (h2, w2) = (h - h % s.max(1), w - w % s.max(1));
    if (h2, w2) == (h, w) {
        return img.clone();
    }
    Tensor::from_fn([n, c, h2, w2], |b, ch, y, x| img.at(b, ch, y, x))
}

const NOISE_CHUNK: usize = 4096;

/// Standard normal deviates for elements `start..start + out.len()` of the
/// stream keyed by `seed`. Element `i` always consumes words `4i..4i + 4`.
fn normal_stream(seed: u64, start: usize, out: &mut [f64]) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_word_pos(4 * start as u128);
    for v in out {
        let u1 = 1.0 - (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        *v = (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos();
    }
}

/// Adds i.i.d. `N(0, σ²)` noise, `σ` on the 0–255 scale. The deviate at
/// element `i` depends only on `(seed, i)`.
pub fn add_awgn<T: Element>(img: &Tensor<T>, sigma: f64, seed: u64) -> Result<Tensor<T>> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::invalid("add_awgn", format!("sigma must be non-negative, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let scale = sigma / 255.0;
    let mut out = img.clone();
    out.data_mut().par_chunks_mut(NOISE_CHUNK).enumerate().for_each(|(ci, chunk)| {
        let mut z = vec![0.0; chunk.len()];
        normal_stream(seed, ci * NOISE_CHUNK, &mut z);
        for (v, z) in chunk.iter_mut().zip(z) {
            *v += T::of(scale * z);
        }
    });
    Ok(out)
}

/// Where the blur kernel of a degradation comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum KernelSource {
    Fixed(BlurKernel),
    /// Isotropic with width drawn uniformly from `[lo, hi]`.
    Isotropic { lo: f64, hi: f64, size: usize },
    /// Anisotropic with both widths drawn from `[lo, hi]` and angle from `[-π, π]`.
    Anisotropic { lo: f64, hi: f64, size: usize },
}

impl KernelSource {
    pub fn sample(&self, rng: &mut impl Rng) -> Result<BlurKernel> {
        match *self {
            KernelSource::Fixed(ref k) => Ok(k.clone()),
            KernelSource::Isotropic { lo, hi, size } => make_isotropic_gaussian(uniform(rng, lo, hi), size),
            KernelSource::Anisotropic { lo, hi, size } => {
                let (s1, s2) = (uniform(rng, lo, hi), uniform(rng, lo, hi));
                make_anisotropic_gaussian(s1, s2, uniform(rng, -PI, PI), size)
            }
        }
    }

    pub fn size(&self) -> usize {
        match *self {
            KernelSource::Fixed(ref k) => k.size,
            KernelSource::Isotropic { size, .. } | KernelSource::Anisotropic { size, .. } => size,
        }
    }
}

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.gen_range(lo..=hi)
    } else {
        lo
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DegradationSpec {
    pub kernel: KernelSource,
    pub scale: usize,
    /// Noise level on the 0–255 scale.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl DegradationSpec {
    pub fn new(kernel: BlurKernel, scale: usize, noise_sigma: f64, seed: u64) -> Self {
        Self { kernel: KernelSource::Fixed(kernel), scale, noise_sigma, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scale < 1 {
            return Err(Error::invalid("degrade", "scale must be at least 1"));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::invalid("degrade", format!("noise sigma must be non-negative, got {}", self.noise_sigma)));
        }
        Ok(())
    }

    /// The kernel this spec resolves to; samplers draw from a stream of `seed`
    /// separate from the noise stream.
    pub fn resolve_kernel(&self) -> Result<BlurKernel> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(1);
        self.kernel.sample(&mut rng)
    }
}

/// Blur, then s-fold downsample, then add noise.
pub fn degrade<T: Element>(hr: &Tensor<T>, spec: &DegradationSpec) -> Result<Tensor<T>> {
    spec.validate()?;
    let kernel = spec.resolve_kernel()?;
    let [_, _, h, w] = hr.dims();
    let s = spec.scale;
    let lr = blur_downsample_window(hr, &kernel, s, (0, 0), (h / s, w / s))?;
    add_awgn(&lr, spec.noise_sigma, spec.seed)
}

/// A label per pixel selecting one of several blur kernels.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionBlurMap {
    h: usize,
    w: usize,
    labels: Vec<usize>,
    kernels: Vec<BlurKernel>,
}

impl RegionBlurMap {
    pub fn new(h: usize, w: usize, labels: Vec<usize>, kernels: Vec<BlurKernel>) -> Result<Self> {
        if labels.len() != h * w {
            return Err(Error::invalid("region_blur_map", format!("{} labels for a {h}×{w} map", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= kernels.len()) {
            return Err(Error::invalid(
                "region_blur_map",
                format!("label {bad} has no kernel ({} kernels)", kernels.len()),
            ));
        }
        Ok(Self { h, w, labels, kernels })
    }

    pub fn uniform(h: usize, w: usize, kernel: BlurKernel) -> Self {
        Self { h, w, labels: vec![0; h * w], kernels: vec![kernel] }
    }

    /// A random map of defocus-style isotropic and motion-style anisotropic
    /// regions. The image is cut by a random line into two halves, and a
    /// random disc inside it forms a third region.
    pub fn random(h: usize, w: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let size = ISOTROPIC_KERNEL_SIZE;
        let defocus = make_isotropic_gaussian(rng.gen_range(0.5..3.0), size)?;
        let motion = make_anisotropic_gaussian(rng.gen_range(2.0..5.0), rng.gen_range(0.3..1.0), rng.gen_range(-PI..PI), size)?;
        let third = make_isotropic_gaussian(rng.gen_range(0.3..1.5), size)?;
        let (cy, cx) = (rng.gen_range(0.0..h as f64), rng.gen_range(0.0..w as f64));
        let angle: f64 = rng.gen_range(-PI..PI);
        let (dy, dx) = angle.sin_cos();
        let (py, px) = (rng.gen_range(0.0..h as f64), rng.gen_range(0.0..w as f64));
        let radius = rng.gen_range(0.1..0.3) * h.min(w) as f64;
        let labels = (0..h * w)
            .map(|p| {
                let (y, x) = ((p / w) as f64, (p % w) as f64);
                if (y - py).hypot(x - px) < radius {
                    2
                } else if (y - cy) * dx - (x - cx) * dy >= 0.0 {
                    0
                } else {
                    1
                }
            })
            .collect();
        Self::new(h, w, labels, vec![defocus, motion, third])
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn label(&self, y: usize, x: usize) -> usize {
        self.labels[y * self.w + x]
    }

    pub fn kernels(&self) -> &[BlurKernel] {
        &self.kernels
    }
}

/// Blur where each pixel uses the kernel of its region.
#[inline]
fn clamp_offset(p: usize, d: usize, r: usize, n: usize) -> usize {
    (p + d).saturating_sub(r).min(n - 1)
}

pub fn region_blur<T: Element>(img: &Tensor<T>, map: &RegionBlurMap) -> Result<Tensor<T>> {
    let [_, _, h, w] = img.dims();
    if map.dims() != (h, w) {
        return Err(Error::shape("spatially_varying_degrade", &[h, w], &[map.h, map.w]));
    }
    for k in &map.kernels {
        check_blur("spatially_varying_degrade", img, k.size)?;
    }
    let kernels: Vec<Vec<T>> = map.kernels.iter().map(|k| k.coeffs.iter().map(|&v| T::of(v)).collect()).collect();
    let mut out = vec![T::zero(); img.numel()];
    out.par_chunks_mut(h * w).zip(img.data().par_chunks(h * w)).for_each(|(dst, src)| {
        for y in 0..h {
            for x in 0..w {
                let label = map.label(y, x);
                let (s, r) = (map.kernels[label].size, map.kernels[label].radius());
                let coeffs = &kernels[label];
                let mut acc = T::zero();
                for i in 0..s {
                    let row = &src[clamp_offset(y, i, r, h) * w..][..w];
                    for j in 0..s {
                        acc += coeffs[i * s + j] * row[clamp_offset(x, j, r, w)];
                    }
                }
                dst[y * w + x] = acc;
            }
        }
    });
    Tensor::new(img.dims(), out)
}

/// Draws the noise level of a spatially varying degradation from
/// `[lo, hi]` using a stream of `seed` separate from the noise itself.
pub fn draw_noise_sigma(sigma_range: (f64, f64), seed: u64) -> Result<f64> {
    let (lo, hi) = sigma_range;
    if !(lo >= 0.0 && hi >= lo) {
        return Err(Error::invalid("spatially_varying_degrade", format!("bad sigma range [{lo}, {hi}]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    Ok(uniform(&mut rng, lo, hi))
}

pub fn spatially_varying_degrade<T: Element>(
    hr: &Tensor<T>,
    map: &RegionBlurMap,
    scale: usize,
    sigma_range: (f64, f64),
    seed: u64,
) -> Result<Tensor<T>> {
    let sigma = draw_noise_sigma(sigma_range, seed)?;
    let blurred = region_blur(hr, map)?;
    let lr = s_fold_downsample(&blurred, scale)?;
    add_awgn(&lr, sigma, seed)
}

/// Degradation family of a training or evaluation run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Setting {
    Isotropic,
    Anisotropic,
    SpatiallyVarying,
}

impl FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "iso" => Ok(Setting::Isotropic),
            "aniso" => Ok(Setting::Anisotropic),
            "varying" => Ok(Setting::SpatiallyVarying),
            _ => Err(Error::invalid("setting", format!("expected iso, aniso or varying, got {s:?}"))),
        }
    }
}

impl std::fmt::Display for Setting {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Setting::Isotropic => "iso",
            Setting::Anisotropic => "aniso",
            Setting::SpatiallyVarying => "varying",
        })
    }
}

/// Anisotropic kernel size per scale: 11 at ×2, 31 at ×4, 21 otherwise.
pub fn anisotropic_kernel_size(scale: usize) -> usize {
    match scale {
        2 => 11,
        4 => 31,
        _ => 21,
    }
}

/// Kernel distribution used to synthesize training pairs.
pub fn training_kernel_source(setting: Setting, scale: usize) -> Result<KernelSource> {
    match setting {
        Setting::Isotropic => {
            let hi = match scale {
                2 => 2.0,
                3 => 3.0,
                4 => 4.0,
                _ => return Err(Error::invalid("training_kernel_source", format!("unsupported scale {scale}"))),
            };
            Ok(KernelSource::Isotropic { lo: 0.2, hi, size: ISOTROPIC_KERNEL_SIZE })
        }
        Setting::Anisotropic => Ok(KernelSource::Anisotropic { lo: 0.6, hi: 5.0, size: anisotropic_kernel_size(scale) }),
        Setting::SpatiallyVarying => Ok(KernelSource::Isotropic { lo: 0.2, hi: 4.0, size: ISOTROPIC_KERNEL_SIZE }),
    }
}

/// Noise band of the spatially varying setting selected by its upper end:
/// `[max(σ - 5, 0), σ]`, so 5 gives `[0, 5]` and 10 gives `[5, 10]`.
pub fn varying_noise_band(sigma: f64) -> (f64, f64) {
    ((sigma - 5.0).max(0.0), sigma)
}

/// Derives a per-image seed from a run seed and a file name.
pub fn image_seed(seed: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Degrades one evaluation image. `index` picks the Gaussian-8 kernel for the
/// isotropic setting; the other settings draw from `image_seed`.
pub fn degrade_for_eval<T: Element>(
    hr: &Tensor<T>,
    setting: Setting,
    scale: usize,
    sigma: f64,
    index: usize,
    seed: u64,
) -> Result<Tensor<T>> {
    let hr = crop_to_multiple(hr, scale);
    match setting {
        Setting::Isotropic => {
            let kernel = gaussian8_kernels(scale)?.swap_remove(index % 8);
            degrade(&hr, &DegradationSpec::new(kernel, scale, sigma, seed))
        }
        Setting::Anisotropic => {
            let source = KernelSource::Anisotropic { lo: 0.6, hi: 5.0, size: anisotropic_kernel_size(scale) };
            degrade(&hr, &DegradationSpec { kernel: source, scale, noise_sigma: sigma, seed })
        }
        Setting::SpatiallyVarying => {
            let [_, _, h, w] = hr.dims();
            let map = RegionBlurMap::random(h, w, seed)?;
            spatially_varying_degrade(&hr, &map, scale, varying_noise_band(sigma), seed)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_image(dims: [usize; 4], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(dims, |_, _, _, _| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn windowed_decimation_matches_full_pipeline() {
        let img = random_image([2, 3, 30, 24], 21);
        let k = make_anisotropic_gaussian(2.0, 0.7, 0.4, 11).unwrap();
        let full = s_fold_downsample(&blur(&img, &k).unwrap(), 3).unwrap();
        let win = blur_downsample_window(&img, &k, 3, (2, 1), (6, 5)).unwrap();
        assert_eq!(win.dims(), [2, 3, 6, 5]);
        for (b, c, y, x) in (0..2).flat_map(|b| (0..3).flat_map(move |c| (0..6).flat_map(move |y| (0..5).map(move |x| (b, c, y, x))))) {
            assert_eq!(win.at(b, c, y, x).to_bits(), full.at(b, c, y + 2, x + 1).to_bits());
        }
        assert!(blur_downsample_window(&img, &k, 3, (5, 0), (6, 5)).is_err());
    }

    /// Correlation with replicate padding, clamping signed coordinates.
    fn blur_oracle(img: &Tensor<f64>, k: &BlurKernel) -> Tensor<f64> {
        let [_, _, h, w] = img.dims();
        let r = k.radius() as isize;
        Tensor::from_fn(img.dims(), |b, c, y, x| {
            let mut acc = 0.0;
            for di in -r..=r {
                for dj in -r..=r {
                    let yy = (y as isize + di).clamp(0, h as isize - 1) as usize;
                    let xx = (x as isize + dj).clamp(0, w as isize - 1) as usize;
                    acc += k.at((di + r) as usize, (dj + r) as usize) * img.at(b, c, yy, xx);
                }
            }
            acc
        })
    }

    #[test]
    fn size_one_is_unit() {
        assert_eq!(make_isotropic_gaussian(2.0, 1).unwrap().coeffs(), &[1.0]);
    }

    #[test]
    fn three_by_three_matches_formula() {
        let k = make_isotropic_gaussian(0.8, 3).unwrap();
        let g = |d2: f64| (-d2 / (2.0 * 0.64)).exp();
        let z = g(0.0) + 4.0 * g(1.0) + 4.0 * g(2.0);
        assert!((k.at(1, 1) - g(0.0) / z).abs() < 1e-12);
        assert!((k.at(0, 1) - g(1.0) / z).abs() < 1e-12);
        assert!((k.at(0, 0) - g(2.0) / z).abs() < 1e-12);
    }

    #[test]
    fn isotropic_symmetries() {
        for sigma in [0.3, 1.0, 2.7] {
            let k = make_isotropic_gaussian(sigma, 9).unwrap();
            assert!(k.max_abs_diff(&k.transpose()) < 1e-15);
            assert!(k.max_abs_diff(&k.rotate90()) < 1e-15);
        }
    }

    #[test]
    fn invalid_kernels_rejected() {
        assert!(make_isotropic_gaussian(0.0, 3).is_err());
        assert!(make_isotropic_gaussian(-1.0, 3).is_err());
        assert!(make_isotropic_gaussian(1.0, 4).is_err());
        assert!(make_anisotropic_gaussian(1.0, 0.0, 0.3, 5).is_err());
        assert!(make_anisotropic_gaussian(1e-300, 1.0, 0.3, 5).is_err());
    }

    #[test]
    fn anisotropic_reductions() {
        let iso = make_isotropic_gaussian(1.7, 11).unwrap();
        for theta in [-2.0, 0.0, 0.4, 3.0] {
            assert!(make_anisotropic_gaussian(1.7, 1.7, theta, 11).unwrap().max_abs_diff(&iso) < 1e-9);
        }
        // theta = 0: separable product of 1-D Gaussians along x and y
        let k = make_anisotropic_gaussian(2.0, 0.9, 0.0, 7).unwrap();
        let g = |t: f64, s: f64| (-t * t / (2.0 * s * s)).exp();
        let gx: Vec<f64> = (0..7).map(|j| g(j as f64 - 3.0, 2.0)).collect();
        let gy: Vec<f64> = (0..7).map(|i| g(i as f64 - 3.0, 0.9)).collect();
        let (sx, sy): (f64, f64) = (gx.iter().sum(), gy.iter().sum());
        for i in 0..7 {
            for j in 0..7 {
                assert!((k.at(i, j) - gy[i] / sy * gx[j] / sx).abs() < 1e-9);
            }
        }
        let swapped = make_anisotropic_gaussian(2.0, 0.9, PI / 2.0, 7).unwrap();
        let reference = make_anisotropic_gaussian(0.9, 2.0, 0.0, 7).unwrap();
        assert!(swapped.max_abs_diff(&reference) < 1e-9);
    }

    #[test]
    fn gaussian8_widths_are_even() {
        let w2 = gaussian8_widths(2).unwrap();
        assert!((w2[0] - 0.80).abs() < 1e-12 && (w2[7] - 1.60).abs() < 1e-12);
        let w4 = gaussian8_widths(4).unwrap();
        assert!((w4[0] - 1.80).abs() < 1e-12 && (w4[7] - 3.20).abs() < 1e-12);
        for s in 2..=4 {
            let w = gaussian8_widths(s).unwrap();
            let step = (w[7] - w[0]) / 7.0;
            for i in 0..7 {
                assert!((w[i + 1] - w[i] - step).abs() < 1e-12);
            }
        }
        assert_eq!(gaussian8_kernels(3).unwrap().len(), 8);
        assert!(gaussian8_kernels(5).is_err());
    }

    #[test]
    fn blur_basics() {
        let img = random_image([1, 3, 8, 8], 1);
        assert_eq!(blur(&img, &BlurKernel::delta()).unwrap(), img);
        let flat = Tensor::<f64>::full([1, 3, 9, 9], 0.37);
        let out = blur(&flat, &make_isotropic_gaussian(1.5, 7).unwrap()).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.37).abs() < 1e-14));
        assert!(blur(&img, &make_isotropic_gaussian(1.0, 9).unwrap()).is_err());
    }

    #[test]
    fn blur_matches_loop_oracle() {
        let img = random_image([1, 3, 8, 8], 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let raw: Vec<f64> = (0..25).map(|_| rng.gen_range(0.0..1.0)).collect();
        let sum: f64 = raw.iter().sum();
        let k = BlurKernel::from_coeffs(5, raw.iter().map(|v| v / sum).collect()).unwrap();
        assert!(blur(&img, &k).unwrap().max_abs_diff(&blur_oracle(&img, &k)) < 1e-12);
    }

    #[test]
    fn downsample_definition() {
        let img = Tensor::from_fn([1, 1, 4, 4], |_, _, y, x| (y * 4 + x) as f64);
        assert_eq!(s_fold_downsample(&img, 1).unwrap(), img);
        assert_eq!(s_fold_downsample(&img, 2).unwrap().data(), &[0.0, 2.0, 8.0, 10.0]);
        assert!(s_fold_downsample(&img, 3).is_err());
        let big = random_image([1, 2, 8, 8], 4);
        let twice = s_fold_downsample(&s_fold_downsample(&big, 2).unwrap(), 2).unwrap();
        assert_eq!(twice, s_fold_downsample(&big, 4).unwrap());
    }

    #[test]
    fn awgn_determinism() {
        let img = random_image([1, 3, 16, 16], 5);
        assert_eq!(add_awgn(&img, 0.0, 9).unwrap(), img);
        assert_eq!(add_awgn(&img, 15.0, 9).unwrap(), add_awgn(&img, 15.0, 9).unwrap());
        assert_ne!(add_awgn(&img, 15.0, 9).unwrap(), add_awgn(&img, 15.0, 10).unwrap());
        assert!(add_awgn(&img, -1.0, 9).is_err());
    }

    #[test]
    fn awgn_is_keyed_by_position() {
        // chunking must not matter: one stream read straight through
        let mut all = vec![0.0; 3 * NOISE_CHUNK];
        normal_stream(7, 0, &mut all);
        let mut tail = vec![0.0; NOISE_CHUNK];
        normal_stream(7, 2 * NOISE_CHUNK, &mut tail);
        assert_eq!(&all[2 * NOISE_CHUNK..], &tail[..]);
        let img = Tensor::<f64>::zeros([1, 1, 1, 3 * NOISE_CHUNK]);
        let noisy = add_awgn(&img, 255.0, 7).unwrap();
        assert!(noisy.data().iter().zip(&all).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn degrade_identities() {
        let img = random_image([1, 3, 8, 8], 6);
        let id = DegradationSpec::new(BlurKernel::delta(), 1, 0.0, 0);
        assert_eq!(degrade(&img, &id).unwrap(), img);
        let s2 = DegradationSpec::new(BlurKernel::delta(), 2, 0.0, 0);
        assert_eq!(degrade(&img, &s2).unwrap(), s_fold_downsample(&img, 2).unwrap());
    }

    #[test]
    fn degrade_matches_composed_oracle() {
        let ramp = Tensor::from_fn([1, 3, 32, 32], |_, c, y, x| (y * 32 + x + c) as f64 / 1100.0);
        let k = gaussian8_kernels(2).unwrap().swap_remove(0);
        let spec = DegradationSpec::new(k.clone(), 2, 0.0, 11);
        let got = degrade(&ramp, &spec).unwrap();
        let blurred = blur_oracle(&ramp, &k);
        let expect = Tensor::from_fn([1, 3, 16, 16], |b, c, y, x| blurred.at(b, c, 2 * y, 2 * x));
        assert!(got.max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn sampled_kernel_depends_on_seed_only() {
        let spec = DegradationSpec {
            kernel: training_kernel_source(Setting::Anisotropic, 2).unwrap(),
            scale: 2,
            noise_sigma: 0.0,
            seed: 3,
        };
        assert_eq!(spec.resolve_kernel().unwrap(), spec.resolve_kernel().unwrap());
        assert_eq!(spec.resolve_kernel().unwrap().size(), 11);
    }

    #[test]
    fn region_map_degenerate_cases() {
        let img = random_image([1, 3, 24, 24], 7);
        let k = make_isotropic_gaussian(1.2, 7).unwrap();
        let single = RegionBlurMap::uniform(24, 24, k.clone());
        let expect = degrade(&img, &DegradationSpec::new(k.clone(), 2, 3.0, 8)).unwrap();
        // same noise draw: a zero-width band gives the fixed sigma
        let got = spatially_varying_degrade(&img, &single, 2, (3.0, 3.0), 8).unwrap();
        assert!(got.max_abs_diff(&expect) < 1e-12);

        let labels = (0..24 * 24).map(|p| usize::from(p % 24 >= 12)).collect();
        let twin = RegionBlurMap::new(24, 24, labels, vec![k.clone(), k]).unwrap();
        assert!(spatially_varying_degrade(&img, &twin, 2, (3.0, 3.0), 8).unwrap().max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn region_interiors_match_single_kernel() {
        let img = random_image([1, 3, 32, 32], 9);
        let (ka, kb) = (make_isotropic_gaussian(0.8, 5).unwrap(), make_anisotropic_gaussian(2.0, 0.5, 0.7, 5).unwrap());
        let labels = (0..32 * 32).map(|p| usize::from(p % 32 >= 16)).collect();
        let map = RegionBlurMap::new(32, 32, labels, vec![ka.clone(), kb.clone()]).unwrap();
        let got = spatially_varying_degrade(&img, &map, 2, (0.0, 0.0), 1).unwrap();
        let left = degrade(&img, &DegradationSpec::new(ka, 2, 0.0, 1)).unwrap();
        let right = degrade(&img, &DegradationSpec::new(kb, 2, 0.0, 1)).unwrap();
        for c in 0..3 {
            for y in 0..16 {
                for x in 0..16 {
                    let hx = 2 * x;
                    if hx + 2 < 16 {
                        assert!((got.at(0, c, y, x) - left.at(0, c, y, x)).abs() < 1e-12);
                    } else if hx >= 16 + 2 {
                        assert!((got.at(0, c, y, x) - right.at(0, c, y, x)).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn region_map_validation() {
        let k = BlurKernel::delta();
        assert!(RegionBlurMap::new(2, 2, vec![0, 0, 1, 0], vec![k.clone()]).is_err());
        assert!(RegionBlurMap::new(2, 2, vec![0; 3], vec![k]).is_err());
        let map = RegionBlurMap::random(20, 30, 4).unwrap();
        assert_eq!(map.dims(), (20, 30));
    }

    #[test]
    fn setting_names_round_trip() {
        for s in [Setting::Isotropic, Setting::Anisotropic, Setting::SpatiallyVarying] {
            assert_eq!(s.to_string().parse::<Setting>().unwrap(), s);
        }
        assert!("gauss".parse::<Setting>().is_err());
        assert_eq!(varying_noise_band(5.0), (0.0, 5.0));
        assert_eq!(varying_noise_band(10.0), (5.0, 10.0));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn kernels_are_normalized(s1 in 0.2f64..6.0, s2 in 0.2f64..6.0, theta in -PI..PI, half in 0usize..8) {
            let size = 2 * half + 1;
            let k = make_anisotropic_gaussian(s1, s2, theta, size).unwrap();
            prop_assert!((k.coeffs().iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(k.coeffs().iter().all(|&v| v >= 0.0));
            let flipped = make_anisotropic_gaussian(s1, s2, theta + PI, size).unwrap();
            prop_assert!(k.max_abs_diff(&flipped) < 1e-9);
            let iso = make_isotropic_gaussian(s1, size).unwrap();
            prop_assert!((iso.coeffs().iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(iso.max_abs_diff(&iso.rotate90()) < 1e-9);
        }

        #[test]
        fn blur_preserves_constants(v in 0.0f64..1.0, sigma in 0.2f64..4.0) {
            let flat = Tensor::full([1, 3, 12, 12], v);
            let out = blur(&flat, &make_isotropic_gaussian(sigma, 11).unwrap()).unwrap();
            prop_assert!(out.data().iter().all(|&o| (o - v).abs() < 1e-12));
        }

        #[test]
        fn noise_free_degrade_is_pure(seed_a in any::<u64>(), seed_b in any::<u64>()) {
            let img = random_image([1, 3, 12, 12], 1);
            let k = make_isotropic_gaussian(1.1, 5).unwrap();
            let a = degrade(&img, &DegradationSpec::new(k.clone(), 3, 0.0, seed_a)).unwrap();
            let b = degrade(&img, &DegradationSpec::new(k, 3, 0.0, seed_b)).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
