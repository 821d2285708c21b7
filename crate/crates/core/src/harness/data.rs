use std::path::{Path, PathBuf};

use image::{ImageBuffer, Rgb, RgbImage};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::TrainConfig;
use crate::degradation::{self, BlurKernel, RegionBlurMap, Setting};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Reads an image as `[1, 3, h, w]` with values `v / 255`.
pub fn load_png(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)
        .map_err(|source| Error::Image { path: path.to_path_buf(), source })?
        .to_rgb8();
    Ok(rgb_to_tensor(&img))
}

pub fn rgb_to_tensor(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = img.dimensions();
    Tensor::from_fn([1, 3, h as usize, w as usize], |_, c, y, x| {
        img.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
    })
}

/// Converts the first sample of `[n, 3, h, w]` to 8 bits with
/// `round(clamp(v, 0, 1) · 255)`.
pub fn tensor_to_rgb(t: &Tensor<f32>) -> Result<RgbImage> {
    let [_, c, h, w] = t.dims();
    if c != 3 {
        return Err(Error::shape("save_png", &t.dims(), &[1, 3, h, w]));
    }
    let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    Ok(ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        Rgb([q(t.at(0, 0, y, x)), q(t.at(0, 1, y, x)), q(t.at(0, 2, y, x))])
    }))
}

pub fn save_png(t: &Tensor<f32>, path: &Path) -> Result<()> {
    tensor_to_rgb(t)?
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

/// Rounds through 8 bits, as a save/load cycle would.
pub fn quantize(t: &Tensor<f32>) -> Tensor<f32> {
    t.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
}

/// PNG files directly inside `dir`, sorted by name.
pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    out.sort();
    Ok(out)
}

pub fn file_name(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

/// HR images available for training or evaluation.
#[derive(Clone, Debug, Default)]
pub struct HrPool {
    pub source: PathBuf,
    pub images: Vec<(String, Tensor<f32>)>,
}

impl HrPool {
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let mut images = Vec::new();
        for path in list_pngs(dir)? {
            images.push((file_name(&path), load_png(&path)?));
        }
        if images.is_empty() {
            return Err(Error::EmptyDataset(dir.to_path_buf()));
        }
        Ok(Self { source: dir.to_path_buf(), images })
    }

    pub fn from_images(images: Vec<(String, Tensor<f32>)>) -> Self {
        Self { source: PathBuf::from("<memory>"), images }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Indices of images with both sides at least `crop`; smaller ones are
    /// reported once and skipped.
    pub fn eligible(&self, crop: usize) -> Result<Vec<usize>> {
        let mut ok = Vec::new();
        for (i, (name, img)) in self.images.iter().enumerate() {
            let [_, _, h, w] = img.dims();
            if h >= crop && w >= crop {
                ok.push(i);
            } else {
                log::warn!("skipping {name}: {h}×{w} is smaller than the {crop}×{crop} crop");
            }
        }
        if ok.is_empty() {
            return Err(Error::EmptyDataset(self.source.clone()));
        }
        Ok(ok)
    }
}

/// Rotates by `quarter_turns · 90°` counter-clockwise, then mirrors
/// horizontally if `flip`.
pub fn augment(t: &Tensor<f32>, quarter_turns: usize, flip: bool) -> Tensor<f32> {
    let mut out = t.clone();
    for _ in 0..quarter_turns % 4 {
        let [n, c, h, w] = out.dims();
        let src = out;
        out = Tensor::from_fn([n, c, w, h], |b, ch, y, x| src.at(b, ch, x, w - 1 - y));
    }
    if flip {
        let [n, c, h, w] = out.dims();
        let src = out;
        out = Tensor::from_fn([n, c, h, w], |b, ch, y, x| src.at(b, ch, y, w - 1 - x));
    }
    out
}

/// Square window at `(y0, x0)`; coordinates outside the image repeat the
/// nearest edge pixel.
fn crop_clamped(t: &Tensor<f32>, y0: isize, x0: isize, size: usize) -> Tensor<f32> {
    let [_, _, h, w] = t.dims();
    Tensor::from_fn([1, 3, size, size], |_, c, y, x| {
        let yy = (y0 + y as isize).clamp(0, h as isize - 1) as usize;
        let xx = (x0 + x as isize).clamp(0, w as isize - 1) as usize;
        t.at(0, c, yy, xx)
    })
}

fn crop(t: &Tensor<f32>, y0: usize, x0: usize, size: usize) -> Tensor<f32> {
    crop_clamped(t, y0 as isize, x0 as isize, size)
}

/// Context added on each side of an HR crop before blurring: the largest
/// kernel radius for this scale, rounded up to a multiple of the scale so
/// the LR grid stays aligned.
fn context_margin(scale: usize) -> usize {
    let size = degradation::ISOTROPIC_KERNEL_SIZE.max(degradation::anisotropic_kernel_size(scale));
    (size / 2).div_ceil(scale) * scale
}

/// One aligned training example and the degradation that produced it.
#[derive(Clone, Debug)]
pub struct TrainingPair {
    pub lr: Tensor<f32>,
    pub hr: Tensor<f32>,
    /// `None` for spatially varying blur.
    pub kernel: Option<BlurKernel>,
    pub noise_sigma: f64,
}

/// Crops an HR patch of `patch · scale`, augments it, draws a degradation for
/// the configured setting and applies it. Everything comes from `rng`.
pub fn sample_training_pair(pool: &HrPool, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<TrainingPair> {
    let eligible = pool.eligible(cfg.patch * cfg.net.scale)?;
    sample_from(pool, &eligible, cfg, rng)
}

fn sample_from(pool: &HrPool, eligible: &[usize], cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<TrainingPair> {
    let (scale, size) = (cfg.net.scale, cfg.patch * cfg.net.scale);
    let img = &pool.images[eligible[rng.gen_range(0..eligible.len())]].1;
    let [_, _, h, w] = img.dims();
    let (y0, x0) = (rng.gen_range(0..=h - size), rng.gen_range(0..=w - size));
    // the patch is degraded together with its surroundings, so the blur at
    // the patch border sees real image content (edge-replicated past the
    // image bounds, as when degrading the whole image)
    let m = context_margin(scale);
    let ctx_size = size + 2 * m;
    let (turns, flip) = (rng.gen_range(0..4), rng.gen());
    let ctx = augment(&crop_clamped(img, y0 as isize - m as isize, x0 as isize - m as isize, ctx_size), turns, flip);
    let hr = crop(&ctx, m, m, size);
    let noise_seed: u64 = rng.gen();
    let (lr, kernel, sigma) = match cfg.setting {
        Setting::Isotropic | Setting::Anisotropic => {
            let kernel = degradation::training_kernel_source(cfg.setting, scale)?.sample(rng)?;
            let sigma = if cfg.noise_max > 0.0 { rng.gen_range(0.0..=cfg.noise_max) } else { 0.0 };
            let window = degradation::blur_downsample_window(&ctx, &kernel, scale, (m / scale, m / scale), (cfg.patch, cfg.patch))?;
            let lr = degradation::add_awgn(&window, sigma, noise_seed)?;
            (lr, Some(kernel), sigma)
        }
        Setting::SpatiallyVarying => {
            let map = RegionBlurMap::random(ctx_size, ctx_size, rng.gen())?;
            let sigma = degradation::draw_noise_sigma((0.0, 10.0), noise_seed)?;
            let lr = degradation::spatially_varying_degrade(&ctx, &map, scale, (sigma, sigma), noise_seed)?;
            (crop(&lr, m / scale, m / scale, cfg.patch), None, sigma)
        }
    };
    Ok(TrainingPair { lr, hr, kernel, noise_sigma: sigma })
}

/// `cfg.batch` pairs stacked into `[batch, 3, ·, ·]` tensors.
pub fn sample_batch(pool: &HrPool, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let eligible = pool.eligible(cfg.patch * cfg.net.scale)?;
    let mut lrs = Vec::with_capacity(cfg.batch);
    let mut hrs = Vec::with_capacity(cfg.batch);
    for _ in 0..cfg.batch {
        let p = sample_from(pool, &eligible, cfg, rng)?;
        lrs.push(p.lr);
        hrs.push(p.hr);
    }
    Ok((Tensor::stack(&lrs)?, Tensor::stack(&hrs)?))
}

// ---------------------------------------------------------------------------
// synthetic images

/// A procedurally generated RGB image with smooth shading, sharp-edged
/// shapes, line segments and oriented gratings, in `[0, 1]`.
fn radius(n: usize, rng: &mut ChaCha8Rng) -> f32 {
    let hi = (n as f32 / 3.0).max(1.5);
    rng.gen_range(hi.min(3.0) - 0.5..hi)
}

pub fn synthetic_image(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let mut color = || -> [f32; 3] { [rng.gen(), rng.gen(), rng.gen()] };
    let (base_a, base_b) = (color(), color());
    let mut img = vec![[0f32; 3]; h * w];
    let angle: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
    let (dy, dx) = angle.sin_cos();
    for y in 0..h {
        for x in 0..w {
            let t = ((y as f32 * dy + x as f32 * dx) / (h + w) as f32 + 1.0) / 2.0;
            for c in 0..3 {
                img[y * w + x][c] = base_a[c] * (1.0 - t) + base_b[c] * t;
            }
        }
    }
    let shapes = rng.gen_range(4..10);
    for _ in 0..shapes {
        let col = [rng.gen::<f32>(), rng.gen(), rng.gen()];
        let (cy, cx) = (rng.gen_range(0.0..h as f32), rng.gen_range(0.0..w as f32));
        let (ry, rx) = (radius(h, &mut *rng), radius(w, &mut *rng));
        let kind = rng.gen_range(0..4);
        let (freq, phase): (f32, f32) = (rng.gen_range(0.3..1.5), rng.gen_range(0.0..6.3));
        let (gs, gc) = rng.gen_range(0.0f32..std::f32::consts::PI).sin_cos();
        for y in 0..h {
            for x in 0..w {
                let (py, px) = ((y as f32 - cy) / ry, (x as f32 - cx) / rx);
                let inside = match kind {
                    0 => py.abs() <= 1.0 && px.abs() <= 1.0,
                    1 => py * py + px * px <= 1.0,
                    2 => (py * gc - px * gs).abs() * ry.min(rx) <= 1.2 && py * py + px * px <= 4.0,
                    _ => py * py + px * px <= 1.0,
                };
                if !inside {
                    continue;
                }
                let p = &mut img[y * w + x];
                if kind == 3 {
                    // grating inside a disc
                    let s = 0.5 + 0.5 * (freq * (y as f32 * gs + x as f32 * gc) + phase).sin();
                    for c in 0..3 {
                        p[c] = p[c] * (1.0 - s) + col[c] * s;
                    }
                } else {
                    *p = col;
                }
            }
        }
    }
    Tensor::from_fn([1, 3, h, w], |_, c, y, x| img[y * w + x][c].clamp(0.0, 1.0))
}

/// Writes `count` synthetic PNGs named `img_000.png`, … into `dir`.
pub fn write_synthetic_dataset(dir: &Path, count: usize, size: usize, rng: &mut ChaCha8Rng) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    (0..count)
        .map(|i| {
            let path = dir.join(format!("img_{i:03}.png"));
            save_png(&synthetic_image(size, size, rng), &path)?;
            Ok(path)
        })
        .collect()
}
