//! PSNR and SSIM on the BT.601 luminance channel.

use serde::Serialize;
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

/// Studio-swing BT.601 luma of `[n, 3, h, w]` data in `[0, 1]`.
pub fn rgb_to_y<T: Element>(img: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = img.dims();
    if c != 3 {
        return Err(Error::shape("rgb_to_y", &img.dims(), &[n, 3, h, w]));
    }
    Ok(Tensor::from_fn([n, 1, h, w], |b, _, y, x| {
        let (r, g, bl) = (img.at(b, 0, y, x).to_f64_lossy(), img.at(b, 1, y, x).to_f64_lossy(), img.at(b, 2, y, x).to_f64_lossy());
        T::of((65.481 * r + 128.553 * g + 24.966 * bl + 16.0) / 255.0)
    }))
}

/// Luma planes as `f64`, one per sample, after removing `shave` border pixels.
fn luma_planes<T: Element>(op: &'static str, img: &Tensor<T>, shave: usize) -> Result<(Vec<Vec<f64>>, usize, usize)> {
    let y = match img.dims()[1] {
        1 => img.clone(),
        3 => rgb_to_y(img)?,
        _ => return Err(Error::invalid(op, format!("expected 1 or 3 channels, got {:?}", img.dims()))),
    };
    let [n, _, h, w] = y.dims();
    if h <= 2 * shave || w <= 2 * shave {
        return Err(Error::invalid(op, format!("{h}×{w} image cannot lose a {shave}-pixel border")));
    }
    let (hh, ww) = (h - 2 * shave, w - 2 * shave);
    let planes = (0..n)
        .map(|b| {
            (0..hh * ww)
                .map(|p| y.at(b, 0, p / ww + shave, p % ww + shave).to_f64_lossy())
                .collect()
        })
        .collect();
    Ok((planes, hh, ww))
}

fn same_dims<T: Element>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(op, &a.dims(), &b.dims()));
    }
    Ok(())
}

/// `10·log10(1 / MSE)` over the luma of both images (single-channel input is
/// used as is). Identical inputs give `f64::INFINITY`.
pub fn psnr<T: Element>(a: &Tensor<T>, b: &Tensor<T>, shave: usize) -> Result<f64> {
    same_dims("psnr", a, b)?;
    let (pa, ..) = luma_planes("psnr", a, shave)?;
    let (pb, ..) = luma_planes("psnr", b, shave)?;
    let (mut sum, mut count) = (0.0, 0usize);
    for (x, y) in pa.iter().zip(&pb) {
        sum += x.iter().zip(y).map(|(u, v)| (u - v) * (u - v)).sum::<f64>();
        count += x.len();
    }
    let mse = sum / count as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { 10.0 * (1.0 / mse).log10() })
}

fn gaussian_window() -> Vec<f64> {
    let c = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let total: f64 = g.iter().sum();
    g.iter().map(|v| v / total).collect()
}

/// Windowed SSIM with an 11×11 Gaussian (σ = 1.5), averaged over every
/// window that fits inside the shaved image, then over samples.
pub fn ssim<T: Element>(a: &Tensor<T>, b: &Tensor<T>, shave: usize) -> Result<f64> {
    same_dims("ssim", a, b)?;
    let (pa, h, w) = luma_planes("ssim", a, shave)?;
    let (pb, ..) = luma_planes("ssim", b, shave)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid("ssim", format!("{h}×{w} image is smaller than the {SSIM_WINDOW}×{SSIM_WINDOW} window")));
    }
    let g = gaussian_window();
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for (x, y) in pa.iter().zip(&pb) {
        // separable filtering of x, y, x², y², xy: rows first, then columns
        let fields: [Vec<f64>; 5] = [
            x.clone(),
            y.clone(),
            x.iter().map(|v| v * v).collect(),
            y.iter().map(|v| v * v).collect(),
            x.iter().zip(y).map(|(u, v)| u * v).collect(),
        ];
        let filtered: Vec<Vec<f64>> = fields
            .iter()
            .map(|f| {
                let rows: Vec<f64> = (0..h * ow)
                    .map(|p| {
                        let (r, c) = (p / ow, p % ow);
                        (0..SSIM_WINDOW).map(|k| g[k] * f[r * w + c + k]).sum()
                    })
                    .collect();
                (0..oh * ow)
                    .map(|p| {
                        let (r, c) = (p / ow, p % ow);
                        (0..SSIM_WINDOW).map(|k| g[k] * rows[(r + k) * ow + c]).sum()
                    })
                    .collect()
            })
            .collect();
        let mut sum = 0.0;
        for p in 0..oh * ow {
            let (mx, my) = (filtered[0][p], filtered[1][p]);
            let (vx, vy, cov) = (filtered[2][p] - mx * mx, filtered[3][p] - my * my, filtered[4][p] - mx * my);
            sum += ((2.0 * mx * my + C1) * (2.0 * cov + C2)) / ((mx * mx + my * my + C1) * (vx + vy + C2));
        }
        total += sum / (oh * ow) as f64;
    }
    Ok(total / pa.len() as f64)
}

/// Scores of one evaluated image.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImageScore {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    /// Free-form description of the degradation, e.g. `iso x2 sigma=0`.
    pub setting: String,
    pub records: Vec<ImageScore>,
}

fn psnr_json(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else {
        json!("inf")
    }
}

impl EvalReport {
    pub fn new(setting: impl Into<String>) -> Self {
        Self { setting: setting.into(), records: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, psnr: f64, ssim: f64) {
        self.records.push(ImageScore { name: name.into(), psnr, ssim });
    }

    /// Mean of the finite PSNR values (infinite if all are infinite, NaN if
    /// there are none).
    pub fn mean_psnr(&self) -> f64 {
        let finite: Vec<f64> = self.records.iter().map(|r| r.psnr).filter(|v| v.is_finite()).collect();
        if finite.is_empty() {
            return if self.records.is_empty() { f64::NAN } else { f64::INFINITY };
        }
        finite.iter().sum::<f64>() / finite.len() as f64
    }

    pub fn mean_ssim(&self) -> f64 {
        self.records.iter().map(|r| r.ssim).sum::<f64>() / self.records.len() as f64
    }

    /// Tab-separated table with a header, one row per image and a final
    /// `mean` row.
    pub fn to_table(&self) -> String {
        let mut out = format!("# {}\nname\tpsnr\tssim\n", self.setting);
        let row = |name: &str, p: f64, s: f64| format!("{name}\t{p:.4}\t{s:.6}\n");
        for r in &self.records {
            out += &row(&r.name, r.psnr, r.ssim);
        }
        out += &row("mean", self.mean_psnr(), self.mean_ssim());
        out
    }

    /// One JSON object per line, aggregate last. Infinite PSNR is written as
    /// the string `"inf"`.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out += &json!({ "name": r.name, "psnr": psnr_json(r.psnr), "ssim": r.ssim }).to_string();
            out.push('\n');
        }
        let agg = json!({
            "name": "mean",
            "setting": self.setting,
            "images": self.records.len(),
            "psnr": psnr_json(self.mean_psnr()),
            "ssim": self.mean_ssim(),
        });
        out += &agg.to_string();
        out.push('\n');
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pixel(r: f64, g: f64, b: f64) -> Tensor<f64> {
        Tensor::new([1, 3, 1, 1], vec![r, g, b]).unwrap()
    }

    fn plane(seed: u64, n: usize) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn([1, 1, n, n], |_, _, _, _| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn luma_endpoints() {
        assert!((rgb_to_y(&pixel(0.0, 0.0, 0.0)).unwrap().data()[0] - 16.0 / 255.0).abs() < 1e-12);
        assert!((rgb_to_y(&pixel(1.0, 1.0, 1.0)).unwrap().data()[0] - 235.0 / 255.0).abs() < 1e-12);
        let green = rgb_to_y(&pixel(0.0, 1.0, 0.0)).unwrap().data()[0];
        let blue = rgb_to_y(&pixel(0.0, 0.0, 1.0)).unwrap().data()[0];
        assert!(green > blue);
    }

    #[test]
    fn psnr_closed_forms() {
        let a = plane(1, 16);
        assert_eq!(psnr(&a, &a, 0).unwrap(), f64::INFINITY);
        let b = a.map(|v| v + 1.0 / 255.0);
        assert!((psnr(&a, &b, 0).unwrap() - 10.0 * (255.0f64 * 255.0).log10()).abs() < 1e-6);
        let c = a.map(|v| v + 2.0f64.sqrt() / 255.0);
        let gain = psnr(&a, &b, 0).unwrap() - psnr(&a, &c, 0).unwrap();
        assert!((gain - 10.0 * 2.0f64.log10()).abs() < 1e-9);
        assert!(psnr(&a, &b, 8).is_err());
        assert!(psnr(&a, &plane(1, 15), 0).is_err());
    }

    #[test]
    fn ssim_basics() {
        let a = plane(2, 16);
        assert_eq!(ssim(&a, &a, 0).unwrap(), 1.0);
        assert!(ssim(&a, &a.map(|v| 1.0 - v), 0).unwrap() < 1.0);
        assert!(ssim(&plane(3, 10), &plane(3, 10), 0).is_err());
        assert!(ssim(&a, &a, 3).is_err());
    }

    #[test]
    fn shave_ignores_border() {
        let (a, b) = (plane(4, 20), plane(5, 20));
        let mut a2 = a.clone();
        let mut b2 = b.clone();
        for y in 0..20 {
            for x in 0..20 {
                if y < 2 || x < 2 || y >= 18 || x >= 18 {
                    let i = a.index(0, 0, y, x);
                    a2.data_mut()[i] = 0.0;
                    b2.data_mut()[i] = 1.0;
                }
            }
        }
        assert_eq!(psnr(&a, &b, 2).unwrap(), psnr(&a2, &b2, 2).unwrap());
        assert_eq!(ssim(&a, &b, 2).unwrap(), ssim(&a2, &b2, 2).unwrap());
    }

    #[test]
    fn report_rows() {
        let mut r = EvalReport::new("iso x2 sigma=0");
        r.push("a", 30.0, 0.9);
        r.push("b", f64::INFINITY, 1.0);
        r.push("c", 20.0, 0.5);
        assert_eq!(r.mean_psnr(), 25.0);
        assert_eq!(r.to_table().lines().count(), 2 + 4);
        let lines: Vec<Value> = r.to_jsonl().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[1]["psnr"], "inf");
        assert_eq!(lines[3]["name"], "mean");
        assert_eq!(lines[3]["psnr"], 25.0);
    }

    proptest! {
        #[test]
        fn ssim_is_symmetric(s1 in any::<u64>(), s2 in any::<u64>()) {
            let (a, b) = (plane(s1, 14), plane(s2, 14));
            prop_assert!((ssim(&a, &b, 0).unwrap() - ssim(&b, &a, 0).unwrap()).abs() < 1e-9);
            let v = ssim(&a, &b, 0).unwrap();
            prop_assert!((-1.0..=1.0).contains(&v));
        }

        #[test]
        fn smaller_error_never_lowers_psnr(seed in any::<u64>(), shrink in 0.0f64..1.0) {
            let a = plane(seed, 8);
            let b = plane(seed.wrapping_add(1), 8);
            let closer = Tensor::from_fn(a.dims(), |n, c, y, x| {
                let (u, v) = (a.at(n, c, y, x), b.at(n, c, y, x));
                u + (v - u) * shrink
            });
            prop_assert!(psnr(&a, &closer, 0).unwrap() >= psnr(&a, &b, 0).unwrap());
        }
    }
}
