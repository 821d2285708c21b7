use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::data::{file_name, list_pngs, load_png, save_png, HrPool};
use super::weights_io::load_weights;
use crate::degradation::{crop_to_multiple, degrade_for_eval, image_seed, Setting};
use crate::error::{Error, Result};
use crate::metrics::{psnr, ssim, EvalReport};
use crate::network::{gldfn_forward, WeightStore};
use crate::tensor::{kernels, Tensor};

/// Gaussian-8 kernel used for isotropic evaluation unless sweeping: the
/// fourth of the eight.
pub const DEFAULT_GAUSSIAN8_INDEX: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub setting: Setting,
    pub scale: usize,
    /// Noise level (0–255 scale); for the varying setting, the upper end of
    /// the noise band.
    pub sigma: f64,
    pub seed: u64,
    /// Border removed before scoring; defaults to the scale.
    pub shave: Option<usize>,
    pub kernel_index: usize,
    /// Scores every Gaussian-8 kernel instead of one (isotropic only).
    pub sweep: bool,
}

impl EvalOptions {
    pub fn new(setting: Setting, scale: usize) -> Self {
        Self {
            setting,
            scale,
            sigma: if setting == Setting::SpatiallyVarying { 5.0 } else { 0.0 },
            seed: 0,
            shave: None,
            kernel_index: DEFAULT_GAUSSIAN8_INDEX,
            sweep: false,
        }
    }

    pub fn describe(&self) -> String {
        let mut s = format!("{} x{} sigma={}", self.setting, self.scale, self.sigma);
        if self.setting == Setting::Isotropic {
            if self.sweep {
                s += " kernels=gaussian8";
            } else {
                s += &format!(" kernel=gaussian8#{}", self.kernel_index + 1);
            }
        }
        s
    }
}

/// Degrades each image, upsamples it with `upsample` and scores the result
/// on luma against the cropped HR image.
pub fn evaluate_with<F>(pool: &HrPool, opts: &EvalOptions, upsample: F) -> Result<EvalReport>
where
    F: Fn(&Tensor<f32>) -> Result<Tensor<f32>> + Sync,
{
    let kernels: Vec<usize> = match (opts.setting, opts.sweep) {
        (Setting::Isotropic, true) => (0..8).collect(),
        _ => vec![opts.kernel_index],
    };
    let shave = opts.shave.unwrap_or(opts.scale);
    let rows: Vec<Vec<(String, f64, f64)>> = pool
        .images
        .par_iter()
        .map(|(name, img)| {
            let hr = crop_to_multiple(img, opts.scale);
            let seed = image_seed(opts.seed, name);
            kernels
                .iter()
                .map(|&k| {
                    let lr = degrade_for_eval(&hr, opts.setting, opts.scale, opts.sigma, k, seed)?;
                    let sr = upsample(&lr)?.map(|v| v.clamp(0.0, 1.0));
                    if sr.dims() != hr.dims() {
                        return Err(Error::shape("evaluate", &sr.dims(), &hr.dims()));
                    }
                    let label = if kernels.len() > 1 { format!("{name}#k{}", k + 1) } else { name.clone() };
                    Ok((label, psnr(&sr, &hr, shave)?, ssim(&sr, &hr, shave)?))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let mut report = EvalReport::new(opts.describe());
    for (name, p, s) in rows.into_iter().flatten() {
        report.push(name, p, s);
    }
    Ok(report)
}

pub fn evaluate_weights(store: &WeightStore, pool: &HrPool, opts: &EvalOptions) -> Result<EvalReport> {
    let cfg = store.infer_config()?;
    if cfg.scale != opts.scale {
        return Err(Error::Config(format!("weights are for x{}, evaluation asked for x{}", cfg.scale, opts.scale)));
    }
    evaluate_with(pool, opts, |lr| gldfn_forward(lr, store, &cfg))
}

/// Bicubic upsampling of the same degraded inputs, as a reference point.
pub fn evaluate_bicubic(pool: &HrPool, opts: &EvalOptions) -> Result<EvalReport> {
    evaluate_with(pool, opts, |lr| kernels::bicubic_upsample(lr, opts.scale))
}

pub fn evaluate(weights_path: &Path, hr_dir: &Path, opts: &EvalOptions) -> Result<EvalReport> {
    let store = load_weights(weights_path)?;
    let pool = HrPool::load_dir(hr_dir)?;
    evaluate_weights(&store, &pool, opts)
}

/// Writes the table to `path` and the JSON-lines records next to it with a
/// `.jsonl` extension.
pub fn write_report(report: &EvalReport, path: &Path) -> Result<()> {
    std::fs::write(path, report.to_table()).map_err(|e| Error::io(path, e))?;
    let jsonl = path.with_extension("jsonl");
    std::fs::write(&jsonl, report.to_jsonl()).map_err(|e| Error::io(&jsonl, e))
}

/// Degrades every PNG in `in_dir` the way evaluation does and writes the LR
/// images under the same names into `out_dir`. Returns the written paths.
pub fn degrade_dataset(in_dir: &Path, out_dir: &Path, opts: &EvalOptions) -> Result<Vec<PathBuf>> {
    let inputs = list_pngs(in_dir)?;
    if inputs.is_empty() {
        return Err(Error::EmptyDataset(in_dir.to_path_buf()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    inputs
        .par_iter()
        .map(|path| {
            let name = file_name(path);
            let hr = load_png(path)?;
            let lr = degrade_for_eval(&hr, opts.setting, opts.scale, opts.sigma, opts.kernel_index, image_seed(opts.seed, &name))?;
            let out = out_dir.join(&name);
            save_png(&lr, &out)?;
            Ok(out)
        })
        .collect()
}

/// Super-resolves one PNG and writes the clamped 8-bit result.
pub fn infer(weights_path: &Path, lr_png: &Path, out_png: &Path, scale: usize) -> Result<()> {
    let store = load_weights(weights_path)?;
    let cfg = store.infer_config()?;
    if cfg.scale != scale {
        return Err(Error::Config(format!("weights are for x{}, asked for x{scale}", cfg.scale)));
    }
    let lr = load_png(lr_png)?;
    let sr = gldfn_forward(&lr, &store, &cfg)?;
    save_png(&sr, out_png)
}
