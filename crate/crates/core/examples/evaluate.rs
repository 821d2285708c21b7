//! Writes a small HR dataset to disk, degrades it, super-resolves one image
//! with saved weights and produces an evaluation report.

use gldfn::degradation::Setting;
use gldfn::harness::{
    degrade_dataset, evaluate, infer, save_weights, write_report, write_synthetic_dataset, EvalOptions,
};
use gldfn::network::{NetworkConfig, WeightStore};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn run_example() -> gldfn::Result<()> {
    let dir = tempfile::tempdir().map_err(|e| gldfn::Error::io(std::path::Path::new("tmp"), e))?;
    let (hr_dir, lr_dir) = (dir.path().join("hr"), dir.path().join("lr"));
    write_synthetic_dataset(&hr_dir, 3, 48, &mut ChaCha8Rng::seed_from_u64(8))?;

    let opts = EvalOptions { sigma: 10.0, ..EvalOptions::new(Setting::SpatiallyVarying, 2) };
    let lr_files = degrade_dataset(&hr_dir, &lr_dir, &opts)?;

    // untrained weights: the network is a learned correction on top of
    // bilinear upsampling, so zeros give the bilinear baseline
    let weights = dir.path().join("zero.gldf");
    save_weights(&WeightStore::zeros(&NetworkConfig::tiny(2)), &weights)?;
    infer(&weights, &lr_files[0], &dir.path().join("sr.png"), 2)?;

    let report = evaluate(&weights, &hr_dir, &opts)?;
    print!("{}", report.to_table());
    write_report(&report, &dir.path().join("report.tsv"))?;
    println!("{}", std::fs::read_to_string(dir.path().join("report.jsonl")).unwrap_or_default().lines().last().unwrap_or(""));
    Ok(())
}

#[allow(dead_code)]
fn main() -> gldfn::Result<()> {
    run_example()
}
