//! Degrades one synthetic image under each of the three settings and writes
//! the HR/LR pairs as PNGs.

use gldfn::degradation::{degrade, gaussian8_kernels, image_seed, DegradationSpec, Setting};
use gldfn::harness::{save_png, synthetic_image};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn run_example() -> gldfn::Result<()> {
    let out = tempfile::tempdir().map_err(|e| gldfn::Error::io(std::path::Path::new("tmp"), e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let hr = synthetic_image(96, 96, &mut rng);
    save_png(&hr, &out.path().join("hr.png"))?;

    // one fixed kernel, built by hand
    let kernel = gaussian8_kernels(2)?.swap_remove(3);
    let lr = degrade(&hr, &DegradationSpec::new(kernel.clone(), 2, 5.0, 7))?;
    println!("fixed     kernel {0}x{0}, lr {1:?}", kernel.size(), lr.dims());

    // the evaluation protocol for each setting
    for setting in [Setting::Isotropic, Setting::Anisotropic, Setting::SpatiallyVarying] {
        let sigma = if setting == Setting::SpatiallyVarying { 10.0 } else { 0.0 };
        let lr = gldfn::degradation::degrade_for_eval(&hr, setting, 2, sigma, 3, image_seed(0, "hr.png"))?;
        let path = out.path().join(format!("lr_{setting}.png"));
        save_png(&lr, &path)?;
        println!("{setting:<9} lr {:?} -> {}", lr.dims(), path.display());
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> gldfn::Result<()> {
    run_example()
}
