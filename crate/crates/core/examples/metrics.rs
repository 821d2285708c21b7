//! PSNR and SSIM on the luma channel of an image and a noisy copy.

use gldfn::degradation::add_awgn;
use gldfn::harness::synthetic_image;
use gldfn::metrics::{psnr, rgb_to_y, ssim};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn run_example() -> gldfn::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let img = synthetic_image(64, 64, &mut rng);
    println!("luma plane {:?}", rgb_to_y(&img)?.dims());
    println!("identical: psnr {} ssim {}", psnr(&img, &img, 0)?, ssim(&img, &img, 0)?);
    for sigma in [2.0, 10.0, 25.0] {
        let noisy = add_awgn(&img, sigma, 1)?.map(|v| v.clamp(0.0, 1.0));
        println!("sigma {sigma:>4}: psnr {:.2} dB  ssim {:.4}", psnr(&noisy, &img, 4)?, ssim(&noisy, &img, 4)?);
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> gldfn::Result<()> {
    run_example()
}
