//! Trains a tiny network for a few hundred iterations on synthetic images,
//! then compares it with bicubic upsampling on held-out images.

use gldfn::degradation::Setting;
use gldfn::harness::{evaluate_bicubic, evaluate_weights, synthetic_image, train_on_pool, EvalOptions, HrPool, TrainConfig};
use gldfn::network::NetworkConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn pool(count: usize, seed: u64) -> HrPool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    HrPool::from_images((0..count).map(|i| (format!("{i:03}.png"), synthetic_image(64, 64, &mut rng))).collect())
}

pub fn run_example() -> gldfn::Result<()> {
    let iters = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(150);
    let cfg = TrainConfig {
        net: NetworkConfig::tiny(2),
        patch: 16,
        batch: 4,
        iters,
        lr0: 1e-3,
        lr_halve_every: iters.max(2) / 2,
        log_every: 50,
        ..TrainConfig::default()
    };
    let (weights, log) = train_on_pool(&cfg, &pool(20, 1), None)?;
    let curve = log.smoothed(20);
    println!("loss {:.4} -> {:.4} over {iters} iterations", curve[0], curve[curve.len() - 1]);

    let test = pool(4, 2);
    let opts = EvalOptions::new(Setting::Isotropic, 2);
    let net = evaluate_weights(&weights, &test, &opts)?;
    let bicubic = evaluate_bicubic(&test, &opts)?;
    println!("{}: network {:.2} dB, bicubic {:.2} dB", opts.describe(), net.mean_psnr(), bicubic.mean_psnr());
    Ok(())
}

#[allow(dead_code)]
fn main() -> gldfn::Result<()> {
    run_example()
}
