//! Builds the network, counts its parameters and runs a forward pass. With
//! every weight at zero the output is plain bilinear upsampling.

use gldfn::network::{gldfn_forward, NetworkConfig, WeightStore};
use gldfn::tensor::kernels::bilinear_upsample;
use gldfn::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn run_example() -> gldfn::Result<()> {
    let full = NetworkConfig::default();
    println!("default config: {} parameters", full.parameter_count());

    let cfg = NetworkConfig { channels: 16, ..NetworkConfig::tiny(3) };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let lr: Tensor = Tensor::from_fn([1, 3, 20, 16], |_, _, _, _| rng.gen());

    let zero = gldfn_forward(&lr, &WeightStore::zeros(&cfg), &cfg)?;
    let bilinear = bilinear_upsample(&lr, 3)?;
    println!("zero weights vs bilinear: max |diff| = {:e}", zero.max_abs_diff(&bilinear));

    let store = WeightStore::init(&cfg, 42)?;
    let sr = gldfn_forward(&lr, &store, &cfg)?;
    println!("initialized: {} parameters, {:?} -> {:?}", store.scalar_count(), lr.dims(), sr.dims());
    Ok(())
}

#[allow(dead_code)]
fn main() -> gldfn::Result<()> {
    run_example()
}
