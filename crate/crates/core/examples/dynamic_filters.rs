//! Runs the global (attention over a kernel bank) and local (per-pixel
//! spatial × per-channel) dynamic filter layers on random features and
//! compares the local layer's measured cost with a plain convolution.

use gldfn::dynfilters::{
    attention_weights, global_dyn_conv, local_dyn_filter_instrumented, mac_count, GlobalDynFilterParams, LayerKind,
    LocalDynFilterParams, LocalFilterCounters,
};
use gldfn::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn run_example() -> gldfn::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (c, h, w, k) = (16, 24, 24, 3);
    let x: Tensor = Tensor::from_fn([2, c, h, w], |_, _, _, _| rng.gen_range(-1.0..1.0));
    let mut random = |dims: [usize; 4]| Tensor::from_fn(dims, |_, _, _, _| rng.gen_range(-0.3f32..0.3));

    let global = GlobalDynFilterParams::shapes(c, c, 4, k).map(|_, &d| random(d));
    let pi = attention_weights(&x, &global)?;
    println!("attention over 4 kernels, sample 0: {:?}", &pi.data()[..4]);
    let y = global_dyn_conv(&x, &global)?;
    println!("global layer output {:?}", y.dims());

    let local = LocalDynFilterParams::shapes(c, k).map(|name, &d| {
        if name.ends_with("scale") {
            Tensor::full(d, 1.0)
        } else {
            random(d)
        }
    });
    let counters = LocalFilterCounters::default();
    let y = local_dyn_filter_instrumented(&x.sample(0), &local, &counters)?;
    let pixels = (h * w) as u64;
    println!("local layer output {:?}", y.dims());
    println!(
        "filter coefficients {} (closed form {})",
        counters.materialized.get(),
        mac_count(LayerKind::LocalDynamicFilter, pixels, c as u64, c as u64, k as u64)
    );
    println!(
        "application MACs {} vs standard conv {}",
        counters.applied.get(),
        mac_count(LayerKind::StandardConv, pixels, c as u64, c as u64, k as u64)
    );
    Ok(())
}

#[allow(dead_code)]
fn main() -> gldfn::Result<()> {
    run_example()
}
