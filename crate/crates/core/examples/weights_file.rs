//! Saves a weight store, reads it back, and shows how damaged files are
//! reported.

use gldfn::harness::{decode_weights, encode_weights, load_weights, save_weights};
use gldfn::network::{NetworkConfig, WeightStore};

pub fn run_example() -> gldfn::Result<()> {
    let dir = tempfile::tempdir().map_err(|e| gldfn::Error::io(std::path::Path::new("tmp"), e))?;
    let path = dir.path().join("tiny.gldf");
    let store = WeightStore::init(&NetworkConfig::tiny(2), 9)?;
    save_weights(&store, &path)?;
    let back = load_weights(&path)?;
    println!("{} tensors round-tripped, identical: {}", back.len(), back == store);
    println!("config recovered from shapes: {:?}", back.infer_config()?);

    let bytes = encode_weights(&store);
    let mut flipped = bytes.clone();
    flipped[bytes.len() / 2] ^= 1;
    for (what, data) in [("bit flip", &flipped[..]), ("truncated", &bytes[..bytes.len() - 10]), ("foreign", &b"PNG\x00rest"[..])] {
        let err = decode_weights(data).expect_err("damaged file accepted");
        println!("{what:<10} -> {err} (exit code {})", err.exit_code());
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> gldfn::Result<()> {
    run_example()
}
