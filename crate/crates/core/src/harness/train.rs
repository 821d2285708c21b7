use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::adam::{adam_step, AdamParams, AdamState};
use super::data::{sample_batch, HrPool};
use super::weights_io::save_weights;
use super::TrainConfig;
use crate::error::{Error, Result};
use crate::network::{record_gldfn, record_loss, WeightStore};
use crate::tensor::{Tape, Tensor};

/// Loss of every iteration, in order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub losses: Vec<f32>,
    pub checkpoints: Vec<PathBuf>,
}

impl TrainLog {
    /// Trailing moving average with the given window.
    pub fn smoothed(&self, window: usize) -> Vec<f64> {
        let window = window.max(1);
        let mut out = Vec::with_capacity(self.losses.len().saturating_sub(window - 1));
        let mut sum = 0.0;
        for (i, &l) in self.losses.iter().enumerate() {
            sum += l as f64;
            if i >= window {
                sum -= self.losses[i - window] as f64;
            }
            if i + 1 >= window {
                out.push(sum / window as f64);
            }
        }
        out
    }
}

/// Weights plus optimizer state, advanced one batch at a time.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub weights: WeightStore,
    pub adam: AdamState,
    pub iter: usize,
}

impl Trainer {
    /// Fresh weights initialized from `cfg.seed`.
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let weights = WeightStore::init(&cfg.net, cfg.seed)?;
        Ok(Self::from_weights(cfg, weights))
    }

    pub fn from_weights(cfg: TrainConfig, weights: WeightStore) -> Self {
        let adam = AdamState::new(&weights);
        Self { cfg, weights, adam, iter: 0 }
    }

    /// Loss and gradients for one batch without updating anything.
    pub fn loss_and_grads(&self, lr: &Tensor<f32>, hr: &Tensor<f32>) -> Result<(f32, Vec<Vec<f32>>)> {
        let mut tape = Tape::new();
        let bound = self.weights.bind(&mut tape, true);
        let x = tape.leaf(lr.clone());
        let gt = tape.leaf(hr.clone());
        let sr = record_gldfn(&mut tape, x, &bound, &self.cfg.net)?;
        let loss = record_loss(&mut tape, sr, gt, self.cfg.loss)?;
        let value = tape.value(loss).item()?;
        if !value.is_finite() {
            return Err(Error::Diverged { iter: self.iter });
        }
        tape.backward(loss)?;
        let grads = bound
            .iter()
            .map(|(_, v)| tape.grad(v).map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; tape.value(v).numel()]))
            .collect();
        Ok((value, grads))
    }

    /// Forward, L1 loss, backward and an Adam step at the scheduled rate.
    /// Returns the loss before the update.
    pub fn step(&mut self, lr: &Tensor<f32>, hr: &Tensor<f32>) -> Result<f32> {
        let (loss, grads) = self.loss_and_grads(lr, hr)?;
        let params = AdamParams { beta1: self.cfg.beta1, beta2: self.cfg.beta2, eps: self.cfg.eps };
        adam_step(&mut self.weights, &grads, &mut self.adam, self.cfg.learning_rate(self.iter), params)?;
        self.iter += 1;
        Ok(loss)
    }
}

fn checkpoint_path(out: &Path, iter: usize) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(format!(".iter{iter}"));
    PathBuf::from(name)
}

/// Runs `cfg.iters` iterations on batches drawn from `pool`, writing
/// checkpoints and the final weights when `out` is given.
pub fn train_on_pool(cfg: &TrainConfig, pool: &HrPool, out: Option<&Path>) -> Result<(WeightStore, TrainLog)> {
    let mut trainer = Trainer::new(cfg.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut log = TrainLog::default();
    for it in 0..cfg.iters {
        let (lr, hr) = sample_batch(pool, cfg, &mut rng)?;
        let loss = trainer.step(&lr, &hr)?;
        log.losses.push(loss);
        if cfg.log_every > 0 && (it + 1) % cfg.log_every == 0 {
            let window = &log.losses[log.losses.len().saturating_sub(cfg.log_every)..];
            let mean = window.iter().map(|&v| v as f64).sum::<f64>() / window.len() as f64;
            log::info!("iter {:>7}  loss {mean:.6}  lr {:.3e}", it + 1, cfg.learning_rate(it));
        }
        if let Some(out) = out {
            if cfg.checkpoint_every > 0 && (it + 1) % cfg.checkpoint_every == 0 && it + 1 < cfg.iters {
                let path = checkpoint_path(out, it + 1);
                save_weights(&trainer.weights, &path)?;
                log.checkpoints.push(path);
            }
        }
    }
    if let Some(out) = out {
        save_weights(&trainer.weights, out)?;
    }
    Ok((trainer.weights, log))
}

/// Loads every PNG in `hr_dir` and trains, writing the weights to `out`.
pub fn train(cfg: &TrainConfig, hr_dir: &Path, out: &Path) -> Result<TrainLog> {
    let pool = HrPool::load_dir(hr_dir)?;
    log::info!(
        "training on {} images, {} parameters, {} iterations",
        pool.len(),
        cfg.net.parameter_count(),
        cfg.iters
    );
    train_on_pool(cfg, &pool, Some(out)).map(|(_, log)| log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::data::synthetic_image;
    use crate::network::NetworkConfig;

    fn setup() -> (TrainConfig, HrPool) {
        let cfg = TrainConfig {
            net: NetworkConfig::tiny(2),
            patch: 8,
            batch: 2,
            iters: 6,
            log_every: 0,
            ..TrainConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pool = HrPool::from_images(vec![("a".into(), synthetic_image(32, 32, &mut rng))]);
        (cfg, pool)
    }

    #[test]
    fn same_seed_same_curve() {
        let (cfg, pool) = setup();
        let (wa, la) = train_on_pool(&cfg, &pool, None).unwrap();
        let (wb, lb) = train_on_pool(&cfg, &pool, None).unwrap();
        assert_eq!(la, lb);
        assert_eq!(wa, wb);
        assert_eq!(la.losses.len(), 6);
    }

    #[test]
    fn checkpoints_written() {
        let (mut cfg, pool) = setup();
        cfg.checkpoint_every = 2;
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("w.gldf");
        let (w, log) = train_on_pool(&cfg, &pool, Some(&out)).unwrap();
        assert_eq!(log.checkpoints.len(), 2);
        assert!(log.checkpoints[0].to_string_lossy().ends_with("w.gldf.iter2"));
        assert_eq!(crate::harness::load_weights(&out).unwrap(), w);
    }

    #[test]
    fn divergence_names_iteration() {
        let (cfg, _) = setup();
        let mut t = Trainer::new(cfg).unwrap();
        let lr = Tensor::full([1, 3, 8, 8], f32::NAN);
        let hr = Tensor::zeros([1, 3, 16, 16]);
        assert!(matches!(t.step(&lr, &hr), Err(Error::Diverged { iter: 0 })));
    }

    #[test]
    fn smoothing() {
        let log = TrainLog { losses: vec![1.0, 2.0, 3.0, 4.0], checkpoints: vec![] };
        assert_eq!(log.smoothed(2), vec![1.5, 2.5, 3.5]);
    }
}
