use std::path::Path;

use serde::Deserialize;

use crate::degradation::Setting;
use crate::error::{Error, Result};
use crate::network::{LossKind, NetworkConfig};

/// Everything that determines a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub net: NetworkConfig,
    /// LR patch side; the HR crop is `patch · scale`.
    pub patch: usize,
    pub batch: usize,
    pub iters: usize,
    pub lr0: f64,
    pub lr_halve_every: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub setting: Setting,
    pub seed: u64,
    pub loss: LossKind,
    /// Upper end of the training noise level for the iso and aniso settings.
    pub noise_max: f64,
    pub log_every: usize,
    /// Writes `<out>.iter<N>` every this many iterations; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            net: NetworkConfig {
                scale: 2,
                channels: 32,
                n_shallow_rb: 2,
                n_groups: 2,
                n_modules_per_group: 4,
                ..NetworkConfig::default()
            },
            patch: 64,
            batch: 8,
            iters: 2000,
            lr0: 4e-4,
            lr_halve_every: 200_000,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            setting: Setting::Isotropic,
            seed: 0,
            loss: LossKind::L1,
            noise_max: 0.0,
            log_every: 100,
            checkpoint_every: 0,
        }
    }
}

#[derive(Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct RawFile {
    net: Option<NetworkConfig>,
    train: RawTrain,
    adam: RawAdam,
}

#[derive(Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct RawTrain {
    patch: Option<usize>,
    batch: Option<usize>,
    iters: Option<usize>,
    lr0: Option<f64>,
    lr_halve_every: Option<usize>,
    setting: Option<String>,
    seed: Option<u64>,
    loss: Option<String>,
    noise_max: Option<f64>,
    log_every: Option<usize>,
    checkpoint_every: Option<usize>,
}

#[derive(Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct RawAdam {
    beta1: Option<f64>,
    beta2: Option<f64>,
    eps: Option<f64>,
}

/// Parses one `key = value` override into a table; bare words are taken as
/// strings.
fn override_table(assignment: &str) -> Result<toml::Table> {
    let (key, value) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let (key, value) = (key.trim(), value.trim());
    toml::from_str(&format!("{key} = {value}"))
        .or_else(|_| toml::from_str(&format!("{key} = {value:?}")))
        .map_err(|e| Error::Config(format!("override {assignment:?}: {e}")))
}

fn merge(into: &mut toml::Table, from: toml::Table) {
    for (k, v) in from {
        match (into.get_mut(&k), v) {
            (Some(toml::Value::Table(dst)), toml::Value::Table(src)) => merge(dst, src),
            (_, v) => {
                into.insert(k, v);
            }
        }
    }
}

impl TrainConfig {
    /// Parses flat `section.key = value` text, then applies `overrides` of the
    /// same form; overrides win. Unset keys keep their defaults.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let d = TrainConfig::default();
        let mut table = toml::Table::new();
        let net = toml::Value::try_from(d.net).map_err(|e| Error::Config(e.to_string()))?;
        table.insert("net".into(), net);
        let file: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        merge(&mut table, file);
        for o in overrides {
            merge(&mut table, override_table(o)?);
        }
        let raw: RawFile = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        let t = raw.train;
        let cfg = TrainConfig {
            net: raw.net.unwrap_or(d.net),
            patch: t.patch.unwrap_or(d.patch),
            batch: t.batch.unwrap_or(d.batch),
            iters: t.iters.unwrap_or(d.iters),
            lr0: t.lr0.unwrap_or(d.lr0),
            lr_halve_every: t.lr_halve_every.unwrap_or(d.lr_halve_every),
            beta1: raw.adam.beta1.unwrap_or(d.beta1),
            beta2: raw.adam.beta2.unwrap_or(d.beta2),
            eps: raw.adam.eps.unwrap_or(d.eps),
            setting: match t.setting {
                Some(s) => s.parse().map_err(|e: Error| Error::Config(e.to_string()))?,
                None => d.setting,
            },
            seed: t.seed.unwrap_or(d.seed),
            loss: match t.loss {
                Some(s) => s.parse()?,
                None => d.loss,
            },
            noise_max: t.noise_max.unwrap_or(d.noise_max),
            log_every: t.log_every.unwrap_or(d.log_every),
            checkpoint_every: t.checkpoint_every.unwrap_or(d.checkpoint_every),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        for (name, v) in [("patch", self.patch), ("batch", self.batch), ("lr_halve_every", self.lr_halve_every)] {
            if v == 0 {
                return Err(Error::Config(format!("train.{name} must be positive")));
            }
        }
        if !(self.lr0 > 0.0) || !self.lr0.is_finite() {
            return Err(Error::Config(format!("train.lr0 must be positive, got {}", self.lr0)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config("adam: need 0 ≤ beta < 1 and eps > 0".into()));
        }
        if !(self.noise_max >= 0.0) {
            return Err(Error::Config(format!("train.noise_max must be non-negative, got {}", self.noise_max)));
        }
        Ok(())
    }

    /// Step size at `iter`: `lr0 · 0.5^⌊iter / lr_halve_every⌋`.
    pub fn learning_rate(&self, iter: usize) -> f64 {
        learning_rate(self.lr0, self.lr_halve_every, iter)
    }
}

pub fn learning_rate(lr0: f64, halve_every: usize, iter: usize) -> f64 {
    lr0 * 0.5f64.powi((iter / halve_every.max(1)) as i32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(TrainConfig::parse("", &[]).unwrap(), TrainConfig::default());
    }

    #[test]
    fn dotted_keys_and_overrides() {
        let text = "net.channels = 8\nnet.scale = 3\ntrain.iters = 50\ntrain.setting = \"aniso\"\nadam.beta2 = 0.99\n";
        let cfg = TrainConfig::parse(text, &["train.iters=70".into(), "train.loss = rmse".into()]).unwrap();
        assert_eq!(cfg.net.channels, 8);
        assert_eq!(cfg.net.scale, 3);
        assert_eq!(cfg.net.n_groups, TrainConfig::default().net.n_groups);
        assert_eq!(cfg.iters, 70);
        assert_eq!(cfg.setting, Setting::Anisotropic);
        assert_eq!(cfg.loss, LossKind::Rmse);
        assert_eq!(cfg.beta2, 0.99);
    }

    #[test]
    fn bad_configs_are_config_errors() {
        for text in ["train.bogus = 1", "net.channels = 6", "train.lr0 = -1.0", "train.setting = \"blur\"", "= 3"] {
            assert!(matches!(TrainConfig::parse(text, &[]), Err(Error::Config(_))), "{text}");
        }
        assert!(matches!(TrainConfig::parse("", &["iters".into()]), Err(Error::Config(_))));
    }

    #[test]
    fn schedule_halves() {
        assert_eq!(learning_rate(4e-4, 200_000, 0), 4e-4);
        assert_eq!(learning_rate(4e-4, 200_000, 199_999), 4e-4);
        assert_eq!(learning_rate(4e-4, 200_000, 200_000), 2e-4);
        assert_eq!(learning_rate(4e-4, 200_000, 450_000), 1e-4);
    }
}
