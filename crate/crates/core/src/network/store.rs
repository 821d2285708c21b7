use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Bound, NetworkConfig};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tape, Tensor};

/// Named parameters of a network, in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightStore<T: Element = f32> {
    tensors: IndexMap<String, Tensor<T>>,
}

/// How a parameter is initialized, decided from its name.
#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    Zero,
    One,
    Normal(f64),
    FanInUniform,
}

fn init_rule(name: &str) -> Init {
    let field = name.rsplit('.').next().unwrap_or(name);
    match field {
        "attn_logits_w" | "attn_logits_b" => Init::Zero,
        "spatial_w" | "channel_expand_w" => Init::Normal(0.01),
        "spatial_scale" | "channel_scale" => Init::One,
        "b" | "biases" => Init::Zero,
        f if f.ends_with("_b") => Init::Zero,
        _ => Init::FanInUniform,
    }
}

impl<T: Element> WeightStore<T> {
    pub fn new() -> Self {
        Self { tensors: IndexMap::new() }
    }

    /// Every parameter of `cfg` set to zero.
    pub fn zeros(cfg: &NetworkConfig) -> Self {
        Self {
            tensors: cfg.param_shapes().into_iter().map(|(n, d)| (n, Tensor::zeros(d))).collect(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> Option<Tensor<T>> {
        self.tensors.insert(name.into(), t)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors.get(name).ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors.get_mut(name).ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Element>(&self) -> WeightStore<U> {
        WeightStore {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Checks that every parameter `cfg` needs is present with the right shape.
    pub fn validate(&self, cfg: &NetworkConfig) -> Result<()> {
        cfg.validate()?;
        for (name, dims) in cfg.param_shapes() {
            let found = self.get(&name)?.dims();
            if found != dims {
                return Err(Error::ParameterShape { name, expected: dims.to_vec(), found: found.to_vec() });
            }
        }
        Ok(())
    }

    /// Recovers the configuration the parameters were created for.
    pub fn infer_config(&self) -> Result<NetworkConfig> {
        let count = |pattern: &dyn Fn(usize) -> String| (0..).take_while(|&i| self.contains(&pattern(i))).count();
        let channels = self.get("shallow.head.w")?.dims()[0];
        let recon = self.get("recon.w")?.dims()[0];
        let scale = ((recon / 3) as f64).sqrt().round() as usize;
        let bank = self.get("group0.module0.global.dyn.kernels")?.dims();
        let kernels = self.get("group0.module0.global.dyn.biases")?.dims()[0];
        let cfg = NetworkConfig {
            scale,
            channels,
            n_shallow_rb: count(&|r| format!("shallow.rb{r}.conv0.w")),
            n_groups: count(&|g| format!("group{g}.fusion.w")),
            n_modules_per_group: count(&|m| format!("group0.module{m}.local.conv0.w")),
            kernels,
            filter_k: bank[2],
        };
        if 3 * scale * scale != recon {
            return Err(Error::ParameterShape {
                name: "recon.w".into(),
                expected: vec![3 * scale * scale, channels, 3, 3],
                found: self.get("recon.w")?.dims().to_vec(),
            });
        }
        self.validate(&cfg)?;
        let expected = cfg.param_shapes().len();
        if self.len() != expected {
            return Err(Error::Malformed(format!(
                "{} tensors present, configuration needs {expected}",
                self.len()
            )));
        }
        Ok(cfg)
    }

    /// Records every parameter as a leaf of `tape`.
    pub fn bind(&self, tape: &mut Tape<T>, requires_grad: bool) -> Bound {
        Bound::new(
            self.tensors
                .iter()
                .map(|(k, v)| (k.clone(), tape.leaf(v.clone().requires_grad(requires_grad))))
                .collect(),
        )
    }
}

impl WeightStore<f32> {
    /// Fan-in uniform convolutions, zero biases, zero attention logits,
    /// `N(0, 0.01²)` filter-prediction weights and unit filter scales.
    pub fn init(cfg: &NetworkConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = IndexMap::new();
        for (name, dims) in cfg.param_shapes() {
            let t = match init_rule(&name) {
                Init::Zero => Tensor::zeros(dims),
                Init::One => Tensor::full(dims, 1.0),
                Init::Normal(std) => {
                    let normal = Normal::new(0.0, std).expect("positive std");
                    Tensor::from_fn(dims, |_, _, _, _| normal.sample(&mut rng) as f32)
                }
                Init::FanInUniform => {
                    let bound = 1.0 / ((dims[1] * dims[2] * dims[3]) as f64).sqrt();
                    Tensor::from_fn(dims, |_, _, _, _| rng.gen_range(-bound..bound) as f32)
                }
            };
            tensors.insert(name, t);
        }
        Ok(Self { tensors })
    }
}
