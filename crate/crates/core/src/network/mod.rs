//! The GLDFN super-resolution network.
//!
//! ```text
//! lr ─ conv ─ RB×n ─┬─ local ─┐
//!                   └─ global ┴─ DDFG×G ─ merge ─ conv ─ shuffle ─ + bilinear(lr)
//! ```
//!
//! Each group chains DDFMs on two independent streams, closes each stream
//! with a 3×3 tail conv plus a long skip, then fuses the global stream into
//! the local one with a 1×1 conv over their concatenation.

mod forward;
mod store;

pub use forward::{
    ddfg_forward, ddfm_forward, gldfn_forward, l1_loss, record_ddfg, record_ddfm, record_gldfn, record_loss,
    record_reconstruct, record_shallow, reconstruct, rmse_loss, shallow_extract, Bound, LossKind,
};
pub use store::WeightStore;

use crate::error::{Error, Result};

/// Kernel size of the plain convolutions inside the network.
pub const CONV_K: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Deserialize, serde::Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub scale: usize,
    pub channels: usize,
    pub n_shallow_rb: usize,
    pub n_groups: usize,
    pub n_modules_per_group: usize,
    /// Kernels mixed by each global dynamic filter layer.
    pub kernels: usize,
    /// Spatial size of the dynamic filters.
    pub filter_k: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            scale: 4,
            channels: 64,
            n_shallow_rb: 2,
            n_groups: 5,
            n_modules_per_group: 10,
            kernels: 4,
            filter_k: 3,
        }
    }
}

impl NetworkConfig {
    /// A small configuration for tests and desk-scale training.
    pub fn tiny(scale: usize) -> Self {
        Self {
            scale,
            channels: 8,
            n_shallow_rb: 1,
            n_groups: 1,
            n_modules_per_group: 1,
            kernels: 4,
            filter_k: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("scale", self.scale),
            ("channels", self.channels),
            ("n_groups", self.n_groups),
            ("n_modules_per_group", self.n_modules_per_group),
            ("kernels", self.kernels),
            ("filter_k", self.filter_k),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.channels % 4 != 0 {
            return Err(Error::Config(format!("channels must be divisible by 4, got {}", self.channels)));
        }
        if self.filter_k % 2 == 0 {
            return Err(Error::Config(format!("filter_k must be odd, got {}", self.filter_k)));
        }
        Ok(())
    }

    /// Every learnable parameter with its shape, in a fixed order.
    pub fn param_shapes(&self) -> Vec<(String, [usize; 4])> {
        let c = self.channels;
        let mut out = Vec::new();
        let mut conv = |name: String, c_in: usize, c_out: usize, k: usize| {
            out.push((format!("{name}.w"), [c_out, c_in, k, k]));
            out.push((format!("{name}.b"), [1, c_out, 1, 1]));
        };
        conv("shallow.head".into(), 3, c, CONV_K);
        for r in 0..self.n_shallow_rb {
            for j in 0..3 {
                conv(format!("shallow.rb{r}.conv{j}"), c, c, CONV_K);
            }
        }
        let mut groups = Vec::new();
        for g in 0..self.n_groups {
            for m in 0..self.n_modules_per_group {
                let p = format!("group{g}.module{m}");
                for branch in ["local", "global"] {
                    for j in 0..2 {
                        conv(format!("{p}.{branch}.conv{j}"), c, c, CONV_K);
                    }
                }
                groups.push(p);
            }
            conv(format!("group{g}.local_tail"), c, c, CONV_K);
            conv(format!("group{g}.global_tail"), c, c, CONV_K);
            conv(format!("group{g}.fusion"), 2 * c, c, 1);
        }
        conv("merge".into(), 2 * c, c, 1);
        conv("recon".into(), c, 3 * self.scale * self.scale, CONV_K);

        // dynamic layers, appended in module order
        let local = crate::dynfilters::LocalDynFilterParams::shapes(c, self.filter_k);
        let global = crate::dynfilters::GlobalDynFilterParams::shapes(c, c, self.kernels, self.filter_k);
        for p in groups {
            for (field, dims) in local.fields() {
                out.push((format!("{p}.local.dyn.{field}"), *dims));
            }
            for (field, dims) in global.fields() {
                out.push((format!("{p}.global.dyn.{field}"), *dims));
            }
        }
        out
    }

    /// Total learnable scalars, computed in closed form.
    pub fn parameter_count(&self) -> usize {
        let (c, k2, kk) = (self.channels, self.filter_k * self.filter_k, self.kernels);
        let r = crate::dynfilters::reduced_channels(c);
        let conv = |ci: usize, co: usize, k: usize| co * ci * k * k + co;
        let local_dyn = (k2 * c + k2 + 1) + (r * c + r) + (c * k2 * r + c * k2) + 1;
        let global_dyn = (r * c + r) + (kk * r + kk) + kk * c * c * k2 + kk * c;
        let module = 4 * conv(c, c, CONV_K) + local_dyn + global_dyn;
        let group = self.n_modules_per_group * module + 2 * conv(c, c, CONV_K) + conv(2 * c, c, 1);
        conv(3, c, CONV_K)
            + self.n_shallow_rb * 3 * conv(c, c, CONV_K)
            + self.n_groups * group
            + conv(2 * c, c, 1)
            + conv(c, 3 * self.scale * self.scale, CONV_K)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_matches_enumeration() {
        for cfg in [
            NetworkConfig::default(),
            NetworkConfig::tiny(2),
            NetworkConfig { scale: 3, channels: 16, n_shallow_rb: 0, n_groups: 2, n_modules_per_group: 3, kernels: 2, filter_k: 5 },
        ] {
            let total: usize = cfg.param_shapes().iter().map(|(_, d)| d.iter().product::<usize>()).sum();
            assert_eq!(total, cfg.parameter_count());
        }
    }

    #[test]
    fn default_count_is_pinned() {
        assert_eq!(NetworkConfig::default().parameter_count(), 16_067_422);
    }

    #[test]
    fn names_are_unique() {
        let shapes = NetworkConfig::default().param_shapes();
        let names: std::collections::HashSet<_> = shapes.iter().map(|(n, _)| n).collect();
        assert_eq!(names.len(), shapes.len());
    }

    #[test]
    fn validation() {
        assert!(NetworkConfig::default().validate().is_ok());
        assert!(NetworkConfig { channels: 6, ..NetworkConfig::default() }.validate().is_err());
        assert!(NetworkConfig { n_groups: 0, ..NetworkConfig::default() }.validate().is_err());
        assert!(NetworkConfig { filter_k: 4, ..NetworkConfig::default() }.validate().is_err());
    }
}
