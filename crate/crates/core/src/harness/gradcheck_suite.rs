//! Central-difference checks of every differentiable operator and of a tiny
//! full network, all in `f64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dynfilters::{
    record_global_dyn_conv, record_local_dyn_filter, FilterLayout, GlobalDynFilterParams, LocalDynFilterParams,
};
use crate::error::{Error, Result};
use crate::network::{record_gldfn, Bound, NetworkConfig, WeightStore};
use crate::tensor::{grad_check, GradCheckReport, Tape, Tensor, Var, DEFAULT_GRAD_CHECK_EPS};

/// A named check, its finite-difference step and the largest relative error
/// it tolerates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Case {
    pub name: &'static str,
    pub eps: f64,
    pub tolerance: f64,
}

const fn case(name: &'static str) -> Case {
    Case { name, eps: DEFAULT_GRAD_CHECK_EPS, tolerance: 1e-4 }
}

/// The dynamic-filter operators are held to a tighter bound, which needs a
/// smaller step to keep truncation error out of the way.
const fn dyn_case(name: &'static str) -> Case {
    Case { name, eps: 1e-5, tolerance: 1e-5 }
}

/// Every check [`run_case`] knows, in suite order.
pub const CASES: &[Case] = &[
    case("conv2d"),
    case("conv2d_strided"),
    case("relu"),
    case("add"),
    case("scale"),
    case("concat"),
    case("global_avg_pool"),
    case("softmax_channels"),
    case("pixel_shuffle"),
    case("bilinear_upsample"),
    dyn_case("standardize_per_pixel"),
    dyn_case("standardize_per_channel"),
    dyn_case("aggregated_conv"),
    dyn_case("local_dyn_conv"),
    dyn_case("global_dyn_filter"),
    dyn_case("local_dyn_filter"),
    case("l1_loss"),
    case("rmse_loss"),
    case("network"),
];

pub fn find_case(name: &str) -> Result<Case> {
    CASES.iter().copied().find(|c| c.name == name).ok_or_else(|| {
        let known: Vec<&str> = CASES.iter().map(|c| c.name).collect();
        Error::invalid("gradcheck", format!("unknown check {name:?}; known: {}", known.join(", ")))
    })
}

fn rand_t(rng: &mut ChaCha8Rng, dims: [usize; 4], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(dims, |_, _, _, _| rng.gen_range(lo..hi)).requires_grad(true)
}

/// Values in `±[0.1, 1]`, away from ReLU kinks.
fn off_zero(rng: &mut ChaCha8Rng, dims: [usize; 4]) -> Tensor<f64> {
    Tensor::from_fn(dims, |_, _, _, _| {
        let v: f64 = rng.gen_range(0.1..1.0);
        if rng.gen() {
            v
        } else {
            -v
        }
    })
    .requires_grad(true)
}

/// Reduces `y` to a scalar with fixed random weights so every output element
/// contributes a distinct amount.
fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let n = tape.value(y).numel();
    let w = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    tape.weighted_sum(y, w)
}

fn check<F>(inputs: Vec<Tensor<f64>>, seed: u64, eps: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    grad_check(
        |tape, v| {
            let y = f(tape, v)?;
            project(tape, y, seed)
        },
        &inputs,
        eps,
    )
}

fn network_case(seed: u64) -> Result<GradCheckReport> {
    let cfg = NetworkConfig::tiny(2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let store: WeightStore<f64> = WeightStore::<f32>::init(&cfg, seed)?.cast();
    let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
    // Weights keep their fan-in scaled initialization so activations stay
    // O(1). Parameters that start at or near zero are randomized so no path
    // is switched off; the filter-predictor biases get an O(1) spread because
    // standardizing nearly flat filters is strongly curved.
    let params: Vec<Tensor<f64>> = store
        .iter()
        .map(|(n, t)| {
            let jitter = |mid: f64, spread: f64, rng: &mut ChaCha8Rng| {
                Tensor::from_fn(t.dims(), |_, _, _, _| mid + rng.gen_range(-spread..spread))
            };
            let p = if n.ends_with("_scale") {
                jitter(1.0, 0.2, &mut rng)
            } else if n.ends_with("spatial_b") || n.ends_with("channel_expand_b") {
                jitter(0.0, 1.0, &mut rng)
            } else if n.contains("attn_logits") || n.ends_with("spatial_w") || n.ends_with("channel_expand_w") {
                jitter(0.0, 0.3, &mut rng)
            } else if n.ends_with(".b") || n.ends_with("_b") || n.ends_with("biases") {
                jitter(0.0, 0.1, &mut rng)
            } else {
                t.clone()
            };
            p.requires_grad(true)
        })
        .collect();
    let lr = Tensor::from_fn([1, 3, 8, 8], |_, _, _, _| rng.gen_range(0.0..1.0));

    let forward = |tape: &mut Tape<f64>, v: &[Var]| -> Result<Var> {
        let bound = Bound::from_pairs(names.iter().cloned().zip(v[2..].iter().copied()));
        record_gldfn(tape, v[0], &bound, &cfg)
    };

    // target kept at least 0.1 away from the output so L1 stays smooth
    let sr = {
        let mut tape = Tape::new();
        let mut vars = vec![tape.leaf(lr.clone())];
        vars.push(vars[0]);
        vars.extend(params.iter().map(|p| tape.leaf(p.clone())));
        let y = forward(&mut tape, &vars)?;
        tape.into_value(y)
    };
    let gt = Tensor::from_fn(sr.dims(), |n, c, y, x| {
        let d = rng.gen_range(0.1..0.5);
        let v = sr.at(n, c, y, x);
        if rng.gen() {
            v + d
        } else {
            v - d
        }
    });

    let mut inputs = vec![lr, gt];
    inputs.extend(params);
    grad_check(
        |tape, v| {
            let y = forward(tape, v)?;
            tape.mean_abs_diff(y, v[1])
        },
        &inputs,
        find_case("network")?.eps,
    )
}

/// Runs one named check with inputs drawn from `seed`.
pub fn run_case(name: &str, seed: u64) -> Result<GradCheckReport> {
    let eps = find_case(name)?.eps;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    match name {
        "conv2d" => {
            let ins = vec![rand_t(r, [2, 3, 5, 4], -1.0, 1.0), rand_t(r, [4, 3, 3, 3], -1.0, 1.0), rand_t(r, [1, 4, 1, 1], -1.0, 1.0)];
            check(ins, seed, eps, |t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 1))
        }
        "conv2d_strided" => {
            let ins = vec![rand_t(r, [1, 2, 7, 6], -1.0, 1.0), rand_t(r, [3, 2, 3, 3], -1.0, 1.0)];
            check(ins, seed, eps, |t, v| t.conv2d(v[0], v[1], None, 2, 0))
        }
        "relu" => check(vec![off_zero(r, [2, 3, 4, 4])], seed, eps, |t, v| Ok(t.relu(v[0]))),
        "add" => {
            let ins = vec![rand_t(r, [1, 2, 3, 3], -1.0, 1.0), rand_t(r, [1, 2, 3, 3], -1.0, 1.0)];
            check(ins, seed, eps, |t, v| t.add(v[0], v[1]))
        }
        "scale" => check(vec![rand_t(r, [1, 2, 3, 3], -1.0, 1.0)], seed, eps, |t, v| Ok(t.scale(v[0], -1.7))),
        "concat" => {
            let ins = vec![rand_t(r, [2, 2, 3, 3], -1.0, 1.0), rand_t(r, [2, 3, 3, 3], -1.0, 1.0)];
            check(ins, seed, eps, |t, v| t.concat(v[0], v[1]))
        }
        "global_avg_pool" => check(vec![rand_t(r, [2, 3, 4, 5], -1.0, 1.0)], seed, eps, |t, v| t.global_avg_pool(v[0])),
        "softmax_channels" => check(vec![rand_t(r, [2, 4, 1, 1], -2.0, 2.0)], seed, eps, |t, v| Ok(t.softmax_channels(v[0]))),
        "pixel_shuffle" => check(vec![rand_t(r, [1, 12, 2, 3], -1.0, 1.0)], seed, eps, |t, v| t.pixel_shuffle(v[0], 2)),
        "bilinear_upsample" => check(vec![rand_t(r, [1, 3, 3, 4], -1.0, 1.0)], seed, eps, |t, v| t.bilinear_upsample(v[0], 3)),
        "standardize_per_pixel" => {
            let ins = vec![rand_t(r, [1, 9, 3, 3], -1.0, 1.0), rand_t(r, [1, 1, 1, 1], 0.5, 1.5)];
            check(ins, seed, eps, |t, v| t.standardize_filters(v[0], v[1], FilterLayout::PerPixel { k: 3 }))
        }
        "standardize_per_channel" => {
            let ins = vec![rand_t(r, [2, 4 * 9, 1, 1], -1.0, 1.0), rand_t(r, [1, 1, 1, 1], 0.5, 1.5)];
            check(ins, seed, eps, |t, v| t.standardize_filters(v[0], v[1], FilterLayout::PerChannel { k: 3 }))
        }
        "aggregated_conv" => {
            let ins = vec![
                rand_t(r, [2, 3, 4, 4], -1.0, 1.0),
                rand_t(r, [2, 4, 1, 1], 0.0, 1.0),
                rand_t(r, [4 * 2, 3, 3, 3], -1.0, 1.0),
                rand_t(r, [4, 2, 1, 1], -1.0, 1.0),
            ];
            check(ins, seed, eps, |t, v| t.aggregated_conv(v[0], v[1], v[2], v[3], 1))
        }
        "local_dyn_conv" => {
            let ins = vec![
                rand_t(r, [2, 3, 4, 5], -1.0, 1.0),
                rand_t(r, [2, 20, 3, 3], -1.0, 1.0),
                rand_t(r, [2, 3, 3, 3], -1.0, 1.0),
            ];
            check(ins, seed, eps, |t, v| t.local_dyn_conv(v[0], v[1], v[2]))
        }
        "global_dyn_filter" => {
            let shapes = GlobalDynFilterParams::shapes(8, 4, 3, 3);
            let mut ins = vec![rand_t(r, [2, 8, 4, 4], -1.0, 1.0)];
            ins.extend(shapes.fields().iter().map(|(_, d)| rand_t(r, **d, -0.5, 0.5)));
            check(ins, seed, eps, |t, v| {
                let p = GlobalDynFilterParams::try_from_fields({
                    let mut i = 0;
                    move |_| {
                        i += 1;
                        Ok::<_, Error>(v[i])
                    }
                })?;
                record_global_dyn_conv(t, v[0], &p)
            })
        }
        "local_dyn_filter" => {
            let shapes = LocalDynFilterParams::shapes(4, 3);
            let mut ins = vec![rand_t(r, [2, 4, 4, 4], -1.0, 1.0)];
            ins.extend(shapes.fields().iter().map(|(n, d)| {
                if n.ends_with("scale") {
                    rand_t(r, **d, 0.5, 1.5)
                } else {
                    rand_t(r, **d, -0.5, 0.5)
                }
            }));
            check(ins, seed, eps, |t, v| {
                let p = LocalDynFilterParams::try_from_fields({
                    let mut i = 0;
                    move |_| {
                        i += 1;
                        Ok::<_, Error>(v[i])
                    }
                })?;
                record_local_dyn_filter(t, v[0], &p)
            })
        }
        "l1_loss" | "rmse_loss" => {
            let a = rand_t(r, [1, 3, 4, 4], 0.0, 1.0);
            let b = off_zero(r, [1, 3, 4, 4]);
            let gt = Tensor::from_fn(a.dims(), |n, c, y, x| a.at(n, c, y, x) + b.at(n, c, y, x));
            let rmse = name == "rmse_loss";
            grad_check(
                move |t, v| if rmse { t.root_mean_square_diff(v[0], v[1]) } else { t.mean_abs_diff(v[0], v[1]) },
                &[a, gt.requires_grad(true)],
                eps,
            )
        }
        "network" => network_case(seed),
        _ => unreachable!("case table and dispatch disagree on {name}"),
    }
}

/// Runs every case whose name contains `filter` (all when `None`).
pub fn run_suite(filter: Option<&str>, seed: u64) -> Result<Vec<(Case, GradCheckReport)>> {
    let selected: Vec<Case> = CASES.iter().copied().filter(|c| filter.map_or(true, |f| c.name.contains(f))).collect();
    if selected.is_empty() {
        return Err(Error::invalid("gradcheck", format!("no check matches {:?}", filter.unwrap_or(""))));
    }
    selected.into_iter().map(|c| run_case(c.name, seed).map(|r| (c, r))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn operator_cases_pass() {
        for c in CASES.iter().filter(|c| c.name != "network") {
            let r = run_case(c.name, 1).unwrap();
            assert!(r.max_rel_error < c.tolerance, "{}: {r:?}", c.name);
            assert!(r.checked > 0);
        }
    }

    #[test]
    fn unknown_case_rejected() {
        assert!(run_case("softplus", 0).is_err());
        assert!(run_suite(Some("nothing"), 0).is_err());
    }
}
