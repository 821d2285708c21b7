use indexmap::IndexMap;

use super::{NetworkConfig, WeightStore};
use crate::dynfilters::{record_global_dyn_conv, record_local_dyn_filter, GlobalDynFilterParams, LocalDynFilterParams};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tape, Tensor, Var};

/// Parameters recorded on a tape, looked up by name.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    pub fn new(vars: IndexMap<String, Var>) -> Self {
        Self { vars }
    }

    /// Pairs names with vars positionally.
    pub fn from_pairs<S: Into<String>>(pairs: impl IntoIterator<Item = (S, Var)>) -> Self {
        Self { vars: pairs.into_iter().map(|(k, v)| (k.into(), v)).collect() }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    fn local_dyn(&self, prefix: &str) -> Result<LocalDynFilterParams<Var>> {
        LocalDynFilterParams::try_from_fields(|f| self.get(&format!("{prefix}.{f}")))
    }

    fn global_dyn(&self, prefix: &str) -> Result<GlobalDynFilterParams<Var>> {
        GlobalDynFilterParams::try_from_fields(|f| self.get(&format!("{prefix}.{f}")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LossKind {
    #[default]
    L1,
    Rmse,
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l1" => Ok(LossKind::L1),
            "rmse" => Ok(LossKind::Rmse),
            _ => Err(Error::Config(format!("unknown loss {s:?}, expected l1 or rmse"))),
        }
    }
}

fn conv<T: Element>(tape: &mut Tape<T>, x: Var, b: &Bound, name: &str) -> Result<Var> {
    let w = b.get(&format!("{name}.w"))?;
    let bias = b.get(&format!("{name}.b"))?;
    let k = tape.dims(w)[2];
    tape.conv2d(x, w, Some(bias), 1, k / 2)
}

fn conv_relu_conv<T: Element>(tape: &mut Tape<T>, x: Var, b: &Bound, prefix: &str) -> Result<Var> {
    let h = conv(tape, x, b, &format!("{prefix}.conv0"))?;
    let h = tape.relu(h);
    conv(tape, h, b, &format!("{prefix}.conv1"))
}

pub fn record_shallow<T: Element>(tape: &mut Tape<T>, lr: Var, b: &Bound, cfg: &NetworkConfig) -> Result<Var> {
    let dims = tape.dims(lr);
    if dims[1] != 3 {
        return Err(Error::shape("shallow_extract", &dims, &[dims[0], 3, dims[2], dims[3]]));
    }
    let mut f = conv(tape, lr, b, "shallow.head")?;
    for r in 0..cfg.n_shallow_rb {
        let p = format!("shallow.rb{r}");
        let h = conv(tape, f, b, &format!("{p}.conv0"))?;
        let h = tape.relu(h);
        let h = conv(tape, h, b, &format!("{p}.conv1"))?;
        let h = tape.relu(h);
        let h = conv(tape, h, b, &format!("{p}.conv2"))?;
        f = tape.add(f, h)?;
    }
    Ok(f)
}

/// One dual dynamic filter module; `prefix` is e.g. `group0.module3`.
pub fn record_ddfm<T: Element>(tape: &mut Tape<T>, local: Var, global: Var, b: &Bound, prefix: &str) -> Result<(Var, Var)> {
    if tape.dims(local) != tape.dims(global) {
        return Err(Error::shape("ddfm_forward", &tape.dims(local), &tape.dims(global)));
    }
    let h = conv_relu_conv(tape, local, b, &format!("{prefix}.local"))?;
    let h = record_local_dyn_filter(tape, h, &b.local_dyn(&format!("{prefix}.local.dyn"))?)?;
    let local_out = tape.add(local, h)?;

    let h = conv_relu_conv(tape, global, b, &format!("{prefix}.global"))?;
    let h = record_global_dyn_conv(tape, h, &b.global_dyn(&format!("{prefix}.global.dyn"))?)?;
    let h = tape.relu(h);
    let global_out = tape.add(global, h)?;
    Ok((local_out, global_out))
}

/// Tail convs, long skips and fusion that close group `g` after its modules.
fn record_group_tail<T: Element>(
    tape: &mut Tape<T>,
    (local_in, global_in): (Var, Var),
    (local, global): (Var, Var),
    b: &Bound,
    g: usize,
) -> Result<(Var, Var)> {
    let t = conv(tape, local, b, &format!("group{g}.local_tail"))?;
    let local = tape.add(local_in, t)?;
    let t = conv(tape, global, b, &format!("group{g}.global_tail"))?;
    let global = tape.add(global_in, t)?;
    let cat = tape.concat(local, global)?;
    let fused = conv(tape, cat, b, &format!("group{g}.fusion"))?;
    Ok((fused, global))
}

pub fn record_ddfg<T: Element>(
    tape: &mut Tape<T>,
    local: Var,
    global: Var,
    b: &Bound,
    cfg: &NetworkConfig,
    g: usize,
) -> Result<(Var, Var)> {
    let (mut l, mut gl) = (local, global);
    for m in 0..cfg.n_modules_per_group {
        (l, gl) = record_ddfm(tape, l, gl, b, &format!("group{g}.module{m}"))?;
    }
    record_group_tail(tape, (local, global), (l, gl), b, g)
}

pub fn record_reconstruct<T: Element>(tape: &mut Tape<T>, features: Var, lr: Var, b: &Bound, scale: usize) -> Result<Var> {
    let (fd, ld) = (tape.dims(features), tape.dims(lr));
    if fd[0] != ld[0] || fd[2] != ld[2] || fd[3] != ld[3] || ld[1] != 3 {
        return Err(Error::shape("reconstruct", &fd, &ld));
    }
    let h = conv(tape, features, b, "recon")?;
    let sr = tape.pixel_shuffle(h, scale)?;
    let up = tape.bilinear_upsample(lr, scale)?;
    tape.add(sr, up)
}

pub fn record_gldfn<T: Element>(tape: &mut Tape<T>, lr: Var, b: &Bound, cfg: &NetworkConfig) -> Result<Var> {
    let f = record_shallow(tape, lr, b, cfg)?;
    let (mut l, mut g) = (f, f);
    for gi in 0..cfg.n_groups {
        (l, g) = record_ddfg(tape, l, g, b, cfg, gi)?;
    }
    let cat = tape.concat(l, g)?;
    let merged = conv(tape, cat, b, "merge")?;
    record_reconstruct(tape, merged, lr, b, cfg.scale)
}

pub fn record_loss<T: Element>(tape: &mut Tape<T>, sr: Var, gt: Var, kind: LossKind) -> Result<Var> {
    match kind {
        LossKind::L1 => tape.mean_abs_diff(sr, gt),
        LossKind::Rmse => tape.root_mean_square_diff(sr, gt),
    }
}

// ---------------------------------------------------------------------------
// tensor-level entry points; each stage runs on its own tape so peak memory
// stays bounded by one module

fn bind_prefix<T: Element>(tape: &mut Tape<T>, store: &WeightStore<T>, prefixes: &[&str]) -> Bound {
    Bound::from_pairs(
        store
            .iter()
            .filter(|(n, _)| prefixes.iter().any(|p| n.starts_with(p)))
            .map(|(n, t)| (n.to_string(), tape.leaf(t.clone().requires_grad(false))))
            .collect::<Vec<_>>(),
    )
}

pub fn shallow_extract<T: Element>(lr: &Tensor<T>, store: &WeightStore<T>, cfg: &NetworkConfig) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let b = bind_prefix(&mut tape, store, &["shallow."]);
    let x = tape.leaf(lr.clone());
    let y = record_shallow(&mut tape, x, &b, cfg)?;
    Ok(tape.into_value(y))
}

pub fn ddfm_forward<T: Element>(
    local: &Tensor<T>,
    global: &Tensor<T>,
    store: &WeightStore<T>,
    prefix: &str,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut tape = Tape::new();
    let b = bind_prefix(&mut tape, store, &[&format!("{prefix}.")]);
    let (l, g) = (tape.leaf(local.clone()), tape.leaf(global.clone()));
    let (lo, go) = record_ddfm(&mut tape, l, g, &b, prefix)?;
    Ok((tape.value(lo).clone(), tape.into_value(go)))
}

pub fn ddfg_forward<T: Element>(
    local: &Tensor<T>,
    global: &Tensor<T>,
    store: &WeightStore<T>,
    cfg: &NetworkConfig,
    g: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (mut l, mut gl) = (local.clone(), global.clone());
    for m in 0..cfg.n_modules_per_group {
        (l, gl) = ddfm_forward(&l, &gl, store, &format!("group{g}.module{m}"))?;
    }
    let mut tape = Tape::new();
    let names = [
        format!("group{g}.local_tail."),
        format!("group{g}.global_tail."),
        format!("group{g}.fusion."),
    ];
    let b = bind_prefix(&mut tape, store, &names.iter().map(String::as_str).collect::<Vec<_>>());
    let ins = (tape.leaf(local.clone()), tape.leaf(global.clone()));
    let chain = (tape.leaf(l), tape.leaf(gl));
    let (lo, go) = record_group_tail(&mut tape, ins, chain, &b, g)?;
    Ok((tape.value(lo).clone(), tape.into_value(go)))
}

pub fn reconstruct<T: Element>(features: &Tensor<T>, lr: &Tensor<T>, store: &WeightStore<T>, scale: usize) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let b = bind_prefix(&mut tape, store, &["recon."]);
    let (f, x) = (tape.leaf(features.clone()), tape.leaf(lr.clone()));
    let y = record_reconstruct(&mut tape, f, x, &b, scale)?;
    Ok(tape.into_value(y))
}

/// Full forward pass. The store is validated against `cfg` first, so a
/// missing or mis-shaped parameter is reported by name.
pub fn gldfn_forward<T: Element>(lr: &Tensor<T>, store: &WeightStore<T>, cfg: &NetworkConfig) -> Result<Tensor<T>> {
    store.validate(cfg)?;
    let f = shallow_extract(lr, store, cfg)?;
    let (mut l, mut g) = (f.clone(), f);
    for gi in 0..cfg.n_groups {
        (l, g) = ddfg_forward(&l, &g, store, cfg, gi)?;
    }
    let mut tape = Tape::new();
    let b = bind_prefix(&mut tape, store, &["merge.", "recon."]);
    let (lv, gv, x) = (tape.leaf(l), tape.leaf(g), tape.leaf(lr.clone()));
    let cat = tape.concat(lv, gv)?;
    let merged = conv(&mut tape, cat, &b, "merge")?;
    let y = record_reconstruct(&mut tape, merged, x, &b, cfg.scale)?;
    Ok(tape.into_value(y))
}

fn loss_of<T: Element>(sr: &Tensor<T>, gt: &Tensor<T>, kind: LossKind) -> Result<T> {
    let mut tape = Tape::new();
    let (a, b) = (tape.leaf(sr.clone()), tape.leaf(gt.clone()));
    let l = record_loss(&mut tape, a, b, kind)?;
    tape.value(l).item()
}

/// Mean absolute error.
pub fn l1_loss<T: Element>(sr: &Tensor<T>, gt: &Tensor<T>) -> Result<T> {
    loss_of(sr, gt, LossKind::L1)
}

/// Root of the mean squared error.
pub fn rmse_loss<T: Element>(sr: &Tensor<T>, gt: &Tensor<T>) -> Result<T> {
    loss_of(sr, gt, LossKind::Rmse)
}
