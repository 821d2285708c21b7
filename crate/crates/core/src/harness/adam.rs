use crate::error::{Error, Result};
use crate::network::WeightStore;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moments per parameter, in weight-store order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(weights: &WeightStore) -> Self {
        let zeros: Vec<Vec<f32>> = weights.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self { m: zeros.clone(), v: zeros, step: 0 }
    }
}

/// One bias-corrected Adam update. `grads` follows the store's order.
pub fn adam_step(
    weights: &mut WeightStore,
    grads: &[Vec<f32>],
    state: &mut AdamState,
    lr: f64,
    p: AdamParams,
) -> Result<()> {
    if grads.len() != weights.len() || state.m.len() != weights.len() {
        return Err(Error::invalid(
            "adam_step",
            format!("{} gradients and {} moment sets for {} parameters", grads.len(), state.m.len(), weights.len()),
        ));
    }
    for ((name, t), g) in weights.iter().zip(grads) {
        if t.numel() != g.len() {
            return Err(Error::ParameterShape { name: name.to_string(), expected: vec![t.numel()], found: vec![g.len()] });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (c1, c2) = (1.0 - p.beta1.powi(t), 1.0 - p.beta2.powi(t));
    for (i, (_, w)) in weights.iter_mut().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, w) in w.data_mut().iter_mut().enumerate() {
            let g = grads[i][j] as f64;
            let mj = p.beta1 * m[j] as f64 + (1.0 - p.beta1) * g;
            let vj = p.beta2 * v[j] as f64 + (1.0 - p.beta2) * g * g;
            m[j] = mj as f32;
            v[j] = vj as f32;
            let update = lr * (mj / c1) / ((vj / c2).sqrt() + p.eps);
            *w = (*w as f64 - update) as f32;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::NetworkConfig;
    use crate::tensor::Tensor;

    fn store() -> WeightStore {
        let mut s = WeightStore::new();
        s.insert("a", Tensor::full([1, 2, 1, 1], 0.5));
        s.insert("b", Tensor::full([1, 1, 1, 3], -1.0));
        s
    }

    #[test]
    fn zero_gradient_keeps_weights() {
        let mut w = store();
        let mut st = AdamState::new(&w);
        st.m[0] = vec![1.0, 1.0];
        let before = w.clone();
        // moments decay but a zero-moment parameter stays put
        adam_step(&mut w, &[vec![0.0; 2], vec![0.0; 3]], &mut st, 1e-3, AdamParams::default()).unwrap();
        assert_eq!(w.get("b").unwrap(), before.get("b").unwrap());
        assert!((st.m[0][0] - 0.9).abs() < 1e-7);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut w = store();
        let mut st = AdamState::new(&w);
        adam_step(&mut w, &[vec![1.0; 2], vec![1.0; 3]], &mut st, 1e-3, AdamParams::default()).unwrap();
        let expected = 1e-3 / (1.0 + 1e-8);
        for (a, b) in w.get("a").unwrap().data().iter().zip(store().get("a").unwrap().data()) {
            assert!(((b - a) as f64 - expected).abs() < 1e-7);
        }
        assert_eq!(st.step, 1);
    }

    #[test]
    fn mismatched_grads_rejected() {
        let mut w = store();
        let mut st = AdamState::new(&w);
        assert!(adam_step(&mut w, &[vec![1.0; 2]], &mut st, 1e-3, AdamParams::default()).is_err());
        assert!(adam_step(&mut w, &[vec![1.0; 2], vec![1.0; 2]], &mut st, 1e-3, AdamParams::default()).is_err());
        assert_eq!(st.step, 0);
    }

    #[test]
    fn deterministic() {
        let cfg = NetworkConfig::tiny(2);
        let run = || {
            let mut w = WeightStore::init(&cfg, 1).unwrap();
            let mut st = AdamState::new(&w);
            for k in 0..5 {
                let g: Vec<Vec<f32>> = w.iter().map(|(_, t)| t.data().iter().map(|v| v * k as f32 + 0.1).collect()).collect();
                adam_step(&mut w, &g, &mut st, 1e-3, AdamParams::default()).unwrap();
            }
            w
        };
        assert_eq!(run(), run());
    }
}
