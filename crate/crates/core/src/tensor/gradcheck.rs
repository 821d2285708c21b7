use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const DEFAULT_GRAD_CHECK_EPS: f64 = 1e-3;

/// Smallest step tried when a perturbation crosses a ReLU or L1 kink.
const MIN_STEP: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, element index)` of the worst coordinate.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    /// Finite-difference step used at the worst coordinate.
    pub worst_step: f64,
    /// Number of coordinates compared.
    pub checked: usize,
    /// Coordinates whose step had to shrink to stay on one linear piece.
    pub reduced_steps: usize,
}

/// Compares reverse-mode gradients against central differences in `f64`.
///
/// `build` records a scalar-valued computation on a fresh tape from the
/// given input vars. Inputs created with `requires_grad(true)` are checked;
/// the others are held constant. The error per coordinate is
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
///
/// When `x ± eps` lands on a different piece of a piecewise-linear function
/// than `x` itself, the step is divided by ten (down to `1e-7`) so the
/// difference quotient measures the derivative of the piece the analytic
/// gradient was taken on.
pub fn grad_check<F>(build: F, inputs: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::invalid("grad_check", "eps must be positive"));
    }
    let run = |inputs: &[Tensor<f64>], with_grad: bool| -> Result<(Tape<f64>, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs
            .iter()
            .map(|t| tape.leaf(t.clone().requires_grad(with_grad && t.is_requires_grad())))
            .collect();
        let out = build(&mut tape, &vars)?;
        if let Some(op) = tape.first_non_finite() {
            return Err(Error::NonFinite { op: op.to_string() });
        }
        Ok((tape, vars, out))
    };

    let (mut tape, vars, loss) = run(inputs, true)?;
    let base_sig = tape.kink_signature();
    tape.backward(loss)?;
    let analytic: Vec<Option<Vec<f64>>> = (0..inputs.len())
        .map(|i| {
            inputs[i]
                .is_requires_grad()
                .then(|| tape.grad(vars[i]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[i].numel()]))
        })
        .collect();
    drop(tape);

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        worst_step: eps,
        checked: 0,
        reduced_steps: 0,
    };
    let eval = |work: &[Tensor<f64>]| -> Result<(f64, u64)> {
        let (tape, _, out) = run(work, false)?;
        Ok((tape.value(out).item()?, tape.kink_signature()))
    };

    for (i, grads) in analytic.iter().enumerate() {
        let Some(grads) = grads else { continue };
        for (j, &a) in grads.iter().enumerate() {
            let orig = work[i].data()[j];
            let mut h = eps;
            let numeric = loop {
                work[i].data_mut()[j] = orig + h;
                let (fp, sp) = eval(&work)?;
                work[i].data_mut()[j] = orig - h;
                let (fm, sm) = eval(&work)?;
                let same_piece = sp == base_sig && sm == base_sig;
                if same_piece || h / 10.0 < MIN_STEP {
                    if h < eps {
                        report.reduced_steps += 1;
                    }
                    break (fp - fm) / (2.0 * h);
                }
                h /= 10.0;
            };
            work[i].data_mut()[j] = orig;
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (i, j);
                report.analytic = a;
                report.numeric = numeric;
                report.worst_step = h;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_passes() {
        let x = Tensor::new([1, 1, 1, 3], vec![0.3, -0.7, 1.1]).unwrap().requires_grad(true);
        let r = grad_check(
            |t, v| {
                let sq = t.add(v[0], v[0])?;
                let y = t.relu(sq);
                t.weighted_sum(y, vec![1.0, 2.0, 3.0])
            },
            &[x],
            1e-3,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
        assert_eq!(r.checked, 3);
    }

    #[test]
    fn non_finite_names_the_op() {
        let x = Tensor::new([1, 1, 1, 1], vec![f64::INFINITY]).unwrap().requires_grad(true);
        let err = grad_check(|t, v| Ok(t.sum(v[0])), &[x], 1e-3).unwrap_err();
        assert!(matches!(err, Error::NonFinite { ref op } if op == "leaf"), "{err}");
    }

    #[test]
    fn step_shrinks_at_a_kink() {
        // relu input sits 1e-4 from zero; a 1e-3 step would straddle it.
        let x = Tensor::new([1, 1, 1, 1], vec![1e-4]).unwrap().requires_grad(true);
        let r = grad_check(
            |t, v| {
                let y = t.relu(v[0]);
                Ok(t.sum(y))
            },
            &[x],
            1e-3,
        )
        .unwrap();
        assert_eq!(r.reduced_steps, 1);
        assert!(r.max_rel_error < 1e-9, "{r:?}");
    }
}
