//! Central-difference gradient oracle.

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_EPS: f64 = 1e-4;

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

fn eval_scalar(tape: &Tape, root: Var) -> Result<f64> {
    let v = tape.value(root).item()?;
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("objective evaluated to {v}")));
    }
    Ok(v)
}

/// Compares the recorded gradient of the scalar `f(theta)` against central
/// differences with step `eps`. Returns the maximum over entries of
/// `|analytic - numeric| / max(1, |analytic|)`.
pub fn grad_check<F>(f: F, theta: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !theta.is_finite() {
        return Err(Error::NonFinite("grad_check input".into()));
    }
    let mut tape = Tape::new();
    let x = tape.leaf(theta.clone().with_requires_grad(true));
    let root = f(&mut tape, x)?;
    eval_scalar(&tape, root)?;
    let grads = tape.backward(root)?;
    let analytic = grads
        .get(x)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; theta.len()]);

    let eval_at = |t: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.leaf(t.with_requires_grad(true));
        let root = f(&mut tape, x)?;
        eval_scalar(&tape, root)
    };

    let mut worst = 0.0f64;
    for (j, &a) in analytic.iter().enumerate() {
        let mut plus = theta.clone();
        plus.data_mut()[j] += eps;
        let mut minus = theta.clone();
        minus.data_mut()[j] -= eps;
        let numeric = (eval_at(plus)? - eval_at(minus)?) / (2.0 * eps);
        worst = worst.max(rel_err(a, numeric));
    }
    Ok(worst)
}

/// Result of checking model parameters against central differences.
#[derive(Clone, Debug, Default)]
pub struct ParamCheck {
    pub max_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub entries_checked: usize,
}

/// Gradient check over the parameters `ids` of `store` (all parameters
/// when `ids` is empty) for the scalar objective built by `f`.
pub fn grad_check_params<F>(
    store: &ParamStore,
    ids: &[ParamId],
    f: F,
    eps: f64,
) -> Result<ParamCheck>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let root = f(&mut tape, store)?;
    eval_scalar(&tape, root)?;
    let grads = tape.backward(root)?;
    let mut analytic_store = store.clone();
    analytic_store.zero_grads();
    analytic_store.accumulate(&tape, &grads)?;

    let ids: Vec<ParamId> = if ids.is_empty() {
        store.ids().collect()
    } else {
        ids.to_vec()
    };

    let mut probe = store.clone();
    let mut report = ParamCheck::default();
    for id in ids {
        let n = store.get(id).len();
        let zeros = vec![0.0; n];
        let analytic = analytic_store.get(id).grad().unwrap_or(&zeros).to_vec();
        for (j, &a) in analytic.iter().enumerate() {
            let orig = probe.get(id).data()[j];
            probe.get_mut(id).data_mut()[j] = orig + eps;
            let mut t = Tape::new();
            let r = f(&mut t, &probe)?;
            let up = eval_scalar(&t, r)?;
            probe.get_mut(id).data_mut()[j] = orig - eps;
            let mut t = Tape::new();
            let r = f(&mut t, &probe)?;
            let down = eval_scalar(&t, r)?;
            probe.get_mut(id).data_mut()[j] = orig;

            let err = rel_err(a, (up - down) / (2.0 * eps));
            report.entries_checked += 1;
            if report.worst.is_none() || err > report.max_error {
                report.max_error = err;
                report.worst = Some((store.name(id).to_string(), j));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_is_exact() {
        let theta = Tensor::vector(vec![0.3, -0.2, 0.9]);
        let err = grad_check(|t, x| Ok(t.sum(x)), &theta, DEFAULT_EPS).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn sigmoid_at_zero() {
        let theta = Tensor::zeros(&[4]);
        let mut tape = Tape::new();
        let x = tape.leaf(theta.clone().with_requires_grad(true));
        let s = tape.sigmoid(x);
        let root = tape.sum(s);
        let g = tape.backward(root).unwrap();
        assert!(g.get(x).unwrap().iter().all(|&v| (v - 0.25).abs() < 1e-15));

        let err = grad_check(
            |t, x| {
                let s = t.sigmoid(x);
                Ok(t.sum(s))
            },
            &theta,
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let theta = Tensor::vector(vec![f64::NAN]);
        assert!(grad_check(|t, x| Ok(t.sum(x)), &theta, DEFAULT_EPS).is_err());
        let theta = Tensor::vector(vec![1.0]);
        let r = grad_check(|t, x| Ok(t.scale(x, f64::INFINITY)), &theta, DEFAULT_EPS);
        assert!(r.is_err());
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // The constant copies x, so finite differences see slope 2 but the tape sees 1.
        let theta = Tensor::vector(vec![0.5]);
        let err = grad_check(
            |t, x| {
                let c = t.constant(t.value(x).clone());
                let y = t.add(x, c)?;
                Ok(t.sum(y))
            },
            &theta,
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(err > 0.5);
    }
}
