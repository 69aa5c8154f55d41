use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore};

/// Adam hyperparameters and the step-decay factor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Factor applied to the learning rate every `total_step` iterations.
    pub decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            decay: 0.5,
        }
    }
}

/// Step decay: `base * decay^floor(iter / total_step)`.
pub fn lr_schedule(iter: usize, total_step: usize, base: f64, decay: f64) -> f64 {
    let halvings = iter / total_step.max(1);
    base * decay.powi(halvings.min(i32::MAX as usize) as i32)
}

/// Per-parameter moment estimates. Step counts are kept per parameter
/// because a task only updates the parameters on its own path.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    steps: Vec<u64>,
    pub lr: f64,
}

impl OptimizerState {
    pub fn new(params: &ParamStore, lr: f64) -> Self {
        let zeros = |id: ParamId| vec![0.0; params.get(id).len()];
        Self {
            m: params.ids().map(zeros).collect(),
            v: params.ids().map(zeros).collect(),
            steps: vec![0; params.len()],
            lr,
        }
    }

    pub fn first_moment(&self, id: ParamId) -> &[f64] {
        &self.m[id.index()]
    }

    pub fn second_moment(&self, id: ParamId) -> &[f64] {
        &self.v[id.index()]
    }

    pub fn steps(&self, id: ParamId) -> u64 {
        self.steps[id.index()]
    }
}

/// One bias-corrected Adam update of `ids`, reading each parameter's
/// accumulated gradient. Nothing is modified if any gradient is
/// non-finite.
pub fn adam_step(params: &mut ParamStore, ids: &[ParamId], state: &mut OptimizerState, hyper: &AdamConfig) -> Result<()> {
    for &id in ids {
        if let Some(g) = params.get(id).grad() {
            if let Some(k) = g.iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of {}[{k}] is {}",
                    params.name(id),
                    g[k]
                )));
            }
        }
    }
    let (b1, b2) = (hyper.beta1, hyper.beta2);
    for &id in ids {
        let i = id.index();
        let Some(g) = params.get(id).grad().map(<[f64]>::to_vec) else {
            continue;
        };
        state.steps[i] += 1;
        let t = state.steps[i] as i32;
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let w = params.get_mut(id).data_mut();
        for k in 0..w.len() {
            m[k] = b1 * m[k] + (1.0 - b1) * g[k];
            v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            w[k] -= state.lr * m_hat / (v_hat.sqrt() + hyper.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;

    fn one_param(value: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::vector(vec![value]));
        (s, id)
    }

    fn step_with(store: &mut ParamStore, id: ParamId, state: &mut OptimizerState, g: f64) {
        store.zero_grads();
        store.get_mut(id).accumulate_grad(&[g]).unwrap();
        adam_step(store, &[id], state, &AdamConfig::default()).unwrap();
    }

    #[test]
    fn zero_gradient_is_noop() {
        let (mut s, id) = one_param(0.7);
        let mut st = OptimizerState::new(&s, 1e-3);
        step_with(&mut s, id, &mut st, 0.0);
        assert_eq!(s.get(id).data(), &[0.7]);
        assert_eq!(st.first_moment(id), &[0.0]);
        assert_eq!(st.second_moment(id), &[0.0]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        for g in [3.0, -0.25] {
            let (mut s, id) = one_param(0.0);
            let mut st = OptimizerState::new(&s, 1e-3);
            step_with(&mut s, id, &mut st, g);
            let expected = -1e-3 * g / ((g * g).sqrt() + 1e-8);
            let moved = s.get(id).data()[0];
            assert!((moved - expected).abs() < 1e-15);
            assert!((moved.abs() - 1e-3).abs() < 1e-9);
            assert_eq!(moved.signum(), -g.signum());
        }
    }

    #[test]
    fn momentum_accumulates() {
        // Direct simulation of the moment recursions for two steps.
        let g = 0.5;
        let (b1, b2, lr, eps) = (0.9f64, 0.99f64, 1e-3, 1e-8);
        let mut m = 0.0;
        let mut v = 0.0;
        let mut w = 0.0;
        for t in 1..=2 {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            w -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
        }
        let (mut s, id) = one_param(0.0);
        let mut st = OptimizerState::new(&s, lr);
        step_with(&mut s, id, &mut st, g);
        let once = s.get(id).data()[0];
        step_with(&mut s, id, &mut st, g);
        let twice = s.get(id).data()[0];
        assert!(twice.abs() > once.abs());
        assert!((twice - w).abs() < 1e-15);
        assert_eq!(st.steps(id), 2);
    }

    #[test]
    fn non_finite_gradient_aborts_untouched() {
        let (mut s, id) = one_param(1.0);
        let mut st = OptimizerState::new(&s, 1e-3);
        s.get_mut(id).accumulate_grad(&[f64::NAN]).unwrap();
        let err = adam_step(&mut s, &[id], &mut st, &AdamConfig::default()).unwrap_err();
        assert!(matches!(err, Error::NonFinite(ref m) if m.contains('w')));
        assert_eq!(s.get(id).data(), &[1.0]);
        assert_eq!(st.steps(id), 0);
    }

    #[test]
    fn schedule_halves_on_breakpoints() {
        assert_eq!(lr_schedule(99, 100, 1e-3, 0.5), 1e-3);
        assert_eq!(lr_schedule(100, 100, 1e-3, 0.5), 5e-4);
        assert!((lr_schedule(200, 100, 0.001, 0.5) - 0.00025).abs() < 1e-18);
        let mut prev = f64::INFINITY;
        for it in 0..1000 {
            let lr = lr_schedule(it, 37, 1e-3, 0.5);
            assert!(lr <= prev);
            if it % 37 != 0 {
                assert_eq!(lr, prev);
            }
            prev = lr;
        }
    }
}
