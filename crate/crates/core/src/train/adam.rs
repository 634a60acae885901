use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::diff::{GradientMap, ParamSet};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled: `θ ← θ − lr·wd·θ` before the Adam update.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 5e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-8 }
    }
}

/// Moment estimates, one buffer per parameter in `ParamSet` order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub first: Vec<Vec<T>>,
    pub second: Vec<Vec<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(config: AdamConfig, params: &ParamSet<T>) -> Self {
        let zeros: Vec<Vec<T>> = params.iter().map(|(_, p)| vec![T::zero(); p.data.len()]).collect();
        Self { config, step: 0, first: zeros.clone(), second: zeros }
    }

    pub fn matches(&self, params: &ParamSet<T>) -> bool {
        self.first.len() == params.len()
            && params.iter().zip(&self.first).zip(&self.second).all(|(((_, p), m), v)| m.len() == p.data.len() && v.len() == p.data.len())
    }
}

/// One Adam step over every parameter; parameters without a gradient see a zero gradient.
pub fn adam_step<T: Scalar>(
    params: &mut ParamSet<T>,
    grads: &GradientMap<T>,
    state: &mut OptimizerState<T>,
) -> Result<(), TrainError> {
    if !state.matches(params) {
        return Err(TrainError::Shape("optimizer state does not match the parameters".into()));
    }
    for (id, g) in grads.iter() {
        if !g.is_finite() {
            return Err(TrainError::NonFinite(format!("gradient of `{}`", params.get(id).name)));
        }
    }
    let c = state.config;
    state.step += 1;
    let t = state.step as i32;
    let lr = T::lit(c.lr);
    let (b1, b2, eps) = (T::lit(c.beta1), T::lit(c.beta2), T::lit(c.eps));
    let decay = T::one() - T::lit(c.lr * c.weight_decay);
    let correct1 = T::one() - b1.powi(t);
    let correct2 = T::one() - b2.powi(t);

    let ids: Vec<_> = params.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        let g = grads.dense(params, id);
        let (m, v) = (&mut state.first[k], &mut state.second[k]);
        for (((theta, &gi), mi), vi) in params.get_mut(id).data.iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *theta = *theta * decay;
            *mi = b1 * *mi + (T::one() - b1) * gi;
            *vi = b2 * *vi + (T::one() - b2) * gi * gi;
            let m_hat = *mi / correct1;
            let v_hat = *vi / correct2;
            *theta = *theta - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::Tape;

    fn one_param(value: f64) -> ParamSet<f64> {
        let mut set = ParamSet::new();
        set.push("theta", 1, 1, vec![value]);
        set
    }

    fn grad_of(set: &ParamSet<f64>, coeff: f64) -> GradientMap<f64> {
        let mut tape = Tape::new();
        let p = tape.param(set, crate::diff::ParamId(0));
        let c = tape.constant_scalar(coeff);
        let y = tape.mul(p, c).unwrap();
        tape.backward(y).unwrap()
    }

    #[test]
    fn zero_gradient_no_decay_is_identity() {
        let mut set = one_param(1.5);
        let mut state = OptimizerState::new(AdamConfig { weight_decay: 0.0, ..Default::default() }, &set);
        let g = grad_of(&set, 0.0);
        adam_step(&mut set, &g, &mut state).unwrap();
        assert_eq!(set.get(crate::diff::ParamId(0)).data[0], 1.5);
        adam_step(&mut set, &GradientMap::new(), &mut state).unwrap();
        assert_eq!(set.get(crate::diff::ParamId(0)).data[0], 1.5);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut set = one_param(1.0);
        let mut state = OptimizerState::new(AdamConfig { lr: 0.001, weight_decay: 0.0, ..Default::default() }, &set);
        let g = grad_of(&set, 1.0);
        adam_step(&mut set, &g, &mut state).unwrap();
        // m̂ = 1, v̂ = 1: step = lr / (1 + eps)
        let want = 1.0 - 0.001 / (1.0 + 1e-8);
        assert!((set.get(crate::diff::ParamId(0)).data[0] - want).abs() < 1e-15);
    }

    #[test]
    fn decay_only_step() {
        let mut set = one_param(2.0);
        let mut state = OptimizerState::new(AdamConfig { lr: 0.01, weight_decay: 0.1, ..Default::default() }, &set);
        adam_step(&mut set, &GradientMap::new(), &mut state).unwrap();
        assert!((set.get(crate::diff::ParamId(0)).data[0] - 2.0 * 0.999).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut set = one_param(1.0);
        let mut state = OptimizerState::new(AdamConfig::default(), &set);
        let g = grad_of(&set, f64::NAN);
        let err = adam_step(&mut set, &g, &mut state).unwrap_err();
        assert!(err.to_string().contains("theta"), "{err}");
        assert_eq!(state.step, 0);
    }
}
