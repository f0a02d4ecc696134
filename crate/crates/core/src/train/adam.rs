use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParameterSet;
use crate::nn::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates per parameter plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub m: ParameterSet,
    pub v: ParameterSet,
    pub t: u64,
}

impl OptimizerState {
    pub fn new(params: &ParameterSet, config: AdamConfig) -> Self {
        let zeros = |p: &ParameterSet| {
            let mut z = ParameterSet::new();
            for (name, t) in p.iter() {
                z.insert(name.clone(), Tensor::zeros(&t.shape));
            }
            z
        };
        OptimizerState {
            config,
            m: zeros(params),
            v: zeros(params),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of every parameter.
///
/// Gradients are checked before anything is touched, so a failed step
/// leaves both `params` and `state` unchanged.
pub fn adam_step(params: &mut ParameterSet, grads: &ParameterSet, state: &mut OptimizerState, lr: f64) -> Result<()> {
    for (name, p) in params.iter() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::shape(format!("gradient for {name}"), &p.shape, &[]))?;
        if g.shape != p.shape {
            return Err(Error::shape(format!("gradient for {name}"), &p.shape, &g.shape));
        }
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient(name.clone()));
        }
    }
    let AdamConfig { beta1, beta2, eps } = state.config;
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (name, p) in params.iter_mut() {
        let g = grads.get(name).expect("checked above");
        let m = state.m.get_mut(name).expect("state tracks every parameter");
        for (mi, gi) in m.data.iter_mut().zip(&g.data) {
            *mi = beta1 * *mi + (1.0 - beta1) * gi;
        }
        let v = state.v.get_mut(name).expect("state tracks every parameter");
        for (vi, gi) in v.data.iter_mut().zip(&g.data) {
            *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
        }
        let (m, v) = (state.m.get(name).expect("present"), state.v.get(name).expect("present"));
        for ((pi, mi), vi) in p.data.iter_mut().zip(&m.data).zip(&v.data) {
            let m_hat = mi / c1;
            let v_hat = vi / c2;
            *pi -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> ParameterSet {
        let mut p = ParameterSet::new();
        p.insert("w".into(), Tensor::new(vec![1], vec![v]));
        p
    }

    #[test]
    fn first_step_moves_by_about_lr() {
        let mut p = scalar(1.0);
        let mut st = OptimizerState::new(&p, AdamConfig::default());
        adam_step(&mut p, &scalar(0.5), &mut st, 0.1).unwrap();
        // m_hat = 0.5, v_hat = 0.25: update = 0.1 * 0.5 / (0.5 + 1e-8)
        let expected = 1.0 - 0.1 * 0.5 / (0.5 + 1e-8);
        assert_eq!(p.get("w").unwrap().data[0], expected);
        assert!((1.0 - expected - 0.099_999_998).abs() < 1e-12);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn zero_gradient_keeps_params() {
        let mut p = scalar(3.0);
        let mut st = OptimizerState::new(&p, AdamConfig::default());
        adam_step(&mut p, &scalar(0.0), &mut st, 0.1).unwrap();
        assert_eq!(p.get("w").unwrap().data[0], 3.0);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn identical_calls_agree() {
        let p0 = scalar(0.7);
        let st0 = OptimizerState::new(&p0, AdamConfig::default());
        let (mut pa, mut sa) = (p0.clone(), st0.clone());
        let (mut pb, mut sb) = (p0, st0);
        adam_step(&mut pa, &scalar(-0.2), &mut sa, 0.01).unwrap();
        adam_step(&mut pb, &scalar(-0.2), &mut sb, 0.01).unwrap();
        assert_eq!((pa, sa), (pb, sb));
    }

    #[test]
    fn non_finite_gradient_names_parameter_and_changes_nothing() {
        let mut p = scalar(1.0);
        let mut st = OptimizerState::new(&p, AdamConfig::default());
        let before = (p.clone(), st.clone());
        match adam_step(&mut p, &scalar(f64::NAN), &mut st, 0.1) {
            Err(Error::NonFiniteGradient(name)) => assert_eq!(name, "w"),
            other => panic!("expected non-finite gradient error, got {other:?}"),
        }
        assert_eq!((p, st), before);
    }
}
