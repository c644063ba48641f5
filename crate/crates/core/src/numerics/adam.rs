use std::collections::BTreeMap;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Adam state: per-parameter first/second moments plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub t: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl AdamState {
    pub fn new(learning_rate: f64) -> AdamState {
        AdamState {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

/// One bias-corrected Adam update over a named parameter set.
pub fn adam_step(
    params: &mut BTreeMap<String, Tensor>,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
) -> Result<()> {
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);

    for (name, p) in params.iter_mut() {
        let Some(g) = grads.get(name) else { continue };
        if g.shape() != p.shape() {
            return Err(Error::Shape(format!(
                "adam_step `{name}`: grad {:?} vs param {:?}",
                g.shape(),
                p.shape()
            )));
        }
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.shape()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.shape()));
        for ((pi, gi), (mi, vi)) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut()))
        {
            *mi = state.beta1 * *mi + (1.0 - state.beta1) * gi;
            *vi = state.beta2 * *vi + (1.0 - state.beta2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *pi -= state.learning_rate * m_hat / (v_hat.sqrt() + state.epsilon);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut params = BTreeMap::from([("w".to_string(), Tensor::new(vec![2], vec![1.0, -2.0]))]);
        let grads = BTreeMap::from([("w".to_string(), Tensor::zeros(&[2]))]);
        let mut state = AdamState::new(0.1);
        adam_step(&mut params, &grads, &mut state).unwrap();
        assert_eq!(params["w"].data(), &[1.0, -2.0]);
        assert_eq!(state.m["w"].data(), &[0.0, 0.0]);
        assert_eq!(state.v["w"].data(), &[0.0, 0.0]);
    }

    #[test]
    fn first_step_moves_by_roughly_lr() {
        // With g = 1 everywhere, bias-corrected m_hat = v_hat = 1, so the
        // update is -lr / (1 + eps).
        let mut params = BTreeMap::from([("w".to_string(), Tensor::new(vec![3], vec![0.0; 3]))]);
        let grads = BTreeMap::from([("w".to_string(), Tensor::new(vec![3], vec![1.0; 3]))]);
        let mut state = AdamState::new(0.001);
        adam_step(&mut params, &grads, &mut state).unwrap();
        for &x in params["w"].data() {
            assert!((x + 0.001).abs() < 1e-9, "{x}");
        }
        assert_eq!(state.t, 1);
    }

    #[test]
    fn descends_a_convex_quadratic() {
        // f(x) = x^2, grad = 2x.
        let mut params = BTreeMap::from([("x".to_string(), Tensor::scalar(3.0))]);
        let mut state = AdamState::new(0.05);
        let loss = |x: f64| x * x;
        let start = loss(params["x"].scalar_value());
        for _ in 0..50 {
            let x = params["x"].scalar_value();
            let grads = BTreeMap::from([("x".to_string(), Tensor::scalar(2.0 * x))]);
            adam_step(&mut params, &grads, &mut state).unwrap();
        }
        assert!(loss(params["x"].scalar_value()) < start);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut params = BTreeMap::from([("w".to_string(), Tensor::zeros(&[2]))]);
        let grads = BTreeMap::from([("w".to_string(), Tensor::zeros(&[3]))]);
        let mut state = AdamState::new(0.1);
        assert!(adam_step(&mut params, &grads, &mut state).is_err());
    }
}
