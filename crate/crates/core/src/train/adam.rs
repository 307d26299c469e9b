use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcore::{ParameterSet, Tensor};

/// Adam moments and hyper-parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

impl OptimizerState {
    pub fn new(lr: f64, weight_decay: f64) -> Result<Self> {
        let s = Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Config(format!("{name} {b} outside (0, 1)")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("eps {} must be positive", self.eps)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight decay {} must be non-negative", self.weight_decay)));
        }
        Ok(())
    }
}

/// One bias-corrected Adam step over every parameter named in `grads`.
///
/// Weight decay is decoupled: `θ ← θ·(1 − lr·wd)` first, then the Adam delta.
/// All gradients are validated before any parameter changes.
pub fn adam_step(
    params: &mut ParameterSet,
    grads: &BTreeMap<String, Tensor>,
    state: &mut OptimizerState,
) -> Result<()> {
    for (name, g) in grads {
        let entry = params
            .entry(name)
            .ok_or_else(|| Error::InvalidArgument(format!("gradient for unknown parameter {name:?}")))?;
        if !entry.trainable {
            return Err(Error::InvalidArgument(format!("gradient for buffer {name:?}")));
        }
        if entry.value.shape() != g.shape() {
            return Err(Error::Shape(format!(
                "{name}: gradient {:?} for parameter {:?}",
                g.shape(),
                entry.value.shape()
            )));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite { op: "adam_step" });
        }
        for moments in [&state.m, &state.v] {
            if let Some(m) = moments.get(name) {
                if m.len() != g.len() {
                    return Err(Error::Shape(format!("{name}: moment length {} for {}", m.len(), g.len())));
                }
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let decay = 1.0 - state.lr * state.weight_decay;
    for (name, g) in grads {
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        let theta = params.entry_mut(name).expect("checked above").value.data_mut();
        for (k, &gk) in g.data().iter().enumerate() {
            m[k] = state.beta1 * m[k] + (1.0 - state.beta1) * gk;
            v[k] = state.beta2 * v[k] + (1.0 - state.beta2) * gk * gk;
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            theta[k] = theta[k] * decay - state.lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(values: Vec<f64>) -> ParameterSet {
        let mut ps = ParameterSet::new();
        let n = values.len();
        ps.insert("w", Tensor::new(vec![n], values).unwrap()).unwrap();
        ps
    }

    fn grads(values: Vec<f64>) -> BTreeMap<String, Tensor> {
        let n = values.len();
        BTreeMap::from([("w".to_string(), Tensor::new(vec![n], values).unwrap())])
    }

    #[test]
    fn zero_gradient_no_decay_is_identity() {
        let mut ps = single(vec![1.5, -2.0]);
        let mut st = OptimizerState::new(1e-3, 0.0).unwrap();
        for _ in 0..5 {
            adam_step(&mut ps, &grads(vec![0.0, 0.0]), &mut st).unwrap();
        }
        assert_eq!(ps.get("w").unwrap().data(), &[1.5, -2.0]);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let g = vec![3.0, -0.25, 1e-3];
        let mut ps = single(vec![0.0; 3]);
        let mut st = OptimizerState::new(1e-2, 0.0).unwrap();
        adam_step(&mut ps, &grads(g.clone()), &mut st).unwrap();
        for (k, &gk) in g.iter().enumerate() {
            // m̂ = g and v̂ = g² after one step, so the delta is lr·g/(|g|+ε).
            let expect = -1e-2 * gk / (gk.abs() + 1e-8);
            assert!((ps.get("w").unwrap().data()[k] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn decay_alone_shrinks_geometrically() {
        let mut ps = single(vec![2.0]);
        let mut st = OptimizerState::new(0.1, 0.5).unwrap();
        for _ in 0..3 {
            adam_step(&mut ps, &grads(vec![0.0]), &mut st).unwrap();
        }
        assert!((ps.get("w").unwrap().item() - 2.0 * 0.95f64.powi(3)).abs() < 1e-15);
    }

    #[test]
    fn second_step_matches_hand_computation() {
        let mut ps = single(vec![1.0]);
        let mut st = OptimizerState::new(0.1, 0.01).unwrap();
        adam_step(&mut ps, &grads(vec![2.0]), &mut st).unwrap();
        adam_step(&mut ps, &grads(vec![-1.0]), &mut st).unwrap();
        let mut theta = 1.0f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for (t, g) in [(1, 2.0f64), (2, -1.0)] {
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            theta = theta * (1.0 - 0.1 * 0.01) - 0.1 * mh / (vh.sqrt() + 1e-8);
        }
        assert!((ps.get("w").unwrap().item() - theta).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_gradients_without_mutation() {
        let mut ps = single(vec![1.0, 2.0]);
        let mut st = OptimizerState::new(1e-3, 0.0).unwrap();
        assert!(matches!(
            adam_step(&mut ps, &grads(vec![1.0]), &mut st),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            adam_step(&mut ps, &grads(vec![1.0, f64::NAN]), &mut st),
            Err(Error::NonFinite { .. })
        ));
        let unknown = BTreeMap::from([("x".to_string(), Tensor::zeros(&[2]))]);
        assert!(adam_step(&mut ps, &unknown, &mut st).is_err());
        assert_eq!(st.step, 0);
        assert_eq!(ps.get("w").unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn invalid_hyper_parameters() {
        assert!(OptimizerState::new(0.0, 0.0).is_err());
        assert!(OptimizerState::new(1e-3, -1.0).is_err());
        let mut st = OptimizerState::new(1e-3, 0.0).unwrap();
        st.beta2 = 1.0;
        assert!(st.validate().is_err());
    }
}
