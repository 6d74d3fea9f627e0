use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::NumericsError;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.98, eps: 1e-6 }
    }
}

/// First/second moment estimates plus the number of updates applied.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: ParamStore<f32>,
    pub v: ParamStore<f32>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore<f32>) -> Self {
        AdamState { m: params.zeros_like(), v: params.zeros_like(), t: 0 }
    }
}

/// One bias-corrected Adam update of every parameter that has a gradient.
pub fn adam_step(
    params: &mut ParamStore<f32>,
    grads: &ParamStore<f32>,
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<(), NumericsError> {
    if !params.same_layout(&state.m) || !params.same_layout(&state.v) {
        return Err(NumericsError::Shape("adam: moment tables do not match parameters".into()));
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let step = (lr * bc2.sqrt() / bc1) as f32;
    let (b1, b2, eps) = (cfg.beta1 as f32, cfg.beta2 as f32, (cfg.eps * bc2.sqrt()) as f32);
    for (name, p) in params.iter_mut() {
        let g = match grads.get(name) {
            Ok(g) => g,
            Err(_) => continue,
        };
        if g.shape() != p.shape() {
            return Err(NumericsError::Shape(format!("adam: gradient shape mismatch for {name}")));
        }
        let m = state.m.get_mut(name)?.data_mut();
        let v = state.v.get_mut(name)?.data_mut();
        for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *mv = b1 * *mv + (1.0 - b1) * gv;
            *vv = b2 * *vv + (1.0 - b2) * gv * gv;
            *pv -= step * *mv / (vv.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn first_step_moves_by_lr_in_sign_direction() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::new(&[3], vec![1.0f32, -2.0, 0.5]).unwrap());
        let mut g = ParamStore::new();
        g.insert("w", Tensor::new(&[3], vec![0.3f32, -4.0, 0.0]).unwrap());
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &g, &mut st, 0.01, &AdamConfig::default()).unwrap();
        let w = p.get("w").unwrap().data();
        assert!((w[0] - 0.99).abs() < 1e-5);
        assert!((w[1] + 1.99).abs() < 1e-5);
        assert_eq!(w[2], 0.5);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = ParamStore::new();
        p.insert("x", Tensor::new(&[2], vec![3.0f32, -1.5]).unwrap());
        let mut st = AdamState::new(&p);
        for _ in 0..2000 {
            let mut g = ParamStore::new();
            g.insert("x", p.get("x").unwrap().map(|v| 2.0 * v));
            adam_step(&mut p, &g, &mut st, 0.01, &AdamConfig::default()).unwrap();
        }
        assert!(p.get("x").unwrap().data().iter().all(|v| v.abs() < 1e-2));
    }
}
