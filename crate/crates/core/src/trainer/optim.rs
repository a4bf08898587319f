use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// AdamW hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-4, weight_decay: 1e-2, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidParameter(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::InvalidParameter(format!("weight decay {} must be >= 0", self.weight_decay)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::InvalidParameter(format!("{name} {b} outside [0, 1)")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::InvalidParameter(format!("adam eps {} must be positive", self.eps)));
        }
        Ok(())
    }
}

/// First/second moment buffers and step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamWState {
    pub fn new(params: usize) -> Self {
        Self { m: vec![0.0; params], v: vec![0.0; params], t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }
}

/// One AdamW update. The decay shrinks the weights directly and never enters the moments.
pub fn adamw_step(params: &mut [f64], grads: &[f64], config: &AdamWConfig, state: &mut AdamWState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (config.beta1, config.beta2);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    let decay = 1.0 - config.learning_rate * config.weight_decay;
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        *p *= decay;
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= config.learning_rate * m_hat / (v_hat.sqrt() + config.eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_no_decay_is_fixed_point() {
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        let mut p = vec![0.5, -2.0, 3.0];
        let mut st = AdamWState::new(3);
        for _ in 0..5 {
            adamw_step(&mut p, &[0.0; 3], &cfg, &mut st).unwrap();
        }
        assert_eq!(p, vec![0.5, -2.0, 3.0]);
    }

    #[test]
    fn decay_shrinks_geometrically() {
        let cfg = AdamWConfig { learning_rate: 0.1, weight_decay: 0.5, ..Default::default() };
        let mut p = vec![2.0, -1.0];
        let mut st = AdamWState::new(2);
        for step in 1..=4 {
            adamw_step(&mut p, &[0.0; 2], &cfg, &mut st).unwrap();
            let f = 0.95f64.powi(step);
            assert!((p[0] - 2.0 * f).abs() < 1e-15 && (p[1] + f).abs() < 1e-15);
        }
    }

    #[test]
    fn three_step_hand_table() {
        // lr 0.1, wd 0.1, betas (0.5, 0.75), eps 0; grads 1, -2, 4 from theta = 1.
        // step 1: m=0.5    v=0.25     m^=1     v^=1        theta=0.89
        // step 2: m=-0.75  v=1.1875   m^=-1    v^=19/7     theta=0.941797697..
        // step 3: m=1.625  v=4.890625 m^=13/7  v^=8.459459 theta=0.868527794..
        let cfg = AdamWConfig { learning_rate: 0.1, weight_decay: 0.1, beta1: 0.5, beta2: 0.75, eps: 0.0 };
        let mut p = vec![1.0];
        let mut st = AdamWState::new(1);
        let mut expected = 1.0f64;
        let table = [(1.0, 1.0), (-1.0, 19.0 / 7.0), (13.0 / 7.0, 4.890625 / (1.0 - 0.75f64.powi(3)))];
        for (g, (m_hat, v_hat)) in [1.0, -2.0, 4.0].into_iter().zip(table) {
            adamw_step(&mut p, &[g], &cfg, &mut st).unwrap();
            expected = expected * 0.99 - 0.1 * m_hat / f64::sqrt(v_hat);
            assert!((p[0] - expected).abs() < 1e-15, "{} vs {expected}", p[0]);
        }
        assert!((p[0] - 0.868527794).abs() < 1e-9);
    }

    #[test]
    fn validation() {
        assert!(AdamWConfig { learning_rate: 0.0, ..Default::default() }.validate().is_err());
        assert!(AdamWConfig { beta2: 1.0, ..Default::default() }.validate().is_err());
        assert!(AdamWConfig::default().validate().is_ok());
        let mut st = AdamWState::new(2);
        assert!(adamw_step(&mut [0.0], &[0.0], &AdamWConfig::default(), &mut st).is_err());
    }
}
