//! AdamW with decoupled weight decay.
//!
//! The decay `p -= lr * wd * p` is applied separately from the
//! bias-corrected moment update, so decay strength does not couple to the
//! adaptive step size. State (first/second moments, step counter) lives
//! in the optimizer, one moment pair per parameter group.

use crate::error::{Error, Result};
use crate::scalar::{cast, Scalar};

/// AdamW hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamWConfig {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer state over a fixed list of parameter groups.
#[derive(Debug, Clone)]
pub struct AdamW<T: Scalar> {
    cfg: AdamWConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: u32,
}

impl<T: Scalar> AdamW<T> {
    /// `group_sizes` fixes the number and size of parameter groups.
    pub fn new(cfg: AdamWConfig, group_sizes: &[usize]) -> Self {
        Self {
            cfg,
            m: group_sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: group_sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            t: 0,
        }
    }

    /// Start the next optimization step (advances the bias-correction
    /// counter). Call once per step, before updating the groups.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// Apply the AdamW update to one parameter group.
    pub fn update(&mut self, group: usize, params: &mut [T], grads: &[T]) -> Result<()> {
        if self.t == 0 {
            return Err(Error::InvalidArgument(
                "begin_step must run before update".to_string(),
            ));
        }
        if group >= self.m.len()
            || params.len() != self.m[group].len()
            || grads.len() != params.len()
        {
            return Err(Error::ShapeMismatch(format!(
                "optimizer group {group}: {} params, {} grads, state {}",
                params.len(),
                grads.len(),
                self.m.get(group).map_or(0, Vec::len)
            )));
        }
        let lr = cast::<T>(self.cfg.learning_rate);
        let wd = cast::<T>(self.cfg.weight_decay);
        let b1 = cast::<T>(self.cfg.beta1);
        let b2 = cast::<T>(self.cfg.beta2);
        let eps = cast::<T>(self.cfg.eps);
        let bias1 = T::one() - cast::<T>(self.cfg.beta1.powi(self.t as i32));
        let bias2 = T::one() - cast::<T>(self.cfg.beta2.powi(self.t as i32));

        let m = &mut self.m[group];
        let v = &mut self.v[group];
        for i in 0..params.len() {
            // Decoupled decay, independent of the gradient moments.
            params[i] = params[i] - lr * wd * params[i];
            let g = grads[i];
            m[i] = b1 * m[i] + (T::one() - b1) * g;
            v[i] = b2 * v[i] + (T::one() - b2) * g * g;
            let m_hat = m[i] / bias1;
            let v_hat = v[i] / bias2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grads_zero_decay_leave_params_unchanged() {
        let mut opt = AdamW::<f64>::new(AdamWConfig::new(0.01, 0.0), &[3]);
        let mut p = vec![1.0, -2.0, 0.5];
        opt.begin_step();
        opt.update(0, &mut p, &[0.0; 3]).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn zero_grads_with_decay_scale_once() {
        // wd = 0.1, lr = 0.01: params shrink by exactly (1 - 0.001).
        let mut opt = AdamW::<f64>::new(AdamWConfig::new(0.01, 0.1), &[2]);
        let mut p = vec![1.0, -4.0];
        opt.begin_step();
        opt.update(0, &mut p, &[0.0; 2]).unwrap();
        assert_eq!(p, vec![1.0 * 0.999, -4.0 * 0.999]);
    }

    #[test]
    fn trajectory_matches_scalar_reference() {
        // Independent single-parameter AdamW written from the update
        // equations, followed for three steps.
        let (lr, wd, b1, b2, eps) = (0.05, 0.01, 0.9, 0.999, 1e-8);
        let grads = [0.3, -0.7, 0.12];

        let mut p_ref = 1.5f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for (step, &g) in grads.iter().enumerate() {
            let t = (step + 1) as i32;
            p_ref -= lr * wd * p_ref;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let m_hat = m / (1.0 - b1.powi(t));
            let v_hat = v / (1.0 - b2.powi(t));
            p_ref -= lr * m_hat / (v_hat.sqrt() + eps);
        }

        let mut opt = AdamW::<f64>::new(AdamWConfig::new(lr, wd), &[1]);
        let mut p = vec![1.5];
        for &g in &grads {
            opt.begin_step();
            opt.update(0, &mut p, &[g]).unwrap();
        }
        assert!((p[0] - p_ref).abs() < 1e-12, "{} vs {}", p[0], p_ref);
    }

    #[test]
    fn update_without_begin_step_is_an_error() {
        let mut opt = AdamW::<f64>::new(AdamWConfig::new(0.01, 0.0), &[1]);
        let mut p = vec![1.0];
        assert!(opt.update(0, &mut p, &[0.1]).is_err());
    }

    #[test]
    fn mismatched_sizes_are_rejected() {
        let mut opt = AdamW::<f64>::new(AdamWConfig::new(0.01, 0.0), &[2]);
        let mut p = vec![1.0];
        opt.begin_step();
        assert!(opt.update(0, &mut p, &[0.1]).is_err());
        assert!(opt.update(1, &mut p, &[0.1]).is_err());
    }
}
