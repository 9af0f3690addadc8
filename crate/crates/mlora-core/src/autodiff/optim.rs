use crate::error::{Error, Result};
use crate::numlin::DenseMatrix;

use super::params::Params;

/// AdamW hyperparameters. Betas and epsilon follow the common trainer
/// defaults; the decay is decoupled from the gradient-based update.
#[derive(Debug, Clone, Copy)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Per-parameter first/second moment buffers, aligned with `Params` ids.
#[derive(Debug, Clone)]
pub struct OptimState {
    m: Vec<DenseMatrix>,
    v: Vec<DenseMatrix>,
    pub step_count: u64,
}

impl OptimState {
    pub fn new(params: &Params) -> Self {
        let m = params
            .iter()
            .map(|(_, p)| DenseMatrix::zeros(p.value.rows(), p.value.cols()))
            .collect::<Vec<_>>();
        OptimState {
            v: m.clone(),
            m,
            step_count: 0,
        }
    }
}

/// One decoupled-weight-decay Adam step over all trainable params.
pub fn adamw_step(
    params: &mut Params,
    state: &mut OptimState,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    if lr < 0.0 {
        return Err(Error::Argument(format!("adamw_step: negative lr {lr}")));
    }
    if state.m.len() != params.len() {
        return Err(Error::State("optimizer state does not match params".into()));
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for id in 0..params.len() {
        let p = params.get_mut(id);
        if !p.trainable {
            continue;
        }
        let m = state.m[id].data_mut();
        let v = state.v[id].data_mut();
        let grad = p.grad.data();
        let w = p.value.data_mut();
        for k in 0..w.len() {
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * grad[k];
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * grad[k] * grad[k];
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            w[k] -= lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * w[k]);
        }
    }
    Ok(())
}

/// Linear warmup to `base_lr` over the first `warmup_ratio` of training,
/// then linear decay to zero at `total_steps`.
#[derive(Debug, Clone, Copy)]
pub struct Schedule {
    pub base_lr: f64,
    pub total_steps: usize,
    pub warmup_ratio: f64,
}

impl Schedule {
    pub fn warmup_steps(&self) -> usize {
        (self.warmup_ratio * self.total_steps as f64).round() as usize
    }

    pub fn lr_at(&self, step: usize) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::Argument(format!(
                "lr_at: step {step} > total_steps {}",
                self.total_steps
            )));
        }
        let warmup = self.warmup_steps();
        if step <= warmup {
            if warmup == 0 {
                return Ok(self.base_lr);
            }
            return Ok(self.base_lr * step as f64 / warmup as f64);
        }
        let decay_span = self.total_steps - warmup;
        if decay_span == 0 {
            return Ok(0.0);
        }
        Ok(self.base_lr * (self.total_steps - step) as f64 / decay_span as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_params(w: f64, g: f64, trainable: bool) -> Params {
        let mut params = Params::new();
        let id = params
            .register("w", DenseMatrix::from_vec(1, 1, vec![w]).unwrap(), trainable)
            .unwrap();
        params.get_mut(id).grad = DenseMatrix::from_vec(1, 1, vec![g]).unwrap();
        params
    }

    #[test]
    fn zero_grad_zero_decay_no_change() {
        let mut params = scalar_params(1.5, 0.0, true);
        let mut state = OptimState::new(&params);
        adamw_step(&mut params, &mut state, 0.1, &AdamWConfig::default()).unwrap();
        assert_eq!(params.get(0).value.get(0, 0), 1.5);
        assert_eq!(state.step_count, 1);
    }

    #[test]
    fn first_step_hand_computed() {
        // w=1, g=1, lr=0.1, wd=0: w' = 1 - 0.1 * 1 / (1 + 1e-8)
        let mut params = scalar_params(1.0, 1.0, true);
        let mut state = OptimState::new(&params);
        adamw_step(&mut params, &mut state, 0.1, &AdamWConfig::default()).unwrap();
        let expected = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((params.get(0).value.get(0, 0) - expected).abs() < 1e-15);
    }

    #[test]
    fn decoupled_decay_only() {
        let mut params = scalar_params(2.0, 0.0, true);
        let mut state = OptimState::new(&params);
        let cfg = AdamWConfig {
            weight_decay: 0.1,
            ..AdamWConfig::default()
        };
        adamw_step(&mut params, &mut state, 0.1, &cfg).unwrap();
        assert!((params.get(0).value.get(0, 0) - 2.0 * (1.0 - 0.01)).abs() < 1e-15);
    }

    #[test]
    fn lr_zero_changes_nothing() {
        let mut params = scalar_params(3.0, 5.0, true);
        let mut state = OptimState::new(&params);
        adamw_step(&mut params, &mut state, 0.0, &AdamWConfig::default()).unwrap();
        assert_eq!(params.get(0).value.get(0, 0), 3.0);
    }

    #[test]
    fn negative_lr_rejected() {
        let mut params = scalar_params(1.0, 1.0, true);
        let mut state = OptimState::new(&params);
        assert!(adamw_step(&mut params, &mut state, -0.1, &AdamWConfig::default()).is_err());
    }

    #[test]
    fn schedule_shape() {
        let s = Schedule {
            base_lr: 1.0,
            total_steps: 100,
            warmup_ratio: 0.05,
        };
        assert_eq!(s.warmup_steps(), 5);
        assert_eq!(s.lr_at(0).unwrap(), 0.0);
        assert_eq!(s.lr_at(5).unwrap(), 1.0); // peak exactly at warmup end
        assert_eq!(s.lr_at(100).unwrap(), 0.0);
        let expected = (100.0 - 53.0) / 95.0;
        assert!((s.lr_at(53).unwrap() - expected).abs() < 1e-15);
        assert!(s.lr_at(101).is_err());
    }

    #[test]
    fn schedule_piecewise_linear_and_peak() {
        let s = Schedule {
            base_lr: 0.3,
            total_steps: 40,
            warmup_ratio: 0.1,
        };
        let mut max = 0.0f64;
        let mut prev = s.lr_at(0).unwrap();
        for step in 1..=40 {
            let lr = s.lr_at(step).unwrap();
            // slope changes only at warmup end
            if step <= s.warmup_steps() {
                assert!(lr >= prev);
            } else {
                assert!(lr <= prev);
            }
            prev = lr;
            max = max.max(lr);
        }
        assert_eq!(max, 0.3);
    }
}
