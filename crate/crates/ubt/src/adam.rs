//! Adam optimizer with linear warm-up followed by inverse-square-root decay.

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub peak_lr: f64,
    pub warmup_steps: u64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.98, epsilon: 1e-8, peak_lr: 5e-4, warmup_steps: 4000 }
    }
}

/// Optimizer state: step count plus first/second moments aligned with the
/// parameter set they were created from.
pub struct AdamState {
    pub step: u64,
    first_moment: Vec<Tensor>,
    second_moment: Vec<Tensor>,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(params: &ParamSet, config: AdamConfig) -> Self {
        let first_moment = params.iter().map(|(_, t)| Tensor::zeros(t.shape().to_vec())).collect();
        let second_moment = params.iter().map(|(_, t)| Tensor::zeros(t.shape().to_vec())).collect();
        AdamState { step: 0, first_moment, second_moment, config }
    }

    /// Learning rate at a 1-based step: linear ramp to `peak_lr` over the
    /// warm-up, then decay proportional to 1/sqrt(step).
    pub fn effective_lr(&self, step: u64) -> f64 {
        let w = self.config.warmup_steps.max(1) as f64;
        let t = step.max(1) as f64;
        self.config.peak_lr * (t / w).min((w / t).sqrt())
    }

    /// One Adam update. `grads` must align with the parameter set.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor]) -> Result<()> {
        if grads.len() != self.first_moment.len() {
            return Err(Error::Dimension(format!(
                "adam: {} gradients for {} parameters",
                grads.len(),
                self.first_moment.len()
            )));
        }
        for g in grads {
            g.check_finite("adam gradient")?;
        }
        self.step += 1;
        let lr = self.effective_lr(self.step);
        let AdamConfig { beta1, beta2, epsilon, .. } = self.config;
        let bias1 = 1.0 - beta1.powi(self.step as i32);
        let bias2 = 1.0 - beta2.powi(self.step as i32);

        for ((param, grad), (m, v)) in params
            .values_mut()
            .zip(grads)
            .zip(self.first_moment.iter_mut().zip(self.second_moment.iter_mut()))
        {
            if param.shape() != grad.shape() {
                return Err(Error::Dimension(format!(
                    "adam: gradient shape {:?} vs parameter shape {:?}",
                    grad.shape(),
                    param.shape()
                )));
            }
            let pd = param.data_mut();
            let md = m.data_mut();
            let vd = v.data_mut();
            let gd = grad.data();
            for i in 0..pd.len() {
                md[i] = beta1 * md[i] + (1.0 - beta1) * gd[i];
                vd[i] = beta2 * vd[i] + (1.0 - beta2) * gd[i] * gd[i];
                let m_hat = md[i] / bias1;
                let v_hat = vd[i] / bias2;
                pd[i] -= lr * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(name: &str, data: Vec<f64>) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert(name, Tensor::vector(data)).unwrap();
        p
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut params = single("w", vec![1.0, -2.0]);
        let mut state = AdamState::new(&params, AdamConfig::default());
        state.step(&mut params, &[Tensor::vector(vec![0.0, 0.0])]).unwrap();
        assert_eq!(state.step, 1);
        assert_eq!(params.get("w").unwrap().data(), &[1.0, -2.0]);
    }

    #[test]
    fn lr_peaks_exactly_at_warmup() {
        let params = single("w", vec![0.0]);
        let state = AdamState::new(
            &params,
            AdamConfig { peak_lr: 5e-4, warmup_steps: 4000, ..AdamConfig::default() },
        );
        assert_eq!(state.effective_lr(4000), 5e-4);
        assert!(state.effective_lr(2000) < 5e-4);
        assert!(state.effective_lr(8000) < 5e-4);
        // inverse-sqrt decay after the peak
        let r = state.effective_lr(16000) / state.effective_lr(4000);
        assert!((r - 0.5).abs() < 1e-12);
    }

    #[test]
    fn quadratic_converges_near_zero() {
        // f(w) = w^2, gradient 2w, 200 steps from w = 1.
        let mut params = single("w", vec![1.0]);
        let mut state = AdamState::new(
            &params,
            AdamConfig { peak_lr: 0.05, warmup_steps: 10, ..AdamConfig::default() },
        );
        for _ in 0..200 {
            let g = 2.0 * params.get("w").unwrap().data()[0];
            state.step(&mut params, &[Tensor::vector(vec![g])]).unwrap();
        }
        let w = params.get("w").unwrap().data()[0];
        assert!(w.abs() < 0.05, "w = {w}");
    }

    #[test]
    fn identical_inputs_give_bit_identical_updates() {
        let run = || {
            let mut params = single("w", vec![0.3, -0.7, 1.1]);
            let mut state = AdamState::new(&params, AdamConfig::default());
            for k in 0..50 {
                let g: Vec<f64> =
                    params.get("w").unwrap().data().iter().map(|w| w.sin() + k as f64 * 0.01).collect();
                state.step(&mut params, &[Tensor::vector(g)]).unwrap();
            }
            params.get("w").unwrap().data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut params = single("w", vec![1.0]);
        let mut state = AdamState::new(&params, AdamConfig::default());
        let bad = Tensor::vector(vec![f64::NAN]);
        assert!(state.step(&mut params, &[bad]).is_err());
    }
}
