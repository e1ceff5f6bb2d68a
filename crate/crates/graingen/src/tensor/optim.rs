//! Adam optimizer and reduce-on-plateau learning-rate scheduler.

use crate::error::{Error, Result};

use super::{Elem, ParamStore};

/// Adam hyperparameters. The moment coefficients follow the standard
/// defaults; only the learning rates come from the training schedules.
#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, ..Default::default() }
    }
}

/// Adam state: bias-corrected first/second moment accumulators per parameter.
pub struct Adam<E: Elem> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<E>>,
    v: Vec<Vec<E>>,
}

impl<E: Elem> Adam<E> {
    pub fn new(config: AdamConfig) -> Self {
        Adam { config, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one update. `grads` must be parallel to the store order.
    ///
    /// A NaN gradient aborts the whole step (no parameter is touched) and
    /// reports the offending parameter path.
    pub fn step(&mut self, params: &mut ParamStore<E>, grads: &[Vec<E>]) -> Result<()> {
        assert_eq!(grads.len(), params.len(), "gradient count does not match parameter count");
        for (i, grad) in grads.iter().enumerate() {
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of parameter {}",
                    params.at(i).0
                )));
            }
        }
        if self.m.is_empty() {
            for (_, t) in params.iter() {
                self.m.push(vec![E::zero(); t.numel()]);
                self.v.push(vec![E::zero(); t.numel()]);
            }
        }
        self.step += 1;
        let t = self.step as f64;
        let b1 = E::of_f64(self.config.beta1);
        let b2 = E::of_f64(self.config.beta2);
        let one = E::one();
        let corr1 = E::of_f64(1.0 - self.config.beta1.powf(t));
        let corr2 = E::of_f64(1.0 - self.config.beta2.powf(t));
        let lr = E::of_f64(self.config.lr);
        let eps = E::of_f64(self.config.eps);
        for i in 0..grads.len() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let data = params.tensor_mut(i).data_mut();
            for k in 0..data.len() {
                let gk = grads[i][k];
                m[k] = b1 * m[k] + (one - b1) * gk;
                v[k] = b2 * v[k] + (one - b2) * gk * gk;
                let m_hat = m[k] / corr1;
                let v_hat = v[k] / corr2;
                data[k] = data[k] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Reduce-on-plateau schedule: multiply the learning rate by `factor` after
/// `patience` consecutive epochs without improvement of the monitored metric.
#[derive(Debug, Clone, Copy)]
pub struct PlateauConfig {
    pub factor: f64,
    pub patience: usize,
    pub floor: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        PlateauConfig { factor: 0.99, patience: 5, floor: 1e-6 }
    }
}

#[derive(Debug, Clone)]
pub struct PlateauScheduler {
    config: PlateauConfig,
    best: Option<f64>,
    bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(config: PlateauConfig) -> Self {
        PlateauScheduler { config, best: None, bad_epochs: 0 }
    }

    /// Feed one epoch's metric; returns the learning rate to use next.
    pub fn step(&mut self, metric: f64, current_lr: f64) -> f64 {
        assert!(metric.is_finite(), "plateau scheduler requires a finite metric");
        match self.best {
            Some(best) if metric < best => {
                self.best = Some(metric);
                self.bad_epochs = 0;
            }
            Some(_) => self.bad_epochs += 1,
            None => self.best = Some(metric),
        }
        if self.bad_epochs >= self.config.patience {
            self.bad_epochs = 0;
            (current_lr * self.config.factor).max(self.config.floor)
        } else {
            current_lr
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn adam_first_step_magnitude() {
        // Scalar param 1.0, grad 1.0, lr 0.1: bias-corrected first step is
        // lr * m_hat / (sqrt(v_hat) + eps) = 0.1 / (1 + 1e-8) ≈ 0.1.
        let mut params = ParamStore::<f64>::new();
        params.insert("w", Tensor::scalar(1.0)).unwrap();
        let mut adam = Adam::new(AdamConfig::with_lr(0.1));
        adam.step(&mut params, &[vec![1.0]]).unwrap();
        let w = params.get("w").unwrap().data()[0];
        assert!((w - 0.9).abs() < 1e-8, "w = {w}");
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut params = ParamStore::<f64>::new();
        params.insert("w", Tensor::from_f64s(vec![3], &[1.0, -2.0, 0.5])).unwrap();
        let before = params.get("w").unwrap().clone();
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut params, &[vec![0.0; 3]]).unwrap();
        assert_eq!(params.get("w").unwrap(), &before);
    }

    #[test]
    fn nan_gradient_aborts_and_names_path() {
        let mut params = ParamStore::<f64>::new();
        params.insert("enc.w", Tensor::scalar(1.0)).unwrap();
        params.insert("dec.w", Tensor::scalar(1.0)).unwrap();
        let mut adam = Adam::new(AdamConfig::default());
        let err = adam.step(&mut params, &[vec![0.0], vec![f64::NAN]]).unwrap_err();
        assert!(err.to_string().contains("dec.w"), "error should name the path: {err}");
        // No parameter was touched.
        assert_eq!(params.get("enc.w").unwrap().data()[0], 1.0);
        assert_eq!(adam.step_count(), 0);
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let mut params = ParamStore::<f32>::new();
            params.insert("w", Tensor::from_f64s(vec![2], &[0.3, -0.7])).unwrap();
            let mut adam = Adam::new(AdamConfig::with_lr(0.01));
            for step in 0..50 {
                let g = vec![0.1 + step as f32 * 0.01, -0.05];
                adam.step(&mut params, &[g]).unwrap();
            }
            params.get("w").unwrap().data().to_vec()
        };
        let a = run();
        let b = run();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn plateau_keeps_lr_while_improving() {
        let mut sched = PlateauScheduler::new(PlateauConfig::default());
        let mut lr = 0.001;
        for metric in [1.0, 0.9, 0.8] {
            lr = sched.step(metric, lr);
        }
        assert_eq!(lr, 0.001);
    }

    #[test]
    fn plateau_cuts_after_six_flat_epochs() {
        // First epoch establishes the best; five more without improvement
        // trigger the 0.99 cut.
        let mut sched = PlateauScheduler::new(PlateauConfig::default());
        let mut lr = 0.001;
        for _ in 0..6 {
            lr = sched.step(1.0, lr);
        }
        assert!((lr - 0.00099).abs() < 1e-12, "lr = {lr}");
    }

    #[test]
    fn plateau_respects_floor() {
        let mut sched = PlateauScheduler::new(PlateauConfig::default());
        let mut lr = 1e-6;
        for _ in 0..40 {
            lr = sched.step(1.0, lr);
        }
        assert_eq!(lr, 1e-6);
    }
}
