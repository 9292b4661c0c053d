//! Adam/AdamW over flat parameter slices and a patience-based early stopper.

/// Adam with optional decoupled weight decay (AdamW when `weight_decay > 0`).
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(n_params: usize, learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    pub fn with_betas(mut self, beta1: f64, beta2: f64) -> Self {
        self.beta1 = beta1;
        self.beta2 = beta2;
        self
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    pub fn with_weight_decay(mut self, weight_decay: f64) -> Self {
        self.weight_decay = weight_decay;
        self
    }

    /// One update minimizing the loss whose gradient is `grad`.
    pub fn update(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), self.m.len(), "parameter count mismatch");
        assert_eq!(grad.len(), self.m.len(), "gradient length mismatch");
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.learning_rate * (m_hat / (v_hat.sqrt() + self.epsilon));
            if self.weight_decay > 0.0 {
                params[i] -= self.learning_rate * self.weight_decay * params[i];
            }
        }
    }
}

/// Stops after `patience` consecutive epochs without validation improvement.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    epochs_since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        assert!(patience >= 1, "patience must be at least 1");
        Self {
            patience,
            best: f64::INFINITY,
            epochs_since_best: 0,
        }
    }

    /// Record one validation loss; returns true when the epoch improved.
    pub fn observe(&mut self, loss: f64) -> bool {
        if loss < self.best {
            self.best = loss;
            self.epochs_since_best = 0;
            true
        } else {
            self.epochs_since_best += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.epochs_since_best >= self.patience
    }

    pub fn best(&self) -> f64 {
        self.best
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimizes_quadratic() {
        // min (x - 3)^2, gradient 2(x - 3)
        let mut x = [0.0_f64];
        let mut adam = Adam::new(1, 0.1);
        for _ in 0..500 {
            let g = [2.0 * (x[0] - 3.0)];
            adam.update(&mut x, &g);
        }
        assert!((x[0] - 3.0).abs() < 1e-3, "x = {}", x[0]);
    }

    #[test]
    fn zero_learning_rate_is_noop() {
        let mut x = [1.5_f64, -2.0];
        let before = x;
        let mut adam = Adam::new(2, 0.0).with_weight_decay(0.01);
        adam.update(&mut x, &[0.3, -0.7]);
        assert_eq!(x, before);
    }

    #[test]
    fn early_stop_after_exact_patience() {
        // Scripted loss sequence: improvement, then plateau.
        let mut stopper = EarlyStopping::new(2);
        stopper.observe(1.0);
        stopper.observe(0.5);
        assert!(!stopper.should_stop());
        stopper.observe(0.6); // one non-improving epoch
        assert!(!stopper.should_stop());
        stopper.observe(0.7); // second consecutive non-improving epoch
        assert!(stopper.should_stop());
        assert_eq!(stopper.best(), 0.5);
    }

    #[test]
    fn improvement_resets_patience_counter() {
        let mut stopper = EarlyStopping::new(2);
        stopper.observe(1.0);
        stopper.observe(1.1);
        stopper.observe(0.9);
        stopper.observe(1.0);
        assert!(!stopper.should_stop());
    }
}
