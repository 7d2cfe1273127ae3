//! Adaptive-moment optimizer with bias correction.

use num_traits::Float;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam<T> {
    config: AdamConfig,
    m: Vec<T>,
    v: Vec<T>,
    t: i32,
}

impl<T: Float> Adam<T> {
    pub fn new(config: AdamConfig, size: usize) -> Self {
        Self {
            config,
            m: vec![T::zero(); size],
            v: vec![T::zero(); size],
            t: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, params: &mut [T], grads: &[T]) {
        assert_eq!(params.len(), self.m.len(), "parameter size changed");
        assert_eq!(grads.len(), self.m.len(), "gradient size does not match parameters");
        self.t += 1;
        let c = |x: f64| T::from(x).expect("float conversion");
        let (b1, b2) = (self.config.beta1, self.config.beta2);
        let bc1 = c(1.0 - b1.powi(self.t));
        let bc2 = c(1.0 - b2.powi(self.t));
        let (lr, eps) = (c(self.config.learning_rate), c(self.config.epsilon));
        let (b1, b2) = (c(b1), c(b2));
        let one = T::one();
        for ((p, &g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}
