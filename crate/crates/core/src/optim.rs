//! Adaptive-moment optimizer with lazy group updates.
//!
//! Parameters are grouped along one axis (head columns per class, pool
//! entries per prompt). Groups whose gradient is exactly zero this step are
//! skipped entirely — no moment decay, no drift — so parameters of untouched
//! classes and never-selected prompts stay put.

use ndarray::{ArrayD, ArrayViewD, ArrayViewMutD, Axis};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        AdamConfig {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moment state for one parameter tensor.
pub struct AdamState {
    config: AdamConfig,
    group_axis: usize,
    m: ArrayD<f64>,
    v: ArrayD<f64>,
    steps: Vec<u64>,
}

impl AdamState {
    pub fn new(config: AdamConfig, shape: &[usize], group_axis: usize) -> Self {
        assert!(group_axis < shape.len());
        AdamState {
            config,
            group_axis,
            m: ArrayD::zeros(shape),
            v: ArrayD::zeros(shape),
            steps: vec![0; shape[group_axis]],
        }
    }

    /// Applies one update. Groups with an all-zero gradient are untouched.
    pub fn update(&mut self, mut param: ArrayViewMutD<f64>, grad: ArrayViewD<f64>) {
        assert_eq!(param.shape(), grad.shape());
        assert_eq!(param.shape(), self.m.shape());
        let axis = Axis(self.group_axis);
        let c = self.config;
        for (g, grad_slice) in grad.axis_iter(axis).enumerate() {
            if grad_slice.iter().all(|&v| v == 0.0) {
                continue;
            }
            self.steps[g] += 1;
            let t = self.steps[g] as i32;
            let bias1 = 1.0 - c.beta1.powi(t);
            let bias2 = 1.0 - c.beta2.powi(t);
            let mut m = self.m.index_axis_mut(axis, g);
            let mut v = self.v.index_axis_mut(axis, g);
            let mut p = param.index_axis_mut(axis, g);
            ndarray::Zip::from(&mut m)
                .and(&mut v)
                .and(&mut p)
                .and(&grad_slice)
                .for_each(|m, v, p, &g| {
                    *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                    *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                    let m_hat = *m / bias1;
                    let v_hat = *v / bias2;
                    *p -= c.learning_rate * m_hat / (v_hat.sqrt() + c.epsilon);
                });
        }
    }
}
