use crate::{ParamId, ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty folded into the gradient (coupled decay).
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Bias-corrected Adam with one moment slot per parameter tensor.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl Adam {
    /// Slots sized for `lens[i]` scalars each.
    pub fn new(config: AdamConfig, lens: &[usize]) -> Self {
        Self {
            config,
            m: lens.iter().map(|&n| vec![0.0; n]).collect(),
            v: lens.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    pub fn for_store(config: AdamConfig, store: &ParamStore) -> Self {
        let lens: Vec<usize> = store.tensors().iter().map(Tensor::len).collect();
        Self::new(config, &lens)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Advance the shared step counter; call once per optimizer step before
    /// the per-slot updates.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Update one slot in place. `lr` overrides the configured rate so that
    /// schedules can be applied from outside.
    pub fn update_slot(&mut self, slot: usize, param: &mut [f64], grad: &[f64], lr: f64) {
        let c = self.config;
        let t = self.step.max(1) as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let m = &mut self.m[slot];
        let v = &mut self.v[slot];
        for i in 0..param.len() {
            let g = grad[i] + c.weight_decay * param[i];
            m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
            v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            param[i] -= lr * m_hat / (v_hat.sqrt() + c.eps);
        }
    }

    /// One step over a parameter store. Parameters without a gradient or
    /// not listed in `trainable` are left untouched.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &[Option<Tensor>],
        trainable: &[ParamId],
        lr: f64,
    ) {
        self.begin_step();
        for id in trainable {
            if let Some(g) = grads.get(id.0).and_then(Option::as_ref) {
                let p = store.get_mut(*id);
                self.update_slot(id.0, p.data_mut(), g.data(), lr);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut adam = Adam::new(
            AdamConfig {
                lr: 0.1,
                ..Default::default()
            },
            &[1],
        );
        let mut p = [0.0];
        adam.begin_step();
        adam.update_slot(0, &mut p, &[1.0], 0.1);
        // m_hat = 1, v_hat = 1 -> delta = -0.1 / (1 + 1e-8)
        assert!((p[0] + 0.1 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::row_vector(vec![0.3, -1.2, 4.0]));
        let before = store.clone();
        let mut adam = Adam::for_store(AdamConfig::default(), &store);
        let grads = vec![Some(Tensor::row_vector(vec![0.0; 3]))];
        for _ in 0..5 {
            adam.step(&mut store, &grads, &[id], 0.01);
        }
        assert_eq!(store, before);
    }

    #[test]
    fn identical_runs_identical_updates() {
        let run = || {
            let mut store = ParamStore::new();
            let id = store.add("p", Tensor::row_vector(vec![0.5, -0.25]));
            let mut adam = Adam::for_store(
                AdamConfig {
                    weight_decay: 5e-4,
                    ..Default::default()
                },
                &store,
            );
            for k in 0..10 {
                let g = vec![Some(Tensor::row_vector(vec![0.1 * k as f64, -0.3]))];
                adam.step(&mut store, &g, &[id], 0.01);
            }
            store
        };
        assert_eq!(run(), run());
    }
}
