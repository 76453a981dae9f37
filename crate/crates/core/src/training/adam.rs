use crate::autodiff::{ParamId, ParamStore};

/// Adam with bias correction and a constant learning rate.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    first: Vec<Option<Vec<f64>>>,
    second: Vec<Option<Vec<f64>>>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64, n_params: usize) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            first: vec![None; n_params],
            second: vec![None; n_params],
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    /// Applies one update from `(parameter, gradient)` pairs.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[(ParamId, Vec<f64>)]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (id, g) in grads {
            let i = id.index();
            let m = self.first[i].get_or_insert_with(|| vec![0.0; g.len()]);
            let v = self.second[i].get_or_insert_with(|| vec![0.0; g.len()]);
            let w = store.get_mut(*id).data_mut();
            for j in 0..g.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                w[j] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}
