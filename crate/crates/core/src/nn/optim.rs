use super::tensor::ParamStore;
use super::NnError;

/// Adam with bias correction and optional decoupled weight decay
/// (`w ← w − lr·weight_decay·w` before the moment update; 0 disables it).
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store
            .params()
            .iter()
            .map(|p| vec![0.0; p.value.numel()])
            .collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update of every parameter; all gradients must be present.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<(), NnError> {
        if let Some(p) = store.params().iter().find(|p| p.grad.is_none()) {
            return Err(NnError::MissingGrad(p.name.clone()));
        }
        assert_eq!(
            self.m.len(),
            store.len(),
            "optimizer built for a different store"
        );
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let g = store.grad(id).expect("checked above").to_vec();
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let w = store.value_mut(id).data_mut();
            let decay = 1.0 - self.lr * self.weight_decay;
            for j in 0..g.len() {
                if self.weight_decay != 0.0 {
                    w[j] *= decay;
                }
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                w[j] -= self.lr * mhat / (vhat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}
