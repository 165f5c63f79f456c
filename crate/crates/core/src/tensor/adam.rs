//! Adam with bias correction over a [`ParameterStore`].

use super::{Moments, ParameterStore, TensorError, TensorResult};

#[derive(Debug, Clone, Copy)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamParams {
    pub fn with_lr(lr: f64) -> Self {
        AdamParams { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl ParameterStore {
    /// One Adam update over every parameter. All gradients must be populated;
    /// first and second moments persist in the store across calls.
    pub fn adam_step(&mut self, hp: AdamParams) -> TensorResult<()> {
        self.adam_step += 1;
        let t = self.adam_step as i32;
        let bc1 = 1.0 - hp.beta1.powi(t);
        let bc2 = 1.0 - hp.beta2.powi(t);
        for (name, param) in &self.params {
            let grad = param
                .grad()
                .ok_or_else(|| TensorError::MissingGrad { name: name.clone() })?;
            let slot = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| Moments { m: vec![0.0; grad.len()], v: vec![0.0; grad.len()] });
            let mut data = param.data();
            for i in 0..grad.len() {
                let g = grad[i];
                slot.m[i] = hp.beta1 * slot.m[i] + (1.0 - hp.beta1) * g;
                slot.v[i] = hp.beta2 * slot.v[i] + (1.0 - hp.beta2) * g * g;
                let mhat = slot.m[i] / bc1;
                let vhat = slot.v[i] / bc2;
                data[i] -= hp.lr * mhat / (vhat.sqrt() + hp.eps);
            }
            param.set_data(&data);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn quad_loss(store: &ParameterStore) -> Tensor {
        // f(w) = w₀² + w₁², minimum at the origin
        let w = store.get("w");
        w.mul(w).unwrap().sum().unwrap()
    }

    #[test]
    fn one_step_descends() {
        let mut store = ParameterStore::new();
        store.insert("w", Tensor::param(&[1], vec![1.0])).unwrap();
        let loss = quad_loss(&store);
        loss.backward().unwrap();
        store.adam_step(AdamParams::with_lr(0.1)).unwrap();
        assert!(store.get("w").data()[0] < 1.0);
    }

    #[test]
    fn zero_grad_leaves_parameters_unchanged() {
        let mut store = ParameterStore::new();
        store.insert("w", Tensor::param(&[2], vec![0.3, -0.7])).unwrap();
        store.get("w").accumulate_grad(&[0.0, 0.0]);
        store.adam_step(AdamParams::with_lr(0.1)).unwrap();
        assert_eq!(store.get("w").data(), vec![0.3, -0.7]);
    }

    #[test]
    fn missing_grad_names_parameter() {
        let mut store = ParameterStore::new();
        store.insert("conv.w", Tensor::param(&[1], vec![1.0])).unwrap();
        let err = store.adam_step(AdamParams::with_lr(0.1)).unwrap_err();
        assert!(err.to_string().contains("conv.w"));
    }

    #[test]
    fn quadratic_converges_in_200_steps() {
        let mut store = ParameterStore::new();
        store.insert("w", Tensor::param(&[2], vec![1.0, -0.5])).unwrap();
        let mut last = f64::INFINITY;
        for _ in 0..200 {
            store.zero_grads();
            let loss = quad_loss(&store);
            last = loss.item();
            loss.backward().unwrap();
            store.adam_step(AdamParams::with_lr(0.05)).unwrap();
        }
        assert!(last < 1e-6, "final loss {last}");
    }
}
