//! Adam with bias correction.

use crate::autograd::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam<F> {
    config: AdamConfig,
    step: u64,
    first: Vec<Tensor<F>>,
    second: Vec<Tensor<F>>,
}

impl<F: Element> Adam<F> {
    pub fn new(config: AdamConfig, store: &ParamStore<F>) -> Self {
        let moments = || {
            store
                .ids()
                .map(|id| Tensor::zeros(store.value(id).shape().to_vec()))
                .collect()
        };
        Self {
            config,
            step: 0,
            first: moments(),
            second: moments(),
        }
    }

    pub fn config(&self) -> AdamConfig {
        self.config
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the gradients accumulated in `store`.
    ///
    /// Any non-finite gradient aborts before a single parameter is touched.
    pub fn step(&mut self, store: &mut ParamStore<F>) -> Result<()> {
        if store.len() != self.first.len() {
            return Err(Error::contract(format!(
                "optimizer tracks {} parameters, store has {}",
                self.first.len(),
                store.len()
            )));
        }
        for id in store.ids() {
            let g = store.grad(id);
            if g.shape() != self.first[id.index()].shape() {
                return Err(Error::Shape {
                    op: "adam_step",
                    lhs: self.first[id.index()].shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if let Some(pos) = g.data().iter().position(|v| !v.is_finite()) {
                return Err(Error::NumericAbort(format!(
                    "non-finite gradient in parameter `{}` at flat index {pos} (step {})",
                    store.name(id),
                    self.step + 1
                )));
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let (b1, b2) = (F::from_f64(beta1), F::from_f64(beta2));
        let (one_b1, one_b2) = (F::from_f64(1.0 - beta1), F::from_f64(1.0 - beta2));
        let step_size = F::from_f64(lr / bc1);
        let inv_bc2_sqrt = F::from_f64(1.0 / bc2.sqrt());
        let eps = F::from_f64(eps);
        for id in store.ids() {
            let (value, grad) = store.split_mut(id);
            let m = self.first[id.index()].data_mut();
            let v = self.second[id.index()].data_mut();
            for (((p, &g), m), v) in value.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                *p = *p - step_size * *m / ((*v).sqrt() * inv_bc2_sqrt + eps);
            }
        }
        Ok(())
    }
}
