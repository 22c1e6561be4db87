//! Adam with bias correction and no weight decay.

use alloc::collections::BTreeMap;
use alloc::string::String;

use crate::error::{bail, Result};
use crate::params::Params;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, first: BTreeMap::new(), second: BTreeMap::new() }
    }

    /// Restores a saved state.
    pub fn from_state(
        lr: f64,
        step: u64,
        first: BTreeMap<String, Tensor>,
        second: BTreeMap<String, Tensor>,
    ) -> Result<Self> {
        if first.len() != second.len() || first.iter().any(|(k, t)| second.get(k).map(Tensor::shape) != Some(t.shape())) {
            bail!(Validation, "optimizer moment tables disagree");
        }
        Ok(Self { step, first, second, ..Self::new(lr) })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &BTreeMap<String, Tensor> {
        &self.first
    }

    pub fn second_moments(&self) -> &BTreeMap<String, Tensor> {
        &self.second
    }

    /// One update. Parameters without a gradient keep their value and moments.
    pub fn update<'a>(&mut self, params: &mut Params, grads: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<()> {
        self.step += 1;
        let t = self.step as f64;
        let c1 = 1.0 - libm::pow(self.beta1, t);
        let c2 = 1.0 - libm::pow(self.beta2, t);
        for (name, grad) in grads {
            let Some(p) = params.get_mut(name) else {
                bail!(Argument, "gradient for unknown parameter '{name}'");
            };
            if p.shape() != grad.shape() {
                bail!(Shape, "gradient for '{name}' has shape {:?}, parameter {:?}", grad.shape(), p.shape());
            }
            let m = self.first.entry(name.into()).or_insert_with(|| Tensor::zeros(grad.shape()));
            let v = self.second.entry(name.into()).or_insert_with(|| Tensor::zeros(grad.shape()));
            let it = p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(grad.data());
            for (((w, m), v), &g) in it {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let mh = *m / c1;
                let vh = *v / c2;
                *w -= self.lr * mh / (libm::sqrt(vh) + self.eps);
            }
        }
        Ok(())
    }
}
