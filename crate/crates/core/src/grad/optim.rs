use serde::{Deserialize, Serialize};

use super::{Array, ParamStore};
use crate::error::{LabError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmsPropConfig {
    pub lr: f64,
    pub alpha: f64,
    pub eps: f64,
}

impl Default for RmsPropConfig {
    fn default() -> Self {
        RmsPropConfig {
            lr: 5e-4,
            alpha: 0.99,
            eps: 1e-5,
        }
    }
}

/// RMSProp state: one squared-gradient average per parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmsProp {
    pub config: RmsPropConfig,
    pub square_avg: Vec<Array>,
}

impl RmsProp {
    pub fn new(config: RmsPropConfig, store: &ParamStore) -> Self {
        let square_avg = store.iter().map(|p| Array::zeros(p.value.shape())).collect();
        RmsProp { config, square_avg }
    }

    /// `v <- a*v + (1-a)*g^2; p <- p - lr*g/(sqrt(v)+eps)`. Gradients are
    /// left in place.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if self.square_avg.len() != store.len() {
            return Err(LabError::dim(
                "rmsprop",
                &[self.square_avg.len()],
                &[store.len()],
            ));
        }
        let RmsPropConfig { lr, alpha, eps } = self.config;
        for (p, acc) in store.iter_mut().zip(&mut self.square_avg) {
            if acc.shape() != p.value.shape() {
                return Err(LabError::dim("rmsprop", acc.shape(), p.value.shape()));
            }
            let grads = p.grad.data();
            for ((v, a), g) in p.value.data_mut().iter_mut().zip(acc.data_mut()).zip(grads) {
                *a = alpha * *a + (1.0 - alpha) * g * g;
                *v -= lr * g / (a.sqrt() + eps);
            }
        }
        Ok(())
    }
}
