use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::autograd::tensor::{ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be >= 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        Ok(())
    }
}

/// SGD with classical (coupled) weight decay and heavy-ball momentum:
///
/// ```text
/// v <- momentum * v + (g + weight_decay * p)
/// p <- p - lr * v
/// ```
#[derive(Debug, Clone)]
pub struct Sgd {
    pub config: SgdConfig,
    velocity: HashMap<ParamId, Vec<f64>>,
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Result<Self> {
        config.validate()?;
        Ok(Sgd {
            config,
            velocity: HashMap::new(),
        })
    }

    pub fn velocity(&self, id: ParamId) -> Option<&[f64]> {
        self.velocity.get(&id).map(Vec::as_slice)
    }

    /// Updates every trainable parameter from its gradient slot. Frozen
    /// parameters are left untouched and get no velocity buffer.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        let SgdConfig {
            lr,
            momentum,
            weight_decay,
        } = self.config;
        for id in store.ids().collect::<Vec<_>>() {
            if !store.get(id).requires_grad() {
                continue;
            }
            let name = store.name(id).to_string();
            let t = store.get_mut(id);
            let g = t.grad().ok_or(Error::MissingGrad(name))?.to_vec();
            let v = self
                .velocity
                .entry(id)
                .or_insert_with(|| vec![0.0; g.len()]);
            let dtype = t.dtype();
            for ((p, v), g) in t.data_mut().iter_mut().zip(v.iter_mut()).zip(&g) {
                *v = momentum * *v + (g + weight_decay * *p);
                *p = dtype.round(*p - lr * *v);
            }
        }
        Ok(())
    }
}
