use std::collections::BTreeMap;

use crate::model::ParamStore;
use crate::numgraph::Tensor;

/// `lr_init * (1 - step / steps)`, reaching zero at `step == steps`.
pub fn linear_decay(lr_init: f64, step: usize, steps: usize) -> f64 {
    if steps == 0 {
        return 0.0;
    }
    lr_init * (1.0 - step as f64 / steps as f64)
}

/// SGD with classical momentum: `v <- mu * v - lr * g; theta <- theta + v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Self {
            momentum,
            velocity: BTreeMap::new(),
        }
    }

    /// Applies one update to every parameter that has a gradient entry.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64) {
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.numel()]);
            for ((theta, vel), grad) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(g.data()) {
                *vel = self.momentum * *vel - lr * grad;
                *theta += *vel;
            }
        }
    }
}
