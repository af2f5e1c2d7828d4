//! Stochastic gradient descent with heavy-ball momentum.

use crate::error::{Error, Result};
use crate::model::{MlpModel, ParamVars};
use crate::tensor::Gradients;

/// `v ← μ·v + g`, `θ ← θ − η·v`, one velocity buffer per parameter tensor.
#[derive(Clone, Debug)]
pub struct SgdMomentum {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl SgdMomentum {
    pub fn new(learning_rate: f64, momentum: f64) -> Result<Self> {
        if !(learning_rate > 0.0) || !(0.0..1.0).contains(&momentum) {
            return Err(Error::contract(format!(
                "need learning_rate > 0 and momentum in [0, 1), got {learning_rate}, {momentum}"
            )));
        }
        Ok(Self {
            learning_rate,
            momentum,
            velocity: Vec::new(),
        })
    }

    /// Applies one update to every weight and bias of `model`.
    pub fn step(&mut self, model: &mut MlpModel, params: &ParamVars, grads: &Gradients) -> Result<()> {
        let n_layers = model.layers().len();
        if self.velocity.is_empty() {
            self.velocity = model
                .layers()
                .iter()
                .flat_map(|l| [vec![0.0; l.weight.numel()], vec![0.0; l.bias.numel()]])
                .collect();
        }
        for i in 0..n_layers {
            for (slot, var) in [(2 * i, params.weights[i]), (2 * i + 1, params.biases[i])] {
                let g = grads
                    .get(var)
                    .ok_or_else(|| Error::contract("missing gradient for a model parameter"))?;
                let layer = &mut model.layers_mut()[i];
                let target = if slot % 2 == 0 {
                    &mut layer.weight
                } else {
                    &mut layer.bias
                };
                let vel = &mut self.velocity[slot];
                for ((p, v), &gi) in target.data_mut().iter_mut().zip(vel.iter_mut()).zip(g) {
                    *v = self.momentum * *v + gi;
                    *p -= self.learning_rate * *v;
                }
                if target.data().iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite { op: "sgd_step" });
                }
            }
        }
        Ok(())
    }
}
