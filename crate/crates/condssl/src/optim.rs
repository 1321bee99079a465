//! Stochastic gradient descent with classical momentum and coupled weight
//! decay: `v ← μ·v + g + wd·θ`, `θ ← θ − lr·v`.
//!
//! The velocity buffer follows the model's parameter walk order, so it can be
//! checkpointed as one flat vector and restored into a freshly built
//! optimizer.

use crate::error::{Error, Result};
use crate::nn::{Scalar, Trainable};

#[derive(Debug, Clone)]
pub struct Sgd<F: Scalar> {
    pub momentum: f64,
    pub weight_decay: f64,
    /// Flat velocity in parameter-walk order; sized on the first step.
    velocity: Vec<F>,
}

impl<F: Scalar> Sgd<F> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd { momentum, weight_decay, velocity: Vec::new() }
    }

    pub fn step(&mut self, model: &mut dyn Trainable<F>, lr: f64) {
        if self.velocity.is_empty() {
            self.velocity = vec![F::zero(); model.param_len()];
        }
        let mu = F::from_f64_(self.momentum);
        let wd = F::from_f64_(self.weight_decay);
        let lr = F::from_f64_(lr);
        let mut off = 0;
        model.params_and_grads(&mut |_, p, g| {
            let v = &mut self.velocity[off..off + p.len()];
            for ((pv, gv), vv) in p.iter_mut().zip(g.iter()).zip(v.iter_mut()) {
                *vv = mu * *vv + *gv + wd * *pv;
                *pv = *pv - lr * *vv;
            }
            off += p.len();
        });
        assert_eq!(off, self.velocity.len(), "parameter walk length changed");
    }

    pub fn velocity(&self) -> &[F] {
        &self.velocity
    }

    pub fn set_velocity(&mut self, v: Vec<F>, expected_len: usize) -> Result<()> {
        if !v.is_empty() && v.len() != expected_len {
            return Err(Error::checkpoint(format!(
                "velocity length {} does not match parameter count {expected_len}",
                v.len()
            )));
        }
        self.velocity = v;
        Ok(())
    }
}
