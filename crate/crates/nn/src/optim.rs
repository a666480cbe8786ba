use crate::error::{shape_err, Result};
use crate::param::{Gradients, ParamStore};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias-corrected moment estimates.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros = |p: &crate::param::Parameter<T>| vec![T::zero(); p.tensor.len()];
        Self { config, step: 0, m: params.iter().map(zeros).collect(), v: params.iter().map(zeros).collect() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &Gradients<T>) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return shape_err(
                "adam_step",
                format!("{} params, {} moment slots, {} grads", params.len(), self.m.len(), grads.len()),
            );
        }
        for id in 0..params.len() {
            if let Some(g) = grads.get(id) {
                if g.len() != self.m[id].len() || g.len() != params.by_id(id).tensor.len() {
                    return shape_err("adam_step", format!("gradient for `{}` has wrong size", params.by_id(id).name));
                }
            }
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let step_size = T::of(c.lr / bc1);
        let bc2_sqrt = T::of(bc2.sqrt());
        let eps = T::of(c.eps);
        for id in 0..params.len() {
            let p = params.by_id_mut(id);
            let Some(g) = grads.get(id) else { continue };
            if !p.trainable {
                continue;
            }
            let (m, v) = (&mut self.m[id], &mut self.v[id]);
            for (((w, &gi), mi), vi) in p.tensor.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                *w -= step_size * *mi / ((*vi).sqrt() / bc2_sqrt + eps);
            }
        }
        Ok(())
    }
}
