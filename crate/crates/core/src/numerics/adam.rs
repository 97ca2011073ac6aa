use super::graph::{Gradients, ParamSet};
use super::tensor::Tensor;
use super::NumericsError;

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f32) -> Self {
        let zeros = || params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, first: zeros(), second: zeros() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update. Parameters without a gradient are left untouched and
    /// their moments are not advanced. A non-finite gradient aborts before
    /// anything is modified.
    pub fn step(&mut self, params: &mut ParamSet, grads: &Gradients) -> Result<(), NumericsError> {
        let slots = grads.param_slots();
        for id in params.ids() {
            if let Some(Some(g)) = slots.get(id.index()) {
                if g.shape() != params.get(id).shape() {
                    return Err(NumericsError::Shape(format!(
                        "gradient for {} has shape {:?}, parameter has {:?}",
                        params.name(id),
                        g.shape(),
                        params.get(id).shape()
                    )));
                }
                if !g.is_finite() {
                    return Err(NumericsError::NonFiniteGradient(params.name(id).to_string()));
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - (self.beta1 as f64).powi(t);
        let c2 = 1.0 - (self.beta2 as f64).powi(t);
        for id in params.ids() {
            let Some(Some(g)) = slots.get(id.index()) else { continue };
            let m = self.first[id.index()].data_mut();
            let v = self.second[id.index()].data_mut();
            let p = params.get_mut(id).data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m[i] as f64 / c1;
                let vhat = v[i] as f64 / c2;
                p[i] -= (self.lr as f64 * mhat / (vhat.sqrt() + self.eps as f64)) as f32;
            }
        }
        Ok(())
    }
}
