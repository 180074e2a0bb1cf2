//! Adam with a learning rate per parameter slot.

use crate::error::{Error, Result};
use crate::gradcore::{Gradients, Tensor, Var};

#[derive(Clone, Debug)]
pub struct Adam {
    lrs: Vec<f64>,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    /// One learning rate per parameter tensor, in the order later passed to
    /// [`Adam::step`].
    pub fn new(lrs: Vec<f64>) -> Result<Self> {
        if let Some(bad) = lrs.iter().find(|&&r| !(r > 0.0 && r.is_finite())) {
            return Err(Error::Parameter(format!("learning rate must be positive, got {bad}")));
        }
        Ok(Adam {
            lrs,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.lrs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lrs.is_empty()
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor]) -> Result<()> {
        if params.len() != self.lrs.len() || grads.len() != self.lrs.len() {
            return Err(Error::Contract(format!(
                "optimizer has {} slots, got {} parameters and {} gradients",
                self.lrs.len(),
                params.len(),
                grads.len()
            )));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::dim("adam", p.shape(), g.shape()));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let lr = self.lrs[i];
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                *w -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Gradients for `vars` in order; a variable without a gradient gets zeros
/// shaped like `like`.
pub fn collect_grads(grads: &mut Gradients, vars: &[Var], like: &[&Tensor]) -> Result<Vec<Tensor>> {
    vars.iter()
        .zip(like)
        .map(|(&v, t)| match grads.take(v) {
            Some(g) => Ok(g),
            None => Tensor::zeros(t.shape().to_vec()),
        })
        .collect()
}
