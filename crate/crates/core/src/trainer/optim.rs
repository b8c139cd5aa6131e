use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::{Scalar, Tensor};

/// Adam with bias-corrected first and second moments.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    t: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ParamSet<T>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || params.tensors().iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        Adam {
            beta1,
            beta2,
            eps,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update. A non-finite gradient aborts before anything changes.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::shape("adam", format!("{} gradients for {} parameters", grads.len(), params.len())));
        }
        for (i, (g, p)) in grads.iter().zip(params.tensors()).enumerate() {
            if g.shape() != p.shape() {
                return Err(Error::shape(
                    "adam",
                    format!("parameter `{}`: gradient {:?} vs {:?}", params.name_at(i), g.shape(), p.shape()),
                ));
            }
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient(params.name_at(i).to_string()));
            }
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let step = T::lit(lr / c1);
        let c2_sqrt = T::lit(c2.sqrt());
        let eps = T::lit(self.eps);
        for (((p, g), m), v) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((x, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                *x -= step * *mi / (vi.sqrt() / c2_sqrt + eps);
            }
        }
        Ok(())
    }
}

/// Halves (by `factor`) the learning rate after `patience` consecutive
/// observations that fail to improve on the best loss so far.
#[derive(Clone, Debug)]
pub struct PlateauScheduler {
    lr: f64,
    factor: f64,
    patience: usize,
    best: Option<f64>,
    stale: usize,
}

impl PlateauScheduler {
    pub fn new(lr0: f64, patience: usize, factor: f64) -> Self {
        PlateauScheduler {
            lr: lr0,
            factor,
            patience,
            best: None,
            stale: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Records a validation loss and returns the rate for the next epoch.
    /// The first observation only sets the reference.
    pub fn observe(&mut self, loss: f64) -> f64 {
        match self.best {
            Some(b) if loss >= b => {
                self.stale += 1;
                if self.stale == self.patience {
                    self.lr *= self.factor;
                    self.stale = 0;
                }
            }
            _ => {
                self.best = Some(loss);
                self.stale = 0;
            }
        }
        self.lr
    }
}
