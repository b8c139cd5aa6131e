//! Recurrent encoders, attention pooling and the classifier head.

mod classifier;
mod gru;
mod mhsa;

pub use classifier::ClassifierHead;
pub use gru::{gru_cell, BiGruConfig, BiGruStack, GruParams};
pub use mhsa::{HeadParams, MhsaParams, PoolOutput};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Forward-pass mode. Training carries the RNG that draws dropout masks.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

impl Mode<'_> {
    pub fn is_training(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

/// Inverted dropout: zeroes each element with probability `rate` and scales
/// survivors by `1 / (1 − rate)`. Identity outside training.
pub fn dropout<T: Scalar>(g: &mut Graph<T>, x: Var, rate: f64, mode: &mut Mode<'_>) -> Result<Var> {
    let Mode::Train(rng) = mode else {
        return Ok(x);
    };
    if rate <= 0.0 {
        return Ok(x);
    }
    let keep = T::lit(1.0 / (1.0 - rate));
    let shape = g.shape(x).to_vec();
    let mask = Tensor::from_fn(shape, |_| if rng.gen::<f64>() < rate { T::zero() } else { keep });
    let m = g.constant(mask);
    g.mul(x, m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn dropout_is_identity_in_eval_and_unbiased_in_training() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::ones([200, 50]));
        let y = dropout(&mut g, x, 0.3, &mut Mode::Eval).unwrap();
        assert_eq!(y, x);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y = dropout(&mut g, x, 0.3, &mut Mode::Train(&mut rng)).unwrap();
        let v = g.value(y);
        let mean = v.data().iter().sum::<f64>() / v.len() as f64;
        assert!((mean - 1.0).abs() < 0.03, "{mean}");
        let zeros = v.data().iter().filter(|&&x| x == 0.0).count() as f64 / v.len() as f64;
        assert!((zeros - 0.3).abs() < 0.02);
    }
}
