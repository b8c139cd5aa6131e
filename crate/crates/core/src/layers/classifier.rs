use rand::Rng;

use crate::error::Result;
use crate::params::{Bound, ParamId, ParamSet};
use crate::tensor::{Graph, Scalar, Var};

/// Linear map to class logits; probabilities are the softmax of the logits.
#[derive(Clone, Debug)]
pub struct ClassifierHead {
    pub w: ParamId,
    pub b: ParamId,
    pub n_in: usize,
    pub n_classes: usize,
}

impl ClassifierHead {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamSet<T>,
        prefix: &str,
        n_in: usize,
        n_classes: usize,
        rng: &mut R,
    ) -> Self {
        ClassifierHead {
            w: ps.add_matrix(format!("{prefix}.w"), [n_in, n_classes], n_in, rng),
            b: ps.add_zeros(format!("{prefix}.b"), &[n_classes]),
            n_in,
            n_classes,
        }
    }

    /// `B × n_in` to `B × n_classes` logits.
    pub fn logits<T: Scalar>(&self, g: &mut Graph<T>, bound: &Bound, v: Var) -> Result<Var> {
        let y = g.matmul(v, bound[self.w])?;
        g.add_bias(y, bound[self.b])
    }

    pub fn probabilities<T: Scalar>(&self, g: &mut Graph<T>, bound: &Bound, v: Var) -> Result<Var> {
        let y = self.logits(g, bound, v)?;
        g.softmax(y, None)
    }
}
