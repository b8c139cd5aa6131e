use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamSet};
use crate::tensor::{Graph, Mask, Scalar, Var};

/// One attention head: `w_q` is `1 × d_α`, `w_k` and `w_v` are `d_α × d_h`.
#[derive(Clone, Debug)]
pub struct HeadParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
}

/// Multi-head self-attention pooling of a sequence into a fixed vector.
#[derive(Clone, Debug)]
pub struct MhsaParams {
    pub heads: Vec<HeadParams>,
    pub head_dim: usize,
    pub d_h: usize,
}

/// Pooled vectors (`B × n_α·d_α`) and per-head attention weights (`B × m`).
#[derive(Clone, Debug)]
pub struct PoolOutput {
    pub v: Var,
    pub alphas: Vec<Var>,
}

impl MhsaParams {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamSet<T>,
        prefix: &str,
        d_h: usize,
        n_heads: usize,
        head_dim: usize,
        rng: &mut R,
    ) -> Self {
        let heads = (0..n_heads)
            .map(|j| HeadParams {
                w_q: ps.add_matrix(format!("{prefix}.h{j}.w_q"), [1, head_dim], head_dim, rng),
                w_k: ps.add_matrix(format!("{prefix}.h{j}.w_k"), [head_dim, d_h], d_h, rng),
                w_v: ps.add_matrix(format!("{prefix}.h{j}.w_v"), [head_dim, d_h], d_h, rng),
            })
            .collect();
        MhsaParams { heads, head_dim, d_h }
    }

    pub fn output_dim(&self) -> usize {
        self.heads.len() * self.head_dim
    }

    /// `α_j = softmax(W_Q (W_K Hᵀ) / √d_α)` over valid steps, `v_j = W_V Hᵀ α_j`.
    ///
    /// `h` is `B × m × d_h`, `mask` is `B × m`.
    pub fn pool<T: Scalar>(&self, g: &mut Graph<T>, bound: &Bound, h: Var, mask: &Mask) -> Result<PoolOutput> {
        let shape = g.shape(h).to_vec();
        let [batch, steps, d_h] = shape[..] else {
            return Err(Error::shape("mhsa_pool", format!("input {shape:?} must be B×m×d_h")));
        };
        if d_h != self.d_h {
            return Err(Error::shape("mhsa_pool", format!("input width {d_h}, params expect {}", self.d_h)));
        }
        let flat = g.reshape(h, &[batch * steps, d_h])?;
        let scale = T::lit(1.0 / (self.head_dim as f64).sqrt());
        let mut vs = Vec::with_capacity(self.heads.len());
        let mut alphas = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            // keys: (W_K Hᵀ)ᵀ, one d_α-vector per position
            let keys = g.matmul_t(flat, false, bound[head.w_k], true)?;
            let scores = g.matmul_t(keys, false, bound[head.w_q], true)?;
            let scores = g.reshape(scores, &[batch, steps])?;
            let scores = g.scale(scores, scale);
            let alpha = g.softmax(scores, Some(mask))?;
            let a3 = g.reshape(alpha, &[batch, 1, steps])?;
            let pooled = g.bmm(a3, h)?;
            let pooled = g.reshape(pooled, &[batch, d_h])?;
            vs.push(g.matmul_t(pooled, false, bound[head.w_v], true)?);
            alphas.push(alpha);
        }
        let v = g.concat(&vs, 1)?;
        Ok(PoolOutput { v, alphas })
    }
}
