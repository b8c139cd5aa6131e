use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{dropout, Mode};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamSet};
use crate::tensor::{Graph, Mask, Scalar, Tensor, Var};

/// One GRU direction.
///
/// `w_x` is `d_in × 3H` and `b` is `3H`, both laid out as `[z | r | h]`
/// column blocks; `u_zr` is `H × 2H` (`[z | r]`) and `u_h` is `H × H`.
#[derive(Clone, Debug)]
pub struct GruParams {
    pub w_x: ParamId,
    pub u_zr: ParamId,
    pub u_h: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub hidden: usize,
}

impl GruParams {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamSet<T>,
        prefix: &str,
        d_in: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        GruParams {
            w_x: ps.add_matrix(format!("{prefix}.w_x"), [d_in, 3 * hidden], d_in, rng),
            u_zr: ps.add_matrix(format!("{prefix}.u_zr"), [hidden, 2 * hidden], hidden, rng),
            u_h: ps.add_matrix(format!("{prefix}.u_h"), [hidden, hidden], hidden, rng),
            b: ps.add_zeros(format!("{prefix}.b"), &[3 * hidden]),
            d_in,
            hidden,
        }
    }
}

/// Single GRU update `h_t` from `x_t` (`B × d_in`) and `h_prev` (`B × H`):
///
/// ```text
/// z = σ(W_z x + U_z h + b_z)      r = σ(W_r x + U_r h + b_r)
/// ĥ = tanh(W_h x + U_h (r⊙h) + b_h)
/// h_t = (1 − z)⊙h_prev + z⊙ĥ
/// ```
pub fn gru_cell<T: Scalar>(g: &mut Graph<T>, p: &GruParams, bound: &Bound, x: Var, h_prev: Var) -> Result<Var> {
    let xp = g.matmul(x, bound[p.w_x])?;
    let xp = g.add_bias(xp, bound[p.b])?;
    let rows = g.shape(x)[0];
    g.gru_step(xp, h_prev, bound[p.u_zr], bound[p.u_h], &vec![true; rows])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiGruConfig {
    pub layers: usize,
    /// Units per direction; the output width is twice this.
    pub hidden: usize,
    /// Applied to the input of every layer after the first, in training only.
    pub dropout: f64,
}

impl Default for BiGruConfig {
    fn default() -> Self {
        BiGruConfig {
            layers: 2,
            hidden: 256,
            dropout: 0.3,
        }
    }
}

/// Stack of bidirectional GRU layers.
#[derive(Clone, Debug)]
pub struct BiGruStack {
    pub layers: Vec<[GruParams; 2]>,
    pub d_in: usize,
    pub cfg: BiGruConfig,
}

impl BiGruStack {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamSet<T>,
        prefix: &str,
        d_in: usize,
        cfg: &BiGruConfig,
        rng: &mut R,
    ) -> Self {
        let mut layers = Vec::with_capacity(cfg.layers);
        let mut width = d_in;
        for l in 0..cfg.layers {
            let fwd = GruParams::new(ps, &format!("{prefix}.l{l}.fwd"), width, cfg.hidden, rng);
            let bwd = GruParams::new(ps, &format!("{prefix}.l{l}.bwd"), width, cfg.hidden, rng);
            layers.push([fwd, bwd]);
            width = 2 * cfg.hidden;
        }
        BiGruStack {
            layers,
            d_in,
            cfg: cfg.clone(),
        }
    }

    pub fn output_dim(&self) -> usize {
        2 * self.cfg.hidden
    }

    /// `x` is `B × m × d_in` with a `B × m` prefix mask; returns `B × m × 2H`.
    ///
    /// The forward direction scans `t = 0..m`, the backward direction
    /// `t = m−1..0`; padded steps leave the state untouched, so each row's
    /// backward scan effectively starts at its own last valid step.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        x: Var,
        mask: &Mask,
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let [batch, steps, d_in] = shape[..] else {
            return Err(Error::shape("bigru", format!("input {shape:?} must be B×m×d")));
        };
        if d_in != self.d_in {
            return Err(Error::shape("bigru", format!("input width {d_in}, stack expects {}", self.d_in)));
        }
        if mask.shape() != [batch, steps] {
            return Err(Error::mask("bigru", format!("mask {:?} vs input {shape:?}", mask.shape())));
        }
        if mask.lengths().contains(&0) {
            return Err(Error::mask("bigru", "empty sequence"));
        }
        // keep[t][b]
        let keep: Vec<Vec<bool>> = (0..steps)
            .map(|t| (0..batch).map(|b| mask.get(b * steps + t)).collect())
            .collect();
        let mut cur = g.permute(x, &[1, 0, 2])?;
        for (l, [fwd, bwd]) in self.layers.iter().enumerate() {
            if l > 0 {
                cur = dropout(g, cur, self.cfg.dropout, mode)?;
            }
            let f = run_direction(g, bound, fwd, cur, &keep, false)?;
            let b = run_direction(g, bound, bwd, cur, &keep, true)?;
            cur = g.concat(&[f, b], 2)?;
        }
        g.permute(cur, &[1, 0, 2])
    }
}

/// Scans one direction over time-major input `m × B × d`, returning `m × B × H`.
fn run_direction<T: Scalar>(
    g: &mut Graph<T>,
    bound: &Bound,
    p: &GruParams,
    x: Var,
    keep: &[Vec<bool>],
    reverse: bool,
) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let (steps, batch, d) = (shape[0], shape[1], shape[2]);
    let flat = g.reshape(x, &[steps * batch, d])?;
    let xp = g.matmul(flat, bound[p.w_x])?;
    let xp = g.add_bias(xp, bound[p.b])?;
    let xp = g.reshape(xp, &[steps, batch * 3 * p.hidden])?;
    let mut h = g.constant(Tensor::zeros([batch, p.hidden]));
    let mut outs = vec![h; steps];
    let order: Box<dyn Iterator<Item = usize>> = if reverse {
        Box::new((0..steps).rev())
    } else {
        Box::new(0..steps)
    };
    for t in order {
        let xt = g.narrow(xp, 0, t, 1)?;
        let xt = g.reshape(xt, &[batch, 3 * p.hidden])?;
        h = g.gru_step(xt, h, bound[p.u_zr], bound[p.u_h], &keep[t])?;
        outs[t] = g.reshape(h, &[1, batch, p.hidden])?;
    }
    g.concat(&outs, 0)
}
