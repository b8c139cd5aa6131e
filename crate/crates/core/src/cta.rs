//! Channel/temporal attention over a stack of per-channel sequences.
//!
//! `H` is `B × N × m × d_h`: `N` channels sharing one `B × m` time mask.
//! Two anchors summarise `H`: `H̃_c` (mean over channels, `B × m × d_h`)
//! and `H̃_t` (masked mean over time, `B × N × d_h`). Per head, `H̃_t`
//! scores the channels (`α_t`, length `N`) and `H̃_c` scores the time steps
//! (`α_c`, length `m`, masked). The joint weights are `A = α_cᵀ α_t`
//! (`m × N`) and `v_j[k] = Σ_{t,c} A[t,c]·(W_V H)[k,t,c]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{BiGruConfig, BiGruStack, ClassifierHead, MhsaParams, Mode, PoolOutput};
use crate::params::{Bound, ParamId, ParamSet};
use crate::tensor::{Graph, Mask, Scalar, Tensor, Var};

#[derive(Clone, Debug)]
pub struct CtaHead {
    pub w_q_t: ParamId,
    pub w_k_t: ParamId,
    pub w_q_c: ParamId,
    pub w_k_c: ParamId,
    pub w_v: ParamId,
}

#[derive(Clone, Debug)]
pub struct CtaParams {
    pub heads: Vec<CtaHead>,
    pub head_dim: usize,
    pub d_h: usize,
}

/// How the joint time/channel weights are formed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    #[default]
    Learned,
    /// Every valid (time, channel) cell weighted equally: masked global mean.
    Uniform,
}

/// Graph handles of one attention evaluation.
///
/// Per head: `alpha_t` is `B × N`, `alpha_c` is `B × m`, `a` is `B × m × N`.
/// `v` is `B × n_α·d_α`.
#[derive(Clone, Debug)]
pub struct CtaAttention {
    pub v: Var,
    pub alpha_t: Vec<Var>,
    pub alpha_c: Vec<Var>,
    pub a: Vec<Var>,
}

/// Attention values of a single utterance, ready for serialization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CtaAttentionOutput {
    pub n_channels: usize,
    pub n_steps: usize,
    pub heads: Vec<HeadAttention>,
    pub v: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadAttention {
    pub alpha_t: Vec<f64>,
    pub alpha_c: Vec<f64>,
    /// `m × N`, row-major.
    pub a: Vec<f64>,
    pub v: Vec<f64>,
}

impl CtaAttentionOutput {
    /// Extracts row `b` of a batched evaluation, trimmed to `len` valid steps.
    pub fn extract<T: Scalar>(g: &Graph<T>, att: &CtaAttention, b: usize, len: usize) -> Self {
        let row = |v: Var| -> Vec<f64> {
            let t = g.value(v);
            let w = t.len() / t.shape()[0];
            t.data()[b * w..(b + 1) * w].iter().map(|x| x.as_f64()).collect()
        };
        let v = row(att.v);
        let n_heads = att.alpha_t.len();
        let head_dim = v.len() / n_heads.max(1);
        let mut n_channels = 0;
        let heads = (0..n_heads)
            .map(|j| {
                let alpha_t = row(att.alpha_t[j]);
                n_channels = alpha_t.len();
                let mut alpha_c = row(att.alpha_c[j]);
                alpha_c.truncate(len);
                let mut a = row(att.a[j]);
                a.truncate(len * n_channels);
                HeadAttention {
                    alpha_t,
                    alpha_c,
                    a,
                    v: v[j * head_dim..(j + 1) * head_dim].to_vec(),
                }
            })
            .collect();
        CtaAttentionOutput {
            n_channels,
            n_steps: len,
            heads,
            v,
        }
    }

    /// Channel with the largest head-averaged `α_t`.
    pub fn argmax_channel(&self) -> usize {
        let mut avg = vec![0.0; self.n_channels];
        for h in &self.heads {
            for (a, x) in avg.iter_mut().zip(&h.alpha_t) {
                *a += x;
            }
        }
        avg.iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
            .0
    }
}

fn check_input<T: Scalar>(g: &Graph<T>, op: &'static str, h: Var, mask: &Mask) -> Result<[usize; 4]> {
    let shape = g.shape(h);
    let [b, n, m, d] = shape[..] else {
        return Err(Error::shape(op, format!("input {shape:?} must be B×N×m×d")));
    };
    if mask.shape() != [b, m] {
        return Err(Error::mask(op, format!("mask {:?} vs input {shape:?}", mask.shape())));
    }
    Ok([b, n, m, d])
}

/// `(H̃_c, H̃_t)`: the channel mean (`B × m × d_h`, unmasked) and the masked
/// time mean (`B × N × d_h`).
pub fn anchors<T: Scalar>(g: &mut Graph<T>, h: Var, mask: &Mask) -> Result<(Var, Var)> {
    let [_, n, _, _] = check_input(g, "anchors", h, mask)?;
    let hc = g.mean_axis(h, 1, None)?;
    let ht = g.mean_axis(h, 2, Some(&mask.tile_middle(n)))?;
    Ok((hc, ht))
}

/// Flattens a `[B × m]` mask tiled over `N` channels to `[B × N·m]`.
fn flat_mask(mask: &Mask, n: usize) -> Mask {
    let t = mask.tile_middle(n);
    let s = t.shape();
    Mask::new([s[0], s[1] * s[2]], t.data().to_vec()).expect("same element count")
}

/// `softmax(W_Q (W_K Xᵀ) / √d_α)` over the middle axis of `x` (`B × L × d_h`).
fn score<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    w_q: Var,
    w_k: Var,
    head_dim: usize,
    mask: Option<&Mask>,
) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let flat = g.reshape(x, &[s[0] * s[1], s[2]])?;
    let keys = g.matmul_t(flat, false, w_k, true)?;
    let sc = g.matmul_t(keys, false, w_q, true)?;
    let sc = g.reshape(sc, &[s[0], s[1]])?;
    let sc = g.scale(sc, T::lit(1.0 / (head_dim as f64).sqrt()));
    g.softmax(sc, mask)
}

impl CtaParams {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamSet<T>,
        prefix: &str,
        d_h: usize,
        n_heads: usize,
        head_dim: usize,
        rng: &mut R,
    ) -> Self {
        let heads = (0..n_heads)
            .map(|j| {
                let mut m = |name: &str, shape: [usize; 2], fan_in: usize| {
                    ps.add_matrix(format!("{prefix}.h{j}.{name}"), shape, fan_in, rng)
                };
                CtaHead {
                    w_q_t: m("w_q_t", [1, head_dim], head_dim),
                    w_k_t: m("w_k_t", [head_dim, d_h], d_h),
                    w_q_c: m("w_q_c", [1, head_dim], head_dim),
                    w_k_c: m("w_k_c", [head_dim, d_h], d_h),
                    w_v: m("w_v", [head_dim, d_h], d_h),
                }
            })
            .collect();
        CtaParams { heads, head_dim, d_h }
    }

    pub fn output_dim(&self) -> usize {
        self.heads.len() * self.head_dim
    }

    /// Learned channel/temporal attention over `h` (`B × N × m × d_h`).
    pub fn attend<T: Scalar>(&self, g: &mut Graph<T>, bound: &Bound, h: Var, mask: &Mask) -> Result<CtaAttention> {
        let [b, n, m, d] = check_input(g, "cta_attend", h, mask)?;
        if d != self.d_h {
            return Err(Error::shape("cta_attend", format!("input width {d}, params expect {}", self.d_h)));
        }
        let (hc, ht) = anchors(g, h, mask)?;
        // channel-major flattening of H; pooled with the transposed weights
        let hp = g.reshape(h, &[b, n * m, d])?;
        let mut out = CtaAttention {
            v: h,
            alpha_t: Vec::new(),
            alpha_c: Vec::new(),
            a: Vec::new(),
        };
        let mut weights = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let at = score(g, ht, bound[head.w_q_t], bound[head.w_k_t], self.head_dim, None)?;
            let ac = score(g, hc, bound[head.w_q_c], bound[head.w_k_c], self.head_dim, Some(mask))?;
            let ac3 = g.reshape(ac, &[b, m, 1])?;
            let at3 = g.reshape(at, &[b, 1, n])?;
            out.a.push(g.bmm(ac3, at3)?);
            let at_col = g.reshape(at, &[b, n, 1])?;
            let ac_row = g.reshape(ac, &[b, 1, m])?;
            let a_cm = g.bmm(at_col, ac_row)?;
            weights.push(g.reshape(a_cm, &[b, 1, n * m])?);
            out.alpha_t.push(at);
            out.alpha_c.push(ac);
        }
        // every head's weighted sum in one pass over H
        let weights = g.concat(&weights, 1)?;
        let pooled = g.bmm(weights, hp)?;
        let n_heads = self.heads.len();
        let mut vs = Vec::with_capacity(n_heads);
        for (j, head) in self.heads.iter().enumerate() {
            let pj = g.narrow(pooled, 1, j, 1)?;
            let pj = g.reshape(pj, &[b, d])?;
            vs.push(g.matmul_t(pj, false, bound[head.w_v], true)?);
        }
        out.v = g.concat(&vs, 1)?;
        Ok(out)
    }

    /// Mean-pool ablation: `A` uniform over valid cells, `v_j = W_V · mean(H)`.
    pub fn attend_uniform<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        h: Var,
        mask: &Mask,
    ) -> Result<CtaAttention> {
        let [b, n, m, d] = check_input(g, "cta_uniform", h, mask)?;
        if d != self.d_h {
            return Err(Error::shape("cta_uniform", format!("input width {d}, params expect {}", self.d_h)));
        }
        let flat = g.reshape(h, &[b, n * m, d])?;
        let mean = g.mean_axis(flat, 1, Some(&flat_mask(mask, n)))?;
        let lengths = mask.lengths();
        let at = Tensor::full([b, n], T::lit(1.0 / n as f64));
        let ac = Tensor::from_fn([b, m], |i| {
            let l = lengths[i / m];
            if i % m < l {
                T::lit(1.0 / l as f64)
            } else {
                T::zero()
            }
        });
        let a = Tensor::from_fn([b, m, n], |i| ac.data()[i / n] * at.data()[0]);
        let (at, ac, a) = (g.constant(at), g.constant(ac), g.constant(a));
        let mut out = CtaAttention {
            v: h,
            alpha_t: vec![at; self.heads.len()],
            alpha_c: vec![ac; self.heads.len()],
            a: vec![a; self.heads.len()],
        };
        let vs = self
            .heads
            .iter()
            .map(|head| g.matmul_t(mean, false, bound[head.w_v], true))
            .collect::<Result<Vec<_>>>()?;
        out.v = g.concat(&vs, 1)?;
        Ok(out)
    }

    pub fn apply<T: Scalar>(
        &self,
        kind: AttentionKind,
        g: &mut Graph<T>,
        bound: &Bound,
        h: Var,
        mask: &Mask,
    ) -> Result<CtaAttention> {
        match kind {
            AttentionKind::Learned => self.attend(g, bound, h, mask),
            AttentionKind::Uniform => self.attend_uniform(g, bound, h, mask),
        }
    }
}

/// Global self-attention over all `N·m` (channel, time) positions at once.
pub fn flat_global_attention<T: Scalar>(
    g: &mut Graph<T>,
    bound: &Bound,
    h: Var,
    mask: &Mask,
    mhsa: &MhsaParams,
) -> Result<PoolOutput> {
    let [b, n, m, d] = check_input(g, "flat_global_attention", h, mask)?;
    let flat = g.reshape(h, &[b, n * m, d])?;
    mhsa.pool(g, bound, flat, &flat_mask(mask, n))
}

/// Output of a CTA model forward pass.
#[derive(Clone, Debug)]
pub struct CtaForward {
    pub logits: Var,
    pub attention: CtaAttention,
}

/// `N` bidirectional GRU stacks (one per channel), CTA pooling and a
/// classifier. With `rnns` empty the embeddings are attended directly.
#[derive(Clone, Debug)]
pub struct CtaRnnModel {
    pub rnns: Vec<BiGruStack>,
    pub shared: bool,
    pub n_channels: usize,
    pub d_e: usize,
    pub cta: CtaParams,
    pub head: ClassifierHead,
    pub attention: AttentionKind,
}

/// Sizes of a CTA model.
#[derive(Clone, Debug)]
pub struct CtaDims {
    pub n_channels: usize,
    pub d_e: usize,
    /// `None` attends the embeddings directly.
    pub rnn: Option<BiGruConfig>,
    pub share_rnn: bool,
    pub heads: usize,
    pub head_dim: usize,
    pub n_classes: usize,
    pub attention: AttentionKind,
}

impl CtaRnnModel {
    pub fn new<T: Scalar, R: Rng + ?Sized>(ps: &mut ParamSet<T>, dims: &CtaDims, rng: &mut R) -> Self {
        let (rnns, d_h) = match &dims.rnn {
            Some(cfg) => {
                let count = if dims.share_rnn { 1 } else { dims.n_channels };
                let rnns: Vec<BiGruStack> = (0..count)
                    .map(|i| BiGruStack::new(ps, &format!("rnn{i}"), dims.d_e, cfg, rng))
                    .collect();
                (rnns, 2 * cfg.hidden)
            }
            None => (Vec::new(), dims.d_e),
        };
        let cta = CtaParams::new(ps, "cta", d_h, dims.heads, dims.head_dim, rng);
        let head = ClassifierHead::new(ps, "cls", cta.output_dim(), dims.n_classes, rng);
        CtaRnnModel {
            rnns,
            shared: dims.share_rnn,
            n_channels: dims.n_channels,
            d_e: dims.d_e,
            cta,
            head,
            attention: dims.attention,
        }
    }

    /// Per-channel encodings `H` (`B × N × m × d_h`) of `e` (`B × N × m × d_e`).
    pub fn encode<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        e: Var,
        mask: &Mask,
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        let [b, n, m, d] = check_input(g, "cta_rnn_forward", e, mask)?;
        if n != self.n_channels || d != self.d_e {
            return Err(Error::shape(
                "cta_rnn_forward",
                format!("input has {n} channels of width {d}, model expects {} of width {}", self.n_channels, self.d_e),
            ));
        }
        if self.rnns.is_empty() {
            return Ok(e);
        }
        if self.shared {
            let x = g.reshape(e, &[b * n, m, d])?;
            let rows: Vec<usize> = mask.lengths().iter().flat_map(|&l| std::iter::repeat_n(l, n)).collect();
            let h = self.rnns[0].forward(g, bound, x, &Mask::from_lengths(&rows, m), mode)?;
            let dh = g.shape(h)[2];
            return g.reshape(h, &[b, n, m, dh]);
        }
        let mut hs = Vec::with_capacity(n);
        for (c, rnn) in self.rnns.iter().enumerate() {
            let x = g.narrow(e, 1, c, 1)?;
            let x = g.reshape(x, &[b, m, d])?;
            let h = rnn.forward(g, bound, x, mask, mode)?;
            let dh = g.shape(h)[2];
            hs.push(g.reshape(h, &[b, 1, m, dh])?);
        }
        g.concat(&hs, 1)
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        e: Var,
        mask: &Mask,
        mode: &mut Mode<'_>,
    ) -> Result<CtaForward> {
        let h = self.encode(g, bound, e, mask, mode)?;
        let attention = self.cta.apply(self.attention, g, bound, h, mask)?;
        let logits = self.head.logits(g, bound, attention.v)?;
        Ok(CtaForward { logits, attention })
    }
}
