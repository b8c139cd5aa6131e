//! Single-stream and fusion baselines.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{BiGruConfig, BiGruStack, ClassifierHead, MhsaParams, Mode};
use crate::params::{Bound, ParamId, ParamSet};
use crate::tensor::{Graph, Mask, Scalar, Var};

/// Bidirectional GRU encoder followed by multi-head attention pooling.
#[derive(Clone, Debug)]
pub struct RnnMhsaEncoder {
    pub rnn: BiGruStack,
    pub mhsa: MhsaParams,
}

impl RnnMhsaEncoder {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamSet<T>,
        prefix: &str,
        d_in: usize,
        rnn: &BiGruConfig,
        heads: usize,
        head_dim: usize,
        rng: &mut R,
    ) -> Self {
        let rnn = BiGruStack::new(ps, &format!("{prefix}.rnn"), d_in, rnn, rng);
        let mhsa = MhsaParams::new(ps, &format!("{prefix}.mhsa"), rnn.output_dim(), heads, head_dim, rng);
        RnnMhsaEncoder { rnn, mhsa }
    }

    pub fn output_dim(&self) -> usize {
        self.mhsa.output_dim()
    }

    /// `x` (`B × m × d`) to a pooled `B × n_α·d_α` vector.
    pub fn encode<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        x: Var,
        mask: &Mask,
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        let h = self.rnn.forward(g, bound, x, mask, mode)?;
        Ok(self.mhsa.pool(g, bound, h, mask)?.v)
    }
}

/// RNN-MHSA classifier over one stream.
#[derive(Clone, Debug)]
pub struct RnnBaseline {
    pub encoder: RnnMhsaEncoder,
    pub head: ClassifierHead,
}

impl RnnBaseline {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamSet<T>,
        d_in: usize,
        rnn: &BiGruConfig,
        heads: usize,
        head_dim: usize,
        n_classes: usize,
        rng: &mut R,
    ) -> Self {
        let encoder = RnnMhsaEncoder::new(ps, "enc", d_in, rnn, heads, head_dim, rng);
        let head = ClassifierHead::new(ps, "cls", encoder.output_dim(), n_classes, rng);
        RnnBaseline { encoder, head }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        x: Var,
        mask: &Mask,
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        let v = self.encoder.encode(g, bound, x, mask, mode)?;
        self.head.logits(g, bound, v)
    }
}

fn stack_dims<T: Scalar>(g: &Graph<T>, op: &'static str, e: Var) -> Result<[usize; 4]> {
    let s = g.shape(e);
    match s[..] {
        [b, n, m, d] => Ok([b, n, m, d]),
        _ => Err(Error::shape(op, format!("input {s:?} must be B×N×m×d"))),
    }
}

/// `Σ_i softmax(λ)_i · E⁽ⁱ⁾`: `e` is `B × N × m × d`, `lambda` has `N` entries.
pub fn wf_fuse<T: Scalar>(g: &mut Graph<T>, lambda: Var, e: Var) -> Result<Var> {
    let [b, n, m, d] = stack_dims(g, "wf_fuse", e)?;
    if g.shape(lambda) != [n] {
        return Err(Error::shape("wf_fuse", format!("{:?} logits for {n} blocks", g.shape(lambda))));
    }
    let w = g.softmax(lambda, None)?;
    let w = g.broadcast(w, &[b])?;
    let w = g.reshape(w, &[b, 1, n])?;
    let flat = g.reshape(e, &[b, n, m * d])?;
    let fused = g.bmm(w, flat)?;
    g.reshape(fused, &[b, m, d])
}

/// Concatenates the blocks of `e` (`B × N × m × d`) along features: `B × m × N·d`.
pub fn ef_fuse<T: Scalar>(g: &mut Graph<T>, e: Var) -> Result<Var> {
    let [b, n, m, d] = stack_dims(g, "ef_fuse", e)?;
    let p = g.permute(e, &[0, 2, 1, 3])?;
    g.reshape(p, &[b, m, n * d])
}

/// Weighted fusion: learned convex combination of blocks, then RNN-MHSA.
#[derive(Clone, Debug)]
pub struct WfModel {
    pub lambda: ParamId,
    pub n_blocks: usize,
    pub inner: RnnBaseline,
}

impl WfModel {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamSet<T>,
        n_blocks: usize,
        d_e: usize,
        rnn: &BiGruConfig,
        heads: usize,
        head_dim: usize,
        n_classes: usize,
        rng: &mut R,
    ) -> Self {
        let lambda = ps.add_zeros("wf.lambda", &[n_blocks]);
        let inner = RnnBaseline::new(ps, d_e, rnn, heads, head_dim, n_classes, rng);
        WfModel {
            lambda,
            n_blocks,
            inner,
        }
    }

    /// Current block weights `softmax(λ)`.
    pub fn weights<T: Scalar>(&self, ps: &ParamSet<T>) -> Vec<f64> {
        let l: Vec<f64> = ps.get(self.lambda).data().iter().map(|x| x.as_f64()).collect();
        let max = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = l.iter().map(|x| (x - max).exp()).sum();
        l.iter().map(|x| (x - max).exp() / z).collect()
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        e: Var,
        mask: &Mask,
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        let x = wf_fuse(g, bound[self.lambda], e)?;
        self.inner.forward(g, bound, x, mask, mode)
    }
}

/// Early fusion: feature-axis concatenation of blocks, then RNN-MHSA.
#[derive(Clone, Debug)]
pub struct EfModel {
    pub n_blocks: usize,
    pub inner: RnnBaseline,
}

impl EfModel {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamSet<T>,
        n_blocks: usize,
        d_e: usize,
        rnn: &BiGruConfig,
        heads: usize,
        head_dim: usize,
        n_classes: usize,
        rng: &mut R,
    ) -> Self {
        let inner = RnnBaseline::new(ps, n_blocks * d_e, rnn, heads, head_dim, n_classes, rng);
        EfModel { n_blocks, inner }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        e: Var,
        mask: &Mask,
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        let x = ef_fuse(g, e)?;
        self.inner.forward(g, bound, x, mask, mode)
    }
}

/// Late fusion: one RNN-MHSA encoder per stream, pooled vectors
/// concatenated into the classifier. Streams keep their own masks, so they
/// need not be time-aligned.
#[derive(Clone, Debug)]
pub struct LfModel {
    pub encoders: Vec<RnnMhsaEncoder>,
    pub head: ClassifierHead,
}

impl LfModel {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamSet<T>,
        widths: &[usize],
        rnn: &BiGruConfig,
        heads: usize,
        head_dim: usize,
        n_classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Config(format!("late fusion needs at least 2 streams, got {}", widths.len())));
        }
        let encoders: Vec<RnnMhsaEncoder> = widths
            .iter()
            .enumerate()
            .map(|(s, &d)| RnnMhsaEncoder::new(ps, &format!("s{s}"), d, rnn, heads, head_dim, rng))
            .collect();
        let total = encoders.iter().map(RnnMhsaEncoder::output_dim).sum();
        let head = ClassifierHead::new(ps, "cls", total, n_classes, rng);
        Ok(LfModel { encoders, head })
    }

    /// Two-stream late fusion.
    pub fn bimodal<T: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamSet<T>,
        d_x: usize,
        d_y: usize,
        rnn: &BiGruConfig,
        heads: usize,
        head_dim: usize,
        n_classes: usize,
        rng: &mut R,
    ) -> Self {
        Self::new(ps, &[d_x, d_y], rnn, heads, head_dim, n_classes, rng).expect("two streams")
    }

    /// Concatenated pooled vectors, `B × Σ n_α·d_α`.
    pub fn pooled<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        xs: &[Var],
        masks: &[Mask],
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        if xs.len() != self.encoders.len() || masks.len() != xs.len() {
            return Err(Error::shape(
                "lf_fuse",
                format!("{} inputs for {} streams", xs.len(), self.encoders.len()),
            ));
        }
        let vs = self
            .encoders
            .iter()
            .zip(xs.iter().zip(masks))
            .map(|(enc, (&x, m))| enc.encode(g, bound, x, m, mode))
            .collect::<Result<Vec<_>>>()?;
        g.concat(&vs, 1)
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        xs: &[Var],
        masks: &[Mask],
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        let v = self.pooled(g, bound, xs, masks, mode)?;
        self.head.logits(g, bound, v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rnn() -> BiGruConfig {
        BiGruConfig {
            layers: 1,
            hidden: 3,
            dropout: 0.3,
        }
    }

    #[test]
    fn equal_logits_average_blocks() {
        let e = Tensor::<f64>::uniform([2, 3, 4, 5], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(0));
        let mut g = Graph::new();
        let ev = g.constant(e.clone());
        let l = g.constant(Tensor::zeros([3]));
        let f = wf_fuse(&mut g, l, ev).unwrap();
        let mut gm = Graph::new();
        let ev = gm.constant(e);
        let mean = gm.mean_axis(ev, 1, None).unwrap();
        assert!(g.value(f).max_abs_diff(gm.value(mean)) < 1e-12);
    }

    #[test]
    fn saturated_logit_selects_block() {
        let e = Tensor::<f64>::uniform([1, 3, 2, 2], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let mut g = Graph::new();
        let ev = g.constant(e.clone());
        let l = g.constant(Tensor::new([3], vec![0.0, 60.0, 0.0]).unwrap());
        let f = wf_fuse(&mut g, l, ev).unwrap();
        let block = e.index_first(0).index_first(1);
        assert!(g.value(f).data().iter().zip(block.data()).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn early_fusion_slices_recover_blocks() {
        let e = Tensor::<f32>::uniform([2, 3, 4, 5], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        let mut g = Graph::new();
        let ev = g.constant(e.clone());
        let f = ef_fuse(&mut g, ev).unwrap();
        assert_eq!(g.shape(f), &[2, 4, 15]);
        for k in 0..3 {
            let s = g.narrow(f, 2, k * 5, 5).unwrap();
            for b in 0..2 {
                assert_eq!(g.value(s).index_first(b), e.index_first(b).index_first(k));
            }
        }
    }

    #[test]
    fn late_fusion_needs_two_streams() {
        let mut ps = ParamSet::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(LfModel::new(&mut ps, &[4], &rnn(), 2, 2, 4, &mut rng).is_err());
    }

    #[test]
    fn zeroed_stream_acts_only_through_its_columns() {
        let mut ps = ParamSet::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let lf = LfModel::bimodal(&mut ps, 3, 5, &rnn(), 2, 2, 4, &mut rng);
        let xa = Tensor::<f64>::uniform([2, 4, 3], -1.0, 1.0, &mut rng);
        let xb = Tensor::<f64>::uniform([2, 6, 5], -1.0, 1.0, &mut rng);
        let masks = [Mask::from_lengths(&[4, 2], 4), Mask::from_lengths(&[6, 5], 6)];
        let mut g = Graph::new();
        let b = ps.bind_constant(&mut g);
        let (va, vb) = (g.constant(xa), g.constant(xb));
        let v = lf.pooled(&mut g, &b, &[va, vb], &masks, &mut Mode::Eval).unwrap();
        assert_eq!(g.shape(v), &[2, 8]);
        let logits = lf.head.logits(&mut g, &b, v).unwrap();
        // logits − (stream-0 part of v)·W[0..4] equals the head applied to v with stream 0 zeroed
        let vv = g.value(v).clone();
        let w = ps.get(lf.head.w).clone();
        let bias = ps.get(lf.head.b).clone();
        for r in 0..2 {
            for c in 0..4 {
                let full: f64 = (0..8).map(|i| vv.at(&[r, i]) * w.at(&[i, c])).sum::<f64>() + bias.data()[c];
                let zeroed: f64 = (4..8).map(|i| vv.at(&[r, i]) * w.at(&[i, c])).sum::<f64>() + bias.data()[c];
                let part: f64 = (0..4).map(|i| vv.at(&[r, i]) * w.at(&[i, c])).sum();
                assert!((g.value(logits).at(&[r, c]) - full).abs() < 1e-12);
                assert!((full - part - zeroed).abs() < 1e-12);
            }
        }
    }
}
