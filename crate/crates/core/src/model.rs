//! Model configuration and the dispatching [`Model`].

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cta::{AttentionKind, CtaAttention, CtaDims, CtaRnnModel};
use crate::data::{Batch, StreamDims, StreamRef};
use crate::error::{Error, Result};
use crate::fusion::{EfModel, LfModel, RnnBaseline, WfModel};
use crate::layers::{BiGruConfig, Mode};
use crate::params::{Bound, ParamSet};
use crate::tensor::{finite_diff_check, GradCheckReport, Graph, Mask, OpKind, Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Rnn,
    Wf,
    Ef,
    Lf,
    Cta,
    CtaNornn,
}

impl ModelKind {
    pub const ALL: [ModelKind; 6] = [
        ModelKind::Rnn,
        ModelKind::Wf,
        ModelKind::Ef,
        ModelKind::Lf,
        ModelKind::Cta,
        ModelKind::CtaNornn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Rnn => "rnn",
            ModelKind::Wf => "wf",
            ModelKind::Ef => "ef",
            ModelKind::Lf => "lf",
            ModelKind::Cta => "cta",
            ModelKind::CtaNornn => "cta_nornn",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown model `{s}` (expected rnn, wf, ef, lf, cta or cta_nornn)")))
    }
}

/// Architecture record. Defaults follow the full-size recipe: a 2-layer
/// Bi-GRU with 256 units per direction and 8 attention heads of width 64.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub model: ModelKind,
    /// Input streams: `A`, `T`, `E` (stacked blocks) or `E<i>`.
    pub streams: Vec<String>,
    /// 1-based blocks of the stacked `E` stream; empty keeps all.
    pub blocks: Vec<usize>,
    pub hidden: usize,
    pub layers: usize,
    pub dropout: f64,
    pub heads: usize,
    pub head_dim: usize,
    pub attention: AttentionKind,
    /// One GRU stack shared by all channels instead of one per channel.
    pub share_rnn: bool,
    /// Per-utterance normalization of spectrogram features.
    pub normalize: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            model: ModelKind::Cta,
            streams: vec!["E".into()],
            blocks: Vec::new(),
            hidden: 256,
            layers: 2,
            dropout: 0.3,
            heads: 8,
            head_dim: 64,
            attention: AttentionKind::Learned,
            share_rnn: false,
            normalize: false,
        }
    }
}

impl ModelConfig {
    pub fn stream_refs(&self) -> Result<Vec<StreamRef>> {
        self.streams.iter().map(|s| s.parse()).collect()
    }

    pub fn rnn(&self) -> BiGruConfig {
        BiGruConfig {
            layers: self.layers,
            hidden: self.hidden,
            dropout: self.dropout,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let streams = self.stream_refs()?;
        let stacked = streams.iter().filter(|s| **s == StreamRef::Stack).count();
        let fail = |msg: String| Err(Error::Config(format!("model `{}`: {msg}", self.model)));
        match self.model {
            ModelKind::Rnn if streams.len() != 1 || stacked != 0 => {
                return fail("needs exactly one A, T or E<i> stream".into())
            }
            ModelKind::Wf | ModelKind::Ef | ModelKind::Cta | ModelKind::CtaNornn
                if streams != [StreamRef::Stack] =>
            {
                return fail("needs the stacked stream `E`".into())
            }
            ModelKind::Lf if streams.len() < 2 || stacked != 0 => {
                return fail("needs at least two A, T or E<i> streams".into())
            }
            _ => {}
        }
        let positive = [
            ("hidden", self.hidden),
            ("layers", self.layers),
            ("heads", self.heads),
            ("head_dim", self.head_dim),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return fail(format!("`{k}` must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.blocks.contains(&0) {
            return fail("blocks are 1-based".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub enum Model {
    Rnn(RnnBaseline),
    Wf(WfModel),
    Ef(EfModel),
    Lf(LfModel),
    Cta(CtaRnnModel),
}

/// Logits (`B × C`) and, for CTA models, the attention that produced them.
#[derive(Clone, Debug)]
pub struct Forward {
    pub logits: Var,
    pub attention: Option<CtaAttention>,
}

impl Model {
    /// Builds the architecture for inputs of the given extents, drawing
    /// initial parameters from `seed`.
    pub fn build<T: Scalar>(
        cfg: &ModelConfig,
        dims: &[StreamDims],
        n_classes: usize,
        seed: u64,
    ) -> Result<(Model, ParamSet<T>)> {
        cfg.validate()?;
        let streams = cfg.stream_refs()?;
        if dims.len() != streams.len() {
            return Err(Error::Config(format!("{} stream dims for {} streams", dims.len(), streams.len())));
        }
        if n_classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let rnn = cfg.rnn();
        let stack = || -> Result<(usize, usize)> {
            match dims[0].channels {
                Some(n) => Ok((n, dims[0].width)),
                None => Err(Error::Config("stacked stream has no channel axis".into())),
            }
        };
        let model = match cfg.model {
            ModelKind::Rnn => Model::Rnn(RnnBaseline::new(
                &mut ps,
                dims[0].width,
                &rnn,
                cfg.heads,
                cfg.head_dim,
                n_classes,
                &mut rng,
            )),
            ModelKind::Wf => {
                let (n, d) = stack()?;
                Model::Wf(WfModel::new(&mut ps, n, d, &rnn, cfg.heads, cfg.head_dim, n_classes, &mut rng))
            }
            ModelKind::Ef => {
                let (n, d) = stack()?;
                Model::Ef(EfModel::new(&mut ps, n, d, &rnn, cfg.heads, cfg.head_dim, n_classes, &mut rng))
            }
            ModelKind::Lf => {
                let widths: Vec<usize> = dims.iter().map(|d| d.width).collect();
                Model::Lf(LfModel::new(&mut ps, &widths, &rnn, cfg.heads, cfg.head_dim, n_classes, &mut rng)?)
            }
            ModelKind::Cta | ModelKind::CtaNornn => {
                let (n, d) = stack()?;
                let dims = CtaDims {
                    n_channels: n,
                    d_e: d,
                    rnn: (cfg.model == ModelKind::Cta).then_some(rnn),
                    share_rnn: cfg.share_rnn,
                    heads: cfg.heads,
                    head_dim: cfg.head_dim,
                    n_classes,
                    attention: cfg.attention,
                };
                Model::Cta(CtaRnnModel::new(&mut ps, &dims, &mut rng))
            }
        };
        Ok((model, ps))
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        xs: &[Var],
        masks: &[Mask],
        mode: &mut Mode<'_>,
    ) -> Result<Forward> {
        let single = |what: &str| -> Result<()> {
            if xs.len() != 1 || masks.len() != 1 {
                return Err(Error::shape("model", format!("{what} takes one stream, got {}", xs.len())));
            }
            Ok(())
        };
        let logits = match self {
            Model::Rnn(m) => {
                single("rnn")?;
                m.forward(g, bound, xs[0], &masks[0], mode)?
            }
            Model::Wf(m) => {
                single("wf")?;
                m.forward(g, bound, xs[0], &masks[0], mode)?
            }
            Model::Ef(m) => {
                single("ef")?;
                m.forward(g, bound, xs[0], &masks[0], mode)?
            }
            Model::Lf(m) => m.forward(g, bound, xs, masks, mode)?,
            Model::Cta(m) => {
                single("cta")?;
                let out = m.forward(g, bound, xs[0], &masks[0], mode)?;
                return Ok(Forward {
                    logits: out.logits,
                    attention: Some(out.attention),
                });
            }
        };
        Ok(Forward {
            logits,
            attention: None,
        })
    }

    /// Places a batch on `g` and runs [`Model::forward`].
    pub fn forward_batch<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        batch: &Batch,
        mode: &mut Mode<'_>,
    ) -> Result<Forward> {
        let xs: Vec<Var> = batch.inputs.iter().map(|s| g.constant(s.data.cast())).collect();
        let masks: Vec<Mask> = batch.inputs.iter().map(|s| s.mask.clone()).collect();
        self.forward(g, bound, &xs, &masks, mode)
    }
}

/// Sizes of the toy instance used for whole-model gradient checks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ToyDims {
    pub n_channels: usize,
    pub steps: usize,
    pub d_e: usize,
    /// Output width of the recurrent encoder (twice the per-direction units).
    pub d_h: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub n_classes: usize,
}

impl Default for ToyDims {
    fn default() -> Self {
        ToyDims {
            n_channels: 3,
            steps: 5,
            d_e: 4,
            d_h: 8,
            heads: 2,
            head_dim: 4,
            n_classes: 3,
        }
    }
}

/// A small random model, inputs and labels in 64-bit precision.
pub struct Toy {
    pub model: Model,
    pub params: ParamSet<f64>,
    pub inputs: Vec<Tensor<f64>>,
    pub masks: Vec<Mask>,
    pub labels: Vec<usize>,
}

impl Toy {
    /// Two sequences, the second padded, drawn from `seed`. Parameters are
    /// redrawn uniformly in `[-1, 1]` so no gradient sits at rounding level.
    pub fn new(kind: ModelKind, dims: &ToyDims, seed: u64) -> Result<Toy> {
        if !dims.d_h.is_multiple_of(2) || dims.steps < 2 {
            return Err(Error::Config("toy d_h must be even and steps at least 2".into()));
        }
        let cfg = ModelConfig {
            model: kind,
            streams: match kind {
                ModelKind::Rnn => vec!["E1".into()],
                ModelKind::Lf => vec!["E1".into(), "E2".into()],
                _ => vec!["E".into()],
            },
            hidden: dims.d_h / 2,
            heads: dims.heads,
            head_dim: dims.head_dim,
            ..ModelConfig::default()
        };
        let stack = StreamDims {
            channels: Some(dims.n_channels),
            width: dims.d_e,
        };
        let single = StreamDims {
            channels: None,
            width: dims.d_e,
        };
        let stream_dims = match kind {
            ModelKind::Rnn => vec![single],
            ModelKind::Lf => vec![single, single],
            _ => vec![stack],
        };
        let (model, mut params) = Model::build::<f64>(&cfg, &stream_dims, dims.n_classes, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
        for t in params.tensors_mut() {
            t.data_mut().iter_mut().for_each(|x| *x = rng.gen_range(-1.0..1.0));
        }
        let m = dims.steps;
        let lengths = [m, m - 1];
        let (inputs, masks) = match kind {
            ModelKind::Rnn => (
                vec![Tensor::uniform([2, m, dims.d_e], -1.0, 1.0, &mut rng)],
                vec![Mask::from_lengths(&lengths, m)],
            ),
            ModelKind::Lf => (
                vec![
                    Tensor::uniform([2, m, dims.d_e], -1.0, 1.0, &mut rng),
                    Tensor::uniform([2, m + 1, dims.d_e], -1.0, 1.0, &mut rng),
                ],
                vec![Mask::from_lengths(&lengths, m), Mask::from_lengths(&[m - 1, m + 1], m + 1)],
            ),
            _ => (
                vec![Tensor::uniform([2, dims.n_channels, m, dims.d_e], -1.0, 1.0, &mut rng)],
                vec![Mask::from_lengths(&lengths, m)],
            ),
        };
        let labels = vec![rng.gen_range(0..dims.n_classes), rng.gen_range(0..dims.n_classes)];
        Ok(Toy {
            model,
            params,
            inputs,
            masks,
            labels,
        })
    }

    /// Mean cross-entropy with parameters bound to `vars`.
    pub fn loss(&self, g: &mut Graph<f64>, vars: &[Var]) -> Result<Var> {
        let bound = Bound(vars.to_vec());
        let xs: Vec<Var> = self.inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = self.model.forward(g, &bound, &xs, &self.masks, &mut Mode::Eval)?;
        g.cross_entropy(out.logits, &self.labels)
    }

    /// Finite-difference check of every parameter; `fault` scales the
    /// adjoints of one op kind as a negative control.
    pub fn check(&self, eps: f64, fault: Option<(OpKind, f64)>) -> Result<GradCheckReport> {
        finite_diff_check(
            |g, v| {
                if let Some((kind, factor)) = fault {
                    g.inject_fault(kind, factor);
                }
                self.loss(g, v)
            },
            &self.params,
            eps,
        )
    }
}
