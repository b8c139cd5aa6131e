use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{RunConfig, SelectBy};
use super::metrics::{confusion_matrix, uar_from_confusion};
use super::optim::{Adam, PlateauScheduler};
use crate::cta::CtaAttentionOutput;
use crate::data::{collate, plan_batches, Dataset, StreamDims};
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::model::Model;
use crate::par::{self, Execution};
use crate::params::ParamSet;
use crate::tensor::{Graph, Tensor};

/// Loss, predictions and UAR of a model over a set of utterances.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub loss: f64,
    pub labels: Vec<usize>,
    pub preds: Vec<usize>,
    pub confusion: Vec<Vec<u64>>,
    pub uar: f64,
}

/// Inference over `indices` in fixed, length-sorted batches.
pub fn evaluate(
    model: &Model,
    params: &ParamSet<f32>,
    ds: &Dataset,
    indices: &[usize],
    batch_size: usize,
    exec: Execution,
) -> Result<Evaluation> {
    if indices.is_empty() {
        return Err(Error::Config("nothing to evaluate".into()));
    }
    let batches = plan_batches::<ChaCha8Rng>(ds, indices, batch_size, None);
    let per_batch = par::try_map(exec, &batches, |idx| {
        let batch = collate(ds, idx);
        let mut g = Graph::<f32>::new();
        let bound = params.bind_constant(&mut g);
        let out = model.forward_batch(&mut g, &bound, &batch, &mut Mode::Eval)?;
        let loss = g.cross_entropy(out.logits, &batch.labels)?;
        let logits = g.value(out.logits);
        let c = logits.shape()[1];
        let preds: Vec<usize> = logits
            .data()
            .chunks(c)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f32::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
                    .0
            })
            .collect();
        Ok::<_, Error>((g.value(loss).item() as f64 * idx.len() as f64, batch.labels, preds))
    })?;
    let mut loss = 0.0;
    let (mut labels, mut preds) = (Vec::new(), Vec::new());
    for (l, lab, p) in per_batch {
        loss += l;
        labels.extend(lab);
        preds.extend(p);
    }
    let confusion = confusion_matrix(&labels, &preds, ds.classes.len())?;
    Ok(Evaluation {
        loss: loss / indices.len() as f64,
        uar: uar_from_confusion(&confusion)?,
        labels,
        preds,
        confusion,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_uar: f64,
}

/// Parameters selected on validation data, with their training history.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub model: Model,
    pub params: ParamSet<f32>,
    pub stream_dims: Vec<StreamDims>,
    /// 0 means the initial parameters were never improved upon.
    pub best_epoch: usize,
    pub best_metric: f64,
    pub history: Vec<EpochLog>,
}

/// Trains on `train` for `max_epochs`, keeping the parameters of the epoch
/// with the best validation metric. The learning rate follows the plateau
/// rule on validation loss, with the untrained model as the reference.
pub fn train_fold(
    ds: &Dataset,
    train: &[usize],
    val: &[usize],
    cfg: &RunConfig,
    seed: u64,
    progress: &(dyn Fn(&EpochLog) + Sync),
) -> Result<TrainedModel> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Protocol("empty training or validation split".into()));
    }
    let t = &cfg.train;
    let dims = ds.stream_dims()?;
    let (model, mut params) = Model::build::<f32>(&cfg.model, &dims, ds.classes.len(), seed)?;
    let mut adam = Adam::new(&params, t.adam_beta1, t.adam_beta2, t.adam_eps);
    let mut sched = PlateauScheduler::new(t.lr0, t.plateau_patience, t.lr_factor);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let eval = |p: &ParamSet<f32>| evaluate(&model, p, ds, val, t.batch_size, Execution::Sequential);

    let initial = eval(&params)?;
    sched.observe(initial.loss);
    let score = |e: &Evaluation| match t.select_by {
        SelectBy::ValLoss => e.loss,
        SelectBy::ValUar => -e.uar,
    };
    let mut best = (0, score(&initial), params.clone());
    let mut history = Vec::with_capacity(t.max_epochs);
    for epoch in 1..=t.max_epochs {
        let lr = sched.lr();
        let mut total = 0.0;
        for idx in plan_batches(ds, train, t.batch_size, Some(&mut rng)) {
            let batch = collate(ds, &idx);
            let mut g = Graph::<f32>::new();
            let bound = params.bind(&mut g);
            let out = model.forward_batch(&mut g, &bound, &batch, &mut Mode::Train(&mut rng))?;
            let loss = g.cross_entropy(out.logits, &batch.labels)?;
            total += g.value(loss).item() as f64 * idx.len() as f64;
            let mut grads = g.backward(loss)?;
            let grads: Vec<Tensor<f32>> = bound
                .vars()
                .iter()
                .map(|&v| grads.take(v).expect("bound parameters are leaves"))
                .collect();
            adam.step(&mut params, &grads, lr)?;
        }
        if let Model::Wf(wf) = &model {
            let w = wf.weights(&params);
            let sum: f64 = w.iter().sum();
            if (sum - 1.0).abs() > 1e-6 || w.iter().any(|&x| x < 0.0) {
                return Err(Error::Protocol(format!("block weights {w:?} left the simplex")));
            }
        }
        let v = eval(&params)?;
        sched.observe(v.loss);
        let log = EpochLog {
            epoch,
            lr,
            train_loss: total / train.len() as f64,
            val_loss: v.loss,
            val_uar: v.uar,
        };
        progress(&log);
        history.push(log);
        if score(&v) < best.1 {
            best = (epoch, score(&v), params.clone());
        }
    }
    let best_metric = match t.select_by {
        SelectBy::ValLoss => best.1,
        SelectBy::ValUar => -best.1,
    };
    Ok(TrainedModel {
        model,
        params: best.2,
        stream_dims: dims,
        best_epoch: best.0,
        best_metric,
        history,
    })
}

/// Per-utterance CTA attention for `indices`, in the given order. Errors
/// for models without channel/temporal attention.
pub fn attention_maps(
    model: &Model,
    params: &ParamSet<f32>,
    ds: &Dataset,
    indices: &[usize],
    batch_size: usize,
    exec: Execution,
) -> Result<Vec<CtaAttentionOutput>> {
    let chunks: Vec<&[usize]> = indices.chunks(batch_size.max(1)).collect();
    let per_batch = par::try_map(exec, &chunks, |idx| {
        let batch = collate(ds, idx);
        let mut g = Graph::<f32>::new();
        let bound = params.bind_constant(&mut g);
        let out = model.forward_batch(&mut g, &bound, &batch, &mut Mode::Eval)?;
        let att = out
            .attention
            .ok_or_else(|| Error::Config("model has no channel/temporal attention".into()))?;
        let lengths = batch.inputs[0].mask.lengths();
        Ok::<_, Error>(
            (0..idx.len())
                .map(|b| CtaAttentionOutput::extract(&g, &att, b, lengths[b]))
                .collect::<Vec<_>>(),
        )
    })?;
    Ok(per_batch.into_iter().flatten().collect())
}
