use std::path::Path;

use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::{RunConfig, SelectBy};
use super::folds::{plan_folds, Fold, FoldPlan};
use super::train::{evaluate, train_fold, EpochLog, TrainedModel};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::par::{self, Execution};

/// How classes missing from an evaluation set enter the UAR.
pub const UAR_POLICY: &str = "classes absent from the evaluated labels are excluded from the UAR mean";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub index: usize,
    pub name: String,
    pub fold: Option<Fold>,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub best_epoch: Option<usize>,
    pub best_metric: Option<f64>,
    pub confusion: Vec<Vec<u64>>,
    pub uar: f64,
    pub history: Vec<EpochLog>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `cv` for cross-validation, `cross` for evaluation of saved models.
    pub kind: String,
    pub classes: Vec<String>,
    pub folds: Vec<FoldReport>,
    pub mean_uar: f64,
    /// Population standard deviation over folds.
    pub std_uar: f64,
    pub uar_policy: String,
    pub seed: u64,
    pub model: String,
    pub selected_by: SelectBy,
}

impl EvalReport {
    fn new(kind: &str, cfg: &RunConfig, classes: &[String], folds: Vec<FoldReport>) -> Self {
        let n = folds.len() as f64;
        let mean = folds.iter().map(|f| f.uar).sum::<f64>() / n;
        let var = folds.iter().map(|f| (f.uar - mean).powi(2)).sum::<f64>() / n;
        EvalReport {
            kind: kind.into(),
            classes: classes.to_vec(),
            folds,
            mean_uar: mean,
            std_uar: var.sqrt(),
            uar_policy: UAR_POLICY.into(),
            seed: cfg.train.seed,
            model: cfg.model.model.to_string(),
            selected_by: cfg.train.select_by,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data")
    }
}

pub struct CvOutcome {
    pub plan: FoldPlan,
    pub report: EvalReport,
    pub models: Vec<TrainedModel>,
    /// Test utterance indices per fold.
    pub test_sets: Vec<Vec<usize>>,
}

/// Leave-one-speaker-out cross-validation. Folds run in parallel under
/// `exec`; fold `k` is seeded with `seed + k`, so results do not depend on
/// the execution mode.
pub fn run_cv(
    ds: &Dataset,
    cfg: &RunConfig,
    exec: Execution,
    progress: &(dyn Fn(usize, &EpochLog) + Sync),
) -> Result<CvOutcome> {
    cfg.validate()?;
    if ds.classes != cfg.train.classes {
        return Err(Error::Config("dataset classes differ from the configured class list".into()));
    }
    let records = || ds.utterances.iter().map(|u| (u.speaker.as_str(), u.session.as_str()));
    let plan = plan_folds(records())?;
    let folds: Vec<usize> = (0..plan.len()).collect();
    let results = par::try_map(exec, &folds, |&k| {
        let (train, val, test) = plan.split(k, records());
        let seed = cfg.train.seed.wrapping_add(k as u64);
        let trained = train_fold(ds, &train, &val, cfg, seed, &|log| progress(k, log))?;
        let eval = evaluate(&trained.model, &trained.params, ds, &test, cfg.train.batch_size, Execution::Sequential)?;
        let f = &plan.folds[k];
        let report = FoldReport {
            index: k,
            name: format!("fold{k:02} test={}", f.test_speaker),
            fold: Some(f.clone()),
            n_train: train.len(),
            n_val: val.len(),
            n_test: test.len(),
            best_epoch: Some(trained.best_epoch),
            best_metric: Some(trained.best_metric),
            confusion: eval.confusion,
            uar: eval.uar,
            history: trained.history.clone(),
        };
        Ok::<_, Error>((report, trained, test))
    })?;
    let mut reports = Vec::new();
    let mut models = Vec::new();
    let mut test_sets = Vec::new();
    for (r, m, t) in results {
        reports.push(r);
        models.push(m);
        test_sets.push(t);
    }
    Ok(CvOutcome {
        report: EvalReport::new("cv", cfg, &ds.classes, reports),
        plan,
        models,
        test_sets,
    })
}

/// Saves every fold's selected model under `dir/foldNN`.
pub fn save_checkpoints(outcome: &CvOutcome, cfg: &RunConfig, dir: &Path) -> Result<()> {
    for (k, m) in outcome.models.iter().enumerate() {
        Checkpoint::save(&dir.join(format!("fold{k:02}")), m, cfg, Some(&outcome.plan.folds[k]))?;
    }
    Ok(())
}

/// Evaluates each checkpoint on all of `ds` and averages the UARs.
pub fn cross_eval(checkpoints: &[Checkpoint], ds: &Dataset, exec: Execution) -> Result<EvalReport> {
    let first = checkpoints
        .first()
        .ok_or_else(|| Error::Config("no checkpoints to evaluate".into()))?;
    let all: Vec<usize> = (0..ds.len()).collect();
    let dims = ds.stream_dims()?;
    let reports = par::try_map(exec, &(0..checkpoints.len()).collect::<Vec<_>>(), |&k| {
        let c = &checkpoints[k];
        if c.meta.classes != ds.classes {
            return Err(Error::Config(format!(
                "{}: label set {:?} differs from the evaluation corpus {:?}",
                c.dir.display(),
                c.meta.classes,
                ds.classes
            )));
        }
        if c.meta.stream_dims != dims {
            return Err(Error::Config(format!(
                "{}: trained on inputs {:?}, corpus provides {:?}",
                c.dir.display(),
                c.meta.stream_dims,
                dims
            )));
        }
        let e = evaluate(&c.model, &c.params, ds, &all, c.config.train.batch_size, Execution::Sequential)?;
        Ok(FoldReport {
            index: k,
            name: c.dir.display().to_string(),
            fold: c.meta.fold.clone(),
            n_train: 0,
            n_val: 0,
            n_test: all.len(),
            best_epoch: Some(c.meta.epoch),
            best_metric: Some(c.meta.metric),
            confusion: e.confusion,
            uar: e.uar,
            history: Vec::new(),
        })
    })?;
    Ok(EvalReport::new("cross", &first.config, &ds.classes, reports))
}
