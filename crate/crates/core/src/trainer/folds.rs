use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One leave-one-speaker-out split.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub index: usize,
    pub session: String,
    pub test_speaker: String,
    pub val_speaker: String,
    pub train_sessions: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub folds: Vec<Fold>,
}

/// One fold per speaker: the speaker is tested, the other speaker(s) of the
/// same session validate, all other sessions train.
///
/// `records` yields `(speaker, session)` per utterance. Requires at least
/// two sessions of at least two speakers each, and every speaker in exactly
/// one session.
pub fn plan_folds<'a>(records: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<FoldPlan> {
    let mut sessions: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    let mut speaker_session: BTreeMap<&str, &str> = BTreeMap::new();
    for (spk, ses) in records {
        if let Some(prev) = speaker_session.insert(spk, ses) {
            if prev != ses {
                return Err(Error::Protocol(format!(
                    "speaker `{spk}` appears in sessions `{prev}` and `{ses}`; held-out sessions would leak"
                )));
            }
        }
        sessions.entry(ses).or_default().insert(spk);
    }
    if sessions.len() < 2 {
        return Err(Error::Protocol(format!("need at least 2 sessions, found {}", sessions.len())));
    }
    if let Some((ses, spk)) = sessions.iter().find(|(_, s)| s.len() < 2) {
        return Err(Error::Protocol(format!(
            "session `{ses}` has {} speaker(s); at least 2 are needed",
            spk.len()
        )));
    }
    let mut folds = Vec::new();
    for (&ses, speakers) in &sessions {
        let spk: Vec<&str> = speakers.iter().copied().collect();
        for (i, &test) in spk.iter().enumerate() {
            folds.push(Fold {
                index: folds.len(),
                session: ses.to_string(),
                test_speaker: test.to_string(),
                val_speaker: spk[(i + 1) % spk.len()].to_string(),
                train_sessions: sessions.keys().filter(|&&s| s != ses).map(|s| s.to_string()).collect(),
            });
        }
    }
    let plan = FoldPlan { folds };
    plan.check_leakage(speaker_session.iter().map(|(a, b)| (*a, *b)))?;
    Ok(plan)
}

impl FoldPlan {
    pub fn len(&self) -> usize {
        self.folds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.folds.is_empty()
    }

    /// Fails if any fold trains on a speaker it validates or tests on.
    pub fn check_leakage<'a>(&self, records: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<()> {
        let records: Vec<(&str, &str)> = records.into_iter().collect();
        for f in &self.folds {
            if f.val_speaker == f.test_speaker {
                return Err(Error::Protocol(format!("fold {}: validation and test speaker coincide", f.index)));
            }
            let train: BTreeSet<&str> = records
                .iter()
                .filter(|(_, ses)| f.train_sessions.iter().any(|s| s == ses))
                .map(|(spk, _)| *spk)
                .collect();
            for eval in [&f.val_speaker, &f.test_speaker] {
                if train.contains(eval.as_str()) {
                    return Err(Error::Protocol(format!(
                        "fold {}: speaker `{eval}` is in both training and evaluation",
                        f.index
                    )));
                }
            }
        }
        Ok(())
    }

    /// Utterance indices `(train, val, test)` of fold `k`.
    pub fn split<'a>(
        &self,
        k: usize,
        records: impl IntoIterator<Item = (&'a str, &'a str)>,
    ) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
        let f = &self.folds[k];
        let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
        for (i, (spk, ses)) in records.into_iter().enumerate() {
            if f.train_sessions.iter().any(|s| s == ses) {
                train.push(i);
            } else if spk == f.val_speaker {
                val.push(i);
            } else if spk == f.test_speaker {
                test.push(i);
            }
        }
        (train, val, test)
    }
}
