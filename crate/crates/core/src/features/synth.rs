//! Synthetic planted-salience corpus.
//!
//! Every cell of an utterance's `N × m × d_e` embedding stack is standard
//! normal noise. Class `k` adds `signal_scale · u_k` (a unit vector drawn
//! once per class) to channel `c(k)` over one contiguous segment of
//! `salience_len` steps, so both the channel and the time span carrying the
//! label are known.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::manifest::{Manifest, ManifestRecord};
use super::seqf;
use crate::error::{Error, Result};
use crate::par::{self, Execution};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n_classes: usize,
    pub n_channels: usize,
    pub d_e: usize,
    pub seq_len_mean: f64,
    pub seq_len_std: f64,
    pub min_seq_len: usize,
    pub salience_len: usize,
    pub signal_scale: f64,
    pub n_sessions: usize,
    pub speakers_per_session: usize,
    pub utterances_per_speaker: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_classes: 4,
            n_channels: 8,
            d_e: 16,
            seq_len_mean: 28.0,
            seq_len_std: 4.0,
            min_seq_len: 20,
            salience_len: 16,
            signal_scale: 3.0,
            n_sessions: 5,
            speakers_per_session: 2,
            utterances_per_speaker: 200,
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_classes", self.n_classes),
            ("n_channels", self.n_channels),
            ("d_e", self.d_e),
            ("min_seq_len", self.min_seq_len),
            ("salience_len", self.salience_len),
            ("n_sessions", self.n_sessions),
            ("speakers_per_session", self.speakers_per_session),
            ("utterances_per_speaker", self.utterances_per_speaker),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("synth: {name} must be positive")));
            }
        }
        if self.salience_len >= self.min_seq_len {
            return Err(Error::Config(format!(
                "synth: salience_len {} must be below min_seq_len {}",
                self.salience_len, self.min_seq_len
            )));
        }
        if self.n_classes > self.n_channels {
            return Err(Error::Config(format!(
                "synth: {} classes need distinct channels but only {} exist",
                self.n_classes, self.n_channels
            )));
        }
        if !(self.seq_len_mean > 0.0) || !(self.seq_len_std >= 0.0) || !(self.signal_scale >= 0.0) {
            return Err(Error::Config("synth: seq_len_mean > 0, seq_len_std >= 0, signal_scale >= 0 required".into()));
        }
        Ok(())
    }

    pub fn n_speakers(&self) -> usize {
        self.n_sessions * self.speakers_per_session
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.n_classes).map(|k| format!("c{k}")).collect()
    }
}

#[derive(Clone, Debug)]
pub struct SynthUtterance {
    pub id: String,
    pub speaker: String,
    pub session: String,
    pub label: usize,
    pub segment_start: usize,
    /// `N × m × d_e`
    pub embeddings: Tensor<f32>,
}

#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub spec: SynthSpec,
    pub classes: Vec<String>,
    /// `planted_channel[k]` is `c(k)`.
    pub planted_channel: Vec<usize>,
    pub directions: Vec<Vec<f32>>,
    pub utterances: Vec<SynthUtterance>,
}

/// Ground truth written next to the manifest.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SynthTruth {
    pub spec: SynthSpec,
    pub classes: Vec<String>,
    pub planted_channel: Vec<usize>,
    pub segments: Vec<(String, usize)>,
}

fn unit_vector(rng: &mut ChaCha8Rng, d: usize) -> Vec<f32> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.iter().map(|x| (x / norm) as f32).collect();
        }
    }
}

pub fn generate_synth_corpus(spec: &SynthSpec) -> Result<SynthCorpus> {
    generate_with(spec, Execution::available())
}

pub fn generate_with(spec: &SynthSpec, exec: Execution) -> Result<SynthCorpus> {
    spec.validate()?;
    let mut master = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut channels: Vec<usize> = (0..spec.n_channels).collect();
    channels.shuffle(&mut master);
    let planted_channel = channels[..spec.n_classes].to_vec();
    let directions: Vec<Vec<f32>> = (0..spec.n_classes)
        .map(|_| unit_vector(&mut master, spec.d_e))
        .collect();

    let n_speakers = spec.n_speakers();
    let total = n_speakers * spec.utterances_per_speaker;
    let utterances = par::map_range(exec, total, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(i as u64 + 1);
        let speaker = i % n_speakers;
        let label = (i / n_speakers) % spec.n_classes;
        let len_draw: f64 = StandardNormal.sample(&mut rng);
        let m = ((spec.seq_len_mean + spec.seq_len_std * len_draw).round() as i64)
            .max(spec.min_seq_len as i64) as usize;
        let start = rng.gen_range(0..=m - spec.salience_len);
        let (n, d) = (spec.n_channels, spec.d_e);
        let mut data: Vec<f32> = (0..n * m * d)
            .map(|_| StandardNormal.sample(&mut rng))
            .map(|x: f64| x as f32)
            .collect();
        let c = planted_channel[label];
        let scale = spec.signal_scale as f32;
        for t in start..start + spec.salience_len {
            let cell = &mut data[(c * m + t) * d..(c * m + t + 1) * d];
            for (x, u) in cell.iter_mut().zip(&directions[label]) {
                *x += scale * u;
            }
        }
        SynthUtterance {
            id: format!("utt{i:05}"),
            speaker: format!("spk{:02}", speaker + 1),
            session: format!("ses{:02}", speaker / spec.speakers_per_session + 1),
            label,
            segment_start: start,
            embeddings: Tensor::new([n, m, d], data).expect("consistent synth shape"),
        }
    });
    Ok(SynthCorpus {
        spec: spec.clone(),
        classes: spec.class_names(),
        planted_channel,
        directions,
        utterances,
    })
}

impl SynthCorpus {
    pub fn manifest(&self) -> Manifest {
        let records: Vec<ManifestRecord> = self
            .utterances
            .iter()
            .map(|u| ManifestRecord {
                utterance_id: u.id.clone(),
                speaker_id: u.speaker.clone(),
                session_id: u.session.clone(),
                label: self.classes[u.label].clone(),
                spectrogram: None,
                embeddings: Some(format!("emb/{}.seqf", u.id)),
                text: None,
            })
            .collect();
        let lines = (1..=records.len()).collect();
        Manifest {
            root: Default::default(),
            records,
            lines,
        }
    }

    pub fn truth(&self) -> SynthTruth {
        SynthTruth {
            spec: self.spec.clone(),
            classes: self.classes.clone(),
            planted_channel: self.planted_channel.clone(),
            segments: self
                .utterances
                .iter()
                .map(|u| (u.id.clone(), u.segment_start))
                .collect(),
        }
    }

    /// Writes `manifest.jsonl`, `truth.json` and `emb/<id>.seqf` under `dir`.
    pub fn write(&self, dir: &Path, exec: Execution) -> Result<()> {
        let emb = dir.join("emb");
        fs::create_dir_all(&emb).map_err(|e| Error::io(format!("creating {}", emb.display()), e))?;
        par::try_map(exec, &self.utterances, |u| {
            seqf::write_seqf(&emb.join(format!("{}.seqf", u.id)), &u.embeddings)
        })?;
        self.manifest().write(&dir.join("manifest.jsonl"))?;
        let truth = serde_json::to_string_pretty(&self.truth()).expect("truth serialises");
        let p = dir.join("truth.json");
        fs::write(&p, truth).map_err(|e| Error::io(format!("writing {}", p.display()), e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthSpec {
        SynthSpec {
            utterances_per_speaker: 20,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn deterministic_and_execution_independent() {
        let a = generate_with(&small(), Execution::Sequential).unwrap();
        let b = generate_with(&small(), Execution::available()).unwrap();
        for (x, y) in a.utterances.iter().zip(&b.utterances) {
            assert_eq!(x.embeddings, y.embeddings);
        }
        let c = generate_synth_corpus(&SynthSpec { seed: 8, ..small() }).unwrap();
        assert_ne!(a.utterances[0].embeddings.data(), c.utterances[0].embeddings.data());
    }

    #[test]
    fn round_robin_speakers_and_balanced_labels() {
        let c = generate_synth_corpus(&small()).unwrap();
        assert_eq!(c.utterances.len(), 200);
        assert_eq!(c.utterances[0].speaker, "spk01");
        assert_eq!(c.utterances[11].speaker, "spk02");
        assert_eq!(c.utterances[3].session, "ses02");
        let mut counts = vec![0; 4];
        for u in c.utterances.iter().filter(|u| u.speaker == "spk03") {
            counts[u.label] += 1;
        }
        assert_eq!(counts, vec![5, 5, 5, 5]);
        let mut planted = c.planted_channel.clone();
        planted.sort();
        planted.dedup();
        assert_eq!(planted.len(), 4);
    }

    #[test]
    fn spec_violations() {
        assert!(SynthSpec { salience_len: 20, ..small() }.validate().is_err());
        assert!(SynthSpec { n_classes: 9, ..small() }.validate().is_err());
        assert!(SynthSpec { d_e: 0, ..small() }.validate().is_err());
    }
}
