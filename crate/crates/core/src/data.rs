//! In-memory datasets built from manifests, and padded mini-batches.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::lmfb::normalize_per_utterance;
use crate::features::synth::SynthCorpus;
use crate::features::{read_seqf, Manifest};
use crate::par::{self, Execution};
use crate::tensor::{Mask, Tensor};

/// One model input drawn from a manifest record.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum StreamRef {
    /// `A`: spectrogram features, `n × d_a`.
    Spectrogram,
    /// `T`: text features, `w × d_t`.
    Text,
    /// `E<i>`: block `i` (1-based) of the embedding stack, `m × d_e`.
    Block(usize),
    /// `E`: the embedding stack, `N × m × d_e`, optionally restricted to a
    /// block selection.
    Stack,
}

impl FromStr for StreamRef {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" => Ok(StreamRef::Spectrogram),
            "T" => Ok(StreamRef::Text),
            "E" => Ok(StreamRef::Stack),
            _ => match s.strip_prefix('E').map(str::parse::<usize>) {
                Some(Ok(i)) if i >= 1 => Ok(StreamRef::Block(i)),
                _ => Err(Error::Config(format!("unknown stream `{s}` (expected A, T, E or E<block>)"))),
            },
        }
    }
}

impl fmt::Display for StreamRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StreamRef::Spectrogram => write!(f, "A"),
            StreamRef::Text => write!(f, "T"),
            StreamRef::Block(i) => write!(f, "E{i}"),
            StreamRef::Stack => write!(f, "E"),
        }
    }
}

/// Per-utterance extents of a loaded stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamDims {
    /// Channel count for stacked streams.
    pub channels: Option<usize>,
    pub width: usize,
}

#[derive(Clone, Debug)]
pub struct Utterance {
    pub id: String,
    pub speaker: String,
    pub session: String,
    pub label: usize,
    /// One tensor per configured stream: `len × d` or `N × len × d`.
    pub streams: Vec<Tensor<f32>>,
}

impl Utterance {
    /// Number of time steps of stream `s`.
    pub fn len(&self, s: usize) -> usize {
        let t = &self.streams[s];
        t.shape()[t.ndim() - 2]
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub classes: Vec<String>,
    pub streams: Vec<StreamRef>,
    pub utterances: Vec<Utterance>,
}

/// Options controlling how manifest files become stream tensors.
#[derive(Clone, Debug, Default)]
pub struct LoadOptions {
    /// 1-based blocks kept for the stacked `E` stream; empty keeps all.
    pub blocks: Vec<usize>,
    /// Per-utterance mean/variance normalization of spectrogram features.
    pub normalize: bool,
}

fn load_stream(manifest: &Manifest, i: usize, s: &StreamRef, opts: &LoadOptions) -> Result<Tensor<f32>> {
    let rec = &manifest.records[i];
    let (field, rel) = match s {
        StreamRef::Spectrogram => ("spectrogram", &rec.spectrogram),
        StreamRef::Text => ("text", &rec.text),
        StreamRef::Block(_) | StreamRef::Stack => ("embeddings", &rec.embeddings),
    };
    let rel = rel.as_deref().ok_or_else(|| {
        Error::Config(format!(
            "utterance `{}` (line {}) has no {field} file for stream {s}",
            rec.utterance_id, manifest.lines[i]
        ))
    })?;
    let path = manifest.resolve(rel);
    let t = read_seqf(&path)?;
    let bad = |what: &str| Error::Format {
        path: path.clone(),
        offset: 8,
        detail: format!("stream {s} expects {what}, file has shape {:?}", t.shape()),
    };
    match s {
        StreamRef::Spectrogram | StreamRef::Text => {
            if t.ndim() != 2 {
                return Err(bad("a rank-2 tensor"));
            }
            let mut t = t;
            if matches!(s, StreamRef::Spectrogram) && opts.normalize {
                normalize_per_utterance(&mut t);
            }
            Ok(t)
        }
        StreamRef::Block(b) => {
            if t.ndim() != 3 || *b > t.shape()[0] {
                return Err(bad(&format!("a rank-3 stack with at least {b} blocks")));
            }
            let one = t.index_first(b - 1);
            Ok(one)
        }
        StreamRef::Stack => {
            if t.ndim() != 3 {
                return Err(bad("a rank-3 stack"));
            }
            if opts.blocks.is_empty() {
                return Ok(t);
            }
            if let Some(&b) = opts.blocks.iter().find(|&&b| b == 0 || b > t.shape()[0]) {
                return Err(bad(&format!("block {b} to exist")));
            }
            let parts: Vec<Tensor<f32>> = opts.blocks.iter().map(|&b| t.index_first(b - 1)).collect();
            Tensor::stack(&parts)
        }
    }
}

impl Dataset {
    /// Reads every stream of every record. Labels must be in `classes`.
    pub fn load(
        manifest: &Manifest,
        classes: &[String],
        streams: &[StreamRef],
        opts: &LoadOptions,
        exec: Execution,
    ) -> Result<Dataset> {
        if streams.is_empty() {
            return Err(Error::Config("no input streams configured".into()));
        }
        let indices: Vec<usize> = (0..manifest.records.len()).collect();
        let utterances = par::try_map(exec, &indices, |&i| {
            let rec = &manifest.records[i];
            let label = classes.iter().position(|c| *c == rec.label).ok_or_else(|| {
                Error::Config(format!("line {}: label `{}` not in class set", manifest.lines[i], rec.label))
            })?;
            let tensors = streams
                .iter()
                .map(|s| load_stream(manifest, i, s, opts))
                .collect::<Result<Vec<_>>>()?;
            Ok::<_, Error>(Utterance {
                id: rec.utterance_id.clone(),
                speaker: rec.speaker_id.clone(),
                session: rec.session_id.clone(),
                label,
                streams: tensors,
            })
        })?;
        let ds = Dataset {
            classes: classes.to_vec(),
            streams: streams.to_vec(),
            utterances,
        };
        ds.stream_dims()?;
        Ok(ds)
    }

    /// In-memory dataset over a synthetic corpus, with the stacked
    /// embeddings as its single stream.
    pub fn from_synth(corpus: &SynthCorpus) -> Dataset {
        Dataset {
            classes: corpus.classes.clone(),
            streams: vec![StreamRef::Stack],
            utterances: corpus
                .utterances
                .iter()
                .map(|u| Utterance {
                    id: u.id.clone(),
                    speaker: u.speaker.clone(),
                    session: u.session.clone(),
                    label: u.label,
                    streams: vec![u.embeddings.clone()],
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    /// Extents shared by every utterance, per stream.
    pub fn stream_dims(&self) -> Result<Vec<StreamDims>> {
        let first = self
            .utterances
            .first()
            .ok_or_else(|| Error::Config("dataset is empty".into()))?;
        let dims_of = |t: &Tensor<f32>| StreamDims {
            channels: (t.ndim() == 3).then(|| t.shape()[0]),
            width: t.shape()[t.ndim() - 1],
        };
        let dims: Vec<StreamDims> = first.streams.iter().map(dims_of).collect();
        for u in &self.utterances {
            for (s, (t, want)) in u.streams.iter().zip(&dims).enumerate() {
                if dims_of(t) != *want {
                    return Err(Error::Config(format!(
                        "utterance `{}` stream {}: shape {:?} inconsistent with {want:?}",
                        u.id,
                        self.streams[s],
                        t.shape()
                    )));
                }
            }
        }
        Ok(dims)
    }

    /// Combines two datasets over the same utterances stream-wise.
    ///
    /// Both must contain exactly the same utterance ids with the same
    /// labels; `other` is reordered to match `self`.
    pub fn zip(mut self, other: Dataset) -> Result<Dataset> {
        if self.classes != other.classes {
            return Err(Error::Config("datasets use different class sets".into()));
        }
        let mine: BTreeSet<&str> = self.utterances.iter().map(|u| u.id.as_str()).collect();
        let theirs: BTreeSet<&str> = other.utterances.iter().map(|u| u.id.as_str()).collect();
        if mine != theirs || mine.len() != self.len() || theirs.len() != other.len() {
            let missing: Vec<&&str> = mine.symmetric_difference(&theirs).take(5).collect();
            return Err(Error::Config(format!(
                "streams cover different utterance ids (e.g. {missing:?})"
            )));
        }
        let mut by_id: std::collections::HashMap<String, Utterance> =
            other.utterances.into_iter().map(|u| (u.id.clone(), u)).collect();
        for u in &mut self.utterances {
            let o = by_id.remove(&u.id).expect("id sets are equal");
            if o.label != u.label || o.speaker != u.speaker || o.session != u.session {
                return Err(Error::Config(format!("utterance `{}` metadata differs between streams", u.id)));
            }
            u.streams.extend(o.streams);
        }
        self.streams.extend(other.streams);
        self.stream_dims()?;
        Ok(self)
    }

    pub fn labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.utterances[i].label).collect()
    }
}

/// A padded mini-batch.
#[derive(Clone, Debug)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub labels: Vec<usize>,
    pub inputs: Vec<StreamBatch>,
}

/// `B × len × d` (or `B × N × len × d`) zero-padded data and its `B × len` mask.
#[derive(Clone, Debug)]
pub struct StreamBatch {
    pub data: Tensor<f32>,
    pub mask: Mask,
}

/// Pads the selected utterances into one batch.
pub fn collate(ds: &Dataset, indices: &[usize]) -> Batch {
    let inputs = (0..ds.streams.len())
        .map(|s| {
            let lengths: Vec<usize> = indices.iter().map(|&i| ds.utterances[i].len(s)).collect();
            let max_len = *lengths.iter().max().expect("non-empty batch");
            let sample = &ds.utterances[indices[0]].streams[s];
            let (channels, width) = if sample.ndim() == 3 {
                (sample.shape()[0], sample.shape()[2])
            } else {
                (1, sample.shape()[1])
            };
            let mut data = vec![0f32; indices.len() * channels * max_len * width];
            for (b, &i) in indices.iter().enumerate() {
                let t = &ds.utterances[i].streams[s];
                let len = lengths[b];
                for c in 0..channels {
                    let src = &t.data()[c * len * width..(c + 1) * len * width];
                    let dst = (b * channels + c) * max_len * width;
                    data[dst..dst + len * width].copy_from_slice(src);
                }
            }
            let shape = if sample.ndim() == 3 {
                vec![indices.len(), channels, max_len, width]
            } else {
                vec![indices.len(), max_len, width]
            };
            StreamBatch {
                data: Tensor::new(shape, data).expect("sizes computed above"),
                mask: Mask::from_lengths(&lengths, max_len),
            }
        })
        .collect();
    Batch {
        indices: indices.to_vec(),
        labels: ds.labels(indices),
        inputs,
    }
}

/// Groups `indices` into batches of similar first-stream length.
///
/// With an RNG, ties are broken randomly and the batch order is shuffled;
/// without one the grouping is a pure function of the lengths.
pub fn plan_batches<R: Rng + ?Sized>(
    ds: &Dataset,
    indices: &[usize],
    batch_size: usize,
    rng: Option<&mut R>,
) -> Vec<Vec<usize>> {
    let mut order = indices.to_vec();
    let shuffle = rng.is_some();
    let mut rng = rng;
    if let Some(r) = rng.as_deref_mut() {
        order.shuffle(r);
    }
    order.sort_by_key(|&i| ds.utterances[i].len(0));
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
    if shuffle {
        if let Some(r) = rng {
            batches.shuffle(r);
        }
    }
    batches
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::synth::{generate_synth_corpus, SynthSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> (tempfile::TempDir, Manifest, Vec<String>) {
        let spec = SynthSpec {
            n_sessions: 2,
            utterances_per_speaker: 3,
            ..SynthSpec::default()
        };
        let corpus = generate_synth_corpus(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        corpus.write(dir.path(), Execution::Sequential).unwrap();
        let m = crate::features::manifest::parse_manifest(&dir.path().join("manifest.jsonl")).unwrap();
        (dir, m, corpus.classes)
    }

    #[test]
    fn stream_names_roundtrip() {
        for s in ["A", "T", "E", "E6", "E12"] {
            assert_eq!(s.parse::<StreamRef>().unwrap().to_string(), s);
        }
        for s in ["E0", "X", "Ex", ""] {
            assert!(s.parse::<StreamRef>().is_err());
        }
    }

    #[test]
    fn block_selection_and_stack() {
        let (_d, m, classes) = small();
        let opts = LoadOptions {
            blocks: vec![2, 5],
            normalize: false,
        };
        let streams = vec![StreamRef::Stack, StreamRef::Block(5)];
        let ds = Dataset::load(&m, &classes, &streams, &opts, Execution::Sequential).unwrap();
        let dims = ds.stream_dims().unwrap();
        assert_eq!(dims[0], StreamDims { channels: Some(2), width: 16 });
        assert_eq!(dims[1], StreamDims { channels: None, width: 16 });
        let u = &ds.utterances[0];
        assert_eq!(u.streams[0].index_first(1), u.streams[1]);
        assert!(Dataset::load(&m, &classes, &[StreamRef::Text], &opts, Execution::Sequential).is_err());
        assert!(Dataset::load(&m, &classes, &[StreamRef::Block(9)], &opts, Execution::Sequential).is_err());
    }

    #[test]
    fn collate_pads_and_masks() {
        let (_d, m, classes) = small();
        let ds = Dataset::load(&m, &classes, &[StreamRef::Stack], &LoadOptions::default(), Execution::Sequential)
            .unwrap();
        let idx = [0, 1, 2];
        let b = collate(&ds, &idx);
        let lens: Vec<usize> = idx.iter().map(|&i| ds.utterances[i].len(0)).collect();
        assert_eq!(b.inputs[0].mask.lengths(), lens);
        let max = *lens.iter().max().unwrap();
        assert_eq!(b.inputs[0].data.shape(), &[3, 8, max, 16]);
        for (bi, &i) in idx.iter().enumerate() {
            let u = &ds.utterances[i].streams[0];
            for c in 0..8 {
                for t in 0..max {
                    for k in 0..16 {
                        let got = b.inputs[0].data.at(&[bi, c, t, k]);
                        let want = if t < lens[bi] { u.at(&[c, t, k]) } else { 0.0 };
                        assert_eq!(got, want);
                    }
                }
            }
        }
    }

    #[test]
    fn batches_partition_and_group_by_length() {
        let (_d, m, classes) = small();
        let ds = Dataset::load(&m, &classes, &[StreamRef::Block(1)], &LoadOptions::default(), Execution::Sequential)
            .unwrap();
        let idx: Vec<usize> = (0..ds.len()).collect();
        let plain = plan_batches::<ChaCha8Rng>(&ds, &idx, 4, None);
        let mut flat: Vec<usize> = plain.concat();
        for w in plain.concat().windows(2) {
            assert!(ds.utterances[w[0]].len(0) <= ds.utterances[w[1]].len(0));
        }
        flat.sort();
        assert_eq!(flat, idx);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut shuffled: Vec<usize> = plan_batches(&ds, &idx, 4, Some(&mut rng)).concat();
        shuffled.sort();
        assert_eq!(shuffled, idx);
    }

    #[test]
    fn zip_requires_matching_ids() {
        let (_d, m, classes) = small();
        let load = |m: &Manifest, s: StreamRef| {
            Dataset::load(m, &classes, &[s], &LoadOptions::default(), Execution::Sequential).unwrap()
        };
        let a = load(&m, StreamRef::Block(1));
        let b = load(&m, StreamRef::Block(2));
        let z = a.clone().zip(b).unwrap();
        assert_eq!(z.streams.len(), 2);
        let mut short = m.clone();
        short.records.pop();
        short.lines.pop();
        let c = load(&short, StreamRef::Block(2));
        assert!(a.zip(c).is_err());
    }
}
