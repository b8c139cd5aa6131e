//! Feature frontend and on-disk formats.

pub mod lmfb;
pub mod manifest;
pub mod seqf;
pub mod synth;
pub mod wav;

pub use lmfb::{extract_lmfb, LmfbConfig, MelFilterbank};
pub use manifest::{load_manifest, Manifest, ManifestRecord, ValidationReport};
pub use seqf::{read_seqf, write_seqf};
pub use synth::{generate_synth_corpus, SynthCorpus, SynthSpec};
