//! JSON Lines dataset manifests.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::seqf;
use crate::error::{Error, Result};

/// One manifest line. Stream paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub utterance_id: String,
    pub speaker_id: String,
    pub session_id: String,
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spectrogram: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embeddings: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

impl ManifestRecord {
    pub fn stream_paths(&self) -> impl Iterator<Item = (&'static str, &str)> {
        [
            ("spectrogram", self.spectrogram.as_deref()),
            ("embeddings", self.embeddings.as_deref()),
            ("text", self.text.as_deref()),
        ]
        .into_iter()
        .filter_map(|(k, v)| v.map(|v| (k, v)))
    }
}

#[derive(Clone, Debug, Default)]
pub struct Manifest {
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
    /// 1-based source line of each record.
    pub lines: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Issue {
    pub line: usize,
    pub message: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub issues: Vec<Issue>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.issues.is_empty()
    }

    pub fn into_result(self) -> Result<()> {
        if self.is_clean() {
            Ok(())
        } else {
            Err(Error::Validation(self.to_string()))
        }
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for i in &self.issues {
            writeln!(f, "line {}: {}", i.line, i.message)?;
        }
        Ok(())
    }
}

impl Manifest {
    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for r in &self.records {
            serde_json::to_writer(&mut out, r).expect("manifest record serialises");
            out.push(b'\n');
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
        f.write_all(&out)
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    /// Checks id uniqueness, label membership and that every stream file parses.
    pub fn validate(&self, classes: &[String]) -> ValidationReport {
        let mut report = ValidationReport::default();
        let mut seen: HashMap<&str, usize> = HashMap::new();
        for (r, &line) in self.records.iter().zip(&self.lines) {
            if let Some(first) = seen.insert(&r.utterance_id, line) {
                report.issues.push(Issue {
                    line,
                    message: format!("duplicate utterance_id `{}` (first seen on line {first})", r.utterance_id),
                });
            }
            if !classes.iter().any(|c| c == &r.label) {
                report.issues.push(Issue {
                    line,
                    message: format!("label `{}` is not one of {classes:?}", r.label),
                });
            }
            for (stream, rel) in r.stream_paths() {
                let path = self.resolve(rel);
                if !path.exists() {
                    report.issues.push(Issue {
                        line,
                        message: format!("{stream} file {} does not exist", path.display()),
                    });
                } else if let Err(e) = seqf::read_seqf(&path) {
                    report.issues.push(Issue {
                        line,
                        message: format!("{stream} file does not parse: {e}"),
                    });
                }
            }
        }
        report
    }
}

/// Parses a manifest without validating it.
pub fn parse_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut m = Manifest {
        root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        ..Manifest::default()
    };
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            detail: e.to_string(),
        })?;
        m.records.push(rec);
        m.lines.push(i + 1);
    }
    Ok(m)
}

/// Parses and validates a manifest against the configured class names.
pub fn load_manifest(path: &Path, classes: &[String]) -> Result<(Manifest, ValidationReport)> {
    let m = parse_manifest(path)?;
    let report = m.validate(classes);
    Ok((m, report))
}
