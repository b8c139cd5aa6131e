use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{RunConfig, SelectBy};
use super::folds::Fold;
use super::train::TrainedModel;
use crate::data::StreamDims;
use crate::error::{Error, Result};
use crate::features::{read_seqf, write_seqf};
use crate::model::Model;
use crate::params::ParamSet;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ParamsIndex {
    tensors: Vec<TensorEntry>,
}

/// Selection record stored next to the parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub classes: Vec<String>,
    pub stream_dims: Vec<StreamDims>,
    pub epoch: usize,
    pub metric: f64,
    pub selected_by: SelectBy,
    pub fold: Option<Fold>,
}

/// A saved model: `params.json` indexes one SEQF file per tensor;
/// `config.toml` and `meta.json` hold the run settings and selection.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub dir: PathBuf,
    pub config: RunConfig,
    pub meta: CheckpointMeta,
    pub model: Model,
    pub params: ParamSet<f32>,
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

fn json_err(path: &Path, e: serde_json::Error) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        detail: e.to_string(),
    }
}

impl Checkpoint {
    pub fn save(dir: &Path, trained: &TrainedModel, config: &RunConfig, fold: Option<&Fold>) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        let mut entries = Vec::with_capacity(trained.params.len());
        for (name, t) in trained.params.names().iter().zip(trained.params.tensors()) {
            let file = format!("{name}.seqf");
            // SEQF holds rank 2 or 3; vectors are written as one row
            let stored = if t.ndim() == 1 {
                t.clone().reshape([1, t.len()])?
            } else {
                t.clone()
            };
            write_seqf(&dir.join(&file), &stored)?;
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                dtype: "f32".into(),
                file,
            });
        }
        let index = serde_json::to_string_pretty(&ParamsIndex { tensors: entries }).expect("plain data");
        write(&dir.join("params.json"), &index)?;
        write(&dir.join("config.toml"), &config.to_toml_string())?;
        let meta = CheckpointMeta {
            classes: config.train.classes.clone(),
            stream_dims: trained.stream_dims.clone(),
            epoch: trained.best_epoch,
            metric: trained.best_metric,
            selected_by: config.train.select_by,
            fold: fold.cloned(),
        };
        write(&dir.join("meta.json"), &serde_json::to_string_pretty(&meta).expect("plain data"))
    }

    pub fn load(dir: &Path) -> Result<Checkpoint> {
        let config = RunConfig::load(&dir.join("config.toml"))?;
        let meta_path = dir.join("meta.json");
        let meta: CheckpointMeta = serde_json::from_str(&read(&meta_path)?).map_err(|e| json_err(&meta_path, e))?;
        let index_path = dir.join("params.json");
        let index: ParamsIndex = serde_json::from_str(&read(&index_path)?).map_err(|e| json_err(&index_path, e))?;
        let mut loaded = ParamSet::new();
        for e in index.tensors {
            if e.dtype != "f32" {
                return Err(Error::Config(format!("parameter `{}`: unsupported dtype {}", e.name, e.dtype)));
            }
            let path = dir.join(&e.file);
            let t: Tensor<f32> = read_seqf(&path)?;
            if t.len() != e.shape.iter().product::<usize>() {
                return Err(Error::Format {
                    path,
                    offset: 8,
                    detail: format!("shape {:?} does not match index shape {:?}", t.shape(), e.shape),
                });
            }
            loaded.add(e.name, t.reshape(e.shape)?);
        }
        let (model, mut params) = Model::build::<f32>(&config.model, &meta.stream_dims, meta.classes.len(), 0)?;
        params.load_from(loaded)?;
        Ok(Checkpoint {
            dir: dir.to_path_buf(),
            config,
            meta,
            model,
            params,
        })
    }
}
