//! Tensor bundles: a JSON manifest (names, shapes, element offsets, precision)
//! next to one raw little-endian blob. Checkpoints are bundles whose metadata
//! carries the optimizer step, epoch, RNG state and run configuration.

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{AdamState, BestSnapshot, EpochRecord, TrainConfig, TrainState};
use crate::error::{Error, Result};
use crate::metrics::EvalReport;
use crate::model::{Cft, ModelConfig};
use crate::tensor::{Float, Precision, Tensor};

const BUNDLE_FORMAT: &str = "cft-tensors";
const BUNDLE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the blob, in elements.
    pub offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest<M> {
    format: String,
    version: u32,
    precision: Precision,
    blob: String,
    blob_bytes: usize,
    tensors: Vec<TensorEntry>,
    meta: M,
}

/// Writes `<dir>/<stem>.json` and `<dir>/<stem>.bin`.
pub fn save_tensors<T: Float, M: Serialize>(
    dir: &Path,
    stem: &str,
    tensors: &[(String, &Tensor<T>)],
    meta: &M,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut blob = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0;
    for (name, t) in tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.len();
        for &v in t.data() {
            v.write_le(&mut blob);
        }
    }
    let blob_name = format!("{stem}.bin");
    let manifest = Manifest {
        format: BUNDLE_FORMAT.into(),
        version: BUNDLE_VERSION,
        precision: T::PRECISION,
        blob: blob_name.clone(),
        blob_bytes: blob.len(),
        tensors: entries,
        meta,
    };
    fs::write(dir.join(&blob_name), &blob)?;
    fs::write(
        dir.join(format!("{stem}.json")),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

pub type NamedTensors<T> = Vec<(String, Tensor<T>)>;

pub fn load_tensors<T: Float, M: DeserializeOwned>(
    dir: &Path,
    stem: &str,
) -> Result<(NamedTensors<T>, M)> {
    let manifest: Manifest<M> =
        serde_json::from_slice(&fs::read(dir.join(format!("{stem}.json")))?)?;
    if manifest.format != BUNDLE_FORMAT {
        return Err(Error::Checkpoint(format!(
            "unknown bundle format {:?}",
            manifest.format
        )));
    }
    if manifest.version != BUNDLE_VERSION {
        return Err(Error::Checkpoint(format!(
            "bundle version {} is not supported (expected {BUNDLE_VERSION})",
            manifest.version
        )));
    }
    if manifest.precision != T::PRECISION {
        return Err(Error::Checkpoint(format!(
            "bundle holds {}-bit values, requested {}-bit",
            manifest.precision.bits(),
            T::PRECISION.bits()
        )));
    }
    let blob = fs::read(dir.join(&manifest.blob))?;
    if blob.len() != manifest.blob_bytes {
        return Err(Error::Truncated {
            offset: 0,
            needed: manifest.blob_bytes,
            available: blob.len(),
        });
    }
    let mut out = Vec::with_capacity(manifest.tensors.len());
    for e in manifest.tensors {
        let n: usize = e.shape.iter().product();
        let (start, end) = (e.offset * T::BYTES, (e.offset + n) * T::BYTES);
        if end > blob.len() {
            return Err(Error::Truncated {
                offset: start,
                needed: end - start,
                available: blob.len().saturating_sub(start),
            });
        }
        let data = blob[start..end]
            .chunks_exact(T::BYTES)
            .map(T::read_le)
            .collect();
        out.push((e.name, Tensor::new(e.shape, data)?));
    }
    Ok((out, manifest.meta))
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    step: u64,
    epoch: usize,
    model: ModelConfig,
    train: TrainConfig,
    rng: ChaCha8Rng,
    best: Option<(usize, EvalReport)>,
    history: Vec<EpochRecord>,
}

/// Everything needed to resume a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub train_config: TrainConfig,
    pub state: TrainState<T>,
}

const STEM: &str = "checkpoint";

pub fn save_checkpoint<T: Float>(
    dir: &Path,
    state: &TrainState<T>,
    cfg: &TrainConfig,
) -> Result<()> {
    let store = &state.model.params;
    let mut tensors = Vec::new();
    for (id, p) in store.iter() {
        tensors.push((format!("param/{}", p.name), &p.value));
        tensors.push((format!("adam_m/{}", p.name), &state.adam.m[id.index()]));
        tensors.push((format!("adam_v/{}", p.name), &state.adam.v[id.index()]));
    }
    if let Some(b) = &state.best {
        for (_, p) in b.params.iter() {
            tensors.push((format!("best/{}", p.name), &p.value));
        }
    }
    let meta = CheckpointMeta {
        step: state.adam.step,
        epoch: state.epoch,
        model: state.model.config.clone(),
        train: cfg.clone(),
        rng: state.rng.clone(),
        best: state.best.as_ref().map(|b| (b.epoch, b.report.clone())),
        history: state.history.clone(),
    };
    save_tensors(dir, STEM, &tensors, &meta)
}

pub fn load_checkpoint<T: Float>(dir: &Path) -> Result<Checkpoint<T>> {
    let (tensors, meta): (Vec<(String, Tensor<T>)>, CheckpointMeta) = load_tensors(dir, STEM)?;
    let mut by_name: std::collections::HashMap<String, Tensor<T>> = tensors.into_iter().collect();
    let mut model = Cft::<T>::new(meta.model, meta.train.seed)?;
    let mut take = |key: String, like: &Tensor<T>| -> Result<Tensor<T>> {
        let t = by_name
            .remove(&key)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {key}")))?;
        if t.shape() != like.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {key} has shape {:?}, model expects {:?}",
                t.shape(),
                like.shape()
            )));
        }
        Ok(t)
    };
    let mut adam = AdamState::new(&model.params);
    adam.step = meta.step;
    let names: Vec<String> = model.params.iter().map(|(_, p)| p.name.clone()).collect();
    for (i, p) in model.params.iter_mut().enumerate() {
        p.value = take(format!("param/{}", names[i]), &p.value)?;
        adam.m[i] = take(format!("adam_m/{}", names[i]), &adam.m[i])?;
        adam.v[i] = take(format!("adam_v/{}", names[i]), &adam.v[i])?;
    }
    let best = match meta.best {
        Some((epoch, report)) => {
            let mut params = model.params.clone();
            for (i, p) in params.iter_mut().enumerate() {
                p.value = take(format!("best/{}", names[i]), &p.value)?;
            }
            params.zero_grads();
            Some(BestSnapshot {
                epoch,
                report,
                params,
            })
        }
        None => None,
    };
    if let Some(extra) = by_name.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected tensor {extra}")));
    }
    Ok(Checkpoint {
        train_config: meta.train,
        state: TrainState {
            model,
            adam,
            epoch: meta.epoch,
            rng: meta.rng,
            best,
            history: meta.history,
        },
    })
}
