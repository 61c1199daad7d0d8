//! Weight averaging of trained models and top-k pool selection.
//!
//! KIDA averages the parameters of models produced by successive DAgger
//! iterations; the epoch weight average applies the same arithmetic to
//! checkpoints of a single training run. Optimizer state is never averaged.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{load_model, ModelParams, NnError, ParamSet};

#[derive(Debug, Error)]
pub enum EnsembleError {
    #[error("cannot average an empty list of models")]
    EmptyPool,
    #[error("model {index} does not match the architecture of model 0: {detail}")]
    ArchMismatch { index: usize, detail: String },
    #[error("pool has {size} entries, fewer than k = {k}")]
    PoolTooSmall { size: usize, k: usize },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error(transparent)]
    Model(#[from] NnError),
}

/// Order-independent mean of `values`: sorted, then the mean of the offsets
/// from the smallest value (summed pairwise) added back onto it. Identical
/// inputs return that value exactly.
fn stable_mean(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let base = values[0];
    let offsets: Vec<f64> = values.iter().map(|v| v - base).collect();
    base + pairwise_sum(&offsets) / values.len() as f64
}

fn pairwise_sum(v: &[f64]) -> f64 {
    match v.len() {
        0 => 0.0,
        1 => v[0],
        n => pairwise_sum(&v[..n / 2]) + pairwise_sum(&v[n / 2..]),
    }
}

fn check_compatible(models: &[&ModelParams]) -> Result<(), EnsembleError> {
    let first = models.first().ok_or(EnsembleError::EmptyPool)?;
    for (index, m) in models.iter().enumerate().skip(1) {
        if m.arch != first.arch {
            return Err(EnsembleError::ArchMismatch {
                index,
                detail: format!("{:?} vs {:?}", m.arch, first.arch),
            });
        }
        if !m.params.same_shapes(&first.params) {
            return Err(EnsembleError::ArchMismatch {
                index,
                detail: "tensor shapes differ".into(),
            });
        }
    }
    Ok(())
}

/// Elementwise mean of every named tensor. The result carries the shared
/// arch and `init_seed = 0`.
pub fn kida_average(models: &[ModelParams]) -> Result<ModelParams, EnsembleError> {
    let refs: Vec<&ModelParams> = models.iter().collect();
    average_refs(&refs)
}

pub fn average_refs(models: &[&ModelParams]) -> Result<ModelParams, EnsembleError> {
    check_compatible(models)?;
    let arch = models[0].arch;
    let mut out = ParamSet::zeros(&arch);
    let sources: Vec<[&crate::nn::Tensor; 14]> = models.iter().map(|m| m.params.tensors()).collect();
    let mut column = vec![0.0; models.len()];
    for (t, dst) in out.tensors_mut().into_iter().enumerate() {
        for k in 0..dst.data.len() {
            for (c, src) in column.iter_mut().zip(&sources) {
                *c = src[t].data[k];
            }
            dst.data[k] = stable_mean(&mut column);
        }
    }
    Ok(ModelParams {
        arch,
        init_seed: 0,
        params: out,
    })
}

/// Average of checkpoints from one training run. Same arithmetic as
/// [`kida_average`].
pub fn epoch_weight_average(checkpoints: &[ModelParams]) -> Result<ModelParams, EnsembleError> {
    kida_average(checkpoints)
}

#[derive(Debug, Clone)]
pub struct PoolEntry {
    pub model: ModelParams,
    pub validation_reward: f64,
    pub iteration_tag: u64,
}

#[derive(Debug, Clone, Default)]
pub struct ModelPool {
    entries: Vec<PoolEntry>,
}

impl ModelPool {
    pub fn new() -> Self {
        ModelPool::default()
    }

    pub fn push(&mut self, entry: PoolEntry) -> Result<(), EnsembleError> {
        if let Some(first) = self.entries.first() {
            if first.model.arch != entry.model.arch {
                return Err(EnsembleError::ArchMismatch {
                    index: self.entries.len(),
                    detail: format!("{:?} vs {:?}", entry.model.arch, first.model.arch),
                });
            }
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn entries(&self) -> &[PoolEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Indices of the `k` entries with the highest reward; ties go to the lower
/// iteration tag.
pub fn top_k_indices(rewards_and_tags: &[(f64, u64)], k: usize) -> Result<Vec<usize>, EnsembleError> {
    if k == 0 {
        return Err(EnsembleError::ZeroK);
    }
    if rewards_and_tags.len() < k {
        return Err(EnsembleError::PoolTooSmall {
            size: rewards_and_tags.len(),
            k,
        });
    }
    let mut idx: Vec<usize> = (0..rewards_and_tags.len()).collect();
    idx.sort_by(|&a, &b| {
        let (ra, ta) = rewards_and_tags[a];
        let (rb, tb) = rewards_and_tags[b];
        rb.total_cmp(&ra).then(ta.cmp(&tb))
    });
    idx.truncate(k);
    Ok(idx)
}

pub fn select_top_k(pool: &ModelPool, k: usize) -> Result<Vec<&PoolEntry>, EnsembleError> {
    let keys: Vec<(f64, u64)> = pool
        .entries
        .iter()
        .map(|e| (e.validation_reward, e.iteration_tag))
        .collect();
    Ok(top_k_indices(&keys, k)?
        .into_iter()
        .map(|i| &pool.entries[i])
        .collect())
}

pub const DEFAULT_TOP_K: usize = 3;

/// One line of a pool manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub model_path: PathBuf,
    pub validation_reward: f64,
    pub iteration_tag: u64,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>, EnsembleError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| EnsembleError::Manifest(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| EnsembleError::Manifest(e.to_string()))
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<(), EnsembleError> {
    let text = serde_json::to_string_pretty(entries).expect("manifest serialization cannot fail");
    std::fs::write(path, text + "\n").map_err(|e| EnsembleError::Manifest(e.to_string()))
}

/// Loads every model of a manifest; relative model paths resolve against
/// the manifest's directory.
pub fn load_pool(manifest: &Path) -> Result<ModelPool, EnsembleError> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut pool = ModelPool::new();
    for e in read_manifest(manifest)? {
        let path = if e.model_path.is_absolute() {
            e.model_path.clone()
        } else {
            base.join(&e.model_path)
        };
        pool.push(PoolEntry {
            model: load_model(&path)?,
            validation_reward: e.validation_reward,
            iteration_tag: e.iteration_tag,
        })?;
    }
    Ok(pool)
}
