//! DAgger with a strong-branching expert.
//!
//! Iteration `i` rolls out a mixture of the previous model and strong
//! branching on freshly generated instances, appends the expert-labeled
//! states to the aggregated dataset and retrains on all of it. Every
//! iteration leaves its model, its dataset slice and a log row on disk, which
//! is also what a resumed run picks up from.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bnb::run_bnb;
use crate::branching::{Baseline, BaselineKind, CoinMode, MixturePolicy, ModelPolicy};
use crate::ensemble::{write_manifest, ManifestEntry};
use crate::milp::{InstanceFamily, MilpError, MilpInstance};
use crate::nn::{self, init_model, ArchConfig, ModelParams, NnError, TrainConfig};
use crate::seeds;
use crate::state::{read_samples, write_samples, BipartiteState, SampleIoError};

#[derive(Debug, Error)]
pub enum DaggerError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("run directory holds a different config; refusing to resume")]
    ConfigMismatch,
    #[error(transparent)]
    Instance(#[from] MilpError),
    #[error(transparent)]
    Model(#[from] NnError),
    #[error(transparent)]
    Samples(#[from] SampleIoError),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DaggerError + '_ {
    move |source| DaggerError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DaggerConfig {
    pub n_iterations: usize,
    pub p_expert: f64,
    pub epochs_major: usize,
    pub epochs_minor: usize,
    pub major_every: usize,
    pub instances_per_iteration: usize,
    pub step_budget: usize,
    pub warm_start: bool,
    pub master_seed: u64,
    pub label_all_states: bool,
    pub coin_mode: CoinMode,
    pub family: InstanceFamily,
    pub validation_instances: usize,
    pub arch: ArchConfig,
    /// Optimizer settings; `epochs` and `seed` are overridden per iteration.
    pub train: TrainConfig,
}

impl Default for DaggerConfig {
    fn default() -> Self {
        DaggerConfig {
            n_iterations: 10,
            p_expert: 0.05,
            epochs_major: 100,
            epochs_minor: 10,
            major_every: 10,
            instances_per_iteration: 10,
            step_budget: crate::bnb::DEFAULT_BUDGET,
            warm_start: true,
            master_seed: 0,
            label_all_states: false,
            coin_mode: CoinMode::PerDecision,
            family: InstanceFamily::default(),
            validation_instances: 5,
            arch: ArchConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl DaggerConfig {
    pub fn validate(&self) -> Result<(), DaggerError> {
        let bad = |m: &str| Err(DaggerError::InvalidConfig(m.into()));
        if !(0.0..=1.0).contains(&self.p_expert) {
            return bad("p_expert must lie in [0, 1]");
        }
        if self.n_iterations == 0 || self.instances_per_iteration == 0 || self.step_budget == 0 {
            return bad("n_iterations, instances_per_iteration and step_budget must be >= 1");
        }
        if self.major_every == 0 || self.train.batch_size == 0 {
            return bad("major_every and batch_size must be >= 1");
        }
        self.arch.validate()?;
        Ok(())
    }

    /// Epochs used to train model `i` (1-based).
    pub fn epochs_for(&self, iteration: usize) -> usize {
        if iteration.is_multiple_of(self.major_every) {
            self.epochs_major
        } else {
            self.epochs_minor
        }
    }

    pub fn epoch_schedule(&self) -> Vec<usize> {
        (1..=self.n_iterations).map(|i| self.epochs_for(i)).collect()
    }
}

/// All samples so far plus where each iteration's slice starts.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AggregatedDataset {
    samples: Vec<BipartiteState>,
    slice_sizes: Vec<usize>,
}

impl AggregatedDataset {
    pub fn append(&mut self, slice: Vec<BipartiteState>) {
        self.slice_sizes.push(slice.len());
        self.samples.extend(slice);
    }

    pub fn samples(&self) -> &[BipartiteState] {
        &self.samples
    }

    pub fn slice_sizes(&self) -> &[usize] {
        &self.slice_sizes
    }

    /// Samples collected in iteration `i` (1-based).
    pub fn slice(&self, i: usize) -> &[BipartiteState] {
        let start: usize = self.slice_sizes[..i - 1].iter().sum();
        &self.samples[start..start + self.slice_sizes[i - 1]]
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Collection {
    pub samples: Vec<BipartiteState>,
    pub decisions: usize,
    pub expert_decisions: usize,
    pub failed_episodes: Vec<(usize, String)>,
}

/// Settings of one collection pass.
#[derive(Debug, Clone, Copy)]
pub struct CollectSettings {
    pub p_expert: f64,
    pub coin_mode: CoinMode,
    pub label_all_states: bool,
    pub step_budget: usize,
}

/// Labeled states, decisions and expert decisions of one episode.
type EpisodeYield = (Vec<BipartiteState>, usize, usize);

/// Rolls out the mixture on every instance. Episode `e` uses the seed
/// `derive(episode_base, [e])`; samples are ordered by episode, then step,
/// whatever the thread count.
pub fn collect_iteration(
    model: &Arc<ModelParams>,
    instances: &[MilpInstance],
    settings: CollectSettings,
    episode_base: u64,
) -> Collection {
    let episodes: Vec<Result<EpisodeYield, String>> = instances
        .par_iter()
        .enumerate()
        .map(|(e, inst)| {
            let mut policy = MixturePolicy::new(
                Box::new(ModelPolicy::new(model.clone(), "model")),
                settings.p_expert,
            )
            .with_mode(settings.coin_mode)
            .label_all_states(settings.label_all_states);
            let seed = seeds::derive(episode_base, &[e as u64]);
            run_bnb(inst, &mut policy, settings.step_budget, seed)
                .map(|_| (policy.collected, policy.decisions, policy.expert_decisions))
                .map_err(|err| err.to_string())
        })
        .collect();
    let mut out = Collection::default();
    for (e, ep) in episodes.into_iter().enumerate() {
        match ep {
            Ok((samples, decisions, expert)) => {
                out.samples.extend(samples);
                out.decisions += decisions;
                out.expert_decisions += expert;
            }
            Err(msg) => out.failed_episodes.push((e, msg)),
        }
    }
    out
}

/// Strong-branching-labeled states for offline imitation: episodes with the
/// expert always acting, on instances `derive(base, [k])` for k = 0, 1, ...
/// until `target` samples exist. Returns the samples (exactly `target`) and
/// the number of instances consumed, or an error after `max_instances`.
pub fn collect_expert_samples(
    family: &InstanceFamily,
    base: u64,
    target: usize,
    step_budget: usize,
    max_instances: usize,
) -> Result<(Vec<BipartiteState>, usize), DaggerError> {
    const CHUNK: usize = 64;
    let mut samples = Vec::with_capacity(target);
    let mut used = 0;
    while samples.len() < target {
        if used >= max_instances {
            return Err(DaggerError::InvalidConfig(format!(
                "only {} labeled states from {used} instances",
                samples.len()
            )));
        }
        let ks: Vec<u64> = (used as u64..(used + CHUNK).min(max_instances) as u64).collect();
        let chunk: Vec<Vec<BipartiteState>> = ks
            .par_iter()
            .map(|&k| {
                let seed = seeds::derive(base, &[k]);
                let Ok(inst) = family.generate(seed) else { return Vec::new() };
                let mut policy = MixturePolicy::new(Box::new(Baseline(BaselineKind::Random)), 1.0);
                match run_bnb(&inst, &mut policy, step_budget, seed) {
                    Ok(_) => policy.collected,
                    Err(_) => Vec::new(),
                }
            })
            .collect();
        for (k, states) in ks.iter().zip(chunk) {
            if samples.len() >= target {
                break;
            }
            samples.extend(states);
            used = *k as usize + 1;
        }
    }
    samples.truncate(target);
    Ok((samples, used))
}

/// Mean cumulative reward of a model over `instances`; run `k` uses seed
/// `derive(base, [k])`. Failed runs are skipped; `None` if all fail.
pub fn validation_reward(model: &Arc<ModelParams>, instances: &[MilpInstance], budget: usize, base: u64) -> Option<f64> {
    let rewards: Vec<f64> = instances
        .par_iter()
        .enumerate()
        .filter_map(|(k, inst)| {
            let mut policy = ModelPolicy::new(model.clone(), "model");
            run_bnb(inst, &mut policy, budget, seeds::derive(base, &[k as u64]))
                .ok()
                .map(|t| t.reward())
        })
        .collect();
    (!rewards.is_empty()).then(|| rewards.iter().sum::<f64>() / rewards.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationLog {
    pub iteration: usize,
    pub epochs: usize,
    pub new_samples: usize,
    pub dataset_size: usize,
    pub decisions: usize,
    pub expert_decisions: usize,
    pub failed_episodes: usize,
    pub final_loss: Option<f64>,
    pub validation_reward: Option<f64>,
}

const LOG_HEADER: &str =
    "iteration,epochs,new_samples,dataset_size,decisions,expert_decisions,failed_episodes,final_loss,validation_reward";

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

impl IterationLog {
    fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.iteration,
            self.epochs,
            self.new_samples,
            self.dataset_size,
            self.decisions,
            self.expert_decisions,
            self.failed_episodes,
            opt(self.final_loss),
            opt(self.validation_reward)
        )
    }

    fn from_csv(line: &str) -> Option<Self> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 9 {
            return None;
        }
        let float = |s: &str| if s.is_empty() { Some(None) } else { s.parse().ok().map(Some) };
        Some(IterationLog {
            iteration: f[0].parse().ok()?,
            epochs: f[1].parse().ok()?,
            new_samples: f[2].parse().ok()?,
            dataset_size: f[3].parse().ok()?,
            decisions: f[4].parse().ok()?,
            expert_decisions: f[5].parse().ok()?,
            failed_episodes: f[6].parse().ok()?,
            final_loss: float(f[7])?,
            validation_reward: float(f[8])?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct DaggerRun {
    /// `models[i - 1]` is the model of iteration `i`.
    pub models: Vec<ModelParams>,
    pub dataset: AggregatedDataset,
    pub log: Vec<IterationLog>,
}

impl DaggerRun {
    pub fn expert_rate(&self) -> f64 {
        let d: usize = self.log.iter().map(|l| l.decisions).sum();
        let e: usize = self.log.iter().map(|l| l.expert_decisions).sum();
        e as f64 / d.max(1) as f64
    }
}

pub fn model_path(dir: &Path, i: usize) -> PathBuf {
    dir.join("models").join(format!("pi_{i}.model"))
}

pub fn slice_path(dir: &Path, i: usize) -> PathBuf {
    dir.join("dataset").join(format!("d_{i}.samples"))
}

fn write_log(dir: &Path, log: &[IterationLog]) -> Result<(), DaggerError> {
    let path = dir.join("log.csv");
    let mut text = String::from(LOG_HEADER);
    text.push('\n');
    for l in log {
        text.push_str(&l.to_csv());
        text.push('\n');
    }
    fs::write(&path, text).map_err(io_err(&path))
}

fn write_pool(dir: &Path, log: &[IterationLog]) -> Result<(), DaggerError> {
    let entries: Vec<ManifestEntry> = log
        .iter()
        .filter_map(|l| {
            l.validation_reward.map(|r| ManifestEntry {
                model_path: PathBuf::from("models").join(format!("pi_{}.model", l.iteration)),
                validation_reward: r,
                iteration_tag: l.iteration as u64,
            })
        })
        .collect();
    write_manifest(&dir.join("pool.json"), &entries).map_err(|e| DaggerError::InvalidConfig(e.to_string()))
}

/// Picks up the completed prefix of an earlier run with the same config.
fn resume(dir: &Path, config: &DaggerConfig) -> Result<Option<DaggerRun>, DaggerError> {
    let cfg_path = dir.join("config.json");
    if !cfg_path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&cfg_path).map_err(io_err(&cfg_path))?;
    let previous: DaggerConfig = serde_json::from_str(&text).map_err(|_| DaggerError::ConfigMismatch)?;
    if previous != *config {
        return Err(DaggerError::ConfigMismatch);
    }
    let log_text = fs::read_to_string(dir.join("log.csv")).unwrap_or_default();
    let mut run = DaggerRun {
        models: Vec::new(),
        dataset: AggregatedDataset::default(),
        log: Vec::new(),
    };
    for line in log_text.lines().skip(1) {
        let Some(entry) = IterationLog::from_csv(line) else { break };
        let i = entry.iteration;
        if i != run.log.len() + 1 || i > config.n_iterations {
            break;
        }
        let (mp, sp) = (model_path(dir, i), slice_path(dir, i));
        let (Ok(model), Ok(file)) = (nn::load_model(&mp), fs::File::open(&sp)) else { break };
        let Ok(slice) = read_samples(BufReader::new(file)) else { break };
        run.models.push(model);
        run.dataset.append(slice);
        run.log.push(entry);
    }
    Ok(Some(run))
}

/// Runs (or resumes) the full loop, writing everything under `dir`.
pub fn run_dagger(config: &DaggerConfig, dir: &Path) -> Result<DaggerRun, DaggerError> {
    config.validate()?;
    for sub in ["models", "dataset"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(io_err(&p))?;
    }
    let mut run = match resume(dir, config)? {
        Some(run) => run,
        None => DaggerRun {
            models: Vec::new(),
            dataset: AggregatedDataset::default(),
            log: Vec::new(),
        },
    };
    let cfg_path = dir.join("config.json");
    let cfg_text = serde_json::to_string_pretty(config).expect("config serialization cannot fail");
    fs::write(&cfg_path, cfg_text + "\n").map_err(io_err(&cfg_path))?;

    let master = config.master_seed;
    let validation = config
        .family
        .generate_many(seeds::derive(master, &[seeds::STREAM_VALIDATION]), config.validation_instances)?;
    let mut current = Arc::new(match run.models.last() {
        Some(m) => m.clone(),
        None => init_model(config.arch, seeds::derive(master, &[seeds::STREAM_INIT, 0])),
    });
    let settings = CollectSettings {
        p_expert: config.p_expert,
        coin_mode: config.coin_mode,
        label_all_states: config.label_all_states,
        step_budget: config.step_budget,
    };

    for i in run.log.len() + 1..=config.n_iterations {
        let it = i as u64;
        let instances = config.family.generate_many(
            seeds::derive(master, &[seeds::STREAM_TRAIN_INSTANCES, it]),
            config.instances_per_iteration,
        )?;
        let collected = collect_iteration(&current, &instances, settings, seeds::derive(master, &[it]));
        let new_samples = collected.samples.len();

        let sp = slice_path(dir, i);
        let file = fs::File::create(&sp).map_err(io_err(&sp))?;
        let mut w = BufWriter::new(file);
        write_samples(&mut w, &collected.samples).map_err(io_err(&sp))?;
        w.flush().map_err(io_err(&sp))?;
        run.dataset.append(collected.samples);

        let start = if config.warm_start {
            (*current).clone()
        } else {
            init_model(config.arch, seeds::derive(master, &[seeds::STREAM_INIT, it]))
        };
        let epochs = config.epochs_for(i);
        let (model, final_loss) = if run.dataset.is_empty() || epochs == 0 {
            (start, None)
        } else {
            let tc = TrainConfig {
                epochs,
                seed: seeds::derive(master, &[seeds::STREAM_TRAINING, it]),
                ..config.train
            };
            let (m, losses) = nn::train(start, run.dataset.samples(), &tc)?;
            (m, losses.last().copied())
        };
        nn::save_model(&model, &model_path(dir, i))?;
        current = Arc::new(model);
        let reward = validation_reward(
            &current,
            &validation,
            config.step_budget,
            seeds::derive(master, &[seeds::STREAM_VALIDATION, it]),
        );

        run.models.push((*current).clone());
        run.log.push(IterationLog {
            iteration: i,
            epochs,
            new_samples,
            dataset_size: run.dataset.len(),
            decisions: collected.decisions,
            expert_decisions: collected.expert_decisions,
            failed_episodes: collected.failed_episodes.len(),
            final_loss,
            validation_reward: reward,
        });
        for (e, msg) in &collected.failed_episodes {
            eprintln!("iteration {i}: episode {e} failed: {msg}");
        }
        write_log(dir, &run.log)?;
    }
    write_pool(dir, &run.log)?;
    Ok(run)
}
