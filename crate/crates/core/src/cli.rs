//! Command-line front end. Exit codes: 0 success, 1 usage error, 2 runtime
//! error. Every subcommand writes only under `--out-dir` and records its
//! resolved settings in `config.json` there.

use std::ffi::OsString;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::bnb::{run_bnb, write_trace, DEFAULT_BUDGET};
use crate::branching::{CoinMode, PolicySpec};
use crate::dagger::{collect_expert_samples, run_dagger, DaggerConfig};
use crate::ensemble::{self, DEFAULT_TOP_K};
use crate::eval;
use crate::milp::{read_instance, write_instance, InstanceFamily, MilpInstance};
use crate::nn::{self, init_model, ArchConfig, ModelParams, TrainConfig};
use crate::seeds;
use crate::state::{read_samples, write_samples, BipartiteState};

#[derive(Parser, Debug, Serialize)]
#[command(name = "branchforge", version, about = "Learning-to-branch laboratory")]
struct Cli {
    /// Master seed; every random stream is derived from it.
    #[arg(long, global = true, env = "BRANCHFORGE_SEED", default_value_t = 0)]
    seed: u64,
    /// Directory receiving every output file.
    #[arg(long, global = true, default_value = "out")]
    #[serde(skip)]
    out_dir: PathBuf,
    /// Worker threads for episode-level parallelism. Outputs do not depend on it.
    #[arg(long, global = true, default_value_t = 1)]
    #[serde(skip)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(tag = "command", rename_all = "snake_case")]
enum Command {
    /// Generate instance files.
    Generate(GenerateArgs),
    /// Run branch-and-bound once and write its dual-bound trace.
    Solve(SolveArgs),
    /// Collect strong-branching-labeled states for offline training.
    Collect(CollectArgs),
    /// Run the DAgger loop.
    Dagger(DaggerArgs),
    /// Average the top-k models of a pool manifest.
    Kida(KidaArgs),
    /// Train once and average checkpoints taken every few epochs.
    Ewa(EwaArgs),
    /// Offline imitation training on labeled samples.
    Train(TrainArgs),
    /// Evaluation harness.
    #[command(subcommand)]
    Eval(EvalCommand),
}

#[derive(ValueEnum, Clone, Copy, Debug, Serialize)]
#[serde(rename_all = "snake_case")]
enum FamilyKind {
    SetCover,
    Assignment,
}

#[derive(Args, Debug, Serialize, Clone)]
struct FamilyArgs {
    #[arg(long, value_enum, default_value = "set-cover")]
    family: FamilyKind,
    #[arg(long, default_value_t = 10)]
    n_items: usize,
    /// Sets per set-cover instance.
    #[arg(long, default_value_t = 20)]
    n_sets: usize,
    /// Probability that a set covers a given item.
    #[arg(long, default_value_t = 0.25)]
    density: f64,
    /// Bins per assignment instance.
    #[arg(long, default_value_t = 3)]
    n_bins: usize,
}

impl FamilyArgs {
    fn family(&self) -> InstanceFamily {
        match self.family {
            FamilyKind::SetCover => InstanceFamily::SetCover {
                n_items: self.n_items,
                n_sets: self.n_sets,
                density: self.density,
            },
            FamilyKind::Assignment => InstanceFamily::Assignment {
                n_items: self.n_items,
                n_bins: self.n_bins,
            },
        }
    }
}

#[derive(Args, Debug, Serialize)]
struct GenerateArgs {
    #[command(flatten)]
    family: FamilyArgs,
    #[arg(long, default_value_t = 1)]
    count: usize,
}

#[derive(Args, Debug, Serialize)]
struct SolveArgs {
    #[arg(long)]
    instance: PathBuf,
    /// sb | pseudocost | random | mostfrac | model:<path> | mixture:<path>:<p>
    #[arg(long, default_value = "sb")]
    policy: String,
    #[arg(long, default_value_t = DEFAULT_BUDGET)]
    budget: usize,
}

#[derive(Args, Debug, Serialize)]
struct CollectArgs {
    #[command(flatten)]
    family: FamilyArgs,
    /// Number of labeled states to collect.
    #[arg(long, default_value_t = 2000)]
    samples: usize,
    #[arg(long, default_value_t = DEFAULT_BUDGET)]
    budget: usize,
    /// Give up after this many instances.
    #[arg(long, default_value_t = 1_000_000)]
    max_instances: usize,
}

#[derive(ValueEnum, Clone, Copy, Debug, Serialize)]
enum CoinArg {
    PerDecision,
    PerEpisode,
}

#[derive(Args, Debug, Serialize)]
struct OptimArgs {
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    /// Dropout on the final variable embedding (0 disables it).
    #[arg(long, default_value_t = 0.0)]
    dropout: f64,
}

impl OptimArgs {
    fn train_config(&self, epochs: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.lr,
            batch_size: self.batch_size,
            epochs,
            seed,
            ..TrainConfig::default()
        }
    }

    fn arch(&self) -> ArchConfig {
        ArchConfig {
            dropout_rate: self.dropout,
            ..ArchConfig::default()
        }
    }
}

#[derive(Args, Debug, Serialize)]
struct DaggerArgs {
    #[command(flatten)]
    family: FamilyArgs,
    #[arg(long, default_value_t = 10)]
    iterations: usize,
    #[arg(long, default_value_t = 0.05)]
    p_expert: f64,
    #[arg(long, default_value_t = 10)]
    instances_per_iteration: usize,
    #[arg(long, default_value_t = DEFAULT_BUDGET)]
    budget: usize,
    #[arg(long, default_value_t = 100)]
    epochs_major: usize,
    #[arg(long, default_value_t = 10)]
    epochs_minor: usize,
    #[arg(long, default_value_t = 10)]
    major_every: usize,
    /// Start every iteration's training from a fresh initialization.
    #[arg(long)]
    fresh_init: bool,
    /// Label every visited state, not only expert-acted ones.
    #[arg(long)]
    label_all_states: bool,
    #[arg(long, value_enum, default_value = "per-decision")]
    coin: CoinArg,
    #[arg(long, default_value_t = 5)]
    validation_instances: usize,
    #[command(flatten)]
    optim: OptimArgs,
}

#[derive(Args, Debug, Serialize)]
struct KidaArgs {
    /// Pool manifest: JSON list of {model_path, validation_reward, iteration_tag}.
    #[arg(long)]
    pool: PathBuf,
    #[arg(long, default_value_t = DEFAULT_TOP_K)]
    k: usize,
    /// Average the whole pool instead of the top k.
    #[arg(long)]
    all: bool,
}

#[derive(Args, Debug, Serialize)]
struct EwaArgs {
    /// Labeled sample files.
    #[arg(long, required = true, num_args = 1..)]
    dataset: Vec<PathBuf>,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    /// Checkpoint interval in epochs.
    #[arg(long, default_value_t = 10)]
    every: usize,
    #[command(flatten)]
    optim: OptimArgs,
}

#[derive(Args, Debug, Serialize)]
struct TrainArgs {
    #[arg(long, required = true, num_args = 1..)]
    dataset: Vec<PathBuf>,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    /// Start from this model instead of a fresh initialization.
    #[arg(long)]
    init: Option<PathBuf>,
    #[command(flatten)]
    optim: OptimArgs,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
enum EvalCommand {
    /// Top-k accuracy and loss on labeled samples (metrics.csv).
    Offline {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, required = true, num_args = 1..)]
        dataset: Vec<PathBuf>,
    },
    /// Per-step agreement with strong branching while the policy acts (online_acc.csv).
    Online {
        #[arg(long, default_value = "sb")]
        policy: String,
        #[arg(long, required = true, num_args = 1..)]
        instance: Vec<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_BUDGET)]
        budget: usize,
    },
    /// Cumulative reward per policy, instance and seed (runs.csv, rewards.csv).
    Rewards {
        #[arg(long, required = true, num_args = 1..)]
        policy: Vec<String>,
        #[arg(long, required = true, num_args = 1..)]
        instance: Vec<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_BUDGET)]
        budget: usize,
        /// Episode seeds; defaults to the global seed.
        #[arg(long, num_args = 1..)]
        seeds: Vec<u64>,
    },
    /// Degeneracy fraction and dual-bound trajectories (trajectories.csv, degeneracy.json).
    Degeneracy {
        /// Defaults to the built-in duplicate-column instance.
        #[arg(long)]
        instance: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_BUDGET)]
        budget: usize,
        /// Extra policy to trace.
        #[arg(long)]
        policy: Option<String>,
        #[arg(long, default_value_t = eval::DEFAULT_DEGENERACY_THRESHOLD)]
        threshold: f64,
        #[arg(long, default_value_t = crate::branching::DEFAULT_SCORE_EPSILON)]
        epsilon: f64,
    },
}

/// Parses a policy name: `sb`, `pseudocost`, `random`, `mostfrac`,
/// `model:<path>` or `mixture:<path>:<p>`.
pub fn parse_policy(name: &str) -> Result<PolicySpec> {
    Ok(match name {
        "sb" => PolicySpec::StrongBranching,
        "pseudocost" => PolicySpec::Pseudocost,
        "random" => PolicySpec::Random,
        "mostfrac" => PolicySpec::MostFractional,
        _ => {
            if let Some(path) = name.strip_prefix("model:") {
                PolicySpec::Model {
                    params: Arc::new(load(path)?),
                    label: name.into(),
                }
            } else if let Some(rest) = name.strip_prefix("mixture:") {
                let (path, p) = rest
                    .rsplit_once(':')
                    .ok_or_else(|| anyhow!("mixture policy needs mixture:<path>:<p>"))?;
                let p_expert: f64 = p.parse().with_context(|| format!("bad expert probability `{p}`"))?;
                if !(0.0..=1.0).contains(&p_expert) {
                    bail!("expert probability {p_expert} is outside [0, 1]");
                }
                PolicySpec::Mixture {
                    params: Arc::new(load(path)?),
                    label: format!("model:{path}"),
                    p_expert,
                }
            } else {
                bail!("unknown policy `{name}` (expected sb, pseudocost, random, mostfrac, model:<path> or mixture:<path>:<p>)")
            }
        }
    })
}

fn load(path: &str) -> Result<ModelParams> {
    nn::load_model(Path::new(path)).with_context(|| format!("loading model {path}"))
}

fn load_instance(path: &Path) -> Result<MilpInstance> {
    read_instance(path).with_context(|| format!("reading instance {}", path.display()))
}

fn load_samples(paths: &[PathBuf]) -> Result<Vec<BipartiteState>> {
    let mut all = Vec::new();
    for p in paths {
        let f = fs::File::open(p).with_context(|| format!("opening {}", p.display()))?;
        all.extend(read_samples(BufReader::new(f)).with_context(|| format!("reading {}", p.display()))?);
    }
    Ok(all)
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).context("serializing")?;
    write_file(path, text + "\n")
}

fn save(model: &ModelParams, path: &Path) -> Result<()> {
    nn::save_model(model, path).with_context(|| format!("writing {}", path.display()))
}

/// Entry point shared by the binary and tests.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if cli.jobs == 0 {
        eprintln!("error: --jobs must be at least 1");
        return 1;
    }
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            2
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs)
        .build()
        .context("building the worker pool")?;
    fs::create_dir_all(&cli.out_dir).with_context(|| format!("creating {}", cli.out_dir.display()))?;
    // The dagger loop owns its config.json (it doubles as the resume key).
    if !matches!(cli.command, Command::Dagger(_)) {
        write_json(&cli.out_dir.join("config.json"), cli)?;
    }
    pool.install(|| dispatch(cli))
}

fn dispatch(cli: &Cli) -> Result<()> {
    let out = cli.out_dir.as_path();
    let seed = cli.seed;
    match &cli.command {
        Command::Generate(a) => {
            let family = a.family.family();
            let dir = out.join("instances");
            fs::create_dir_all(&dir)?;
            for k in 0..a.count {
                let inst = family.generate(seeds::derive(seed, &[k as u64]))?;
                write_instance(&inst, &dir.join(format!("instance_{k}.json")))?;
            }
        }
        Command::Solve(a) => {
            let inst = load_instance(&a.instance)?;
            let mut policy = parse_policy(&a.policy)?.build();
            let trace = run_bnb(&inst, policy.as_mut(), a.budget, seed)?;
            write_trace(&trace, out, "trace")?;
            println!("reward {:.6} incumbent {:?}", trace.reward(), trace.incumbent);
        }
        Command::Collect(a) => {
            let (samples, used) =
                collect_expert_samples(&a.family.family(), seed, a.samples, a.budget, a.max_instances)?;
            let path = out.join("samples.jsonl");
            let mut w = BufWriter::new(fs::File::create(&path)?);
            write_samples(&mut w, &samples)?;
            w.flush()?;
            println!("{} samples from {used} instances", samples.len());
        }
        Command::Dagger(a) => {
            let config = DaggerConfig {
                n_iterations: a.iterations,
                p_expert: a.p_expert,
                epochs_major: a.epochs_major,
                epochs_minor: a.epochs_minor,
                major_every: a.major_every,
                instances_per_iteration: a.instances_per_iteration,
                step_budget: a.budget,
                warm_start: !a.fresh_init,
                master_seed: seed,
                label_all_states: a.label_all_states,
                coin_mode: match a.coin {
                    CoinArg::PerDecision => CoinMode::PerDecision,
                    CoinArg::PerEpisode => CoinMode::PerEpisode,
                },
                family: a.family.family(),
                validation_instances: a.validation_instances,
                arch: a.optim.arch(),
                train: a.optim.train_config(0, 0),
            };
            let run = run_dagger(&config, out)?;
            println!(
                "{} iterations, {} samples, expert rate {:.4}",
                run.log.len(),
                run.dataset.len(),
                run.expert_rate()
            );
        }
        Command::Kida(a) => {
            let pool = ensemble::load_pool(&a.pool)?;
            let models: Vec<&ModelParams> = if a.all {
                pool.entries().iter().map(|e| &e.model).collect()
            } else {
                ensemble::select_top_k(&pool, a.k)?.into_iter().map(|e| &e.model).collect()
            };
            save(&ensemble::average_refs(&models)?, &out.join("kida.model"))?;
        }
        Command::Ewa(a) => {
            let data = load_samples(&a.dataset)?;
            let arch = a.optim.arch();
            let model = init_model(arch, seeds::derive(seed, &[seeds::STREAM_INIT]));
            let cfg = a.optim.train_config(a.epochs, seeds::derive(seed, &[seeds::STREAM_TRAINING]));
            let trained = nn::train_with_checkpoints(model, &data, &cfg, Some(a.every))?;
            if trained.checkpoints.is_empty() {
                bail!("no checkpoint within {} epochs at interval {}", a.epochs, a.every);
            }
            let dir = out.join("checkpoints");
            fs::create_dir_all(&dir)?;
            for (epoch, m) in &trained.checkpoints {
                save(m, &dir.join(format!("epoch_{epoch}.model")))?;
            }
            let ckpts: Vec<ModelParams> = trained.checkpoints.into_iter().map(|(_, m)| m).collect();
            save(&ensemble::epoch_weight_average(&ckpts)?, &out.join("ewa.model"))?;
            write_file(&out.join("losses.csv"), losses_csv(&trained.epoch_losses))?;
        }
        Command::Train(a) => {
            let data = load_samples(&a.dataset)?;
            let model = match &a.init {
                Some(p) => nn::load_model(p).with_context(|| format!("loading {}", p.display()))?,
                None => init_model(a.optim.arch(), seeds::derive(seed, &[seeds::STREAM_INIT])),
            };
            let cfg = a.optim.train_config(a.epochs, seeds::derive(seed, &[seeds::STREAM_TRAINING]));
            let (model, losses) = nn::train(model, &data, &cfg)?;
            save(&model, &out.join("model.model"))?;
            write_file(&out.join("losses.csv"), losses_csv(&losses))?;
        }
        Command::Eval(e) => eval_command(e, out, seed)?,
    }
    Ok(())
}

fn losses_csv(losses: &[f64]) -> String {
    let mut s = String::from("epoch,loss\n");
    for (k, l) in losses.iter().enumerate() {
        s.push_str(&format!("{},{:?}\n", k + 1, l));
    }
    s
}

fn eval_command(e: &EvalCommand, out: &Path, seed: u64) -> Result<()> {
    match e {
        EvalCommand::Offline { model, dataset } => {
            let m = nn::load_model(model).with_context(|| format!("loading {}", model.display()))?;
            let data = load_samples(dataset)?;
            let rec = eval::offline_metrics(&m, &data, &model.display().to_string(), seed)?;
            write_file(&out.join("metrics.csv"), eval::metrics_csv(&[rec]))?;
        }
        EvalCommand::Online { policy, instance, budget } => {
            let spec = parse_policy(policy)?;
            let mut csv = String::from("instance,step,agreement,candidates\n");
            for path in instance {
                let inst = load_instance(path)?;
                let acc = eval::online_accuracy(spec.build(), &inst, *budget, seed)?;
                for line in eval::online_csv(&acc).lines().skip(1) {
                    csv.push_str(&format!("{},{line}\n", inst.name));
                }
                match acc.mean {
                    Some(m) => println!("{}: agreement {m:.4} over {} steps", inst.name, acc.agreement.len()),
                    None => println!("{}: no branching", inst.name),
                }
            }
            write_file(&out.join("online_acc.csv"), csv)?;
        }
        EvalCommand::Rewards {
            policy,
            instance,
            budget,
            seeds,
        } => {
            let specs = policy.iter().map(|p| parse_policy(p)).collect::<Result<Vec<_>>>()?;
            let insts = instance.iter().map(|p| load_instance(p)).collect::<Result<Vec<_>>>()?;
            let seeds = if seeds.is_empty() { vec![seed] } else { seeds.clone() };
            let runs = eval::reward_comparison(&specs, &insts, *budget, &seeds);
            let summary = eval::summarize(&runs);
            write_file(&out.join("runs.csv"), eval::runs_csv(&runs))?;
            write_file(&out.join("rewards.csv"), eval::summary_csv(&summary))?;
            for s in &summary {
                println!("{}: {:.4} +- {:.4} (n={}, missing={})", s.policy, s.mean, s.std, s.n, s.missing);
            }
        }
        EvalCommand::Degeneracy {
            instance,
            budget,
            policy,
            threshold,
            epsilon,
        } => {
            let inst = match instance {
                Some(p) => load_instance(p)?,
                None => eval::duplicate_column_instance(),
            };
            let extra = policy.iter().map(|p| parse_policy(p)).collect::<Result<Vec<_>>>()?;
            let report = eval::degeneracy_probe(&inst, *budget, seed, &extra, *threshold, *epsilon)?;
            write_file(&out.join("trajectories.csv"), eval::trajectories_csv(&report.trajectories))?;
            #[derive(Serialize)]
            struct Summary<'a> {
                threshold: f64,
                epsilon: f64,
                sb_calls: usize,
                degenerate_calls: usize,
                fraction_degenerate: f64,
                no_sb_calls: bool,
                policies_ahead_of_sb: Vec<&'a str>,
            }
            write_json(
                &out.join("degeneracy.json"),
                &Summary {
                    threshold: report.threshold,
                    epsilon: report.epsilon,
                    sb_calls: report.sb_calls,
                    degenerate_calls: report.degenerate_calls,
                    fraction_degenerate: report.fraction_degenerate,
                    no_sb_calls: report.no_sb_calls,
                    policies_ahead_of_sb: report.policies_ahead_of_sb(),
                },
            )?;
            println!(
                "fraction degenerate {:.4} over {} calls",
                report.fraction_degenerate, report.sb_calls
            );
        }
    }
    Ok(())
}
