//! Evaluation: offline accuracy and loss, online agreement with strong
//! branching, reward tables, the degeneracy probe and CSV export.

use std::fmt::Write as _;

use rayon::prelude::*;
use thiserror::Error;

use crate::bnb::{run_bnb, BnbError, BnbNode, BnbTrace};
use crate::branching::{
    strong_branching_decide, Baseline, BaselineKind, BranchDecision, BranchingPolicy, PolicyError, PolicySpec,
    StrongBranching, DEFAULT_SCORE_EPSILON,
};
use crate::milp::{canonicalize, MilpInstance, RawInstance, Sense};
use crate::nn::{self, ModelParams, NnError};
use crate::seeds::Rng;
use crate::state::BipartiteState;

pub const DEFAULT_DEGENERACY_THRESHOLD: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error(transparent)]
    Model(#[from] NnError),
    #[error(transparent)]
    Bnb(#[from] BnbError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub policy_name: String,
    pub seed: u64,
    pub n_samples: usize,
    pub top1: f64,
    pub top3: f64,
    pub top5: f64,
    pub mean_loss: f64,
    pub cum_reward: Option<f64>,
}

/// 1-based rank of `label` among the candidates, ordered by probability
/// descending with ties going to the lower index.
pub fn rank_of_label(probs: &[f64], candidates: &[usize], label: usize) -> usize {
    let p = probs[label];
    1 + candidates
        .iter()
        .filter(|&&j| j != label && (probs[j] > p || (probs[j] == p && j < label)))
        .count()
}

/// Mean of `1 / |candidates|`: the top-1 accuracy of a uniform guess.
pub fn uniform_baseline(dataset: &[BipartiteState]) -> f64 {
    dataset
        .iter()
        .map(|s| 1.0 / s.candidates().len().max(1) as f64)
        .sum::<f64>()
        / dataset.len().max(1) as f64
}

pub fn offline_metrics(
    model: &ModelParams,
    dataset: &[BipartiteState],
    policy_name: &str,
    seed: u64,
) -> Result<MetricsRecord, EvalError> {
    if dataset.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let per_sample: Vec<(usize, f64)> = dataset
        .par_iter()
        .enumerate()
        .map(|(k, s)| {
            let label = s.expert_action.ok_or(NnError::MissingLabel { index: k })?;
            let probs = nn::predict(model, s)?;
            let loss = nn::sample_loss(model, s)?;
            Ok((rank_of_label(&probs, &s.candidates(), label), loss))
        })
        .collect::<Result<_, NnError>>()?;
    let n = dataset.len() as f64;
    let within = |k: usize| per_sample.iter().filter(|(r, _)| *r <= k).count() as f64 / n;
    Ok(MetricsRecord {
        policy_name: policy_name.into(),
        seed,
        n_samples: dataset.len(),
        top1: within(1),
        top3: within(3),
        top5: within(5),
        mean_loss: per_sample.iter().map(|(_, l)| l).sum::<f64>() / n,
        cum_reward: None,
    })
}

/// Lets `inner` act while computing, but never using, the strong-branching
/// choice at every node.
pub struct ShadowSb {
    pub inner: Box<dyn BranchingPolicy>,
    pub epsilon: f64,
    pub agreement: Vec<bool>,
    pub candidate_counts: Vec<usize>,
}

impl ShadowSb {
    pub fn new(inner: Box<dyn BranchingPolicy>) -> Self {
        ShadowSb {
            inner,
            epsilon: DEFAULT_SCORE_EPSILON,
            agreement: Vec::new(),
            candidate_counts: Vec::new(),
        }
    }
}

impl BranchingPolicy for ShadowSb {
    fn name(&self) -> String {
        self.inner.name()
    }

    fn begin_episode(&mut self, rng: &mut Rng) {
        self.agreement.clear();
        self.candidate_counts.clear();
        self.inner.begin_episode(rng);
    }

    fn decide(
        &mut self,
        inst: &MilpInstance,
        node: &BnbNode,
        candidates: &[usize],
        rng: &mut Rng,
    ) -> Result<BranchDecision, PolicyError> {
        let acted = self.inner.decide(inst, node, candidates, rng)?;
        let expert = strong_branching_decide(inst, node, candidates, self.epsilon)?;
        self.agreement.push(acted.var_index == expert.var_index);
        self.candidate_counts.push(candidates.len());
        Ok(acted)
    }

    fn observe(&mut self, outcome: &crate::branching::BranchOutcome) {
        self.inner.observe(outcome);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OnlineAccuracy {
    pub agreement: Vec<bool>,
    pub candidate_counts: Vec<usize>,
    /// Per-step mean agreement; `None` when no branching happened.
    pub mean: Option<f64>,
    pub trace: BnbTrace,
}

impl OnlineAccuracy {
    /// Mean of `1/c` over the visited nodes: what a uniform guess would score.
    pub fn uniform_expectation(&self) -> Option<f64> {
        let n = self.candidate_counts.len();
        (n > 0).then(|| self.candidate_counts.iter().map(|&c| 1.0 / c as f64).sum::<f64>() / n as f64)
    }
}

pub fn online_accuracy(
    policy: Box<dyn BranchingPolicy>,
    inst: &MilpInstance,
    budget: usize,
    seed: u64,
) -> Result<OnlineAccuracy, EvalError> {
    let mut shadow = ShadowSb::new(policy);
    let trace = run_bnb(inst, &mut shadow, budget, seed)?;
    let n = shadow.agreement.len();
    let mean = (n > 0).then(|| shadow.agreement.iter().filter(|&&a| a).count() as f64 / n as f64);
    Ok(OnlineAccuracy {
        agreement: shadow.agreement,
        candidate_counts: shadow.candidate_counts,
        mean,
        trace,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub policy: String,
    pub instance: String,
    pub seed: u64,
    /// `None` when the run failed.
    pub reward: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RewardSummary {
    pub policy: String,
    pub n: usize,
    pub missing: usize,
    pub mean: f64,
    /// Sample standard deviation (0 for a single run).
    pub std: f64,
}

/// Every `(policy, instance, seed)` run, in that nesting order.
pub fn reward_comparison(
    policies: &[PolicySpec],
    instances: &[MilpInstance],
    budget: usize,
    seeds: &[u64],
) -> Vec<RunRecord> {
    let jobs: Vec<(&PolicySpec, &MilpInstance, u64)> = policies
        .iter()
        .flat_map(|p| instances.iter().flat_map(move |i| seeds.iter().map(move |&s| (p, i, s))))
        .collect();
    jobs.par_iter()
        .map(|&(spec, inst, seed)| {
            let mut policy = spec.build();
            let reward = run_bnb(inst, policy.as_mut(), budget, seed).ok().map(|t| t.reward());
            RunRecord {
                policy: spec.name(),
                instance: inst.name.clone(),
                seed,
                reward,
            }
        })
        .collect()
}

/// Per-policy mean and sample standard deviation, in order of first
/// appearance.
pub fn summarize(runs: &[RunRecord]) -> Vec<RewardSummary> {
    let mut names: Vec<&str> = Vec::new();
    for r in runs {
        if !names.contains(&r.policy.as_str()) {
            names.push(&r.policy);
        }
    }
    names
        .into_iter()
        .map(|name| {
            let all: Vec<&RunRecord> = runs.iter().filter(|r| r.policy == name).collect();
            let vals: Vec<f64> = all.iter().filter_map(|r| r.reward).collect();
            let n = vals.len();
            let mean = if n == 0 { f64::NAN } else { vals.iter().sum::<f64>() / n as f64 };
            let std = if n < 2 {
                0.0
            } else {
                (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            };
            RewardSummary {
                policy: name.into(),
                n,
                missing: all.len() - n,
                mean,
                std,
            }
        })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

pub fn runs_csv(runs: &[RunRecord]) -> String {
    let mut out = String::from("policy,instance,seed,reward\n");
    for r in runs {
        let _ = writeln!(out, "{},{},{},{}", r.policy, r.instance, r.seed, opt(r.reward));
    }
    out
}

pub fn parse_runs_csv(text: &str) -> Option<Vec<RunRecord>> {
    text.lines()
        .skip(1)
        .map(|line| {
            let f: Vec<&str> = line.rsplitn(4, ',').collect();
            if f.len() != 4 {
                return None;
            }
            Some(RunRecord {
                policy: f[3].into(),
                instance: f[2].into(),
                seed: f[1].parse().ok()?,
                reward: if f[0].is_empty() { None } else { Some(f[0].parse().ok()?) },
            })
        })
        .collect()
}

pub fn summary_csv(summary: &[RewardSummary]) -> String {
    let mut out = String::from("policy,n,missing,mean,std\n");
    for s in summary {
        let _ = writeln!(out, "{},{},{},{:?},{:?}", s.policy, s.n, s.missing, s.mean, s.std);
    }
    out
}

pub fn metrics_csv(records: &[MetricsRecord]) -> String {
    let mut out = String::from("policy,seed,n_samples,top1,top3,top5,mean_loss,cum_reward\n");
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{:?},{:?},{:?},{:?},{}",
            r.policy_name,
            r.seed,
            r.n_samples,
            r.top1,
            r.top3,
            r.top5,
            r.mean_loss,
            opt(r.cum_reward)
        );
    }
    out
}

pub fn online_csv(acc: &OnlineAccuracy) -> String {
    let mut out = String::from("step,agreement,candidates\n");
    for (k, (a, c)) in acc.agreement.iter().zip(&acc.candidate_counts).enumerate() {
        let _ = writeln!(out, "{},{},{}", k + 1, u8::from(*a), c);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub policy: String,
    /// `bounds[0]` is the root bound, `bounds[t]` the dual bound after step t.
    pub bounds: Vec<f64>,
}

impl Trajectory {
    fn from_trace(trace: &BnbTrace) -> Self {
        let mut bounds = Vec::with_capacity(trace.z.len() + 1);
        bounds.push(trace.z0);
        bounds.extend(&trace.z);
        Trajectory {
            policy: trace.policy_name.clone(),
            bounds,
        }
    }

    /// True when `self` is never below `other` and strictly above it at
    /// least once.
    pub fn dominates(&self, other: &Trajectory) -> bool {
        self.bounds.len() == other.bounds.len()
            && self.bounds.iter().zip(&other.bounds).all(|(a, b)| a >= b)
            && self.bounds.iter().zip(&other.bounds).any(|(a, b)| a > b)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DegeneracyReport {
    pub threshold: f64,
    pub epsilon: f64,
    pub sb_calls: usize,
    pub degenerate_calls: usize,
    /// Share of strong-branching calls whose best score is at most the
    /// threshold; 0 when there were no calls.
    pub fraction_degenerate: f64,
    pub no_sb_calls: bool,
    /// Strong branching first, then random, most-fractional and extras.
    pub trajectories: Vec<Trajectory>,
}

impl DegeneracyReport {
    /// Policies whose trajectory dominates strong branching's.
    pub fn policies_ahead_of_sb(&self) -> Vec<&str> {
        let sb = &self.trajectories[0];
        self.trajectories[1..]
            .iter()
            .filter(|t| t.dominates(sb))
            .map(|t| t.policy.as_str())
            .collect()
    }
}

pub fn degeneracy_probe(
    inst: &MilpInstance,
    budget: usize,
    seed: u64,
    extra: &[PolicySpec],
    threshold: f64,
    epsilon: f64,
) -> Result<DegeneracyReport, EvalError> {
    let mut sb = StrongBranching::with_epsilon(epsilon);
    let sb_trace = run_bnb(inst, &mut sb, budget, seed)?;
    let sb_calls = sb.best_scores.len();
    let degenerate_calls = sb.best_scores.iter().filter(|&&s| s <= threshold).count();
    let mut trajectories = vec![Trajectory::from_trace(&sb_trace)];
    let mut others: Vec<Box<dyn BranchingPolicy>> = vec![
        Box::new(Baseline(BaselineKind::Random)),
        Box::new(Baseline(BaselineKind::MostFractional)),
    ];
    others.extend(extra.iter().map(PolicySpec::build));
    for mut p in others {
        trajectories.push(Trajectory::from_trace(&run_bnb(inst, p.as_mut(), budget, seed)?));
    }
    Ok(DegeneracyReport {
        threshold,
        epsilon,
        sb_calls,
        degenerate_calls,
        fraction_degenerate: if sb_calls == 0 { 0.0 } else { degenerate_calls as f64 / sb_calls as f64 },
        no_sb_calls: sb_calls == 0,
        trajectories,
    })
}

pub fn trajectories_csv(trajectories: &[Trajectory]) -> String {
    let mut out = String::from("policy,step,dual_bound\n");
    for t in trajectories {
        for (step, b) in t.bounds.iter().enumerate() {
            let _ = writeln!(out, "{},{},{:?}", t.policy, step, b);
        }
    }
    out
}

/// Two groups of three identical columns under covering rows with
/// fractional right-hand sides. Weight moves freely inside a group, so both
/// child bounds of a branching often equal the parent's and strong branching
/// scores collapse to `epsilon^2`.
pub fn duplicate_column_instance() -> MilpInstance {
    const COSTS: [f64; 2] = [3.0, 8.0];
    const COPIES: usize = 3;
    // Per row: coefficient of each group, then the right-hand side.
    const ROWS: [([f64; 2], f64); 3] = [([2.0, 1.0], 3.5), ([2.0, 2.0], 4.5), ([0.0, 3.0], 3.5)];
    let group = |j: usize| j / COPIES;
    let n = COSTS.len() * COPIES;
    let rows = ROWS
        .iter()
        .map(|(coef, _)| (0..n).filter(|&j| coef[group(j)] != 0.0).map(|j| (j, coef[group(j)])).collect())
        .collect();
    canonicalize(RawInstance {
        name: "duplicate-columns".into(),
        maximize: false,
        obj: (0..n).map(|j| COSTS[group(j)]).collect(),
        var_lb: vec![0.0; n],
        var_ub: vec![1.0; n],
        is_integer: vec![true; n],
        rows,
        sense: vec![Sense::Ge; ROWS.len()],
        rhs: ROWS.iter().map(|r| r.1).collect(),
        sign_flip: false,
    })
    .expect("the crafted instance is valid")
}

/// Episode seed under which the probe on [`duplicate_column_instance`]
/// shows strong branching falling behind.
pub const DUPLICATE_PROBE_SEED: u64 = 1;

/// Ranks starting at 1, tied values sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && values[idx[end]] == values[idx[start]] {
            end += 1;
        }
        let avg = (start + end + 1) as f64 / 2.0;
        for &k in &idx[start..end] {
            ranks[k] = avg;
        }
        start = end;
    }
    ranks
}

/// Spearman rank correlation; `None` for fewer than two points or a
/// constant input.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    (vx > 0.0 && vy > 0.0).then(|| cov / (vx * vy).sqrt())
}

/// Offline metrics and mean reward for every model of a pool, plus the rank
/// correlation between top-1 accuracy and reward.
#[derive(Debug, Clone, PartialEq)]
pub struct JointTable {
    pub rows: Vec<MetricsRecord>,
    pub spearman_top1_reward: Option<f64>,
}

pub fn joint_table(
    models: &[(String, ModelParams)],
    heldout: &[BipartiteState],
    instances: &[MilpInstance],
    budget: usize,
    seeds: &[u64],
) -> Result<JointTable, EvalError> {
    let mut rows = Vec::with_capacity(models.len());
    for (label, model) in models {
        let mut rec = offline_metrics(model, heldout, label, seeds.first().copied().unwrap_or(0))?;
        let spec = PolicySpec::Model {
            params: std::sync::Arc::new(model.clone()),
            label: label.clone(),
        };
        let runs = reward_comparison(std::slice::from_ref(&spec), instances, budget, seeds);
        rec.cum_reward = summarize(&runs).first().map(|s| s.mean).filter(|m| m.is_finite());
        rows.push(rec);
    }
    let paired: Vec<(f64, f64)> = rows.iter().filter_map(|r| r.cum_reward.map(|c| (r.top1, c))).collect();
    let (acc, rew): (Vec<f64>, Vec<f64>) = paired.into_iter().unzip();
    Ok(JointTable {
        spearman_top1_reward: spearman(&acc, &rew),
        rows,
    })
}
