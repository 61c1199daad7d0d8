//! Best-bound branch and bound with a pluggable branching policy.
//!
//! Time is measured in node expansions: each step pops the open node with
//! the smallest LP bound, asks the policy for a variable, solves both
//! children and records the global dual bound. The area between that bound
//! curve and the root bound is the run's reward.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::branching::{self, child_overrides, BranchOutcome, BranchingPolicy, PolicyError};
use crate::lp::{solve_lp, BoundOverrides, LpSolution, LpStatus};
use crate::milp::MilpInstance;
use crate::seeds;

pub const DEFAULT_BUDGET: usize = 100;
/// Children whose bound is within this of the incumbent are pruned.
pub const PRUNE_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum BnbError {
    #[error("budget must be at least one step")]
    ZeroBudget,
    #[error("root LP is infeasible")]
    RootInfeasible,
    #[error("tree closed without an integral solution: the instance is infeasible")]
    Infeasible,
    #[error("LP at node {node_id} hit the iteration limit")]
    LpIterationLimit { node_id: u64 },
    #[error("branching policy failed at node {node_id} (depth {depth}): {source}")]
    Policy {
        node_id: u64,
        depth: usize,
        #[source]
        source: PolicyError,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnbNode {
    pub node_id: u64,
    pub depth: usize,
    pub overrides: BoundOverrides,
    pub lp: LpSolution,
}

impl BnbNode {
    pub fn bound(&self) -> f64 {
        self.lp.objective
    }
}

/// Order in which the two children of a branching are solved. Results do
/// not depend on it; it exists so tests can check exactly that.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ChildOrder {
    #[default]
    DownFirst,
    UpFirst,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnbConfig {
    pub budget: usize,
    pub seed: u64,
    pub child_order: ChildOrder,
}

impl Default for BnbConfig {
    fn default() -> Self {
        BnbConfig {
            budget: DEFAULT_BUDGET,
            seed: 0,
            child_order: ChildOrder::DownFirst,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnbTrace {
    /// Global dual bound after each step `t = 1..=budget`.
    pub z: Vec<f64>,
    /// Root LP bound.
    pub z0: f64,
    /// Incumbent objective after each step.
    pub incumbents: Vec<Option<f64>>,
    pub incumbent: Option<f64>,
    pub incumbent_x: Option<Vec<f64>>,
    /// Step after which no open node remained (0 when the root was integral).
    pub steps_to_close: Option<usize>,
    /// Number of steps that made a branching decision.
    pub branching_steps: usize,
    pub policy_name: String,
    pub seed: u64,
}

impl BnbTrace {
    pub fn reward(&self) -> f64 {
        dual_integral(self)
    }
}

/// Global dual bound: the smallest LP bound among open nodes, or the
/// incumbent once the tree is empty.
pub fn global_dual_bound(open_bounds: &[f64], incumbent: Option<f64>) -> Option<f64> {
    let open_min = open_bounds.iter().copied().reduce(f64::min);
    match (open_min, incumbent) {
        (Some(b), Some(inc)) => Some(b.min(inc)),
        (Some(b), None) => Some(b),
        (None, inc) => inc,
    }
}

/// `sum_t (z[t] - z0)` over the trace.
pub fn dual_integral(trace: &BnbTrace) -> f64 {
    trace.z.iter().map(|z| z - trace.z0).sum()
}

fn is_integral(inst: &MilpInstance, x: &[f64]) -> bool {
    branching::candidates(inst, x).is_err()
}

struct Child {
    overrides: BoundOverrides,
    lp: LpSolution,
}

pub fn run_bnb(
    inst: &MilpInstance,
    policy: &mut dyn BranchingPolicy,
    budget: usize,
    seed: u64,
) -> Result<BnbTrace, BnbError> {
    run_bnb_with(
        inst,
        policy,
        &BnbConfig {
            budget,
            seed,
            ..BnbConfig::default()
        },
    )
}

pub fn run_bnb_with(
    inst: &MilpInstance,
    policy: &mut dyn BranchingPolicy,
    config: &BnbConfig,
) -> Result<BnbTrace, BnbError> {
    if config.budget == 0 {
        return Err(BnbError::ZeroBudget);
    }
    let mut rng = seeds::derived_rng(config.seed, &[seeds::STREAM_EPISODE]);
    policy.begin_episode(&mut rng);

    let root_lp = solve_lp(inst, &BoundOverrides::new());
    match root_lp.status {
        LpStatus::Optimal => {}
        LpStatus::Infeasible => return Err(BnbError::RootInfeasible),
        LpStatus::IterationLimit => return Err(BnbError::LpIterationLimit { node_id: 0 }),
    }
    let z0 = root_lp.objective;
    let mut trace = BnbTrace {
        z: Vec::with_capacity(config.budget),
        z0,
        incumbents: Vec::with_capacity(config.budget),
        incumbent: None,
        incumbent_x: None,
        steps_to_close: None,
        branching_steps: 0,
        policy_name: policy.name(),
        seed: config.seed,
    };

    let mut open: Vec<BnbNode> = Vec::new();
    if is_integral(inst, &root_lp.x) {
        trace.incumbent = Some(z0);
        trace.incumbent_x = Some(root_lp.x.clone());
        trace.steps_to_close = Some(0);
    } else {
        open.push(BnbNode {
            node_id: 0,
            depth: 0,
            overrides: BoundOverrides::new(),
            lp: root_lp,
        });
    }
    let mut next_id = 1u64;

    for step in 1..=config.budget {
        if let Some(pos) = select_best_bound(&open) {
            let node = open.swap_remove(pos);
            let cands = branching::candidates(inst, &node.lp.x)
                .expect("open nodes always have fractional candidates");
            let decision = policy
                .decide(inst, &node, &cands, &mut rng)
                .map_err(|source| BnbError::Policy {
                    node_id: node.node_id,
                    depth: node.depth,
                    source,
                })?;
            let j = decision.var_index;
            if !cands.contains(&j) {
                return Err(BnbError::Policy {
                    node_id: node.node_id,
                    depth: node.depth,
                    source: PolicyError::NotACandidate { var: j },
                });
            }
            trace.branching_steps += 1;

            let (down_ov, up_ov) = child_overrides(inst, &node.overrides, j, node.lp.x[j]);
            let solve = |ov: BoundOverrides| Child {
                lp: solve_lp(inst, &ov),
                overrides: ov,
            };
            let (down, up) = match config.child_order {
                ChildOrder::DownFirst => {
                    let d = solve(down_ov);
                    (d, solve(up_ov))
                }
                ChildOrder::UpFirst => {
                    let u = solve(up_ov);
                    (solve(down_ov), u)
                }
            };

            let parent_bound = node.bound();
            let gain = |c: &Child| (c.lp.status == LpStatus::Optimal).then_some(c.lp.objective - parent_bound);
            policy.observe(&BranchOutcome {
                var: j,
                frac: node.lp.x[j] - node.lp.x[j].floor(),
                down_gain: gain(&down),
                up_gain: gain(&up),
            });

            // Incumbent updates from both children come before any push, so
            // the outcome is independent of the solve order.
            let mut fractional = Vec::with_capacity(2);
            for (k, mut child) in [down, up].into_iter().enumerate() {
                let id = next_id + k as u64;
                match child.lp.status {
                    LpStatus::Infeasible => continue,
                    LpStatus::IterationLimit => return Err(BnbError::LpIterationLimit { node_id: id }),
                    LpStatus::Optimal => {}
                }
                // A child's feasible set is a subset of its parent's.
                child.lp.objective = child.lp.objective.max(parent_bound);
                if is_integral(inst, &child.lp.x) {
                    if trace.incumbent.is_none_or(|inc| child.lp.objective < inc) {
                        trace.incumbent = Some(child.lp.objective);
                        trace.incumbent_x = Some(child.lp.x.clone());
                    }
                } else {
                    fractional.push(BnbNode {
                        node_id: id,
                        depth: node.depth + 1,
                        overrides: child.overrides,
                        lp: child.lp,
                    });
                }
            }
            next_id += 2;
            open.extend(fractional);
            if let Some(inc) = trace.incumbent {
                open.retain(|n| n.bound() < inc - PRUNE_TOL);
            }
            if open.is_empty() {
                trace.steps_to_close = Some(step);
            }
        }

        let bounds: Vec<f64> = open.iter().map(BnbNode::bound).collect();
        let z = match global_dual_bound(&bounds, trace.incumbent) {
            Some(z) => z,
            None => return Err(BnbError::Infeasible),
        };
        // Best-bound selection makes the bound monotone; this guards the last
        // ulp against the incumbent update.
        let z = trace.z.last().map_or(z, |&prev: &f64| z.max(prev));
        trace.z.push(z);
        trace.incumbents.push(trace.incumbent);
    }
    Ok(trace)
}

fn select_best_bound(open: &[BnbNode]) -> Option<usize> {
    open.iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| a.bound().total_cmp(&b.bound()).then(a.node_id.cmp(&b.node_id)))
        .map(|(k, _)| k)
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct TraceSidecar {
    pub z0: f64,
    pub policy_name: String,
    pub seed: u64,
    pub reward: f64,
    pub steps_to_close: Option<usize>,
    pub incumbent: Option<f64>,
    pub budget: usize,
}

/// CSV body `step,global_dual_bound,incumbent_or_empty`.
pub fn trace_csv(trace: &BnbTrace) -> String {
    let mut out = String::from("step,global_dual_bound,incumbent_or_empty\n");
    for (t, (z, inc)) in trace.z.iter().zip(&trace.incumbents).enumerate() {
        match inc {
            Some(v) => out.push_str(&format!("{},{},{}\n", t + 1, z, v)),
            None => out.push_str(&format!("{},{},\n", t + 1, z)),
        }
    }
    out
}

pub fn trace_sidecar(trace: &BnbTrace) -> TraceSidecar {
    TraceSidecar {
        z0: trace.z0,
        policy_name: trace.policy_name.clone(),
        seed: trace.seed,
        reward: dual_integral(trace),
        steps_to_close: trace.steps_to_close,
        incumbent: trace.incumbent,
        budget: trace.z.len(),
    }
}

/// Writes `<stem>.csv` and `<stem>.json` next to each other.
pub fn write_trace(trace: &BnbTrace, dir: &Path, stem: &str) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(format!("{stem}.csv")), trace_csv(trace))?;
    let mut f = std::fs::File::create(dir.join(format!("{stem}.json")))?;
    serde_json::to_writer_pretty(&mut f, &trace_sidecar(trace))?;
    writeln!(f)?;
    Ok(())
}
