//! Variable selection rules: strong branching (the expert), pseudo-costs,
//! random and most-fractional baselines, the learned model, and the mixture
//! used to roll out DAgger episodes.

use std::sync::Arc;

use rand::Rng as _;
use thiserror::Error;

use crate::bnb::BnbNode;
use crate::lp::{effective_bounds, solve_lp, BoundOverrides, LpStatus};
use crate::milp::MilpInstance;
use crate::nn::{self, ModelParams};
use crate::seeds::Rng;
use crate::state::{extract_state, BipartiteState, StateError};

pub const INTEGRALITY_TOL: f64 = 1e-6;
/// Gain assigned to a child whose LP is infeasible.
pub const INFEASIBLE_GAIN: f64 = 1e10;
pub const DEFAULT_SCORE_EPSILON: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("child LP for variable {var} hit the iteration limit")]
    ChildLpIterationLimit { var: usize },
    #[error("state extraction failed: {0}")]
    State(#[from] StateError),
    #[error("model error: {0}")]
    Model(String),
    #[error("policy returned variable {var}, which is not a candidate")]
    NotACandidate { var: usize },
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("no fractional integer variable: the node is integral")]
pub struct NoFractionalCandidates;

#[derive(Debug, Clone, PartialEq)]
pub struct BranchDecision {
    pub var_index: usize,
    /// One score per entry of `candidate_set`.
    pub scores: Vec<f64>,
    pub expert_used: bool,
    pub candidate_set: Vec<usize>,
}

impl BranchDecision {
    /// Builds a decision choosing the first maximal score.
    pub fn from_scores(candidate_set: Vec<usize>, scores: Vec<f64>) -> Self {
        let pos = argmax_first(&scores);
        BranchDecision {
            var_index: candidate_set[pos],
            scores,
            expert_used: false,
            candidate_set,
        }
    }

    pub fn best_score(&self) -> f64 {
        self.scores.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// True when every score is at or below `threshold`, i.e. the rule had
    /// nothing to distinguish the candidates by.
    pub fn is_degenerate(&self, threshold: f64) -> bool {
        self.best_score() <= threshold
    }
}

/// Relative gap below which two scores count as tied. Symmetric children
/// can differ by a few ulps depending on the pivot path.
pub const SCORE_TIE_TOL: f64 = 1e-12;

/// Position of the first maximum; candidates are ascending, so ties (up to
/// [`SCORE_TIE_TOL`]) go to the lowest variable index.
pub fn argmax_first(scores: &[f64]) -> usize {
    let mut best = 0;
    for (k, &s) in scores.iter().enumerate().skip(1) {
        let b = scores[best];
        if s - b > SCORE_TIE_TOL * s.abs().max(b.abs()) {
            best = k;
        }
    }
    best
}

/// Integer variables whose LP value is more than `1e-6` from an integer,
/// ascending.
pub fn candidates(inst: &MilpInstance, x: &[f64]) -> Result<Vec<usize>, NoFractionalCandidates> {
    let c: Vec<usize> = (0..inst.n_vars())
        .filter(|&j| inst.is_integer[j] && (x[j] - x[j].round()).abs() > INTEGRALITY_TOL)
        .collect();
    if c.is_empty() {
        Err(NoFractionalCandidates)
    } else {
        Ok(c)
    }
}

/// Product score `max(down, eps) * max(up, eps)`.
pub fn product_score(down_gain: f64, up_gain: f64, epsilon: f64) -> f64 {
    down_gain.max(epsilon) * up_gain.max(epsilon)
}

/// Bound overrides of the down (`x_j <= floor`) and up (`x_j >= ceil`)
/// children of `node` on variable `j`.
pub fn child_overrides(
    inst: &MilpInstance,
    node_overrides: &BoundOverrides,
    j: usize,
    value: f64,
) -> (BoundOverrides, BoundOverrides) {
    let (lb, ub) = effective_bounds(inst, node_overrides);
    let mut down = node_overrides.clone();
    down.insert(j, (lb[j], value.floor()));
    let mut up = node_overrides.clone();
    up.insert(j, (value.ceil(), ub[j]));
    (down, up)
}

/// What happened when the engine branched: the observed child gains, which
/// pseudo-cost bookkeeping consumes.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchOutcome {
    pub var: usize,
    /// `x_j - floor(x_j)` at the parent.
    pub frac: f64,
    /// Gain of the child, `None` when its LP was infeasible.
    pub down_gain: Option<f64>,
    pub up_gain: Option<f64>,
}

pub trait BranchingPolicy: Send {
    fn name(&self) -> String;

    /// Called once before each branch-and-bound run.
    fn begin_episode(&mut self, _rng: &mut Rng) {}

    /// Chooses a branching variable among `candidates` (non-empty,
    /// ascending).
    fn decide(
        &mut self,
        inst: &MilpInstance,
        node: &BnbNode,
        candidates: &[usize],
        rng: &mut Rng,
    ) -> Result<BranchDecision, PolicyError>;

    fn observe(&mut self, _outcome: &BranchOutcome) {}
}

/// Child LP gains of every candidate: `(down, up)`, infeasible children
/// scored at [`INFEASIBLE_GAIN`].
pub fn strong_branching_gains(
    inst: &MilpInstance,
    node: &BnbNode,
    candidates: &[usize],
) -> Result<Vec<(f64, f64)>, PolicyError> {
    let parent = node.lp.objective;
    candidates
        .iter()
        .map(|&j| {
            let (down, up) = child_overrides(inst, &node.overrides, j, node.lp.x[j]);
            let gain = |ov: &BoundOverrides| {
                let lp = solve_lp(inst, ov);
                match lp.status {
                    LpStatus::Optimal => Ok((lp.objective - parent).max(0.0)),
                    LpStatus::Infeasible => Ok(INFEASIBLE_GAIN),
                    LpStatus::IterationLimit => Err(PolicyError::ChildLpIterationLimit { var: j }),
                }
            };
            Ok((gain(&down)?, gain(&up)?))
        })
        .collect()
}

pub fn strong_branching_decide(
    inst: &MilpInstance,
    node: &BnbNode,
    candidates: &[usize],
    epsilon: f64,
) -> Result<BranchDecision, PolicyError> {
    let gains = strong_branching_gains(inst, node, candidates)?;
    let scores = gains
        .iter()
        .map(|&(d, u)| product_score(d, u, epsilon))
        .collect();
    let mut decision = BranchDecision::from_scores(candidates.to_vec(), scores);
    decision.expert_used = true;
    Ok(decision)
}

/// Full strong branching. Keeps the best score of every call so the
/// degeneracy probe can inspect it afterwards.
#[derive(Debug, Clone)]
pub struct StrongBranching {
    pub epsilon: f64,
    pub best_scores: Vec<f64>,
}

impl Default for StrongBranching {
    fn default() -> Self {
        StrongBranching {
            epsilon: DEFAULT_SCORE_EPSILON,
            best_scores: Vec::new(),
        }
    }
}

impl StrongBranching {
    pub fn with_epsilon(epsilon: f64) -> Self {
        StrongBranching {
            epsilon,
            best_scores: Vec::new(),
        }
    }
}

impl BranchingPolicy for StrongBranching {
    fn name(&self) -> String {
        "sb".into()
    }

    fn begin_episode(&mut self, _rng: &mut Rng) {
        self.best_scores.clear();
    }

    fn decide(
        &mut self,
        inst: &MilpInstance,
        node: &BnbNode,
        candidates: &[usize],
        _rng: &mut Rng,
    ) -> Result<BranchDecision, PolicyError> {
        let d = strong_branching_decide(inst, node, candidates, self.epsilon)?;
        self.best_scores.push(d.best_score());
        Ok(d)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Down,
    Up,
}

/// Per-variable accumulated unit gains.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudocostState {
    pub up_sum: Vec<f64>,
    pub down_sum: Vec<f64>,
    pub up_count: Vec<u32>,
    pub down_count: Vec<u32>,
}

impl PseudocostState {
    pub fn new(n_vars: usize) -> Self {
        PseudocostState {
            up_sum: vec![0.0; n_vars],
            down_sum: vec![0.0; n_vars],
            up_count: vec![0; n_vars],
            down_count: vec![0; n_vars],
        }
    }

    /// Records a child gain observed over a bound change of `distance`
    /// (the fractionality used for that direction).
    pub fn update(&mut self, j: usize, dir: Direction, gain: f64, distance: f64) {
        if distance <= 0.0 || !gain.is_finite() {
            return;
        }
        let (sum, count) = match dir {
            Direction::Down => (&mut self.down_sum, &mut self.down_count),
            Direction::Up => (&mut self.up_sum, &mut self.up_count),
        };
        sum[j] += gain / distance;
        count[j] += 1;
    }

    /// Unit cost of `j` in `dir`: its own average, else the mean over
    /// initialized variables, else 1.
    pub fn unit_cost(&self, j: usize, dir: Direction) -> f64 {
        let (sum, count) = match dir {
            Direction::Down => (&self.down_sum, &self.down_count),
            Direction::Up => (&self.up_sum, &self.up_count),
        };
        if count[j] > 0 {
            return sum[j] / count[j] as f64;
        }
        let (total, seen) = sum
            .iter()
            .zip(count)
            .filter(|(_, &c)| c > 0)
            .fold((0.0, 0usize), |(t, k), (s, &c)| (t + s / c as f64, k + 1));
        if seen > 0 {
            total / seen as f64
        } else {
            1.0
        }
    }
}

pub fn pseudocost_decide(
    state: &PseudocostState,
    x: &[f64],
    candidates: &[usize],
    epsilon: f64,
) -> BranchDecision {
    let scores = candidates
        .iter()
        .map(|&j| {
            let f = x[j] - x[j].floor();
            product_score(
                state.unit_cost(j, Direction::Down) * f,
                state.unit_cost(j, Direction::Up) * (1.0 - f),
                epsilon,
            )
        })
        .collect();
    BranchDecision::from_scores(candidates.to_vec(), scores)
}

#[derive(Debug, Clone)]
pub struct Pseudocost {
    pub state: PseudocostState,
    pub epsilon: f64,
}

impl Default for Pseudocost {
    fn default() -> Self {
        Pseudocost {
            state: PseudocostState::new(0),
            epsilon: DEFAULT_SCORE_EPSILON,
        }
    }
}

impl BranchingPolicy for Pseudocost {
    fn name(&self) -> String {
        "pseudocost".into()
    }

    fn begin_episode(&mut self, _rng: &mut Rng) {
        self.state = PseudocostState::new(0);
    }

    fn decide(
        &mut self,
        inst: &MilpInstance,
        node: &BnbNode,
        candidates: &[usize],
        _rng: &mut Rng,
    ) -> Result<BranchDecision, PolicyError> {
        if self.state.up_sum.len() != inst.n_vars() {
            self.state = PseudocostState::new(inst.n_vars());
        }
        Ok(pseudocost_decide(&self.state, &node.lp.x, candidates, self.epsilon))
    }

    fn observe(&mut self, o: &BranchOutcome) {
        if o.var >= self.state.up_sum.len() {
            return;
        }
        if let Some(g) = o.down_gain {
            self.state.update(o.var, Direction::Down, g, o.frac);
        }
        if let Some(g) = o.up_gain {
            self.state.update(o.var, Direction::Up, g, 1.0 - o.frac);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineKind {
    Random,
    MostFractional,
}

pub fn baseline_decide(
    kind: BaselineKind,
    x: &[f64],
    candidates: &[usize],
    rng: &mut Rng,
) -> BranchDecision {
    let scores = match kind {
        BaselineKind::Random => {
            let pick = rng.gen_range(0..candidates.len());
            (0..candidates.len()).map(|k| if k == pick { 1.0 } else { 0.0 }).collect()
        }
        BaselineKind::MostFractional => candidates
            .iter()
            .map(|&j| {
                let f = x[j] - x[j].floor();
                f.min(1.0 - f)
            })
            .collect(),
    };
    BranchDecision::from_scores(candidates.to_vec(), scores)
}

#[derive(Debug, Clone, Copy)]
pub struct Baseline(pub BaselineKind);

impl BranchingPolicy for Baseline {
    fn name(&self) -> String {
        match self.0 {
            BaselineKind::Random => "random".into(),
            BaselineKind::MostFractional => "mostfrac".into(),
        }
    }

    fn decide(
        &mut self,
        _inst: &MilpInstance,
        node: &BnbNode,
        candidates: &[usize],
        rng: &mut Rng,
    ) -> Result<BranchDecision, PolicyError> {
        Ok(baseline_decide(self.0, &node.lp.x, candidates, rng))
    }
}

/// Greedy policy of a trained network: argmax of the masked softmax.
#[derive(Debug, Clone)]
pub struct ModelPolicy {
    pub params: Arc<ModelParams>,
    pub label: String,
}

impl ModelPolicy {
    pub fn new(params: Arc<ModelParams>, label: impl Into<String>) -> Self {
        ModelPolicy {
            params,
            label: label.into(),
        }
    }
}

impl BranchingPolicy for ModelPolicy {
    fn name(&self) -> String {
        self.label.clone()
    }

    fn decide(
        &mut self,
        inst: &MilpInstance,
        node: &BnbNode,
        candidates: &[usize],
        _rng: &mut Rng,
    ) -> Result<BranchDecision, PolicyError> {
        let state = extract_state(inst, &node.overrides, &node.lp)?;
        let probs = nn::predict(&self.params, &state).map_err(|e| PolicyError::Model(e.to_string()))?;
        let scores = candidates.iter().map(|&j| probs[j]).collect();
        Ok(BranchDecision::from_scores(candidates.to_vec(), scores))
    }
}

/// When the expert coin is flipped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoinMode {
    PerDecision,
    PerEpisode,
}

/// Acts with strong branching with probability `p_expert`, otherwise with the
/// wrapped model, and collects an expert-labeled state whenever the expert
/// acts (or at every decision with `label_all_states`).
pub struct MixturePolicy {
    pub model: Box<dyn BranchingPolicy>,
    pub expert: StrongBranching,
    pub p_expert: f64,
    pub mode: CoinMode,
    pub label_all_states: bool,
    pub collected: Vec<BipartiteState>,
    pub decisions: usize,
    pub expert_decisions: usize,
    episode_coin: bool,
}

impl MixturePolicy {
    pub fn new(model: Box<dyn BranchingPolicy>, p_expert: f64) -> Self {
        assert!((0.0..=1.0).contains(&p_expert), "p_expert must lie in [0, 1]");
        MixturePolicy {
            model,
            expert: StrongBranching::default(),
            p_expert,
            mode: CoinMode::PerDecision,
            label_all_states: false,
            collected: Vec::new(),
            decisions: 0,
            expert_decisions: 0,
            episode_coin: false,
        }
    }

    pub fn with_mode(mut self, mode: CoinMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn label_all_states(mut self, on: bool) -> Self {
        self.label_all_states = on;
        self
    }

    fn coin(&self, rng: &mut Rng) -> bool {
        rng.gen::<f64>() < self.p_expert
    }
}

impl BranchingPolicy for MixturePolicy {
    fn name(&self) -> String {
        format!("mixture({},{})", self.model.name(), self.p_expert)
    }

    fn begin_episode(&mut self, rng: &mut Rng) {
        if self.mode == CoinMode::PerEpisode {
            self.episode_coin = self.coin(rng);
        }
        self.model.begin_episode(rng);
        self.expert.begin_episode(rng);
    }

    fn decide(
        &mut self,
        inst: &MilpInstance,
        node: &BnbNode,
        candidates: &[usize],
        rng: &mut Rng,
    ) -> Result<BranchDecision, PolicyError> {
        let use_expert = match self.mode {
            CoinMode::PerDecision => self.coin(rng),
            CoinMode::PerEpisode => self.episode_coin,
        };
        self.decisions += 1;
        let decision = if use_expert {
            self.expert_decisions += 1;
            let d = self.expert.decide(inst, node, candidates, rng)?;
            let state = extract_state(inst, &node.overrides, &node.lp)?;
            self.collected.push(state.with_label(d.var_index));
            d
        } else {
            let mut d = self.model.decide(inst, node, candidates, rng)?;
            d.expert_used = false;
            if self.label_all_states {
                let label = strong_branching_decide(inst, node, candidates, self.expert.epsilon)?;
                let state = extract_state(inst, &node.overrides, &node.lp)?;
                self.collected.push(state.with_label(label.var_index));
            }
            d
        };
        Ok(decision)
    }

    fn observe(&mut self, outcome: &BranchOutcome) {
        self.model.observe(outcome);
    }
}

/// Named, buildable policy. Every run gets a fresh instance so no state
/// leaks between episodes.
#[derive(Debug, Clone)]
pub enum PolicySpec {
    StrongBranching,
    Pseudocost,
    Random,
    MostFractional,
    Model { params: Arc<ModelParams>, label: String },
    Mixture { params: Arc<ModelParams>, label: String, p_expert: f64 },
}

impl PolicySpec {
    pub fn name(&self) -> String {
        match self {
            PolicySpec::StrongBranching => "sb".into(),
            PolicySpec::Pseudocost => "pseudocost".into(),
            PolicySpec::Random => "random".into(),
            PolicySpec::MostFractional => "mostfrac".into(),
            PolicySpec::Model { label, .. } => label.clone(),
            PolicySpec::Mixture { label, p_expert, .. } => format!("mixture:{label}:{p_expert}"),
        }
    }

    pub fn build(&self) -> Box<dyn BranchingPolicy> {
        match self {
            PolicySpec::StrongBranching => Box::new(StrongBranching::default()),
            PolicySpec::Pseudocost => Box::new(Pseudocost::default()),
            PolicySpec::Random => Box::new(Baseline(BaselineKind::Random)),
            PolicySpec::MostFractional => Box::new(Baseline(BaselineKind::MostFractional)),
            PolicySpec::Model { params, label } => Box::new(ModelPolicy::new(params.clone(), label.clone())),
            PolicySpec::Mixture { params, label, p_expert } => Box::new(MixturePolicy::new(
                Box::new(ModelPolicy::new(params.clone(), label.clone())),
                *p_expert,
            )),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lp::LpSolution;
    use crate::milp::{canonicalize, RawInstance};
    use crate::seeds;

    fn binaries(n: usize) -> MilpInstance {
        canonicalize(RawInstance {
            name: "b".into(),
            maximize: false,
            obj: vec![1.0; n],
            var_lb: vec![0.0; n],
            var_ub: vec![1.0; n],
            is_integer: vec![true; n],
            rows: vec![],
            sense: vec![],
            rhs: vec![],
            sign_flip: false,
        })
        .unwrap()
    }

    fn node_at(x: Vec<f64>) -> BnbNode {
        let n = x.len();
        BnbNode {
            node_id: 0,
            depth: 0,
            overrides: BoundOverrides::new(),
            lp: LpSolution {
                status: LpStatus::Optimal,
                x,
                objective: 0.0,
                duals: vec![],
                reduced_costs: vec![0.0; n],
                basis: vec![crate::lp::BasisStatus::Basic; n],
                iterations: 0,
            },
        }
    }

    #[test]
    fn candidates_respect_tolerance() {
        let inst = binaries(3);
        assert_eq!(candidates(&inst, &[0.5, 1.0, 0.3]), Ok(vec![0, 2]));
        assert_eq!(candidates(&inst, &[0.0, 1.0, 1.0]), Err(NoFractionalCandidates));
        assert_eq!(candidates(&inst, &[0.9999995, 0.5, 0.0]), Ok(vec![1]));
    }

    #[test]
    fn product_score_examples() {
        assert_eq!(product_score(2.0, 3.0, 1e-6), 6.0);
        assert!((product_score(0.0, 5.0, 1e-6) - 5e-6).abs() < 1e-18);
    }

    #[test]
    fn fresh_pseudocosts_tie_to_lowest_index() {
        let st = PseudocostState::new(2);
        let d = pseudocost_decide(&st, &[0.5, 0.5], &[0, 1], 1e-6);
        assert_eq!(d.var_index, 0);
        assert_eq!(d.scores[0], d.scores[1]);
    }

    #[test]
    fn pseudocost_update_arithmetic() {
        let mut st = PseudocostState::new(3);
        st.update(1, Direction::Down, 4.0, 0.5);
        assert_eq!(st.unit_cost(1, Direction::Down), 8.0);
        // Uninitialized variables fall back to the mean of initialized ones.
        assert_eq!(st.unit_cost(0, Direction::Down), 8.0);
        assert_eq!(st.unit_cost(0, Direction::Up), 1.0);
        st.update(2, Direction::Down, 1.0, 0.25);
        assert_eq!(st.unit_cost(0, Direction::Down), 6.0);
    }

    #[test]
    fn baselines_pick_expected_candidates() {
        let mut rng = seeds::rng(1);
        for kind in [BaselineKind::Random, BaselineKind::MostFractional] {
            assert_eq!(baseline_decide(kind, &[0.3], &[0], &mut rng).var_index, 0);
        }
        let d = baseline_decide(BaselineKind::MostFractional, &[0.5, 0.1], &[0, 1], &mut rng);
        assert_eq!(d.var_index, 0);
    }

    #[test]
    fn random_baseline_is_uniform() {
        let mut rng = seeds::rng(42);
        let cands = [0, 1, 2, 3];
        let x = [0.5; 4];
        let mut counts = [0usize; 4];
        let draws = 10_000;
        for _ in 0..draws {
            counts[baseline_decide(BaselineKind::Random, &x, &cands, &mut rng).var_index] += 1;
        }
        for c in counts {
            let freq = c as f64 / draws as f64;
            assert!((freq - 0.25).abs() <= 0.02, "{counts:?}");
        }
    }

    #[test]
    fn mixture_extremes_and_rate() {
        let inst = binaries(2);
        let node = node_at(vec![0.5, 0.5]);
        for (p, expect) in [(0.0, 0.0), (1.0, 1.0)] {
            let mut mix = MixturePolicy::new(Box::new(Baseline(BaselineKind::MostFractional)), p);
            let mut rng = seeds::rng(3);
            for _ in 0..200 {
                let d = mix.decide(&inst, &node, &[0, 1], &mut rng).unwrap();
                assert_eq!(d.expert_used, p == 1.0);
            }
            assert_eq!(mix.expert_decisions as f64 / 200.0, expect);
        }
        let mut mix = MixturePolicy::new(Box::new(Baseline(BaselineKind::MostFractional)), 0.05);
        let mut rng = seeds::rng(9);
        for _ in 0..10_000 {
            mix.decide(&inst, &node, &[0, 1], &mut rng).unwrap();
        }
        let rate = mix.expert_decisions as f64 / mix.decisions as f64;
        assert!((rate - 0.05).abs() <= 0.01, "rate {rate}");
        assert_eq!(mix.collected.len(), mix.expert_decisions);
    }

    #[test]
    fn per_episode_coin_is_constant_within_an_episode() {
        let inst = binaries(2);
        let node = node_at(vec![0.5, 0.5]);
        let mut mix = MixturePolicy::new(Box::new(Baseline(BaselineKind::MostFractional)), 0.5)
            .with_mode(CoinMode::PerEpisode);
        let mut rng = seeds::rng(5);
        let mut seen = [false; 2];
        for _ in 0..20 {
            mix.begin_episode(&mut rng);
            let first = mix.decide(&inst, &node, &[0, 1], &mut rng).unwrap().expert_used;
            for _ in 0..5 {
                assert_eq!(mix.decide(&inst, &node, &[0, 1], &mut rng).unwrap().expert_used, first);
            }
            seen[first as usize] = true;
        }
        assert_eq!(seen, [true, true]);
    }
}
