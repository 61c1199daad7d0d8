mod common;

use branchforge::bnb::{run_bnb_with, trace_csv, BnbConfig, BnbNode, ChildOrder};
use branchforge::branching::{
    candidates, child_overrides, BranchDecision, BranchOutcome, BranchingPolicy, PolicyError,
    PolicySpec, Pseudocost, StrongBranching,
};
use branchforge::eval::duplicate_column_instance;
use branchforge::lp::vertex_oracle;
use branchforge::milp::{canonicalize, gen_assignment, gen_set_cover, MilpInstance, RawInstance};
use branchforge::seeds::Rng;
use branchforge::{run_bnb, solve_lp, BoundOverrides};
use common::{enumerate_assignment_optimum, enumerate_binary_optimum};

const CLOSE_BUDGET: usize = 2000;

fn all_policies() -> Vec<PolicySpec> {
    vec![
        PolicySpec::StrongBranching,
        PolicySpec::Pseudocost,
        PolicySpec::Random,
        PolicySpec::MostFractional,
    ]
}

fn small_set_cover(seed: u64) -> MilpInstance {
    gen_set_cover(seed, 6, 8, 0.35).unwrap()
}

fn small_assignment(seed: u64) -> MilpInstance {
    gen_assignment(seed, 4, 2).unwrap()
}

fn assert_solves_to(inst: &MilpInstance, optimum: f64, policy: &PolicySpec, seed: u64) {
    let mut p = policy.build();
    let trace = run_bnb(inst, p.as_mut(), CLOSE_BUDGET, seed).unwrap();
    assert!(trace.steps_to_close.is_some(), "{} did not close {}", policy.name(), inst.name);
    let inc = trace.incumbent.expect("closed tree has an incumbent");
    assert!(
        (inc - optimum).abs() <= 1e-6 * optimum.abs().max(1.0),
        "{} on {}: {inc} vs {optimum}",
        policy.name(),
        inst.name
    );
    let x = trace.incumbent_x.unwrap();
    assert!(inst.is_feasible(&x, 1e-6));
    assert!(x.iter().all(|v| (v - v.round()).abs() <= 1e-6));
    assert!((trace.z.last().unwrap() - optimum).abs() <= 1e-6 * optimum.abs().max(1.0));
}

#[test]
fn small_instances_match_enumeration_under_every_policy() {
    for seed in 0..50 {
        let sc = small_set_cover(seed);
        let opt = enumerate_binary_optimum(&sc).unwrap();
        let asg = small_assignment(seed);
        let opt_a = enumerate_assignment_optimum(&asg, 4, 2).unwrap();
        assert_eq!(opt_a, enumerate_binary_optimum(&asg).unwrap());
        for p in all_policies() {
            assert_solves_to(&sc, opt, &p, seed);
            assert_solves_to(&asg, opt_a, &p, seed);
        }
    }
}

#[test]
fn fixed_generator_instances_match_enumeration() {
    let sc = gen_set_cover(3, 6, 12, 0.25).unwrap();
    let opt = enumerate_binary_optimum(&sc).unwrap();
    let asg = gen_assignment(9, 5, 3).unwrap();
    let opt_a = enumerate_assignment_optimum(&asg, 5, 3).unwrap();
    for p in all_policies() {
        assert_solves_to(&sc, opt, &p, 0);
        assert_solves_to(&asg, opt_a, &p, 0);
    }
}

#[test]
fn bound_is_monotone_below_optimum_and_deterministic() {
    for seed in 0..10 {
        let inst = gen_set_cover(seed, 10, 20, 0.3).unwrap();
        let opt = enumerate_binary_optimum(&inst).unwrap();
        for p in all_policies() {
            let a = run_bnb(&inst, p.build().as_mut(), 60, seed).unwrap();
            let b = run_bnb(&inst, p.build().as_mut(), 60, seed).unwrap();
            assert_eq!(a, b, "{} is not deterministic", p.name());
            assert_eq!(a.z.len(), 60);
            assert!(a.z0 <= a.z[0] + 1e-9);
            for w in a.z.windows(2) {
                assert!(w[0] <= w[1]);
            }
            assert!(a.z.iter().all(|&z| z <= opt + 1e-6));
            assert!(a.reward() >= 0.0);
        }
    }
}

#[test]
fn reward_does_not_depend_on_child_solve_order() {
    for seed in 0..10 {
        let inst = gen_set_cover(seed, 12, 24, 0.2).unwrap();
        for p in all_policies() {
            let run = |order| {
                let cfg = BnbConfig {
                    budget: 50,
                    seed,
                    child_order: order,
                };
                run_bnb_with(&inst, p.build().as_mut(), &cfg).unwrap()
            };
            let down = run(ChildOrder::DownFirst);
            let up = run(ChildOrder::UpFirst);
            assert_eq!(down.z, up.z, "{}", p.name());
            assert_eq!(down.reward(), up.reward());
        }
    }
}

#[test]
fn reward_recomputed_from_trace_csv() {
    let inst = gen_set_cover(4, 12, 24, 0.2).unwrap();
    let trace = run_bnb(&inst, PolicySpec::Random.build().as_mut(), 40, 7).unwrap();
    let csv = trace_csv(&trace);
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let zcol = header.iter().position(|h| *h == "global_dual_bound").expect("z column");
    let z: Vec<f64> = lines
        .map(|l| l.split(',').nth(zcol).unwrap().parse().unwrap())
        .collect();
    assert_eq!(z.len(), 40);
    let reward: f64 = z.iter().map(|v| v - trace.z0).sum();
    assert!((reward - trace.reward()).abs() <= 1e-9 * reward.abs().max(1.0));
}

/// Strong branching recomputed from vertex enumeration: child optima, gains
/// clamped at zero, infeasible children at 1e10, product score, first max.
fn oracle_sb_choice(inst: &MilpInstance, x: &[f64], cands: &[usize]) -> usize {
    let parent = vertex_oracle(inst, &BoundOverrides::new()).unwrap().value;
    let gain = |j: usize, up: bool| {
        let mut ov = BoundOverrides::new();
        if up {
            ov.insert(j, (x[j].ceil(), inst.var_ub[j]));
        } else {
            ov.insert(j, (inst.var_lb[j], x[j].floor()));
        }
        match vertex_oracle(inst, &ov) {
            Ok(v) => (v.value - parent).max(0.0),
            Err(_) => 1e10,
        }
    };
    let mut best = cands[0];
    let mut best_score = f64::NEG_INFINITY;
    for &j in cands {
        let s = gain(j, false).max(1e-6) * gain(j, true).max(1e-6);
        if s > best_score * (1.0 + 1e-9) {
            best = j;
            best_score = s;
        }
    }
    best
}

/// Records each decision and the outcome that follows it.
struct Recorder {
    inner: Box<dyn BranchingPolicy>,
    decisions: Vec<(Vec<f64>, Vec<usize>, BranchDecision)>,
    outcomes: Vec<BranchOutcome>,
}

impl BranchingPolicy for Recorder {
    fn name(&self) -> String {
        self.inner.name()
    }
    fn begin_episode(&mut self, rng: &mut Rng) {
        self.inner.begin_episode(rng);
    }
    fn decide(
        &mut self,
        inst: &MilpInstance,
        node: &BnbNode,
        cands: &[usize],
        rng: &mut Rng,
    ) -> Result<BranchDecision, PolicyError> {
        let d = self.inner.decide(inst, node, cands, rng)?;
        self.decisions.push((node.lp.x.clone(), cands.to_vec(), d.clone()));
        Ok(d)
    }
    fn observe(&mut self, o: &BranchOutcome) {
        self.outcomes.push(o.clone());
        self.inner.observe(o);
    }
}

#[test]
fn strong_branching_root_choice_matches_vertex_enumeration() {
    let mut checked = 0;
    for seed in 0..200 {
        let inst = if seed % 2 == 0 {
            gen_set_cover(seed, 6, 8, 0.35).unwrap()
        } else {
            small_assignment(seed)
        };
        let root = solve_lp(&inst, &BoundOverrides::new());
        let Ok(cands) = candidates(&inst, &root.x) else { continue };
        let mut rec = Recorder {
            inner: Box::new(StrongBranching::default()),
            decisions: Vec::new(),
            outcomes: Vec::new(),
        };
        run_bnb(&inst, &mut rec, 1, 0).unwrap();
        let (_, c, d) = &rec.decisions[0];
        assert_eq!(c, &cands);
        assert_eq!(d.var_index, oracle_sb_choice(&inst, &root.x, &cands), "seed {seed}");
        checked += 1;
    }
    assert!(checked >= 10, "only {checked} fractional roots");
}

#[test]
fn pseudocost_decisions_replay_from_observed_gains() {
    for seed in 0..8 {
        let inst = gen_set_cover(seed, 12, 24, 0.2).unwrap();
        let mut rec = Recorder {
            inner: Box::new(Pseudocost::default()),
            decisions: Vec::new(),
            outcomes: Vec::new(),
        };
        run_bnb(&inst, &mut rec, 60, seed).unwrap();
        assert_eq!(rec.decisions.len(), rec.outcomes.len());
        let n = inst.n_vars();
        // (sum, count) per variable and direction, down = 0, up = 1.
        let mut table = vec![[(0.0f64, 0u32); 2]; n];
        for (k, (x, cands, d)) in rec.decisions.iter().enumerate() {
            let unit = |j: usize, dir: usize| {
                let (s, c) = table[j][dir];
                if c > 0 {
                    return s / c as f64;
                }
                let inits: Vec<f64> = table
                    .iter()
                    .filter(|t| t[dir].1 > 0)
                    .map(|t| t[dir].0 / t[dir].1 as f64)
                    .collect();
                if inits.is_empty() {
                    1.0
                } else {
                    inits.iter().sum::<f64>() / inits.len() as f64
                }
            };
            let scores: Vec<f64> = cands
                .iter()
                .map(|&j| {
                    let f = x[j] - x[j].floor();
                    (unit(j, 0) * f).max(1e-6) * (unit(j, 1) * (1.0 - f)).max(1e-6)
                })
                .collect();
            let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let pos = scores.iter().position(|&s| s >= top * (1.0 - 1e-12)).unwrap();
            assert_eq!(d.var_index, cands[pos], "seed {seed}, decision {k}");
            let o = &rec.outcomes[k];
            assert_eq!(o.var, d.var_index);
            if let Some(g) = o.down_gain {
                table[o.var][0].0 += g / o.frac;
                table[o.var][0].1 += 1;
            }
            if let Some(g) = o.up_gain {
                table[o.var][1].0 += g / (1.0 - o.frac);
                table[o.var][1].1 += 1;
            }
        }
    }
}

fn shifted(inst: &MilpInstance, constant_var_value: f64) -> MilpInstance {
    // Adds a fixed variable with cost 7: a constant offset of the objective.
    let mut obj = inst.obj.clone();
    obj.push(7.0);
    let mut var_lb = inst.var_lb.clone();
    var_lb.push(constant_var_value);
    let mut var_ub = inst.var_ub.clone();
    var_ub.push(constant_var_value);
    let mut is_integer = inst.is_integer.clone();
    is_integer.push(true);
    canonicalize(RawInstance {
        name: format!("{}-shift", inst.name),
        maximize: false,
        obj,
        var_lb,
        var_ub,
        is_integer,
        rows: inst.rows.clone(),
        sense: inst.sense.clone(),
        rhs: inst.rhs.clone(),
        sign_flip: false,
    })
    .unwrap()
}

#[test]
fn strong_branching_ignores_an_objective_constant() {
    for seed in 0..6 {
        let inst = gen_set_cover(seed, 12, 24, 0.2).unwrap();
        let moved = shifted(&inst, 1.0);
        let a = run_bnb(&inst, PolicySpec::StrongBranching.build().as_mut(), 30, 0).unwrap();
        let b = run_bnb(&moved, PolicySpec::StrongBranching.build().as_mut(), 30, 0).unwrap();
        assert_eq!(a.branching_steps, b.branching_steps);
        assert!((a.reward() - b.reward()).abs() <= 1e-6 * a.reward().abs().max(1.0));
        for (za, zb) in a.z.iter().zip(&b.z) {
            assert!((za + 7.0 - zb).abs() <= 1e-6);
        }
    }
}

#[test]
fn every_decision_is_a_fractional_candidate() {
    for seed in 0..5 {
        let inst = gen_assignment(seed, 6, 3).unwrap();
        for p in all_policies() {
            let mut rec = Recorder {
                inner: p.build(),
                decisions: Vec::new(),
                outcomes: Vec::new(),
            };
            run_bnb(&inst, &mut rec, 40, seed).unwrap();
            for (x, cands, d) in &rec.decisions {
                assert!(cands.contains(&d.var_index));
                assert_eq!(d.candidate_set, *cands);
                let v = x[d.var_index];
                assert!((v - v.round()).abs() > 1e-6);
            }
        }
    }
}

#[test]
fn duplicate_columns_give_equal_child_bounds() {
    let inst = duplicate_column_instance();
    assert!(inst.n_vars() <= 8 && inst.n_cons() <= 8);
    let root = solve_lp(&inst, &BoundOverrides::new());
    let parent = vertex_oracle(&inst, &BoundOverrides::new()).unwrap().value;
    assert!((root.objective - parent).abs() <= 1e-7);
    let cands = candidates(&inst, &root.x).unwrap();
    let mut zero_gain = 0;
    for &j in &cands {
        let (down, up) = child_overrides(&inst, &BoundOverrides::new(), j, root.x[j]);
        let d = vertex_oracle(&inst, &down).map(|v| v.value - parent);
        let u = vertex_oracle(&inst, &up).map(|v| v.value - parent);
        if let (Ok(d), Ok(u)) = (d, u) {
            if d.abs() <= 1e-9 || u.abs() <= 1e-9 {
                zero_gain += 1;
            }
        }
    }
    // With copies of a column, fixing one copy lets another take its place.
    assert!(zero_gain >= 1, "no candidate had a zero-gain child");
}
