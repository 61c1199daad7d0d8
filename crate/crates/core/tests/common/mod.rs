//! Test-only oracles and fixtures shared by the integration suites. Nothing
//! here calls into the simplex or branch-and-bound code.

#![allow(dead_code)]

use branchforge::milp::{canonicalize, MilpInstance, RawInstance, Sense};
use branchforge::nn::{init_model, loss_and_grad, sample_loss, ArchConfig, ModelParams, Tensor};
use branchforge::state::{BipartiteState, Edge, CON_FEATURES, VAR_FEATURES};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random small LP with integer data, boxed variables and mixed senses.
pub fn random_lp(seed: u64, max_vars: usize, max_rows: usize) -> MilpInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(1..=max_vars);
    let m = rng.gen_range(0..=max_rows);
    let obj = (0..n).map(|_| rng.gen_range(-10..=10) as f64).collect();
    let mut var_lb = Vec::with_capacity(n);
    let mut var_ub = Vec::with_capacity(n);
    for _ in 0..n {
        let lo = rng.gen_range(-3..=2) as f64;
        let width = rng.gen_range(0..=5) as f64;
        var_lb.push(lo);
        var_ub.push(lo + width);
    }
    let mut rows = Vec::with_capacity(m);
    let mut sense = Vec::with_capacity(m);
    let mut rhs = Vec::with_capacity(m);
    for _ in 0..m {
        let mut row = Vec::new();
        for j in 0..n {
            if rng.gen_bool(0.7) {
                row.push((j, rng.gen_range(-5..=5) as f64));
            }
        }
        rows.push(row);
        sense.push(match rng.gen_range(0..5) {
            0 | 1 => Sense::Le,
            2 | 3 => Sense::Ge,
            _ => Sense::Eq,
        });
        rhs.push(rng.gen_range(-8..=8) as f64);
    }
    canonicalize(RawInstance {
        name: format!("randlp-{seed}"),
        maximize: false,
        obj,
        var_lb,
        var_ub,
        is_integer: vec![false; n],
        rows,
        sense,
        rhs,
        sign_flip: false,
    })
    .unwrap()
}

/// Exact MILP optimum of a pure-binary instance by enumerating all 2^n
/// assignments. `None` when infeasible.
pub fn enumerate_binary_optimum(inst: &MilpInstance) -> Option<f64> {
    let n = inst.n_vars();
    assert!(n <= 20, "enumeration oracle limited to 20 binaries");
    assert!(inst.is_integer.iter().all(|&b| b));
    let mut best: Option<f64> = None;
    let mut x = vec![0.0; n];
    for mask in 0u32..(1u32 << n) {
        for (j, v) in x.iter_mut().enumerate() {
            *v = ((mask >> j) & 1) as f64;
        }
        if x.iter().enumerate().any(|(j, &v)| v < inst.var_lb[j] || v > inst.var_ub[j]) {
            continue;
        }
        let ok = (0..inst.n_cons()).all(|i| {
            let act: f64 = inst.rows[i].iter().map(|&(j, a)| a * x[j]).sum();
            match inst.sense[i] {
                Sense::Le => act <= inst.rhs[i] + 1e-9,
                Sense::Ge => act >= inst.rhs[i] - 1e-9,
                Sense::Eq => (act - inst.rhs[i]).abs() <= 1e-9,
            }
        });
        if ok {
            let v: f64 = inst.obj.iter().zip(&x).map(|(c, v)| c * v).sum();
            if best.is_none_or(|b| v < b) {
                best = Some(v);
            }
        }
    }
    best
}

/// Optimum of an assignment instance by enumerating bin choices per item
/// (`n_bins^n_items` assignments).
pub fn enumerate_assignment_optimum(inst: &MilpInstance, n_items: usize, n_bins: usize) -> Option<f64> {
    let total = n_bins.pow(n_items as u32);
    let mut best: Option<f64> = None;
    for code in 0..total {
        let mut c = code;
        let mut x = vec![0.0; n_items * n_bins];
        for i in 0..n_items {
            x[i * n_bins + c % n_bins] = 1.0;
            c /= n_bins;
        }
        let ok = (0..inst.n_cons()).all(|i| {
            let act: f64 = inst.rows[i].iter().map(|&(j, a)| a * x[j]).sum();
            match inst.sense[i] {
                Sense::Le => act <= inst.rhs[i] + 1e-9,
                Sense::Ge => act >= inst.rhs[i] - 1e-9,
                Sense::Eq => (act - inst.rhs[i]).abs() <= 1e-9,
            }
        });
        if ok {
            let v: f64 = inst.obj.iter().zip(&x).map(|(c, v)| c * v).sum();
            if best.is_none_or(|b| v < b) {
                best = Some(v);
            }
        }
    }
    best
}

/// Random model (biases randomized too) and a 3-variable, 2-row state with a
/// valid label, for finite-difference checks.
pub fn gradient_fixture(seed: u64) -> (ModelParams, BipartiteState) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let arch = ArchConfig {
        embed_dim: 12,
        ..ArchConfig::default()
    };
    let mut model = init_model(arch, seed);
    let biases: [&mut Tensor; 5] = [
        &mut model.params.b_v,
        &mut model.params.b_c,
        &mut model.params.conv_c.b,
        &mut model.params.conv_v.b,
        &mut model.params.b_o,
    ];
    for t in biases {
        t.data.iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
    }
    let (n, m) = (3, 2);
    let var_features = (0..n * VAR_FEATURES).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let con_features = (0..m * CON_FEATURES).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut edges = Vec::new();
    for con in 0..m {
        for var in 0..n {
            if con == var % m || rng.gen_bool(0.5) {
                edges.push(Edge {
                    con,
                    var,
                    value: rng.gen_range(-1.0..1.0),
                });
            }
        }
    }
    let mut candidate_mask = vec![true; n];
    candidate_mask[rng.gen_range(0..n)] = rng.gen_bool(0.5);
    let cands: Vec<usize> = (0..n).filter(|&j| candidate_mask[j]).collect();
    let label = cands[rng.gen_range(0..cands.len())];
    let state = BipartiteState {
        n_vars: n,
        n_cons: m,
        var_features,
        con_features,
        edges,
        candidate_mask,
        expert_action: Some(label),
    };
    (model, state)
}

/// Largest `|a - n| / max(|a|, |n|, 1e-5)` between the analytic gradient and
/// central differences with step `h`, over every parameter.
pub fn max_gradient_rel_error(model: &ModelParams, state: &BipartiteState, h: f64) -> f64 {
    let (_, grad) = loss_and_grad(model, &[state], None).unwrap();
    let analytic = grad.flatten();
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    let mut k = 0;
    for t in 0..14 {
        let len = probe.params.tensors()[t].data.len();
        for i in 0..len {
            let orig = probe.params.tensors()[t].data[i];
            probe.params.tensors_mut()[t].data[i] = orig + h;
            let up = sample_loss(&probe, state).unwrap();
            probe.params.tensors_mut()[t].data[i] = orig - h;
            let down = sample_loss(&probe, state).unwrap();
            probe.params.tensors_mut()[t].data[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-5);
            worst = worst.max(rel);
            k += 1;
        }
    }
    assert_eq!(k, analytic.len());
    worst
}

/// Runs the CLI binary with `args`, returning its exit code.
pub fn run_cli(args: &[&str]) -> i32 {
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_branchforge"))
        .args(args)
        .output()
        .expect("spawning the CLI");
    if !out.status.success() {
        eprintln!("{}", String::from_utf8_lossy(&out.stderr));
    }
    out.status.code().unwrap_or(-1)
}

/// Every subcommand once, chained so later steps consume earlier outputs.
pub fn cli_pipeline(root: &Path) {
    let p = |s: &str| root.join(s).display().to_string();
    let fam = ["--family", "assignment", "--n-items", "6", "--n-bins", "3"];
    let inst0 = p("gen/instances/instance_0.json");
    let inst1 = p("gen/instances/instance_1.json");
    let samples = p("collect/samples.jsonl");
    let kida = p("kida/kida.model");
    let model_policy = format!("model:{kida}");
    let steps: Vec<Vec<String>> = vec![
        [&["generate", "--count", "3", "--out-dir", &p("gen")][..], &fam].concat().iter().map(|s| s.to_string()).collect(),
        vec!["solve".into(), "--instance".into(), inst0.clone(), "--policy".into(), "sb".into(), "--budget".into(), "20".into(), "--out-dir".into(), p("solve")],
        [&["collect", "--samples", "40", "--budget", "20", "--out-dir", &p("collect")][..], &fam].concat().iter().map(|s| s.to_string()).collect(),
        vec!["train".into(), "--dataset".into(), samples.clone(), "--epochs".into(), "2".into(), "--out-dir".into(), p("train")],
        vec!["ewa".into(), "--dataset".into(), samples.clone(), "--epochs".into(), "4".into(), "--every".into(), "2".into(), "--out-dir".into(), p("ewa")],
        [
            &[
                "dagger", "--iterations", "3", "--instances-per-iteration", "3", "--budget", "20",
                "--epochs-major", "2", "--epochs-minor", "1", "--major-every", "2",
                "--validation-instances", "2", "--p-expert", "0.3", "--out-dir", &p("dagger"),
            ][..],
            &fam,
        ]
        .concat()
        .iter()
        .map(|s| s.to_string())
        .collect(),
        vec!["kida".into(), "--pool".into(), p("dagger/pool.json"), "--k".into(), "2".into(), "--out-dir".into(), p("kida")],
        vec!["eval".into(), "offline".into(), "--model".into(), kida.clone(), "--dataset".into(), samples, "--out-dir".into(), p("offline")],
        vec!["eval".into(), "online".into(), "--policy".into(), model_policy.clone(), "--instance".into(), inst0.clone(), inst1.clone(), "--budget".into(), "20".into(), "--out-dir".into(), p("online")],
        vec![
            "eval".into(), "rewards".into(), "--policy".into(), "sb".into(), "random".into(), model_policy, "--instance".into(), inst0, inst1,
            "--budget".into(), "20".into(), "--seeds".into(), "0".into(), "1".into(), "--out-dir".into(), p("rewards"),
        ],
        vec!["eval".into(), "degeneracy".into(), "--budget".into(), "20".into(), "--out-dir".into(), p("degeneracy")],
    ];
    for args in steps {
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        assert_eq!(run_cli(&refs), 0, "{refs:?}");
    }
}

/// Relative path and contents of every file under `root`, sorted by path.
pub fn snapshot(root: &Path) -> Vec<(String, Vec<u8>)> {
    fn walk(dir: &Path, root: &Path, out: &mut Vec<(String, Vec<u8>)>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(&path, root, out);
            } else {
                let rel = path.strip_prefix(root).unwrap().display().to_string();
                out.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(root, root, &mut out);
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}
