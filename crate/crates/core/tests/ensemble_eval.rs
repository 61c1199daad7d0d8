use std::sync::Arc;

use branchforge::branching::ModelPolicy;
use branchforge::dagger::collect_expert_samples;
use branchforge::ensemble::{kida_average, load_pool, select_top_k, write_manifest, ManifestEntry};
use branchforge::eval::{
    offline_metrics, online_accuracy, parse_runs_csv, reward_comparison, runs_csv, summarize,
    uniform_baseline,
};
use branchforge::milp::{gen_assignment, InstanceFamily};
use branchforge::nn::{init_model, predict, save_model, ArchConfig, ModelParams};
use branchforge::{run_bnb, PolicySpec};

fn small_arch() -> ArchConfig {
    ArchConfig {
        embed_dim: 16,
        ..ArchConfig::default()
    }
}

fn flat(m: &ModelParams) -> Vec<f64> {
    m.params.flatten()
}

#[test]
fn kida_of_one_model_is_that_model() {
    let m = init_model(small_arch(), 4);
    assert_eq!(flat(&kida_average(std::slice::from_ref(&m)).unwrap()), flat(&m));
}

#[test]
fn kida_is_symmetric_bitwise() {
    let ms: Vec<ModelParams> = (0..5).map(|s| init_model(small_arch(), s)).collect();
    let fwd = kida_average(&ms).unwrap();
    let mut rev = ms.clone();
    rev.reverse();
    rev.swap(0, 2);
    assert_eq!(flat(&kida_average(&rev).unwrap()), flat(&fwd));
}

#[test]
fn kida_is_the_elementwise_mean() {
    let ms: Vec<ModelParams> = (0..3).map(|s| init_model(small_arch(), s + 10)).collect();
    let avg = flat(&kida_average(&ms).unwrap());
    let cols: Vec<Vec<f64>> = ms.iter().map(flat).collect();
    for (k, v) in avg.iter().enumerate() {
        let expect = (cols[0][k] + cols[1][k] + cols[2][k]) / 3.0;
        assert!((v - expect).abs() <= 1e-12, "param {k}: {v} vs {expect}");
    }
}

#[test]
fn kida_commutes_with_scaling_by_two() {
    let ms: Vec<ModelParams> = (0..4).map(|s| init_model(small_arch(), s)).collect();
    let doubled: Vec<ModelParams> = ms
        .iter()
        .map(|m| {
            let mut d = m.clone();
            d.params.scale(2.0);
            d
        })
        .collect();
    let a: Vec<f64> = flat(&kida_average(&ms).unwrap()).iter().map(|v| 2.0 * v).collect();
    assert_eq!(flat(&kida_average(&doubled).unwrap()), a);
}

#[test]
fn averaging_copies_keeps_every_rollout_decision() {
    let theta = init_model(ArchConfig::default(), 8);
    let copies = vec![theta.clone(); 5];
    let avg = kida_average(&copies).unwrap();
    for seed in 0..10 {
        let inst = gen_assignment(seed, 8, 3).unwrap();
        let mut a = ModelPolicy::new(Arc::new(theta.clone()), "m");
        let mut b = ModelPolicy::new(Arc::new(avg.clone()), "m");
        let ta = run_bnb(&inst, &mut a, 40, seed).unwrap();
        let tb = run_bnb(&inst, &mut b, 40, seed).unwrap();
        assert_eq!(ta, tb);
    }
}

#[test]
fn pool_manifest_selects_by_validation_reward() {
    let dir = tempfile::tempdir().unwrap();
    let mut entries = Vec::new();
    for (i, r) in [(1, -5.0), (2, -1.0), (3, -3.0), (4, -1.0)] {
        let name = format!("pi_{i}.model");
        save_model(&init_model(small_arch(), i), &dir.path().join(&name)).unwrap();
        entries.push(ManifestEntry {
            model_path: name.into(),
            validation_reward: r,
            iteration_tag: i,
        });
    }
    let manifest = dir.path().join("pool.json");
    write_manifest(&manifest, &entries).unwrap();
    let pool = load_pool(&manifest).unwrap();
    let tags: Vec<u64> = select_top_k(&pool, 3).unwrap().iter().map(|e| e.iteration_tag).collect();
    assert_eq!(tags, vec![2, 4, 3]);
}

#[test]
fn strong_branching_agrees_with_itself_online() {
    for seed in 0..5 {
        let inst = gen_assignment(seed, 8, 3).unwrap();
        let acc = online_accuracy(PolicySpec::StrongBranching.build(), &inst, 30, seed).unwrap();
        if let Some(m) = acc.mean {
            assert_eq!(m, 1.0);
        }
    }
}

#[test]
fn random_policy_online_accuracy_is_near_uniform() {
    let mut hits = 0.0;
    let mut expect = 0.0;
    let mut var = 0.0;
    let mut n = 0usize;
    for seed in 0..40 {
        let inst = gen_assignment(seed, 10, 4).unwrap();
        let acc = online_accuracy(PolicySpec::Random.build(), &inst, 40, seed).unwrap();
        for (&a, &c) in acc.agreement.iter().zip(&acc.candidate_counts) {
            let p = 1.0 / c as f64;
            hits += a as u8 as f64;
            expect += p;
            var += p * (1.0 - p);
            n += 1;
        }
    }
    assert!(n >= 200, "only {n} decisions");
    let z = (hits - expect) / var.sqrt();
    assert!(z.abs() < 4.0, "agreement {hits} vs expected {expect} over {n} (z = {z})");
}

#[test]
fn summary_recomputed_from_runs_csv() {
    let insts: Vec<_> = (0..4).map(|s| gen_assignment(s, 6, 3).unwrap()).collect();
    let policies = [PolicySpec::Random, PolicySpec::MostFractional, PolicySpec::Pseudocost];
    let runs = reward_comparison(&policies, &insts, 20, &[0, 1]);
    assert_eq!(runs.len(), 3 * 4 * 2);
    let parsed = parse_runs_csv(&runs_csv(&runs)).unwrap();
    for s in summarize(&runs) {
        let r: Vec<f64> = parsed
            .iter()
            .filter(|x| x.policy == s.policy)
            .filter_map(|x| x.reward)
            .collect();
        let mean = r.iter().sum::<f64>() / r.len() as f64;
        let std = (r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (r.len() - 1) as f64).sqrt();
        assert_eq!(s.n, r.len());
        assert!((s.mean - mean).abs() <= 1e-9 * mean.abs().max(1.0));
        assert!((s.std - std).abs() <= 1e-9 * std.abs().max(1.0));
    }
}

#[test]
fn offline_metrics_match_a_direct_count() {
    let family = InstanceFamily::Assignment { n_items: 8, n_bins: 3 };
    let (data, _) = collect_expert_samples(&family, 3, 60, 30, 5000).unwrap();
    let model = init_model(small_arch(), 2);
    let rec = offline_metrics(&model, &data, "m", 0).unwrap();
    let mut top1 = 0;
    for s in &data {
        let p = predict(&model, s).unwrap();
        let cands = s.candidates();
        let best = cands.iter().copied().fold(cands[0], |b, j| if p[j] > p[b] { j } else { b });
        top1 += (best == s.expert_action.unwrap()) as usize;
    }
    assert_eq!(rec.n_samples, data.len());
    assert!((rec.top1 - top1 as f64 / data.len() as f64).abs() <= 1e-12);
    assert!(rec.top1 <= rec.top3 && rec.top3 <= rec.top5 && rec.top5 <= 1.0);
    let u = uniform_baseline(&data);
    assert!(u > 0.0 && u <= 1.0);
}
