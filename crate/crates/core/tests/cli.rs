mod common;

use common::{cli_pipeline, run_cli, snapshot};

#[test]
fn every_subcommand_is_byte_for_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    cli_pipeline(dir.path());
    let first = snapshot(dir.path());
    for expected in [
        "gen/instances/instance_2.json",
        "solve/trace.csv",
        "solve/trace.json",
        "collect/samples.jsonl",
        "train/model.model",
        "ewa/ewa.model",
        "ewa/checkpoints/epoch_4.model",
        "dagger/log.csv",
        "dagger/pool.json",
        "kida/kida.model",
        "offline/metrics.csv",
        "online/online_acc.csv",
        "rewards/runs.csv",
        "rewards/rewards.csv",
        "degeneracy/trajectories.csv",
        "degeneracy/degeneracy.json",
    ] {
        assert!(first.iter().any(|(p, _)| p == expected), "missing {expected}");
    }
    for entry in std::fs::read_dir(dir.path()).unwrap() {
        std::fs::remove_dir_all(entry.unwrap().path()).unwrap();
    }
    cli_pipeline(dir.path());
    let second = snapshot(dir.path());
    assert_eq!(first.len(), second.len());
    for ((pa, a), (pb, b)) in first.iter().zip(&second) {
        assert_eq!(pa, pb);
        assert!(a == b, "{pa} differs between runs");
    }
}

#[test]
fn worker_count_does_not_change_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let gen = dir.path().join("gen");
    let g = gen.display().to_string();
    assert_eq!(run_cli(&["generate", "--family", "assignment", "--n-items", "6", "--count", "2", "--out-dir", &g]), 0);
    let i0 = gen.join("instances/instance_0.json").display().to_string();
    let i1 = gen.join("instances/instance_1.json").display().to_string();
    let mut outputs = Vec::new();
    for jobs in ["1", "3"] {
        let out = dir.path().join(format!("r{jobs}")).display().to_string();
        let args = [
            "eval", "rewards", "--policy", "sb", "random", "--instance", &i0, &i1, "--budget", "15",
            "--seeds", "0", "1", "2", "--jobs", jobs, "--out-dir", &out,
        ];
        assert_eq!(run_cli(&args), 0);
        outputs.push(std::fs::read(format!("{out}/runs.csv")).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().display().to_string();
    assert_eq!(run_cli(&["frobnicate"]), 1);
    assert_eq!(run_cli(&["solve", "--budget", "x", "--instance", "a"]), 1);
    assert_eq!(run_cli(&["--help"]), 0);
    assert_eq!(run_cli(&["solve", "--instance", "/nonexistent.json", "--out-dir", &out]), 2);
    assert_eq!(run_cli(&["eval", "degeneracy", "--policy", "bogus", "--out-dir", &out]), 2);
    assert_eq!(run_cli(&["generate", "--jobs", "0", "--out-dir", &out]), 1);
}
