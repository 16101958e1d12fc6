mod common;

use std::path::Path;
use std::process::Command;

use common::{tiny_config, tiny_manifest};
use moemix::cli_io::{collect_report, load_config, replay_trace};
use moemix::gate_stats::probe_datasets;
use moemix::moe::checkpoint;
use moemix::scheduler::{read_weight_trajectory, Policy};
use moemix::synth::generate_all;
use moemix::trainer::{probe_sets, run_training_on, RunConfig};

fn run(policy: Policy, seed: u64) -> moemix::trainer::RunRecord {
    let mut cfg = tiny_config();
    cfg.scheduler.policy = policy;
    cfg.seed = seed;
    run_training_on(&cfg, &generate_all(&cfg.data.manifest).unwrap()).unwrap()
}

#[test]
fn training_lowers_every_dataset_loss() {
    let mut cfg = tiny_config();
    cfg.total_steps = 400;
    cfg.scheduler.policy = Policy::Uniform;
    let rec = run_training_on(&cfg, &generate_all(&cfg.data.manifest).unwrap()).unwrap();
    for (i, (a, b)) in rec.initial_probe.eval_losses.iter().zip(&rec.final_losses).enumerate() {
        assert!(b < a, "dataset {i}: {a} -> {b}");
    }
}

#[test]
fn one_update_per_round_on_round_boundaries() {
    let rec = run(Policy::Dynamic, 0);
    assert_eq!(rec.rounds.len(), 120 / 20);
    for (t, r) in rec.rounds.iter().enumerate() {
        assert_eq!(r.round, t + 1);
        assert_eq!(r.step, (t + 1) * 20);
    }
    assert_eq!(rec.optimizer_steps, 120);
    for s in &rec.steps {
        assert_eq!(s.round, s.step / 20 + 1);
    }
}

#[test]
fn probing_leaves_parameters_untouched() {
    let rec = run(Policy::Dynamic, 1);
    let before = checkpoint::encode(&rec.network).unwrap();
    let corpora = generate_all(&tiny_manifest()).unwrap();
    let probes = probe_sets(&corpora, 16).unwrap();
    probe_datasets(&rec.network, &probes).unwrap();
    assert_eq!(before, checkpoint::encode(&rec.network).unwrap());
}

#[test]
fn same_seed_is_bit_reproducible() {
    let a = run(Policy::Dynamic, 5);
    let b = run(Policy::Dynamic, 5);
    assert_eq!(a.steps, b.steps);
    assert_eq!(a.rounds, b.rounds);
    assert_eq!(a.final_losses, b.final_losses);
}

#[test]
fn scripted_weights_drive_batch_composition() {
    let mut cfg = tiny_config();
    cfg.scheduler.policy = Policy::Scripted;
    cfg.scheduler.script = Some(vec![vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0], vec![0.0, 1.0, 0.0], vec![1.0, 0.0, 0.0]]);
    cfg.total_steps = 60;
    let rec = run_training_on(&cfg, &generate_all(&cfg.data.manifest).unwrap()).unwrap();
    for s in &rec.steps {
        let want = match s.step / 20 {
            0 => [8, 0, 0],
            1 => [0, 0, 8],
            _ => [0, 8, 0],
        };
        assert_eq!(s.dataset_counts, want, "step {}", s.step);
    }
    let again = run_training_on(&cfg, &generate_all(&cfg.data.manifest).unwrap()).unwrap();
    let counts = |r: &moemix::trainer::RunRecord| r.steps.iter().map(|s| s.dataset_counts.clone()).collect::<Vec<_>>();
    assert_eq!(counts(&rec), counts(&again));
}

#[test]
fn static_policies_never_move() {
    for p in [Policy::Uniform, Policy::Datasize, Policy::FinalStatic] {
        let mut cfg = tiny_config();
        cfg.scheduler.policy = p;
        cfg.scheduler.final_weights = Some(vec![0.2, 0.3, 0.5]);
        let rec = run_training_on(&cfg, &generate_all(&cfg.data.manifest).unwrap()).unwrap();
        assert!(rec.weight_total_variation().iter().all(|&tv| tv == 0.0), "{p}");
    }
}

#[test]
fn two_datasets_stay_uniform_and_warn() {
    let mut cfg = tiny_config();
    cfg.data.manifest.domains.truncate(2);
    let rec = run_training_on(&cfg, &generate_all(&cfg.data.manifest).unwrap()).unwrap();
    assert!(!rec.warnings.is_empty());
    for r in &rec.rounds {
        for w in &r.weights {
            assert!((w - 0.5).abs() < 1e-12);
        }
    }
}

#[test]
fn dynamic_moves_weights_and_replays_exactly() {
    let rec = run(Policy::Dynamic, 2);
    assert!(rec.weight_total_variation().iter().sum::<f64>() > 0.0);
    let (_, replayed) = replay_trace(&rec.gate_load_trace(), &rec.config.scheduler).unwrap();
    assert_eq!(replayed, rec.round_weights());
}

fn schema_version(v: &serde_json::Value) -> Option<u64> {
    v.get("schema_version").and_then(|s| s.as_u64())
}

#[test]
fn output_files_are_versioned() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config();
    cfg.output_dir = Some(dir.path().to_path_buf());
    let corpora = generate_all(&cfg.data.manifest).unwrap();
    run_training_on(&cfg, &corpora).unwrap();
    let run_dir = dir.path().join("tiny");
    for f in ["config.json", "summary.json"] {
        let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run_dir.join(f)).unwrap()).unwrap();
        assert_eq!(schema_version(&v), Some(1), "{f}");
    }
    let metrics = std::fs::read_to_string(run_dir.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 120);
    for line in metrics.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(schema_version(&v), Some(1));
    }
    for f in ["rounds.csv", "gateloads.csv", "distances.json", "checkpoint.bin"] {
        assert!(run_dir.join(f).is_file(), "{f}");
    }
    let net = checkpoint::load(&run_dir.join("checkpoint.bin")).unwrap();
    assert_eq!(net.config.num_experts, 4);

    let report = collect_report(&[run_dir.clone(), dir.path().join("missing")]);
    assert_eq!(report.rows.len(), 2);
    assert_eq!(report.warnings.len(), 1);
    assert!(report.rows[0].summary.is_some());
}

fn moemix(args: &[&str], out: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_moemix"))
        .args(args)
        .env("MOEMIX_OUT", out)
        .output()
        .unwrap()
}

#[test]
fn cli_train_then_replay_reproduces_rounds() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("tiny.json");
    std::fs::write(&cfg_path, serde_json::to_string_pretty(&tiny_config()).unwrap()).unwrap();
    let cfg = cfg_path.to_str().unwrap();

    let out = moemix(&["train", "--config", cfg, "--seed", "4", "--set", "scheduler.eta=5"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run_dir = dir.path().join("tiny");
    let resolved: RunConfig = load_config(Some(&run_dir.join("config.json")), &[]).unwrap();
    assert_eq!(resolved.seed, 4);
    assert_eq!(resolved.scheduler.eta, 5.0);

    let replay_out = dir.path().join("replayed.csv");
    let out = moemix(
        &[
            "replay",
            run_dir.join("gateloads.csv").to_str().unwrap(),
            "--config",
            run_dir.join("config.json").to_str().unwrap(),
            "--out",
            replay_out.to_str().unwrap(),
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let (_, _, logged) = read_weight_trajectory(&run_dir.join("rounds.csv")).unwrap();
    let (_, _, replayed) = read_weight_trajectory(&replay_out).unwrap();
    assert_eq!(logged.len(), replayed.len());
    for (a, b) in logged.iter().zip(&replayed) {
        for (x, y) in a.weights.iter().zip(&b.weights) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn cli_reports_bad_input_with_distinct_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = moemix(&["train", "--set", "no.such.key=1"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let trace = dir.path().join("bad.csv");
    std::fs::write(&trace, "round,dataset,expert,count\n0,A,zero,1\n").unwrap();
    let out = moemix(&["replay", trace.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn cli_gen_data_writes_manifest_and_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("m.json");
    tiny_manifest().save(&manifest).unwrap();
    let out = moemix(&["gen-data", "--config", manifest.to_str().unwrap(), "--seed", "9"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let corpus = dir.path().join("data").join("corpus.jsonl");
    let lines = std::fs::read_to_string(corpus).unwrap().lines().count();
    assert_eq!(lines, 3 * (128 + 32));
}
