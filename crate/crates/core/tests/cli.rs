//! End-to-end checks of the `diffquad` binary.

use std::path::Path;
use std::process::{Command, Output};

use diffquad::metrics::{read_metrics, IterationRecord};
use diffquad::policy::{Checkpoint, MlpParams};

fn diffquad(args: &[&str], root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_diffquad"))
        .args(args)
        .env("DIFFQUAD_OUTPUT_ROOT", root)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Weights of a run's final checkpoint.
fn final_weights(run: &Path) -> MlpParams {
    Checkpoint::load(&run.join("checkpoints/final.ckpt")).unwrap().policy
}

/// Resolved config without the run directory, which differs by design.
fn config_sans_dir(run: &Path) -> String {
    std::fs::read_to_string(run.join("config.toml")).unwrap().lines().filter(|l| !l.starts_with("output_dir")).collect()
}

const SMALL: &[&str] = &["--hidden", "8", "--horizon", "20", "--threads", "1"];

fn train(root: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train"];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    diffquad(&args, root)
}

#[test]
fn train_writes_one_record_per_iteration() {
    let tmp = tempfile::tempdir().unwrap();
    let o = train(tmp.path(), &["--task", "state", "--trainer", "bptt", "--envs", "100", "--iters", "200", "--seed", "1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let run = tmp.path().join("state-bptt-s1");
    assert_eq!(read_metrics(&run.join("metrics.jsonl")).unwrap().len(), 200);
    for f in ["config.toml", "VERSION", "checkpoints/final.ckpt", "checkpoints/iter_000100.ckpt"] {
        assert!(run.join(f).exists(), "{f}");
    }
}

#[test]
fn same_command_twice_gives_identical_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let strip = |p: &Path| read_metrics(&p.join("metrics.jsonl")).unwrap().iter().map(IterationRecord::without_time).collect::<Vec<_>>();
    for trainer in ["bptt", "ppo"] {
        let a = tmp.path().join(format!("{trainer}-a"));
        let b = tmp.path().join(format!("{trainer}-b"));
        for d in [&a, &b] {
            let o = train(tmp.path(), &["--trainer", trainer, "--envs", "6", "--iters", "4", "--seed", "3", "--out", d.to_str().unwrap()]);
            assert_eq!(code(&o), 0, "{}", stderr(&o));
        }
        assert_eq!(strip(&a), strip(&b), "{trainer}");
        assert_eq!(config_sans_dir(&a), config_sans_dir(&b));
        assert_eq!(final_weights(&a), final_weights(&b));
    }
}

#[test]
fn resolved_config_reproduces_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let o = train(tmp.path(), &["--envs", "4", "--iters", "3", "--seed", "8", "--out", a.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let b = tmp.path().join("b");
    let cfg = a.join("config.toml");
    let o = diffquad(&["train", "--config", cfg.to_str().unwrap(), "--out", b.to_str().unwrap()], tmp.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(final_weights(&a), final_weights(&b));
}

#[test]
fn feature_training_with_pretraining_in_one_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.toml");
    std::fs::write(&cfg, "[pretrain]\ndataset_size = 300\nepochs = 2\nbatch_size = 64\nnum_envs = 5\n").unwrap();
    let o = train(tmp.path(), &["--config", cfg.to_str().unwrap(), "--task", "features", "--pretrain", "--envs", "4", "--iters", "2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let run = tmp.path().join("features-bptt-s0");
    for f in ["pretrain/dataset.bin", "pretrain/representation.ckpt", "pretrain/epochs.jsonl", "metrics.jsonl", "checkpoints/final.ckpt"] {
        assert!(run.join(f).exists(), "{f}");
    }
}

#[test]
fn pretrain_subcommand_needs_feature_task() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.toml");
    std::fs::write(&cfg, "task = \"features\"\n[pretrain]\ndataset_size = 200\nepochs = 1\nnum_envs = 5\n").unwrap();
    let o = diffquad(&["pretrain", "--config", cfg.to_str().unwrap(), "--hidden", "8"], tmp.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(tmp.path().join("features-bptt-s0/pretrain/representation.ckpt").exists());
    let o = diffquad(&["pretrain", "--task", "state", "--hidden", "8"], tmp.path());
    assert_eq!(code(&o), 1);
}

#[test]
fn invalid_config_exits_1_with_line_number() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "seed = 1\n[reward]\nhuber_delta = 1.0\nhuber_dleta = 2.0\n").unwrap();
    let o = diffquad(&["train", "--config", cfg.to_str().unwrap()], tmp.path());
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("bad.toml:4"), "{}", stderr(&o));

    std::fs::write(&cfg, "seed = 1\n\n[dynamics]\nc_max = -1.0\n").unwrap();
    let o = diffquad(&["train", "--config", cfg.to_str().unwrap()], tmp.path());
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("bad.toml:3"), "{}", stderr(&o));

    assert_eq!(code(&diffquad(&["train", "--envs", "0"], tmp.path())), 1);
    assert_eq!(code(&diffquad(&["train", "--no-such-flag"], tmp.path())), 1);
    assert_eq!(code(&diffquad(&["--help"], tmp.path())), 0);
}

#[test]
fn existing_run_directory_is_protected() {
    let tmp = tempfile::tempdir().unwrap();
    let args = ["--envs", "2", "--iters", "1"];
    assert_eq!(code(&train(tmp.path(), &args)), 0);
    assert_eq!(code(&train(tmp.path(), &args)), 1);
    let mut forced = args.to_vec();
    forced.push("--force");
    assert_eq!(code(&train(tmp.path(), &forced)), 0);
}

#[test]
fn eval_writes_reports_and_trajectories() {
    let tmp = tempfile::tempdir().unwrap();
    let o = train(tmp.path(), &["--envs", "4", "--iters", "1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let ck = tmp.path().join("state-bptt-s0/checkpoints/final.ckpt");
    let out = tmp.path().join("eval");
    let o = diffquad(&["eval", "--checkpoint", ck.to_str().unwrap(), "--episodes", "20", "--out", out.to_str().unwrap()], tmp.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("success rate  0.0%"), "{stdout}");
    let rows = csv::Reader::from_path(out.join("episode_0019.csv")).unwrap().records().count();
    assert_eq!(rows, 21);
    assert!(out.join("report.json").exists());

    let o = diffquad(&["eval", "--checkpoint", tmp.path().join("missing.ckpt").to_str().unwrap()], tmp.path());
    assert_eq!(code(&o), 1);
}

#[test]
fn export_plots_and_bench() {
    let tmp = tempfile::tempdir().unwrap();
    for trainer in ["bptt", "ppo"] {
        assert_eq!(code(&train(tmp.path(), &["--trainer", trainer, "--envs", "4", "--iters", "2"])), 0);
    }
    let out = tmp.path().join("plots");
    let o = diffquad(
        &[
            "export-plots",
            tmp.path().join("state-bptt-s0").to_str().unwrap(),
            tmp.path().join("state-ppo-s0").to_str().unwrap(),
            tmp.path().join("nothing-here").to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ],
        tmp.path(),
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let table = String::from_utf8_lossy(&o.stdout);
    assert_eq!(table.lines().count(), 5, "{table}");
    for f in ["curves.csv", "targets.csv", "targets.txt", "reward_vs_samples.svg", "reward_vs_time.svg"] {
        assert!(out.join(f).exists(), "{f}");
    }

    let bench = tmp.path().join("bench");
    let o = diffquad(
        &["bench", "--envs", "1,2", "--horizon", "3", "--hidden", "4", "--repetitions", "3", "--out", bench.to_str().unwrap()],
        tmp.path(),
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("worker thread"));
    assert_eq!(csv::Reader::from_path(bench.join("bench.csv")).unwrap().records().count(), 6);
    assert_eq!(code(&diffquad(&["bench", "--repetitions", "2"], tmp.path())), 1);
}
