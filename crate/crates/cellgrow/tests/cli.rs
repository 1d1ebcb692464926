use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cellgrow::cli::ResultDocument;
use cellgrow::config::{emit_config, load_config, parse_config};
use cellgrow::history::HISTORY_HEADER;
use cellgrow_core::engine::{EngineConfig, RunStatus};
use cellgrow_core::fitness::subset_sum_space;
use cellgrow_core::genome::minimal_genotype;
use cellgrow_core::search_space::{builtin_space, BuiltinSpace};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cellgrow"))
}

fn shipped(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs").join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Subset-sum demo with the thresholds pushed out of reach.
fn unsatisfiable(dir: &Path, limit: u32) -> PathBuf {
    let text = fs::read_to_string(shipped("subset-sum.toml"))
        .unwrap()
        .replace("complete_fitness_threshold = 15.5", "complete_fitness_threshold = 1000.0")
        .replace("incomplete_fitness_threshold = 15.5", "incomplete_fitness_threshold = 1000.0")
        .replace("generation_limit = 5000", &format!("generation_limit = {limit}"));
    let path = dir.join("config.toml");
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn shipped_configs_parse_and_validate() {
    for name in ["cnn.toml", "gan.toml", "lstm.toml", "subset-sum.toml"] {
        let config = load_config(&shipped(name)).unwrap_or_else(|e| panic!("{name}: {e}"));
        config.space.validate().unwrap();
        assert!(config.engine.check(&config.space).is_empty(), "{name}");
        assert_eq!(parse_config(&emit_config(&config)).unwrap(), config, "{name} round trip");
    }
}

#[test]
fn subset_sum_config_is_the_oracle_space() {
    let config = load_config(&shipped("subset-sum.toml")).unwrap();
    assert_eq!(config.space, subset_sum_space(2));
    let mut expected = EngineConfig::table_defaults(&config.space);
    expected.tau_k = 5000;
    expected.seed = 1;
    expected.estimation.tau_f = 15.5;
    expected.estimation.tau_fc = 15.5;
    assert_eq!(config.engine, expected);
}

#[test]
fn demo_run_is_satisfied() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["evolve", "--config", p(&shipped("subset-sum.toml")), "--out", p(dir.path())]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let doc: ResultDocument = serde_json::from_str(&fs::read_to_string(dir.path().join("result.json")).unwrap()).unwrap();
    assert_eq!(doc.status, RunStatus::Satisfied);
    assert_eq!(doc.best.complete().unwrap().value(), 16.0);
    for f in ["history.csv", "checkpoint.json", "evaluations.jsonl"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}

#[test]
fn generation_limit_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let config = unsatisfiable(dir.path(), 3);
    let out = run(&["evolve", "--config", p(&config), "--out", p(&dir.path().join("run"))]);
    assert_eq!(code(&out), 2);
    let history = fs::read_to_string(dir.path().join("run/history.csv")).unwrap();
    let generations: std::collections::BTreeSet<&str> =
        history.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(generations.into_iter().collect::<Vec<_>>(), ["0", "1", "2"]);
}

#[test]
fn faults_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["evolve", "--config", "/nonexistent/config.toml"]);
    assert_eq!(code(&out), 1);
    assert!(!out.stderr.is_empty());

    let bad = dir.path().join("checkpoint.json");
    fs::write(&bad, "{\"version\": 1, \"generation\":").unwrap();
    assert_eq!(code(&run(&["resume", "--checkpoint", p(&bad)])), 1);

    let history = dir.path().join("history.csv");
    fs::write(&history, "a,b\n1,2\n").unwrap();
    assert_eq!(code(&run(&["report", "--history", p(&history), "--csv"])), 1);

    let genotype = dir.path().join("g.json");
    fs::write(&genotype, "[1, 2]").unwrap();
    assert_eq!(code(&run(&["inspect", "--genotype", p(&genotype)])), 1);
}

#[test]
fn same_seed_gives_identical_history() {
    let dir = tempfile::tempdir().unwrap();
    let config = unsatisfiable(dir.path(), 15);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert_eq!(code(&run(&["evolve", "--config", p(&config), "--out", p(&a)])), 2);
    assert_eq!(code(&run(&["evolve", "--config", p(&config), "--out", p(&b)])), 2);
    let read = |d: &Path, f: &str| fs::read(d.join(f)).unwrap();
    assert_eq!(read(&a, "history.csv"), read(&b, "history.csv"));
    assert_eq!(read(&a, "evaluations.jsonl"), read(&b, "evaluations.jsonl"));

    let c = dir.path().join("c");
    assert_eq!(code(&run(&["evolve", "--config", p(&config), "--seed", "77", "--out", p(&c)])), 2);
    assert_ne!(read(&a, "history.csv"), read(&c, "history.csv"));
}

#[test]
fn stop_and_resume_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let config = unsatisfiable(dir.path(), 12);
    let full = dir.path().join("full");
    let split = dir.path().join("split");
    assert_eq!(code(&run(&["evolve", "--config", p(&config), "--out", p(&full)])), 2);
    assert_eq!(code(&run(&["evolve", "--config", p(&config), "--out", p(&split), "--stop-after", "5"])), 3);
    assert!(!split.join("result.json").exists());
    let checkpoint = split.join("checkpoint.json");
    assert_eq!(code(&run(&["resume", "--checkpoint", p(&checkpoint), "--stop-after", "2"])), 3);
    assert_eq!(code(&run(&["resume", "--checkpoint", p(&checkpoint)])), 2);
    for f in ["history.csv", "evaluations.jsonl", "result.json", "checkpoint.json"] {
        assert_eq!(fs::read(full.join(f)).unwrap(), fs::read(split.join(f)).unwrap(), "{f}");
    }
    // Resuming a finished run rewrites the same result.
    assert_eq!(code(&run(&["resume", "--checkpoint", p(&checkpoint)])), 2);
    assert_eq!(fs::read(full.join("result.json")).unwrap(), fs::read(split.join("result.json")).unwrap());
}

#[test]
fn inspect_minimal_cnn() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.json");
    let g = minimal_genotype(&builtin_space(BuiltinSpace::Cnn), 1).unwrap();
    fs::write(&path, serde_json::to_string(&g).unwrap()).unwrap();
    let out = run(&["inspect", "--genotype", p(&path)]);
    assert_eq!(code(&out), 0);
    // conv 3->16, 3x3: 16 * (3*9 + 1) = 448; batchnorm: 2 * 16 = 32;
    // 32 -> 30 -> maxpool 15, so linear 16*15*15 -> 32: 32 * (3600 + 1).
    let params = 448 + 32 + 32 * (16 * 15 * 15 + 1);
    assert_eq!(
        String::from_utf8(out.stdout).unwrap(),
        format!("cells: 2 (conv 1, linear 1)\nlayers: 6\nparameters: {params}\n")
    );
    let out = run(&["inspect", "--genotype", p(&path), "--input-shape", "3,8,8"]);
    let params = 448 + 32 + 32 * (16 * 3 * 3 + 1);
    assert!(String::from_utf8(out.stdout).unwrap().ends_with(&format!("parameters: {params}\n")));
}

#[test]
fn report_formats() {
    let dir = tempfile::tempdir().unwrap();
    let config = unsatisfiable(dir.path(), 4);
    let out_dir = dir.path().join("run");
    assert_eq!(code(&run(&["evolve", "--config", p(&config), "--out", p(&out_dir)])), 2);
    let history = out_dir.join("history.csv");

    let csv = run(&["report", "--history", p(&history), "--csv"]);
    assert_eq!(code(&csv), 0);
    let text = String::from_utf8(csv.stdout).unwrap();
    assert_eq!(text.lines().next(), Some(HISTORY_HEADER));
    assert_eq!(text, fs::read_to_string(&history).unwrap());

    let json = run(&["report", "--history", p(&history), "--json"]);
    let v: serde_json::Value = serde_json::from_slice(&json.stdout).unwrap();
    let generations = v.as_array().unwrap();
    assert_eq!(generations.len(), 4);
    assert!(generations[0]["species"].as_array().is_some_and(|s| !s.is_empty()));

    assert_eq!(code(&run(&["report", "--history", p(&history)])), 1, "a format flag is required");
}

#[test]
fn worker_evaluator_from_config() {
    let dir = tempfile::tempdir().unwrap();
    let worker = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/echo_worker.py");
    let text = format!(
        r#"
[dnn]
dnn_type = "cnn"
[evolution]
individual_init = 4
individual_limit = 8
species_num_limit = 4
[training]
incomplete_fitness_threshold = 1000.0
complete_fitness_threshold = 1000.0
[training.evaluator]
kind = "worker"
command = ["python3", {worker:?}]
timeout_secs = 30
pool_size = 2
env = {{ PER_CELL = "0.1" }}
[run]
generation_limit = 2
"#
    );
    let config = dir.path().join("worker.toml");
    fs::write(&config, text).unwrap();
    let out_dir = dir.path().join("run");
    let out = bin()
        .args(["evolve", "--config", p(&config), "--out", p(&out_dir)])
        .env("CELLGROW_WORKERS", "3")
        .output()
        .unwrap();
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
    let evaluations = fs::read_to_string(out_dir.join("evaluations.jsonl")).unwrap();
    assert!(evaluations.lines().count() > 0);
    assert!(evaluations.lines().all(|l| l.contains("\"failed\":false")));

    let out = bin().args(["evolve", "--config", p(&config), "--out", p(&out_dir)]).env("CELLGROW_WORKERS", "0").output().unwrap();
    assert_eq!(code(&out), 1);
}
