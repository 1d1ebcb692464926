use std::path::PathBuf;
use std::time::{Duration, Instant};

use cellgrow::bridge::{BridgeError, WireRequest, WireStatus, WorkerBridge, WorkerCommand, WorkerPool};
use cellgrow_core::engine::{Engine, EngineConfig};
use cellgrow_core::fitness::{EvaluationError, EvaluationJob, Evaluator, Phase};
use cellgrow_core::genome::{decode, minimal_genotype, Genotype};
use cellgrow_core::search_space::{builtin_space, BuiltinSpace, SearchSpace};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn fixture(name: &str) -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name).display().to_string()
}

fn command(script: &str, timeout: f64) -> WorkerCommand {
    WorkerCommand::new(&["python3".to_string(), fixture(script)], Duration::from_secs_f64(timeout))
}

fn cnn() -> SearchSpace {
    builtin_space(BuiltinSpace::Cnn)
}

fn request(id: u64) -> WireRequest {
    let space = cnn();
    let g = minimal_genotype(&space, id).unwrap();
    WireRequest {
        id,
        phase: Phase::Incomplete,
        budget: 2,
        seed: 99,
        phenotype: decode(&g, &space, &[3, 32, 32]).unwrap(),
    }
}

#[test]
fn request_line_has_the_wire_field_names() {
    let line = serde_json::to_string(&request(12)).unwrap();
    assert!(!line.contains('\n'));
    let v: serde_json::Value = serde_json::from_str(&line).unwrap();
    let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
    assert_eq!(keys, ["budget", "id", "phase", "phenotype", "seed"]);
    assert_eq!(v["phase"], "incomplete");
    assert!(v["phenotype"]["nodes"].is_array());
}

#[test]
fn echo_worker_answers() {
    let mut bridge = WorkerBridge::new(command("echo_worker.py", 10.0));
    let r = bridge.request(&request(3)).unwrap();
    assert_eq!((r.id, r.status, r.fitness), (3, WireStatus::Ok, Some(0.5)));
    assert_eq!(r.metrics["budget"], 2.0);
    assert_eq!(bridge.restarts(), 0);
}

#[test]
fn silent_worker_times_out() {
    let mut bridge = WorkerBridge::new(command("never_reply_worker.py", 2.0));
    let start = Instant::now();
    let err = bridge.request(&request(1)).unwrap_err();
    assert!(err.to_string().starts_with("timeout"), "{err}");
    assert!(matches!(err, BridgeError::Timeout));
    // One retry after a restart, then give up.
    assert!(start.elapsed() < Duration::from_secs(8));
    assert_eq!(bridge.restarts(), 1);
}

#[test]
fn garbage_is_a_protocol_error() {
    let mut bridge = WorkerBridge::new(command("invalid_json_worker.py", 10.0));
    let err = bridge.request(&request(1)).unwrap_err();
    assert!(err.to_string().starts_with("protocol"), "{err}");
}

#[test]
fn crashed_worker_is_restarted_and_retried() {
    let dir = tempfile::tempdir().unwrap();
    let mut cmd = command("crash_once_worker.py", 10.0);
    cmd.env.insert("MARKER".into(), dir.path().join("crashed").display().to_string());
    let mut bridge = WorkerBridge::new(cmd);
    let r = bridge.request(&request(4)).unwrap();
    assert_eq!((r.id, r.fitness), (4, Some(1.0)));
    assert_eq!(bridge.restarts(), 1);
    let r = bridge.request(&request(5)).unwrap();
    assert_eq!(r.id, 5);
    assert_eq!(bridge.restarts(), 1);
}

#[test]
fn missing_program_is_reported() {
    let cmd = WorkerCommand::new(&["/nonexistent/worker".to_string()], Duration::from_secs(1));
    let err = WorkerBridge::new(cmd).request(&request(1)).unwrap_err();
    assert!(matches!(err, BridgeError::Spawn(_)));
}

fn job<'a>(g: &'a Genotype, space: &'a SearchSpace) -> EvaluationJob<'a> {
    EvaluationJob { genotype: g, space, phase: Phase::Complete, budget: 5, seed: 1, generation: 0 }
}

#[test]
fn pool_keeps_results_in_job_order() {
    let space = cnn();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cfg = cellgrow_core::variation::VariationConfig::default();
    let genotypes: Vec<Genotype> = (1..=30)
        .map(|id| {
            let mut g = minimal_genotype(&space, id).unwrap();
            for _ in 0..rng.random_range(0..4) {
                cellgrow_core::variation::mutate_add_cell(&mut g, &space, &cfg, &mut rng);
            }
            g
        })
        .collect();
    let mut cmd = command("echo_worker.py", 10.0);
    cmd.env.insert("PER_CELL".into(), "1".into());
    let pool = WorkerPool::new(cmd, 3, vec![3, 32, 32]);
    assert_eq!(pool.size(), 3);
    let jobs: Vec<_> = genotypes.iter().map(|g| job(g, &space)).collect();
    let results = pool.evaluate_batch(&jobs);
    let mut decoded = 0;
    for (g, r) in genotypes.iter().zip(results) {
        match decode(g, &space, &[3, 32, 32]) {
            Ok(p) => {
                assert_eq!(r.unwrap(), p.nodes.len() as f64);
                decoded += 1;
            }
            Err(_) => assert!(matches!(r, Err(EvaluationError::Decode(_)))),
        }
    }
    assert!(decoded > 10);
}

#[test]
fn worker_errors_and_bad_genotypes_become_failures() {
    let space = cnn();
    let good = minimal_genotype(&space, 1).unwrap();
    let mut bad = good.clone();
    bad.id = 2;
    bad.strands.get_mut("feature").unwrap().clear();
    let pool = WorkerPool::new(command("error_worker.py", 10.0), 2, vec![3, 32, 32]);
    let results = pool.evaluate_batch(&[job(&good, &space), job(&bad, &space)]);
    assert!(matches!(&results[0], Err(EvaluationError::Failed(m)) if m == "diverged"));
    assert!(matches!(&results[1], Err(EvaluationError::Decode(_))));
}

#[test]
fn randomized_requests_round_trip() {
    let mut bridge = WorkerBridge::new(command("echo_worker.py", 10.0));
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let base = request(0);
    for _ in 0..1000 {
        let mut r = base.clone();
        r.id = rng.random();
        r.seed = rng.random();
        r.budget = rng.random_range(1..500);
        r.phase = if rng.random_bool(0.5) { Phase::Incomplete } else { Phase::Complete };
        let reply = bridge.request(&r).unwrap();
        assert_eq!(reply.id, r.id);
        assert_eq!(reply.metrics["budget"], f64::from(r.budget));
        assert_eq!(reply.metrics["seed_low"], (r.seed % 1000) as f64);
    }
    assert_eq!(bridge.restarts(), 0);
}

#[test]
fn engine_runs_against_a_worker_pool() {
    let space = cnn();
    let mut config = EngineConfig::table_defaults(&space);
    config.individual_init = 6;
    config.tau_q = 12;
    config.speciation.species_limit = 6;
    config.tau_k = 3;
    config.estimation.tau_f = 1e9;
    config.estimation.tau_fc = 1e9;
    let mut cmd = command("echo_worker.py", 10.0);
    cmd.env.insert("PER_CELL".into(), "0.1".into());
    let pool = WorkerPool::new(cmd, 2, vec![3, 32, 32]);
    let result = Engine::new(space, config).unwrap().run_to_end(&pool).unwrap();
    assert_eq!(result.generations, 3);
    assert!(result.history.iter().all(|r| !r.best_incomplete.is_failed()));
}
