//! Evaluation through external worker processes.
//!
//! Each request is one line of JSON on the worker's stdin and each response
//! one line on its stdout:
//!
//! ```text
//! {"id":12,"phase":"incomplete","budget":10,"seed":99,"phenotype":{...}}
//! {"id":12,"status":"ok","fitness":0.61,"metrics":{"loss":1.2}}
//! ```
//!
//! A worker handles one request at a time. A worker that times out, exits
//! or answers with something unparsable is killed and restarted, and the
//! request is retried once.

use std::collections::BTreeMap;
use std::io::{self, BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use cellgrow_core::fitness::{EvaluationError, EvaluationJob, Evaluator, Phase};
use cellgrow_core::genome::{decode, Phenotype};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireRequest {
    pub id: u64,
    pub phase: Phase,
    pub budget: u32,
    pub seed: u64,
    pub phenotype: Phenotype,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WireStatus {
    Ok,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireResponse {
    pub id: u64,
    pub status: WireStatus,
    #[serde(default)]
    pub fitness: Option<f64>,
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

#[derive(Debug, Error)]
pub enum BridgeError {
    #[error("timeout")]
    Timeout,
    #[error("protocol: {0}")]
    Protocol(String),
    #[error("worker exited")]
    Exited,
    #[error("cannot start worker: {0}")]
    Spawn(io::Error),
}

#[derive(Debug, Clone)]
pub struct WorkerCommand {
    pub program: String,
    pub args: Vec<String>,
    pub env: BTreeMap<String, String>,
    pub timeout: Duration,
}

impl WorkerCommand {
    /// `argv[0]` is the program.
    pub fn new(argv: &[String], timeout: Duration) -> Self {
        WorkerCommand {
            program: argv.first().cloned().unwrap_or_default(),
            args: argv.iter().skip(1).cloned().collect(),
            env: BTreeMap::new(),
            timeout,
        }
    }
}

struct Process {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<io::Result<String>>,
}

impl Process {
    fn spawn(cmd: &WorkerCommand) -> Result<Process, BridgeError> {
        let mut child = Command::new(&cmd.program)
            .args(&cmd.args)
            .envs(&cmd.env)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(BridgeError::Spawn)?;
        let stdin = child.stdin.take().expect("stdin is piped");
        let stdout = child.stdout.take().expect("stdout is piped");
        let (tx, lines) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Ok(Process { child, stdin, lines })
    }

    fn kill(mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// One worker process with restart-on-failure.
pub struct WorkerBridge {
    command: WorkerCommand,
    process: Option<Process>,
    restarts: u32,
}

impl WorkerBridge {
    pub fn new(command: WorkerCommand) -> Self {
        WorkerBridge { command, process: None, restarts: 0 }
    }

    /// Times the worker process has been replaced after a failure.
    pub fn restarts(&self) -> u32 {
        self.restarts
    }

    /// Sends one request, retrying once on a fresh process after a failure.
    pub fn request(&mut self, request: &WireRequest) -> Result<WireResponse, BridgeError> {
        let line = serde_json::to_string(request).map_err(|e| BridgeError::Protocol(e.to_string()))?;
        match self.attempt(&line, request.id) {
            Ok(r) => Ok(r),
            Err(BridgeError::Spawn(e)) => Err(BridgeError::Spawn(e)),
            Err(_) => {
                self.restarts += 1;
                self.attempt(&line, request.id)
            }
        }
    }

    fn attempt(&mut self, line: &str, id: u64) -> Result<WireResponse, BridgeError> {
        let result = self.exchange(line, id);
        if result.is_err() {
            if let Some(p) = self.process.take() {
                p.kill();
            }
        }
        result
    }

    fn exchange(&mut self, line: &str, id: u64) -> Result<WireResponse, BridgeError> {
        if self.process.is_none() {
            self.process = Some(Process::spawn(&self.command)?);
        }
        let p = self.process.as_mut().expect("spawned above");
        writeln!(p.stdin, "{line}").and_then(|_| p.stdin.flush()).map_err(|_| BridgeError::Exited)?;
        let reply = match p.lines.recv_timeout(self.command.timeout) {
            Ok(Ok(reply)) => reply,
            Ok(Err(e)) => return Err(BridgeError::Protocol(e.to_string())),
            Err(RecvTimeoutError::Timeout) => return Err(BridgeError::Timeout),
            Err(RecvTimeoutError::Disconnected) => return Err(BridgeError::Exited),
        };
        let response: WireResponse =
            serde_json::from_str(&reply).map_err(|e| BridgeError::Protocol(format!("invalid response: {e}")))?;
        if response.id != id {
            return Err(BridgeError::Protocol(format!("response id {} for request {id}", response.id)));
        }
        if response.status == WireStatus::Ok && !response.fitness.is_some_and(f64::is_finite) {
            return Err(BridgeError::Protocol("ok response without a finite fitness".into()));
        }
        Ok(response)
    }
}

impl Drop for WorkerBridge {
    fn drop(&mut self) {
        if let Some(p) = self.process.take() {
            p.kill();
        }
    }
}

/// A fixed set of worker processes used as an [`Evaluator`].
///
/// Jobs are decoded to phenotypes here; genotypes that fail to decode are
/// never sent.
pub struct WorkerPool {
    workers: Vec<Mutex<WorkerBridge>>,
    input_shape: Vec<u32>,
}

impl WorkerPool {
    pub fn new(command: WorkerCommand, size: usize, input_shape: Vec<u32>) -> Self {
        let workers = (0..size.max(1)).map(|_| Mutex::new(WorkerBridge::new(command.clone()))).collect();
        WorkerPool { workers, input_shape }
    }

    pub fn size(&self) -> usize {
        self.workers.len()
    }

    pub fn request(&self, job: &EvaluationJob<'_>) -> Result<WireRequest, EvaluationError> {
        let phenotype = decode(job.genotype, job.space, &self.input_shape)?;
        Ok(WireRequest { id: job.genotype.id, phase: job.phase, budget: job.budget, seed: job.seed, phenotype })
    }

    fn send(bridge: &mut WorkerBridge, request: &WireRequest) -> Result<f64, EvaluationError> {
        match bridge.request(request) {
            Ok(WireResponse { status: WireStatus::Ok, fitness: Some(f), .. }) => Ok(f),
            Ok(r) => Err(EvaluationError::Failed(r.message.unwrap_or_else(|| "worker reported an error".into()))),
            Err(e) => Err(EvaluationError::Failed(e.to_string())),
        }
    }
}

impl Evaluator for WorkerPool {
    fn evaluate(&self, job: &EvaluationJob<'_>) -> Result<f64, EvaluationError> {
        let request = self.request(job)?;
        let mut bridge = self.workers[0].lock().unwrap_or_else(|e| e.into_inner());
        Self::send(&mut bridge, &request)
    }

    fn evaluate_batch(&self, jobs: &[EvaluationJob<'_>]) -> Vec<Result<f64, EvaluationError>> {
        let requests: Vec<Result<WireRequest, EvaluationError>> = jobs.iter().map(|j| self.request(j)).collect();
        let results: Vec<Mutex<Option<Result<f64, EvaluationError>>>> = requests
            .iter()
            .map(|r| Mutex::new(r.as_ref().err().map(|e| Err(e.clone()))))
            .collect();
        let next = AtomicUsize::new(0);
        thread::scope(|scope| {
            for worker in self.workers.iter().take(jobs.len()) {
                scope.spawn(|| {
                    let mut bridge = worker.lock().unwrap_or_else(|e| e.into_inner());
                    loop {
                        let i = next.fetch_add(1, Ordering::Relaxed);
                        let Some(request) = requests.get(i) else { break };
                        if let Ok(request) = request {
                            let r = Self::send(&mut bridge, request);
                            *results[i].lock().unwrap_or_else(|e| e.into_inner()) = Some(r);
                        }
                    }
                });
            }
        });
        results
            .into_iter()
            .map(|r| r.into_inner().unwrap_or_else(|e| e.into_inner()).expect("every job was processed"))
            .collect()
    }
}
