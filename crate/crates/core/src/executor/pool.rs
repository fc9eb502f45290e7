use std::collections::VecDeque;
use std::path::PathBuf;
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use log::{debug, warn};

use super::protocol::{
    decode_hello, decode_response, read_frame, write_message, Op, RequestFrame, ResponseFrame,
    PROTOCOL_VERSION,
};
use super::{ingest, CodeExecutor, ExecError, ExecutionRequest, ExecutionResult};
use crate::datamodel::{ExecStatus, ImageStore};

/// How to start one worker process. `--protocol-version` is appended.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkerLauncher {
    pub program: PathBuf,
    pub args: Vec<String>,
    pub env: Vec<(String, String)>,
}

impl WorkerLauncher {
    pub fn new(program: impl Into<PathBuf>) -> Self {
        Self {
            program: program.into(),
            args: Vec::new(),
            env: Vec::new(),
        }
    }

    pub fn arg(mut self, arg: impl Into<String>) -> Self {
        self.args.push(arg.into());
        self
    }

    pub fn env(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.env.push((key.into(), value.into()));
        self
    }
}

#[derive(Debug, Clone)]
pub struct PoolConfig {
    pub workers: usize,
    /// Submitters allowed to wait for a free worker before new ones are refused.
    pub queue_cap: usize,
    pub handshake_timeout: Duration,
}

impl Default for PoolConfig {
    fn default() -> Self {
        Self {
            workers: 2,
            queue_cap: 256,
            handshake_timeout: Duration::from_secs(10),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WorkerState {
    Healthy,
    Busy,
    Dead,
    Unresponsive,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkerHealth {
    pub index: usize,
    pub pid: Option<u32>,
    pub state: WorkerState,
}

type FrameResult = Result<Vec<u8>, String>;

struct Worker {
    child: Child,
    stdin: ChildStdin,
    frames: Receiver<FrameResult>,
}

enum Roundtrip {
    Response(ResponseFrame),
    Died,
    TimedOut,
    Violation(String),
}

impl Worker {
    fn spawn(launcher: &WorkerLauncher, handshake_timeout: Duration) -> Result<Self, ExecError> {
        let mut cmd = Command::new(&launcher.program);
        cmd.args(&launcher.args)
            .arg("--protocol-version")
            .arg(PROTOCOL_VERSION.to_string())
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit());
        for (k, v) in &launcher.env {
            cmd.env(k, v);
        }
        let mut child = cmd
            .spawn()
            .map_err(|e| ExecError::Spawn(format!("{}: {e}", launcher.program.display())))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let mut stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel::<FrameResult>();
        std::thread::Builder::new()
            .name(format!("worker-reader-{}", child.id()))
            .spawn(move || loop {
                match read_frame(&mut stdout) {
                    Ok(Some(frame)) => {
                        if tx.send(Ok(frame)).is_err() {
                            return;
                        }
                    }
                    Ok(None) => return,
                    Err(e) => {
                        let _ = tx.send(Err(e.to_string()));
                        return;
                    }
                }
            })
            .map_err(|e| ExecError::Spawn(e.to_string()))?;
        let mut worker = Worker {
            child,
            stdin,
            frames: rx,
        };
        let hello = match worker.frames.recv_timeout(handshake_timeout) {
            Ok(Ok(body)) => decode_hello(&body).map_err(|e| ExecError::Handshake(e.to_string())),
            Ok(Err(e)) => Err(ExecError::Handshake(e)),
            Err(_) => Err(ExecError::Handshake("no hello frame received".into())),
        };
        match hello {
            Ok(h) if h.protocol_version == PROTOCOL_VERSION => Ok(worker),
            Ok(h) => {
                worker.kill();
                Err(ExecError::Handshake(format!(
                    "worker speaks protocol {}, expected {PROTOCOL_VERSION}",
                    h.protocol_version
                )))
            }
            Err(e) => {
                worker.kill();
                Err(e)
            }
        }
    }

    fn pid(&self) -> u32 {
        self.child.id()
    }

    fn is_alive(&mut self) -> bool {
        matches!(self.child.try_wait(), Ok(None))
    }

    fn kill(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }

    fn roundtrip(&mut self, frame: &RequestFrame, wait: Duration) -> Roundtrip {
        if write_message(&mut self.stdin, frame).is_err() {
            return Roundtrip::Died;
        }
        match self.frames.recv_timeout(wait) {
            Ok(Ok(body)) => match decode_response(&body) {
                Ok(resp) if resp.id == frame.id => Roundtrip::Response(resp),
                Ok(resp) => Roundtrip::Violation(format!(
                    "response id {:?} does not match request {:?}",
                    resp.id, frame.id
                )),
                Err(e) => Roundtrip::Violation(e.to_string()),
            },
            Ok(Err(_)) | Err(RecvTimeoutError::Disconnected) => Roundtrip::Died,
            Err(RecvTimeoutError::Timeout) => Roundtrip::TimedOut,
        }
    }
}

impl Drop for Worker {
    fn drop(&mut self) {
        self.kill();
    }
}

struct Dispatch {
    idle: VecDeque<usize>,
    waiting: usize,
}

/// Fixed-size pool of worker processes with one request in flight each.
pub struct WorkerPool {
    launcher: WorkerLauncher,
    config: PoolConfig,
    store: ImageStore,
    slots: Vec<Mutex<Option<Worker>>>,
    dispatch: Mutex<Dispatch>,
    available: Condvar,
}

impl WorkerPool {
    /// Spawns `config.workers` workers and completes their handshakes.
    pub fn spawn(
        launcher: WorkerLauncher,
        config: PoolConfig,
        store: ImageStore,
    ) -> Result<Self, ExecError> {
        if config.workers == 0 {
            return Err(ExecError::EmptyPool);
        }
        let mut slots = Vec::with_capacity(config.workers);
        for _ in 0..config.workers {
            slots.push(Mutex::new(Some(Worker::spawn(
                &launcher,
                config.handshake_timeout,
            )?)));
        }
        Ok(Self {
            dispatch: Mutex::new(Dispatch {
                idle: (0..config.workers).collect(),
                waiting: 0,
            }),
            available: Condvar::new(),
            launcher,
            config,
            store,
            slots,
        })
    }

    pub fn size(&self) -> usize {
        self.slots.len()
    }

    /// Process ids of the current workers, `None` for empty slots.
    pub fn worker_pids(&self) -> Vec<Option<u32>> {
        self.slots
            .iter()
            .map(|s| match s.try_lock() {
                Ok(guard) => guard.as_ref().map(Worker::pid),
                Err(_) => None,
            })
            .collect()
    }

    /// Probes every idle worker with an echo round trip.
    pub fn health(&self) -> Vec<WorkerHealth> {
        self.slots
            .iter()
            .enumerate()
            .map(|(index, slot)| {
                let Ok(mut guard) = slot.try_lock() else {
                    return WorkerHealth {
                        index,
                        pid: None,
                        state: WorkerState::Busy,
                    };
                };
                let Some(worker) = guard.as_mut() else {
                    return WorkerHealth {
                        index,
                        pid: None,
                        state: WorkerState::Dead,
                    };
                };
                let pid = Some(worker.pid());
                if !worker.is_alive() {
                    return WorkerHealth {
                        index,
                        pid,
                        state: WorkerState::Dead,
                    };
                }
                let probe = RequestFrame {
                    id: format!("health-{index}"),
                    op: Op::Echo,
                    code: String::new(),
                    images: Vec::new(),
                    timeout_ms: 0,
                    mem_mb: 0,
                    payload: Some(serde_json::json!({"probe": index})),
                };
                let state = match worker.roundtrip(&probe, Duration::from_secs(2)) {
                    Roundtrip::Response(r) if r.payload == probe.payload => WorkerState::Healthy,
                    Roundtrip::Died => WorkerState::Dead,
                    _ => WorkerState::Unresponsive,
                };
                WorkerHealth { index, pid, state }
            })
            .collect()
    }

    fn checkout(&self) -> Result<usize, ExecError> {
        let mut dispatch = self.dispatch.lock().expect("dispatch lock");
        loop {
            if let Some(index) = dispatch.idle.pop_front() {
                return Ok(index);
            }
            if dispatch.waiting >= self.config.queue_cap {
                return Err(ExecError::PoolExhausted(dispatch.waiting));
            }
            dispatch.waiting += 1;
            dispatch = self.available.wait(dispatch).expect("dispatch lock");
            dispatch.waiting -= 1;
        }
    }

    fn release(&self, index: usize) {
        self.dispatch
            .lock()
            .expect("dispatch lock")
            .idle
            .push_back(index);
        self.available.notify_one();
    }

    fn replace(&self, slot: &mut Option<Worker>) {
        if let Some(mut old) = slot.take() {
            old.kill();
        }
        match Worker::spawn(&self.launcher, self.config.handshake_timeout) {
            Ok(w) => *slot = Some(w),
            Err(e) => warn!("could not respawn worker: {e}"),
        }
    }

    fn dispatch_frame(&self, index: usize, frame: &RequestFrame) -> Result<ResponseFrame, ExecError> {
        let mut slot = self.slots[index].lock().expect("slot lock");
        // Hard kill at twice the segment's own limit.
        let wait = Duration::from_millis(frame.timeout_ms.max(1).saturating_mul(2));
        for attempt in 0..2 {
            let alive = slot.as_mut().is_some_and(Worker::is_alive);
            if !alive {
                self.replace(&mut slot);
            }
            let Some(worker) = slot.as_mut() else {
                return Err(ExecError::Spawn("no live worker available".into()));
            };
            match worker.roundtrip(frame, wait) {
                Roundtrip::Response(resp) => return Ok(resp),
                Roundtrip::TimedOut => {
                    warn!("worker {index} exceeded {} ms; killing", wait.as_millis());
                    self.replace(&mut slot);
                    return Ok(ResponseFrame {
                        id: frame.id.clone(),
                        status: ExecStatus::Killed,
                        images: Vec::new(),
                        stdout: String::new(),
                        trace: format!("worker hard-killed after {} ms", wait.as_millis()),
                        duration_ms: wait.as_millis() as u64,
                        payload: None,
                    });
                }
                Roundtrip::Violation(msg) => {
                    self.replace(&mut slot);
                    return Err(ExecError::Protocol(msg));
                }
                Roundtrip::Died => {
                    debug!("worker {index} died during request {} (attempt {attempt})", frame.id);
                    self.replace(&mut slot);
                }
            }
        }
        Err(ExecError::WorkerCrashed)
    }
}

impl CodeExecutor for WorkerPool {
    fn execute(&self, request: ExecutionRequest) -> Result<ExecutionResult, ExecError> {
        let frame = request.to_frame(&self.store)?;
        let index = self.checkout()?;
        let outcome = self.dispatch_frame(index, &frame);
        self.release(index);
        ingest(outcome?, &self.store)
    }

    fn store(&self) -> &ImageStore {
        &self.store
    }
}
