//! The execution environment: code plus input images in, updated images out.
//!
//! [`WorkerPool`] drives sandbox worker processes over the frame protocol in
//! [`protocol`]. [`InProcessExecutor`] runs the reference interpreter inside
//! the current process and is meant for tests and quick local runs.

mod pool;
pub mod protocol;
pub mod stub_worker;

use std::sync::atomic::{AtomicU64, Ordering};

use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::datamodel::{DataError, ExecStatus, ExecutionSummary, ImageRef, ImageStore};
pub use pool::{PoolConfig, WorkerHealth, WorkerLauncher, WorkerPool, WorkerState};
use protocol::{Op, RequestFrame, ResponseFrame, WireImage};

pub const DEFAULT_TIMEOUT_MS: u64 = 10_000;
pub const DEFAULT_MEMORY_MB: u64 = 512;

#[derive(Debug, thiserror::Error)]
pub enum ExecError {
    #[error("failed to spawn worker: {0}")]
    Spawn(String),
    #[error("worker handshake failed: {0}")]
    Handshake(String),
    #[error("worker protocol violation: {0}")]
    Protocol(String),
    #[error("worker died before responding (after retry)")]
    WorkerCrashed,
    #[error("pool exhausted: {0} requests already queued")]
    PoolExhausted(usize),
    #[error("pool has no workers")]
    EmptyPool,
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("image store error: {0}")]
    Store(#[from] DataError),
    #[error("expected exactly one output image, got {0}")]
    OutputMultiplicity(usize),
    #[error("segment failed with status {status:?}: {trace}")]
    Failed { status: ExecStatus, trace: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputBinding {
    pub name: String,
    pub image: ImageRef,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionRequest {
    pub id: String,
    pub code: String,
    pub input_images: Vec<InputBinding>,
    pub timeout_ms: u64,
    pub memory_limit_mb: u64,
    /// Always false; kept so requests document the policy they ran under.
    pub allow_network: bool,
}

static REQUEST_COUNTER: AtomicU64 = AtomicU64::new(0);

impl ExecutionRequest {
    pub fn new(code: impl Into<String>) -> Self {
        let n = REQUEST_COUNTER.fetch_add(1, Ordering::Relaxed);
        Self {
            id: format!("exec-{}-{n}", std::process::id()),
            code: code.into(),
            input_images: Vec::new(),
            timeout_ms: DEFAULT_TIMEOUT_MS,
            memory_limit_mb: DEFAULT_MEMORY_MB,
            allow_network: false,
        }
    }

    pub fn with_input(mut self, name: impl Into<String>, image: ImageRef) -> Self {
        self.input_images.push(InputBinding {
            name: name.into(),
            image,
        });
        self
    }

    pub fn with_timeout_ms(mut self, timeout_ms: u64) -> Self {
        self.timeout_ms = timeout_ms;
        self
    }

    pub fn with_memory_mb(mut self, mb: u64) -> Self {
        self.memory_limit_mb = mb;
        self
    }

    fn validate(&self) -> Result<(), ExecError> {
        if self.allow_network {
            return Err(ExecError::InvalidRequest("network access is never granted".into()));
        }
        for binding in &self.input_images {
            let ok = !binding.name.is_empty()
                && binding.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
                && !binding.name.starts_with(|c: char| c.is_ascii_digit());
            if !ok {
                return Err(ExecError::InvalidRequest(format!(
                    "binding name {:?} is not a valid identifier",
                    binding.name
                )));
            }
        }
        Ok(())
    }

    fn to_frame(&self, store: &ImageStore) -> Result<RequestFrame, ExecError> {
        self.validate()?;
        let mut images = Vec::with_capacity(self.input_images.len());
        for binding in &self.input_images {
            images.push(WireImage {
                name: binding.name.clone(),
                b64: base64::engine::general_purpose::STANDARD.encode(store.get(&binding.image)?),
            });
        }
        Ok(RequestFrame {
            id: self.id.clone(),
            op: Op::Exec,
            code: self.code.clone(),
            images,
            timeout_ms: self.timeout_ms,
            mem_mb: self.memory_limit_mb,
            payload: None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionResult {
    pub id: String,
    pub status: ExecStatus,
    pub output_images: Vec<ImageRef>,
    pub stdout: String,
    pub trace: String,
    pub duration_ms: u64,
}

impl ExecutionResult {
    pub fn summary(&self) -> ExecutionSummary {
        let mut trace = self.trace.clone();
        if trace.len() > 2000 {
            let mut cut = 2000;
            while !trace.is_char_boundary(cut) {
                cut -= 1;
            }
            trace.truncate(cut);
        }
        ExecutionSummary {
            status: self.status,
            output_count: self.output_images.len() as u32,
            trace,
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == ExecStatus::Ok
    }
}

fn ingest(resp: ResponseFrame, store: &ImageStore) -> Result<ExecutionResult, ExecError> {
    let mut output_images = Vec::with_capacity(resp.images.len());
    if resp.status == ExecStatus::Ok {
        for b64 in &resp.images {
            let bytes = base64::engine::general_purpose::STANDARD
                .decode(b64)
                .map_err(|e| ExecError::Protocol(format!("output image is not base64: {e}")))?;
            output_images.push(
                store
                    .put(&bytes)
                    .map_err(|e| ExecError::Protocol(format!("output image rejected: {e}")))?,
            );
        }
    }
    Ok(ExecutionResult {
        id: resp.id,
        status: resp.status,
        output_images,
        stdout: resp.stdout,
        trace: resp.trace,
        duration_ms: resp.duration_ms,
    })
}

/// Anything that can run a code segment against input images.
pub trait CodeExecutor: Send + Sync {
    fn execute(&self, request: ExecutionRequest) -> Result<ExecutionResult, ExecError>;

    /// Store that input refs resolve in and outputs are ingested into.
    fn store(&self) -> &ImageStore;
}

/// Runs original rendering code that must save exactly one image.
pub fn render_original(executor: &dyn CodeExecutor, code: &str) -> Result<ImageRef, ExecError> {
    let result = executor.execute(ExecutionRequest::new(code))?;
    if !result.is_ok() {
        return Err(ExecError::Failed {
            status: result.status,
            trace: result.trace,
        });
    }
    match result.output_images.len() {
        1 => Ok(result.output_images.into_iter().next().expect("one image")),
        n => Err(ExecError::OutputMultiplicity(n)),
    }
}

/// Executes segments with the reference interpreter in this process.
#[derive(Debug, Clone)]
pub struct InProcessExecutor {
    store: ImageStore,
}

impl InProcessExecutor {
    pub fn new(store: ImageStore) -> Self {
        Self { store }
    }
}

impl CodeExecutor for InProcessExecutor {
    fn execute(&self, request: ExecutionRequest) -> Result<ExecutionResult, ExecError> {
        let frame = request.to_frame(&self.store)?;
        ingest(stub_worker::handle_request(&frame), &self.store)
    }

    fn store(&self) -> &ImageStore {
        &self.store
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn exec() -> (InProcessExecutor, tempfile::TempDir) {
        let dir = tempfile::tempdir().unwrap();
        let store = ImageStore::open(dir.path()).unwrap();
        (InProcessExecutor::new(store), dir)
    }

    #[test]
    fn render_original_requires_single_output() {
        let (ex, _d) = exec();
        let img = render_original(&ex, "img = new_canvas(640, 480)\nsave(img, \"a.png\")").unwrap();
        assert_eq!((img.width, img.height), (640, 480));
        let err = render_original(
            &ex,
            "img = new_canvas(8, 8)\nsave(img, \"a.png\")\nsave(img, \"b.png\")",
        )
        .unwrap_err();
        assert!(matches!(err, ExecError::OutputMultiplicity(2)));
        assert!(matches!(
            render_original(&ex, "pass").unwrap_err(),
            ExecError::OutputMultiplicity(0)
        ));
    }

    #[test]
    fn empty_code_saves_nothing() {
        let (ex, _d) = exec();
        let r = ex.execute(ExecutionRequest::new("")).unwrap();
        assert!(r.is_ok());
        assert!(r.output_images.is_empty());
    }

    #[test]
    fn input_binding_is_drawn_on() {
        let (ex, _d) = exec();
        let blank = render_original(&ex, "img = new_canvas(20, 20)\nsave(img, \"a.png\")").unwrap();
        let req = ExecutionRequest::new(
            "img = load(\"img0\")\nline(img, 0, 10, 19, 10, \"red\")\nsave(img, \"out.png\")",
        )
        .with_input("img0", blank.clone());
        let a = ex.execute(req.clone()).unwrap();
        let b = ex.execute(req).unwrap();
        assert!(a.is_ok(), "{}", a.trace);
        assert_eq!(a.output_images, b.output_images);
        assert_ne!(a.output_images[0].digest, blank.digest);
    }

    #[test]
    fn bad_binding_name_is_rejected_before_dispatch() {
        let (ex, _d) = exec();
        let blank = render_original(&ex, "img = new_canvas(2, 2)\nsave(img, \"a.png\")").unwrap();
        let req = ExecutionRequest::new("pass").with_input("not valid", blank);
        assert!(matches!(ex.execute(req), Err(ExecError::InvalidRequest(_))));
    }
}
