//! Frame-protocol worker backed by the [`crate::sketch`] interpreter.
//!
//! This is the fixture worker used for offline runs and CI. It creates a
//! fresh scratch directory per request, decodes input images into it, runs
//! the segment, and returns saved images in save order.
//!
//! `VTHINKER_STUB_FAULT` injects failures for tests:
//! `bad_version`, `hang` (never answer exec), `crash_once:<marker path>`
//! (die on the first exec if the marker file is absent) and `garbage`
//! (answer exec with a non-JSON frame).

use std::collections::HashMap;
use std::io::{Read, Write};
use std::time::{Duration, Instant};

use base64::Engine;

use super::protocol::{
    decode_request, read_frame, write_frame, write_message, Hello, Op, RequestFrame, ResponseFrame,
    PROTOCOL_VERSION,
};
use crate::datamodel::ExecStatus;
use crate::sketch::{self, Limits};

pub const FAULT_ENV: &str = "VTHINKER_STUB_FAULT";

/// Executes one request in a fresh scratch directory.
pub fn handle_request(req: &RequestFrame) -> ResponseFrame {
    let started = Instant::now();
    let mut resp = ResponseFrame {
        id: req.id.clone(),
        status: ExecStatus::Ok,
        images: Vec::new(),
        stdout: String::new(),
        trace: String::new(),
        duration_ms: 0,
        payload: None,
    };
    match req.op {
        Op::Echo => {
            resp.payload = req.payload.clone();
        }
        Op::Exec => {
            if let Err(trace) = exec_in_scratch(req, &mut resp) {
                resp.status = ExecStatus::Error;
                resp.trace = trace;
            }
        }
    }
    resp.duration_ms = started.elapsed().as_millis() as u64;
    resp
}

fn exec_in_scratch(req: &RequestFrame, resp: &mut ResponseFrame) -> Result<(), String> {
    let scratch = tempfile::Builder::new()
        .prefix("vthinker-scratch-")
        .tempdir()
        .map_err(|e| format!("OSError: cannot create scratch directory: {e}"))?;
    let mut bindings = HashMap::new();
    for image in &req.images {
        let valid_name = !image.name.is_empty()
            && image.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
            && !image.name.starts_with(|c: char| c.is_ascii_digit());
        if !valid_name {
            return Err(format!("ValueError: invalid binding name {:?}", image.name));
        }
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(&image.b64)
            .map_err(|e| format!("ValueError: binding {:?} is not base64: {e}", image.name))?;
        let path = scratch.path().join(format!("{}.png", image.name));
        std::fs::write(&path, bytes).map_err(|e| format!("OSError: {e}"))?;
        bindings.insert(image.name.clone(), path);
    }
    let limits = Limits {
        timeout: Duration::from_millis(if req.timeout_ms == 0 { 10_000 } else { req.timeout_ms }),
        memory_bytes: if req.mem_mb == 0 { 512 } else { req.mem_mb } * 1024 * 1024,
    };
    let out = sketch::run(&req.code, scratch.path(), &bindings, limits);
    resp.status = out.status;
    resp.stdout = out.stdout;
    resp.trace = out.trace;
    for path in &out.saved {
        let bytes = std::fs::read(path).map_err(|e| format!("OSError: {e}"))?;
        resp.images
            .push(base64::engine::general_purpose::STANDARD.encode(bytes));
    }
    Ok(())
}

/// Serves frames until the input closes. Returns the process exit code.
pub fn serve<R: Read, W: Write>(mut input: R, mut output: W) -> i32 {
    let fault = std::env::var(FAULT_ENV).unwrap_or_default();
    let version = if fault == "bad_version" {
        PROTOCOL_VERSION + 98
    } else {
        PROTOCOL_VERSION
    };
    let hello = Hello {
        op: "hello".into(),
        protocol_version: version,
    };
    if write_message(&mut output, &hello).is_err() {
        return 1;
    }
    loop {
        let body = match read_frame(&mut input) {
            Ok(Some(body)) => body,
            Ok(None) => return 0,
            Err(e) => {
                protocol_error(&mut output, &e.to_string());
                return 1;
            }
        };
        let req = match decode_request(&body) {
            Ok(r) => r,
            Err(e) => {
                protocol_error(&mut output, &e.to_string());
                return 1;
            }
        };
        if req.op == Op::Exec {
            if fault == "hang" {
                loop {
                    std::thread::sleep(Duration::from_secs(3600));
                }
            }
            if let Some(marker) = fault.strip_prefix("crash_once:") {
                if !std::path::Path::new(marker).exists() {
                    let _ = std::fs::write(marker, b"crashed");
                    std::process::exit(101);
                }
            }
            if fault == "garbage" {
                let _ = write_frame(&mut output, b"\x00not json");
                continue;
            }
        }
        let resp = handle_request(&req);
        if write_message(&mut output, &resp).is_err() {
            return 1;
        }
    }
}

fn protocol_error<W: Write>(output: &mut W, message: &str) {
    let resp = ResponseFrame {
        id: String::new(),
        status: ExecStatus::Error,
        images: Vec::new(),
        stdout: String::new(),
        trace: format!("protocol error: {message}"),
        duration_ms: 0,
        payload: None,
    };
    let _ = write_message(output, &resp);
}

/// Entry point shared by the stub worker binary and the CLI `stub-worker`
/// subcommand.
pub fn main_with_args(args: &[String]) -> i32 {
    let mut iter = args.iter();
    while let Some(arg) = iter.next() {
        if arg == "--protocol-version" {
            match iter.next().and_then(|v| v.parse::<u32>().ok()) {
                Some(v) if v == PROTOCOL_VERSION => {}
                Some(v) => {
                    eprintln!("unsupported protocol version {v}; this worker speaks {PROTOCOL_VERSION}");
                    return 2;
                }
                None => {
                    eprintln!("--protocol-version needs an integer");
                    return 2;
                }
            }
        }
    }
    let stdin = std::io::stdin();
    let stdout = std::io::stdout();
    serve(stdin.lock(), stdout.lock())
}
