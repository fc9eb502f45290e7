//! The generator G and the judge clients built on the same transport.
//!
//! A [`Generator`] turns a [`GenRequest`] into block-fenced text; the typed
//! helpers below parse that text with the parsers in [`blocks`]. Model-backed
//! and mock generators therefore share one parsing path.

pub mod blocks;
pub mod client;
pub mod mock;
pub mod prompt;

use std::io::Write;
use std::path::Path;
use std::sync::{Arc, Mutex};

use serde::Serialize;

pub use blocks::{
    parse_blocks, parse_extension, parse_gen_output, parse_judgement, parse_repair, parse_verdict,
    CandidateSample, ExtensionDraft, GenBatch, JudgementDraft, ParseError, RepairDraft, StepDraft,
    VerdictDraft,
};
pub use client::{
    ChatClient, EndpointConfig, HttpChatClient, RetryPolicy, ScriptedChatClient, TokenBucket,
};
pub use mock::{MockGenerator, Novelty, DEFECT_ANSWER, DEFECT_IMAGE, DEFECT_STATES, STICKY};
pub use prompt::{
    build_prompt, ContentPart, Decoding, ElementContext, GenMode, GenPayload, GenRequest,
    JudgeContext, Message, SampleContext, DEFAULT_BATCH,
};

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("unknown prompt template {0}")]
    UnknownTemplate(String),
    #[error("payload does not fit mode {0}")]
    PayloadMismatch(String),
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("rate limited")]
    RateLimited,
    #[error("request timed out")]
    Timeout,
    #[error("transport error: {0}")]
    Transport(String),
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("gave up after {attempts} attempts: {last}")]
    RetriesExhausted {
        attempts: u32,
        last: Box<GatewayError>,
    },
    #[error("request failed: {0}")]
    Fatal(String),
    #[error("endpoint configuration: {0}")]
    Config(String),
    #[error("output could not be parsed: {0}")]
    Parse(#[from] ParseError),
}

impl GatewayError {
    /// Whether another attempt could succeed.
    pub fn is_retryable(&self) -> bool {
        matches!(
            self,
            GatewayError::RateLimited
                | GatewayError::Timeout
                | GatewayError::Transport(_)
                | GatewayError::MalformedResponse(_)
        )
    }
}

pub trait Generator: Send + Sync {
    fn id(&self) -> &str;

    /// Raw block-fenced text for the request.
    fn respond(&self, request: &GenRequest) -> Result<String, GatewayError>;
}

/// Prompt templates plus a chat transport.
pub struct ModelGenerator {
    client: Arc<dyn ChatClient>,
    id: String,
}

impl ModelGenerator {
    pub fn new(client: Arc<dyn ChatClient>) -> Self {
        Self {
            id: format!("model:{}", client.id()),
            client,
        }
    }
}

impl Generator for ModelGenerator {
    fn id(&self) -> &str {
        &self.id
    }

    fn respond(&self, request: &GenRequest) -> Result<String, GatewayError> {
        let messages = build_prompt(request)?;
        self.client.complete(&messages, &request.decoding)
    }
}

fn expect_mode(request: &GenRequest, modes: &[GenMode]) -> Result<(), GatewayError> {
    if !modes.contains(&request.mode) {
        return Err(GatewayError::PayloadMismatch(request.mode.as_str().into()));
    }
    request.validate()
}

pub fn generate(g: &dyn Generator, request: &GenRequest) -> Result<GenBatch, GatewayError> {
    expect_mode(request, &[GenMode::FromKnowledge, GenMode::FromTools])?;
    Ok(parse_gen_output(&g.respond(request)?)?)
}

pub fn check(g: &dyn Generator, request: &GenRequest) -> Result<VerdictDraft, GatewayError> {
    expect_mode(request, &[GenMode::Check])?;
    Ok(parse_verdict(&g.respond(request)?)?)
}

pub fn repair(g: &dyn Generator, request: &GenRequest) -> Result<RepairDraft, GatewayError> {
    expect_mode(request, &[GenMode::Repair])?;
    Ok(parse_repair(&g.respond(request)?)?)
}

pub fn extend(g: &dyn Generator, request: &GenRequest) -> Result<ExtensionDraft, GatewayError> {
    expect_mode(request, &[GenMode::ExtendParallel, GenMode::ExtendSequential])?;
    Ok(parse_extension(&g.respond(request)?)?)
}

pub fn judge(g: &dyn Generator, request: &GenRequest) -> Result<JudgementDraft, GatewayError> {
    expect_mode(
        request,
        &[GenMode::JudgePerception, GenMode::JudgeInstruction, GenMode::JudgeReasoning],
    )?;
    Ok(parse_judgement(&g.respond(request)?)?)
}

#[derive(Serialize)]
struct TranscriptEntry<'a> {
    generator: &'a str,
    mode: &'a str,
    template: &'a str,
    seed: u64,
    attempt: u32,
    response: Option<&'a str>,
    error: Option<String>,
}

/// Append-only line-delimited log of generator calls.
pub struct TranscriptLog {
    file: Mutex<std::fs::File>,
}

impl TranscriptLog {
    pub fn open(path: &Path) -> std::io::Result<Self> {
        let file = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            file: Mutex::new(file),
        })
    }

    pub fn record(
        &self,
        generator: &str,
        request: &GenRequest,
        outcome: &Result<String, GatewayError>,
    ) -> std::io::Result<()> {
        let entry = TranscriptEntry {
            generator,
            mode: request.mode.as_str(),
            template: &request.template,
            seed: request.seed,
            attempt: request.attempt,
            response: outcome.as_ref().ok().map(String::as_str),
            error: outcome.as_ref().err().map(ToString::to_string),
        };
        let mut line = serde_json::to_string(&entry).map_err(std::io::Error::other)?;
        line.push('\n');
        self.file.lock().expect("transcript lock").write_all(line.as_bytes())
    }
}
