//! Policy endpoints and the turn format they answer in.
//!
//! A turn is free text (the thought), at most one fenced ```python block and
//! at most one `<answer>...</answer>` tag.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::gateway::{ChatClient, Decoding, GatewayError, Message};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyRole {
    Policy,
    Reference,
}

pub trait PolicyClient: Send + Sync {
    fn id(&self) -> &str;

    fn role(&self) -> PolicyRole;

    /// Next assistant turn for `context`. Scripted policies must be a pure
    /// function of `(context, seed)`.
    fn next_turn(&self, context: &[Message], seed: u64) -> Result<String, GatewayError>;
}

/// Policy served by a chat-completion endpoint.
pub struct ChatPolicy {
    client: Arc<dyn ChatClient>,
    decoding: Decoding,
    role: PolicyRole,
}

impl ChatPolicy {
    pub fn new(client: Arc<dyn ChatClient>, decoding: Decoding, role: PolicyRole) -> Self {
        Self { client, decoding, role }
    }

    pub fn greedy(client: Arc<dyn ChatClient>, role: PolicyRole) -> Self {
        Self::new(
            client,
            Decoding {
                temperature: 0.0,
                max_tokens: 1024,
            },
            role,
        )
    }
}

impl PolicyClient for ChatPolicy {
    fn id(&self) -> &str {
        self.client.id()
    }

    fn role(&self) -> PolicyRole {
        self.role
    }

    fn next_turn(&self, context: &[Message], _seed: u64) -> Result<String, GatewayError> {
        self.client.complete(context, &self.decoding)
    }
}

type TurnFn = dyn Fn(&[Message], u64) -> Result<String, GatewayError> + Send + Sync;

enum Script {
    Turns(Vec<String>),
    Func(Box<TurnFn>),
}

pub struct ScriptedPolicy {
    script: Script,
    role: PolicyRole,
}

impl ScriptedPolicy {
    /// Replies with `turns[k]` where `k` counts assistant messages already in
    /// the context; the last turn repeats once the list runs out.
    pub fn turns(turns: impl IntoIterator<Item = impl Into<String>>) -> Self {
        Self {
            script: Script::Turns(turns.into_iter().map(Into::into).collect()),
            role: PolicyRole::Policy,
        }
    }

    pub fn from_fn(f: impl Fn(&[Message], u64) -> Result<String, GatewayError> + Send + Sync + 'static) -> Self {
        Self {
            script: Script::Func(Box::new(f)),
            role: PolicyRole::Policy,
        }
    }

    pub fn with_role(mut self, role: PolicyRole) -> Self {
        self.role = role;
        self
    }
}

impl PolicyClient for ScriptedPolicy {
    fn id(&self) -> &str {
        "scripted-policy"
    }

    fn role(&self) -> PolicyRole {
        self.role
    }

    fn next_turn(&self, context: &[Message], seed: u64) -> Result<String, GatewayError> {
        match &self.script {
            Script::Turns(turns) => {
                let k = context.iter().filter(|m| m.role == "assistant").count();
                turns
                    .get(k)
                    .or(turns.last())
                    .cloned()
                    .ok_or_else(|| GatewayError::Fatal("scripted policy has no turns".into()))
            }
            Script::Func(f) => f(context, seed),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyTurn {
    pub thought: String,
    pub code: Option<String>,
    pub answer: Option<String>,
    /// Why the turn is malformed, if it is.
    pub malformed: Option<String>,
}

const ANSWER_OPEN: &str = "<answer>";
const ANSWER_CLOSE: &str = "</answer>";

pub fn parse_turn(text: &str) -> PolicyTurn {
    let mut turn = PolicyTurn::default();
    let mut outside = String::new();
    let mut blocks: Vec<String> = Vec::new();
    let mut open: Option<String> = None;
    for line in text.lines() {
        let trimmed = line.trim();
        if let Some(lang) = trimmed.strip_prefix("```") {
            match open.take() {
                Some(body) if lang.is_empty() => blocks.push(body),
                Some(_) => {
                    turn.malformed = Some("fence opened inside a code block".into());
                    open = Some(String::new());
                }
                None => {
                    if !matches!(lang.trim(), "" | "python" | "py") {
                        turn.malformed.get_or_insert_with(|| format!("unsupported fence language {lang:?}"));
                    }
                    open = Some(String::new());
                }
            }
            continue;
        }
        match open.as_mut() {
            Some(body) => {
                body.push_str(line);
                body.push('\n');
            }
            None => {
                outside.push_str(line);
                outside.push('\n');
            }
        }
    }
    if open.is_some() {
        turn.malformed.get_or_insert_with(|| "unbalanced code fence".into());
    }
    match blocks.len() {
        0 => {}
        1 => turn.code = blocks.pop().filter(|b| !b.trim().is_empty()),
        n => {
            turn.malformed.get_or_insert_with(|| format!("{n} code blocks in one turn"));
        }
    }

    let opens = outside.matches(ANSWER_OPEN).count();
    let closes = outside.matches(ANSWER_CLOSE).count();
    match (opens, closes) {
        (0, 0) => turn.thought = outside.trim().to_string(),
        (1, 1) => {
            let start = outside.find(ANSWER_OPEN).expect("counted");
            let end = outside.find(ANSWER_CLOSE).expect("counted");
            if end < start {
                turn.malformed.get_or_insert_with(|| "answer tag closed before it opened".into());
                turn.thought = outside.trim().to_string();
            } else {
                turn.answer = Some(outside[start + ANSWER_OPEN.len()..end].trim().to_string());
                let mut rest = outside[..start].to_string();
                rest.push_str(&outside[end + ANSWER_CLOSE.len()..]);
                turn.thought = rest.trim().to_string();
            }
        }
        _ => {
            turn.malformed
                .get_or_insert_with(|| format!("{opens} answer openings and {closes} closings"));
            turn.thought = outside.trim().to_string();
        }
    }
    if turn.malformed.is_some() {
        turn.code = None;
    }
    turn
}
