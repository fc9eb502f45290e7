//! Block-fenced generator output.
//!
//! ```text
//! [[sample]]
//! [[question]]
//! ...
//! [[/question]]
//! [[answer]] 4.12 [[/answer]]
//! [[/sample]]
//! ```
//!
//! Only known tag names are fences, so stray `[[x]]` inside code is left
//! alone. Field tags are leaves: everything up to the matching close tag is
//! taken verbatim. Text outside any block is ignored.

use crate::forest::{ConceptProposal, ToolProposal};

const CONTAINERS: &[&str] = &[
    "sample", "step", "concept", "tool", "verdict", "repair", "extension", "judgement",
];
const LEAVES: &[&str] = &[
    "question", "answer", "code", "thought", "name", "description", "domain", "parent",
    "signature", "example", "answer_ok", "image_ok", "states_ok", "rationale", "strategy",
    "correct", "reason",
];

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ParseError {
    #[error("missing [[{block}]] block{}", context.as_ref().map(|c| format!(" in {c}")).unwrap_or_default())]
    MissingBlock {
        block: String,
        context: Option<String>,
    },
    #[error("unbalanced fence for [[{block}]]: {detail}")]
    UnbalancedFence { block: String, detail: String },
    #[error("empty [[{block}]] field in {context}")]
    EmptyField { block: String, context: String },
    #[error("[[{block}]] in {context} has invalid value {value:?}")]
    InvalidValue {
        block: String,
        context: String,
        value: String,
    },
}

impl ParseError {
    /// Name of the block the error is about.
    pub fn block(&self) -> &str {
        match self {
            ParseError::MissingBlock { block, .. }
            | ParseError::UnbalancedFence { block, .. }
            | ParseError::EmptyField { block, .. }
            | ParseError::InvalidValue { block, .. } => block,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub name: String,
    pub text: String,
    pub children: Vec<Block>,
    pub ordinal: usize,
}

impl Block {
    fn context(&self) -> String {
        format!("[[{}]] #{}", self.name, self.ordinal)
    }

    pub fn child(&self, name: &str) -> Option<&Block> {
        self.children.iter().find(|b| b.name == name)
    }

    pub fn children_named<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a Block> + 'a {
        self.children.iter().filter(move |b| b.name == name)
    }

    fn required(&self, name: &str) -> Result<&str, ParseError> {
        let b = self.child(name).ok_or_else(|| ParseError::MissingBlock {
            block: name.into(),
            context: Some(self.context()),
        })?;
        if b.text.trim().is_empty() {
            return Err(ParseError::EmptyField {
                block: name.into(),
                context: self.context(),
            });
        }
        Ok(&b.text)
    }

    fn optional(&self, name: &str) -> Option<&str> {
        self.child(name)
            .map(|b| b.text.as_str())
            .filter(|t| !t.trim().is_empty())
    }

    fn flag(&self, name: &str) -> Result<bool, ParseError> {
        let raw = self.required(name)?;
        parse_bool(raw).ok_or_else(|| ParseError::InvalidValue {
            block: name.into(),
            context: self.context(),
            value: raw.trim().to_string(),
        })
    }
}

fn parse_bool(raw: &str) -> Option<bool> {
    match raw.trim().to_ascii_lowercase().as_str() {
        "true" | "yes" | "pass" | "1" => Some(true),
        "false" | "no" | "fail" | "0" => Some(false),
        _ => None,
    }
}

fn tag_at(text: &str, pos: usize) -> Option<(bool, &str, usize)> {
    let rest = &text[pos..];
    let inner = rest.strip_prefix("[[")?;
    let (closing, inner) = match inner.strip_prefix('/') {
        Some(r) => (true, r),
        None => (false, inner),
    };
    let end = inner.find("]]")?;
    let name = &inner[..end];
    if !CONTAINERS.contains(&name) && !LEAVES.contains(&name) {
        return None;
    }
    let len = 2 + usize::from(closing) + end + 2;
    Some((closing, name, len))
}

fn clean_leaf(name: &str, raw: &str) -> String {
    if name == "code" {
        let t = raw.trim_matches(|c| c == '\n' || c == '\r');
        if t.contains('\n') {
            t.trim_end().to_string()
        } else {
            t.trim().to_string()
        }
    } else {
        raw.trim().to_string()
    }
}

/// Splits text into a forest of blocks.
pub fn parse_blocks(text: &str) -> Result<Vec<Block>, ParseError> {
    let mut roots: Vec<Block> = Vec::new();
    let mut stack: Vec<Block> = Vec::new();
    let mut counts: std::collections::HashMap<String, usize> = Default::default();
    let mut pos = 0;
    while let Some(off) = text[pos..].find("[[") {
        let at = pos + off;
        let Some((closing, name, len)) = tag_at(text, at) else {
            pos = at + 2;
            continue;
        };
        pos = at + len;
        if LEAVES.contains(&name) {
            if closing {
                return Err(ParseError::UnbalancedFence {
                    block: name.into(),
                    detail: "close tag without an open tag".into(),
                });
            }
            let close = format!("[[/{name}]]");
            let end = text[pos..].find(&close).ok_or_else(|| ParseError::UnbalancedFence {
                block: name.into(),
                detail: "no matching close tag".into(),
            })?;
            let leaf = Block {
                name: name.into(),
                text: clean_leaf(name, &text[pos..pos + end]),
                children: Vec::new(),
                ordinal: 0,
            };
            pos += end + close.len();
            match stack.last_mut() {
                Some(parent) => parent.children.push(leaf),
                None => roots.push(leaf),
            }
            continue;
        }
        if !closing {
            let n = counts.entry(name.to_string()).or_insert(0);
            *n += 1;
            stack.push(Block {
                name: name.into(),
                text: String::new(),
                children: Vec::new(),
                ordinal: *n,
            });
            continue;
        }
        match stack.pop() {
            Some(open) if open.name == name => match stack.last_mut() {
                Some(parent) => parent.children.push(open),
                None => roots.push(open),
            },
            Some(open) => {
                return Err(ParseError::UnbalancedFence {
                    block: open.name,
                    detail: format!("closed by [[/{name}]]"),
                })
            }
            None => {
                return Err(ParseError::UnbalancedFence {
                    block: name.into(),
                    detail: "close tag without an open tag".into(),
                })
            }
        }
    }
    if let Some(open) = stack.pop() {
        return Err(ParseError::UnbalancedFence {
            block: open.name,
            detail: "not closed before end of output".into(),
        });
    }
    Ok(roots)
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct StepDraft {
    pub thought: String,
    pub code: Option<String>,
}

/// A generated sample before rendering: code present, no images.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidateSample {
    pub question: String,
    pub answer: String,
    pub original_code: String,
    pub steps: Vec<StepDraft>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenBatch {
    pub samples: Vec<CandidateSample>,
    pub predicted_concepts: Vec<ConceptProposal>,
    pub predicted_tools: Vec<ToolProposal>,
    pub raw_response: String,
}

impl GenBatch {
    pub fn counts(&self) -> (usize, usize, usize) {
        (
            self.samples.len(),
            self.predicted_concepts.len(),
            self.predicted_tools.len(),
        )
    }
}

fn sample_from(b: &Block) -> Result<CandidateSample, ParseError> {
    let mut steps = Vec::new();
    for s in b.children_named("step") {
        steps.push(StepDraft {
            thought: s.required("thought")?.to_string(),
            code: s.optional("code").map(str::to_string),
        });
    }
    Ok(CandidateSample {
        question: b.required("question")?.to_string(),
        answer: b.required("answer")?.to_string(),
        original_code: b.required("code")?.to_string(),
        steps,
    })
}

pub fn parse_gen_output(text: &str) -> Result<GenBatch, ParseError> {
    let blocks = parse_blocks(text)?;
    let mut batch = GenBatch {
        samples: Vec::new(),
        predicted_concepts: Vec::new(),
        predicted_tools: Vec::new(),
        raw_response: text.to_string(),
    };
    for b in &blocks {
        match b.name.as_str() {
            "sample" => batch.samples.push(sample_from(b)?),
            "concept" => batch.predicted_concepts.push(ConceptProposal {
                name: b.required("name")?.to_string(),
                description: b.optional("description").unwrap_or_default().to_string(),
                domain: b.optional("domain").map(str::to_string),
                parent: b.optional("parent").map(str::to_string),
            }),
            "tool" => batch.predicted_tools.push(ToolProposal {
                name: b.required("name")?.to_string(),
                description: b.optional("description").unwrap_or_default().to_string(),
                signature: b.optional("signature").unwrap_or_default().to_string(),
                example: b.optional("example").map(str::to_string),
            }),
            _ => {}
        }
    }
    if batch.samples.is_empty() {
        return Err(ParseError::MissingBlock {
            block: "sample".into(),
            context: None,
        });
    }
    Ok(batch)
}

fn single<'a>(blocks: &'a [Block], name: &str) -> Result<&'a Block, ParseError> {
    blocks
        .iter()
        .find(|b| b.name == name)
        .ok_or_else(|| ParseError::MissingBlock {
            block: name.into(),
            context: None,
        })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerdictDraft {
    pub answer_ok: bool,
    pub image_ok: bool,
    pub states_ok: bool,
    pub rationale: String,
}

pub fn parse_verdict(text: &str) -> Result<VerdictDraft, ParseError> {
    let blocks = parse_blocks(text)?;
    let b = single(&blocks, "verdict")?;
    Ok(VerdictDraft {
        answer_ok: b.flag("answer_ok")?,
        image_ok: b.flag("image_ok")?,
        states_ok: b.flag("states_ok")?,
        rationale: b.optional("rationale").unwrap_or_default().to_string(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RepairDraft {
    pub question: String,
    pub answer: String,
}

pub fn parse_repair(text: &str) -> Result<RepairDraft, ParseError> {
    let blocks = parse_blocks(text)?;
    let b = single(&blocks, "repair")?;
    Ok(RepairDraft {
        question: b.required("question")?.to_string(),
        answer: b.required("answer")?.to_string(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExtensionDraft {
    pub strategy: String,
    pub thought: String,
    pub code: String,
    pub question: String,
    pub answer: String,
}

pub fn parse_extension(text: &str) -> Result<ExtensionDraft, ParseError> {
    let blocks = parse_blocks(text)?;
    let b = single(&blocks, "extension")?;
    let strategy = b.required("strategy")?.trim().to_ascii_lowercase();
    if strategy != "parallel" && strategy != "sequential" {
        return Err(ParseError::InvalidValue {
            block: "strategy".into(),
            context: b.context(),
            value: strategy,
        });
    }
    Ok(ExtensionDraft {
        strategy,
        thought: b.required("thought")?.to_string(),
        code: b.required("code")?.to_string(),
        question: b.required("question")?.to_string(),
        answer: b.required("answer")?.to_string(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JudgementDraft {
    pub correct: bool,
    pub reason: String,
}

pub fn parse_judgement(text: &str) -> Result<JudgementDraft, ParseError> {
    let blocks = parse_blocks(text)?;
    let b = single(&blocks, "judgement")?;
    Ok(JudgementDraft {
        correct: b.flag("correct")?,
        reason: b.optional("reason").unwrap_or_default().to_string(),
    })
}
