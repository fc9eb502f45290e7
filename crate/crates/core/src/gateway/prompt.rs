//! Generation requests and prompt templates.
//!
//! Templates are versioned by id. Rendering is pure string assembly, so the
//! same request always produces byte-identical messages.

use serde::{Deserialize, Serialize};

use super::blocks::StepDraft;
use super::GatewayError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenMode {
    FromKnowledge,
    FromTools,
    Repair,
    ExtendParallel,
    ExtendSequential,
    Check,
    JudgePerception,
    JudgeInstruction,
    JudgeReasoning,
}

impl GenMode {
    pub fn as_str(self) -> &'static str {
        match self {
            GenMode::FromKnowledge => "from_knowledge",
            GenMode::FromTools => "from_tools",
            GenMode::Repair => "repair",
            GenMode::ExtendParallel => "extend_parallel",
            GenMode::ExtendSequential => "extend_sequential",
            GenMode::Check => "check",
            GenMode::JudgePerception => "judge_perception",
            GenMode::JudgeInstruction => "judge_instruction",
            GenMode::JudgeReasoning => "judge_reasoning",
        }
    }

    /// Generation modes sample at 0.8; verification and repair are greedy.
    pub fn default_temperature(self) -> f32 {
        match self {
            GenMode::FromKnowledge
            | GenMode::FromTools
            | GenMode::ExtendParallel
            | GenMode::ExtendSequential => 0.8,
            _ => 0.0,
        }
    }

    pub fn default_template(self) -> &'static str {
        match self {
            GenMode::FromKnowledge => "gen.from_knowledge.v1",
            GenMode::FromTools => "gen.from_tools.v1",
            GenMode::Repair => "repair.v1",
            GenMode::ExtendParallel => "extend.parallel.v1",
            GenMode::ExtendSequential => "extend.sequential.v1",
            GenMode::Check => "check.v1",
            GenMode::JudgePerception => "judge.perception.v1",
            GenMode::JudgeInstruction => "judge.instruction.v1",
            GenMode::JudgeReasoning => "judge.reasoning.v1",
        }
    }
}

/// One knowledge concept or tool as shown to the generator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ElementContext {
    pub id: String,
    pub name: String,
    pub description: String,
    /// Domain for concepts, signature for tools.
    #[serde(default)]
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleContext {
    pub sample_id: String,
    pub question: String,
    pub answer: String,
    pub original_code: String,
    pub steps: Vec<StepDraft>,
    /// Data URLs: the original image first, then every step image.
    pub images: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeContext {
    pub item_id: String,
    pub question: String,
    #[serde(default)]
    pub candidate_image: Option<String>,
    #[serde(default)]
    pub reference_image: Option<String>,
    #[serde(default)]
    pub candidate_answer: Option<String>,
    #[serde(default)]
    pub gold_answer: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenPayload {
    Elements {
        elements: Vec<ElementContext>,
        /// Names already in the counterpart set, so predictions can reuse them.
        catalog: Vec<String>,
        /// Size of the set the combo was drawn from.
        set_size: usize,
    },
    Sample(SampleContext),
    Judge(JudgeContext),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decoding {
    pub temperature: f32,
    pub max_tokens: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenRequest {
    pub mode: GenMode,
    pub payload: GenPayload,
    pub template: String,
    pub decoding: Decoding,
    pub attempt: u32,
    /// Per-call seed; mocks derive all randomness from it.
    pub seed: u64,
    /// Samples requested per call.
    pub batch: usize,
}

pub const DEFAULT_BATCH: usize = 2;
const CATALOG_LIMIT: usize = 24;

impl GenRequest {
    pub fn new(mode: GenMode, payload: GenPayload) -> Self {
        Self {
            mode,
            payload,
            template: mode.default_template().to_string(),
            decoding: Decoding {
                temperature: mode.default_temperature(),
                max_tokens: 4096,
            },
            attempt: 0,
            seed: 0,
            batch: DEFAULT_BATCH,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_batch(mut self, batch: usize) -> Self {
        self.batch = batch;
        self
    }

    /// Checks that the payload shape fits the mode.
    pub fn validate(&self) -> Result<(), GatewayError> {
        let ok = match (&self.mode, &self.payload) {
            (GenMode::FromKnowledge | GenMode::FromTools, GenPayload::Elements { elements, .. }) => {
                !elements.is_empty()
            }
            (
                GenMode::Repair | GenMode::ExtendParallel | GenMode::ExtendSequential | GenMode::Check,
                GenPayload::Sample(_),
            ) => true,
            (
                GenMode::JudgePerception | GenMode::JudgeInstruction | GenMode::JudgeReasoning,
                GenPayload::Judge(_),
            ) => true,
            _ => false,
        };
        if ok {
            Ok(())
        } else {
            Err(GatewayError::PayloadMismatch(self.mode.as_str().into()))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ContentPart {
    Text(String),
    ImageUrl(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub role: String,
    pub parts: Vec<ContentPart>,
}

impl Message {
    pub fn text(role: &str, text: impl Into<String>) -> Self {
        Self {
            role: role.into(),
            parts: vec![ContentPart::Text(text.into())],
        }
    }

    pub fn text_content(&self) -> String {
        self.parts
            .iter()
            .filter_map(|p| match p {
                ContentPart::Text(t) => Some(t.as_str()),
                ContentPart::ImageUrl(_) => None,
            })
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// The `/v1/chat/completions` message shape.
    pub fn to_json(&self) -> serde_json::Value {
        if let [ContentPart::Text(t)] = self.parts.as_slice() {
            return serde_json::json!({"role": self.role, "content": t});
        }
        let parts: Vec<serde_json::Value> = self
            .parts
            .iter()
            .map(|p| match p {
                ContentPart::Text(t) => serde_json::json!({"type": "text", "text": t}),
                ContentPart::ImageUrl(u) => {
                    serde_json::json!({"type": "image_url", "image_url": {"url": u}})
                }
            })
            .collect();
        serde_json::json!({"role": self.role, "content": parts})
    }
}

const SYSTEM: &str = "You are a careful creator of visual reasoning problems. Every figure is produced by code in the drawing prelude: new_canvas(w, h), load(name), line, circle, point, rect, text, arrow, save(img, name). Answer only with the requested [[block]] fences, one field per fence.";

const SAMPLE_SCHEMA: &str = "Output format, repeated once per problem:\n[[sample]]\n[[question]] ... [[/question]]\n[[answer]] ... [[/answer]]\n[[code]]\n(code that draws the original figure on a 640x480 canvas and saves exactly one image; mark every labeled entity with a comment `# entity: <label>`)\n[[/code]]\n[[step]]\n[[thought]] ... [[/thought]]\n[[code]]\n(code that loads the current image with load(\"current\"), draws one construction and saves one image)\n[[/code]]\n[[/step]]\n[[/sample]]";

const TEMPLATES: &[&str] = &[
    "gen.from_knowledge.v1",
    "gen.from_tools.v1",
    "repair.v1",
    "extend.parallel.v1",
    "extend.sequential.v1",
    "check.v1",
    "judge.perception.v1",
    "judge.instruction.v1",
    "judge.reasoning.v1",
];

pub fn known_templates() -> &'static [&'static str] {
    TEMPLATES
}

fn sample_text(ctx: &SampleContext) -> String {
    let mut s = format!(
        "Sample {}\nQuestion: {}\nAnswer: {}\nOriginal code:\n{}\n",
        ctx.sample_id, ctx.question, ctx.answer, ctx.original_code
    );
    for (i, step) in ctx.steps.iter().enumerate() {
        s.push_str(&format!("Step {} thought: {}\n", i + 1, step.thought));
        if let Some(code) = &step.code {
            s.push_str(&format!("Step {} code:\n{}\n", i + 1, code));
        }
    }
    s
}

fn with_images(text: String, images: &[&str]) -> Vec<ContentPart> {
    let mut parts = vec![ContentPart::Text(text)];
    parts.extend(images.iter().map(|u| ContentPart::ImageUrl(u.to_string())));
    parts
}

/// Renders the messages for a request.
pub fn build_prompt(request: &GenRequest) -> Result<Vec<Message>, GatewayError> {
    if !TEMPLATES.contains(&request.template.as_str()) {
        return Err(GatewayError::UnknownTemplate(request.template.clone()));
    }
    if request.template != request.mode.default_template() {
        return Err(GatewayError::UnknownTemplate(format!(
            "{} does not serve mode {}",
            request.template,
            request.mode.as_str()
        )));
    }
    request.validate()?;
    let system = Message::text("system", SYSTEM);
    let user = match (&request.mode, &request.payload) {
        (GenMode::FromKnowledge, GenPayload::Elements { elements, catalog, .. }) => {
            let mut t = format!(
                "Create {} interactive geometry problems that require combining these knowledge concepts:\n",
                request.batch
            );
            for e in elements {
                t.push_str(&format!("- {} ({}): {}\n", e.name, e.detail, e.description));
            }
            t.push_str("\nAfter the problems, predict the visual tools the solutions use, one block each:\n[[tool]] [[name]] ... [[/name]] [[description]] ... [[/description]] [[signature]] ... [[/signature]] [[/tool]]\n");
            if !catalog.is_empty() {
                let shown: Vec<&str> = catalog.iter().take(CATALOG_LIMIT).map(String::as_str).collect();
                t.push_str(&format!("Known tools: {}\n", shown.join(", ")));
            }
            t.push('\n');
            t.push_str(SAMPLE_SCHEMA);
            Message::text("user", t)
        }
        (GenMode::FromTools, GenPayload::Elements { elements, catalog, .. }) => {
            let mut t = format!(
                "Create {} interactive geometry problems whose solutions must use these visual tools:\n",
                request.batch
            );
            for e in elements {
                t.push_str(&format!("- {} {}: {}\n", e.name, e.detail, e.description));
            }
            t.push_str("\nAfter the problems, predict the knowledge concepts the problems exercise, one block each:\n[[concept]] [[name]] ... [[/name]] [[description]] ... [[/description]] [[domain]] ... [[/domain]] [[/concept]]\n");
            if !catalog.is_empty() {
                let shown: Vec<&str> = catalog.iter().take(CATALOG_LIMIT).map(String::as_str).collect();
                t.push_str(&format!("Known concepts: {}\n", shown.join(", ")));
            }
            t.push('\n');
            t.push_str(SAMPLE_SCHEMA);
            Message::text("user", t)
        }
        (GenMode::Check, GenPayload::Sample(ctx)) => {
            let t = format!(
                "{}\nThe images show the original figure followed by each intermediate state. Check (1) whether the answer is correct, (2) whether the original image is valid for the question, (3) whether the intermediate states are coherent.\nReply with:\n[[verdict]] [[answer_ok]] true|false [[/answer_ok]] [[image_ok]] true|false [[/image_ok]] [[states_ok]] true|false [[/states_ok]] [[rationale]] ... [[/rationale]] [[/verdict]]",
                sample_text(ctx)
            );
            let imgs: Vec<&str> = ctx.images.iter().map(String::as_str).collect();
            Message {
                role: "user".into(),
                parts: with_images(t, &imgs),
            }
        }
        (GenMode::Repair, GenPayload::Sample(ctx)) => {
            let t = format!(
                "{}\nThe figure and its intermediate states are valid but the textual answer is wrong. Reconstruct the question and answer from the images and the constructions so they agree.\nReply with:\n[[repair]] [[question]] ... [[/question]] [[answer]] ... [[/answer]] [[/repair]]",
                sample_text(ctx)
            );
            let imgs: Vec<&str> = ctx.images.iter().map(String::as_str).collect();
            Message {
                role: "user".into(),
                parts: with_images(t, &imgs),
            }
        }
        (GenMode::ExtendParallel | GenMode::ExtendSequential, GenPayload::Sample(ctx)) => {
            let (strategy, rule) = if request.mode == GenMode::ExtendParallel {
                ("parallel", "The new construction must be independent of the existing auxiliary constructions and may reference only entities of the original figure.")
            } else {
                ("sequential", "The new construction must build on an entity introduced by an earlier step. Name it with a `# ref: <label>` comment.")
            };
            let t = format!(
                "{}\nMake the problem harder with one {strategy} extension. {rule} Mark new entities with `# entity: <label>`. The code loads the current image with load(\"current\") and saves one image.\nReply with:\n[[extension]] [[strategy]] {strategy} [[/strategy]] [[thought]] ... [[/thought]] [[code]] ... [[/code]] [[question]] ... [[/question]] [[answer]] ... [[/answer]] [[/extension]]",
                sample_text(ctx)
            );
            let imgs: Vec<&str> = ctx.images.iter().map(String::as_str).collect();
            Message {
                role: "user".into(),
                parts: with_images(t, &imgs),
            }
        }
        (GenMode::JudgePerception | GenMode::JudgeInstruction, GenPayload::Judge(ctx)) => {
            let rubric = if request.mode == GenMode::JudgePerception {
                "The candidate was asked to draw a point at the perceived location. Judge it correct when its mark lands on the location shown in the reference annotation."
            } else {
                "The candidate was asked to perform a visual interaction. Judge it correct when its drawing matches the required construction in the reference annotation."
            };
            let t = format!(
                "Item {}\nInstruction: {}\n{rubric}\nThe first image is the candidate result, the second is the reference annotation.\nReply with:\n[[judgement]] [[correct]] true|false [[/correct]] [[reason]] ... [[/reason]] [[/judgement]]",
                ctx.item_id, ctx.question
            );
            let imgs: Vec<&str> = [&ctx.candidate_image, &ctx.reference_image]
                .into_iter()
                .flatten()
                .map(String::as_str)
                .collect();
            Message {
                role: "user".into(),
                parts: with_images(t, &imgs),
            }
        }
        (GenMode::JudgeReasoning, GenPayload::Judge(ctx)) => Message::text(
            "user",
            format!(
                "Item {}\nQuestion: {}\nReference answer: {}\nCandidate answer: {}\nJudge whether the candidate answer is correct. Equivalent forms and rounding to the stated precision count as correct.\nReply with:\n[[judgement]] [[correct]] true|false [[/correct]] [[reason]] ... [[/reason]] [[/judgement]]",
                ctx.item_id,
                ctx.question,
                ctx.gold_answer.as_deref().unwrap_or_default(),
                ctx.candidate_answer.as_deref().unwrap_or_default()
            ),
        ),
        _ => return Err(GatewayError::PayloadMismatch(request.mode.as_str().into())),
    };
    Ok(vec![system, user])
}
