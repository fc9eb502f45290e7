//! Canonical record types shared across the pipeline.
//!
//! Every [`Sample`] is content addressed: its id is the SHA-256 of the
//! canonical serialization of every other field. Canonical serialization is
//! JSON with lexicographically ordered keys and no insignificant whitespace,
//! so the same logical record always produces the same bytes.

mod image_store;
mod shard;

pub use image_store::{encode_png, ImageRef, ImageStore, PNG_MEDIA_TYPE};
pub use shard::{
    manifest_path, read_records, read_shard, write_records, write_shard, ShardManifest,
    SCHEMA_VERSION,
};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Hard cap on the number of difficulty extensions applied to one sample.
pub const MAX_DIFFICULTY_DEPTH: u8 = 3;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: malformed record: {message}")]
    MalformedLine { line: usize, message: String },
    #[error("line {line}: record id {found} does not match its content (expected {expected})")]
    IdMismatch {
        line: usize,
        found: String,
        expected: String,
    },
    #[error("manifest mismatch for {path}: {message}")]
    ManifestMismatch { path: String, message: String },
    #[error("image {0} is not present in the store")]
    DanglingImage(String),
    #[error("sample has no rendered original image")]
    MissingOriginalImage,
    #[error("difficulty depth {0} exceeds the cap of {MAX_DIFFICULTY_DEPTH}")]
    DepthExceeded(u8),
    #[error("step {index}: {reason}")]
    InvalidStep { index: usize, reason: String },
    #[error("status is verified but no passing verdict is attached")]
    UnverifiedStatus,
    #[error("image bytes could not be decoded: {0}")]
    UndecodableImage(String),
    #[error("serialization failed: {0}")]
    Serialize(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Lowercase hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: impl AsRef<[u8]>) -> String {
    hex::encode(Sha256::digest(bytes.as_ref()))
}

/// JSON with sorted object keys and compact separators.
///
/// `serde_json::Value` keeps objects in a `BTreeMap`, so routing through it
/// yields lexicographic key order regardless of struct field order.
pub fn canonical_json<T: Serialize>(value: &T) -> Result<String> {
    let value = serde_json::to_value(value)?;
    Ok(serde_json::to_string(&value)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleStatus {
    Generated,
    Verified,
    Repaired,
    Expanded,
    Rejected,
}

/// Outcome of one sandbox execution as recorded inside a trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecStatus {
    Ok,
    Error,
    Timeout,
    Killed,
}

/// Reproducible part of an execution result. Wall-clock duration is left out
/// so that sample ids stay stable across runs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionSummary {
    pub status: ExecStatus,
    pub output_count: u32,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub trace: String,
}

/// One `(thought, code, image)` step of a trajectory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step {
    /// 1-based position inside the trajectory.
    pub index: u32,
    pub thought: String,
    #[serde(default)]
    pub code: Option<String>,
    #[serde(default)]
    pub output_image: Option<ImageRef>,
    #[serde(default)]
    pub execution: Option<ExecutionSummary>,
    /// Set when the turn that produced this step had unbalanced or
    /// duplicated blocks.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub malformed: bool,
}

impl Step {
    pub fn thought_only(index: u32, thought: impl Into<String>) -> Self {
        Self {
            index,
            thought: thought.into(),
            code: None,
            output_image: None,
            execution: None,
            malformed: false,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryOutcome {
    /// A final-answer tag was produced.
    #[default]
    Answered,
    /// The step budget ran out before an answer.
    Truncated,
    /// The policy transport failed mid-trajectory.
    Failed,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub steps: Vec<Step>,
    pub final_answer: String,
    #[serde(default)]
    pub outcome: TrajectoryOutcome,
}

impl Trajectory {
    /// Image produced by the last step that rendered one.
    pub fn final_image(&self) -> Option<&ImageRef> {
        self.steps.iter().rev().find_map(|s| s.output_image.as_ref())
    }

    pub fn images(&self) -> impl Iterator<Item = &ImageRef> {
        self.steps.iter().filter_map(|s| s.output_image.as_ref())
    }
}

/// Verdict of the three-criteria checker.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckVerdict {
    pub answer_ok: bool,
    pub image_ok: bool,
    pub states_ok: bool,
    pub rationale: String,
    pub checker: String,
    pub attempt: u32,
}

impl CheckVerdict {
    pub fn passed(&self) -> bool {
        self.answer_ok && self.image_ok && self.states_ok
    }

    /// Only a wrong textual answer over a valid image and coherent states
    /// can be repaired by reconstructing the question.
    pub fn repairable(&self) -> bool {
        !self.answer_ok && self.image_ok && self.states_ok
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub generator: String,
    pub round: u32,
    /// Sample this one was derived from by a difficulty extension.
    #[serde(default)]
    pub parent: Option<String>,
    /// Sample this one replaced through question reconstruction.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub repaired_from: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict: Option<CheckVerdict>,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub parallel_extensions: u8,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub sequential_extensions: u8,
}

fn is_zero(v: &u8) -> bool {
    *v == 0
}

/// Pixel coordinate attached to a synthesized perception scene.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CoordinateTag {
    pub label: String,
    pub x: i32,
    pub y: i32,
    pub role: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerceptionLevel {
    Surface,
    Semantic,
    Integrated,
}

/// Training stage a sample is routed to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataRoute {
    ColdStartPerception,
    ColdStartInteraction,
    RlTargeted,
}

/// Every field of a sample except its id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleBody {
    pub question: String,
    pub answer: String,
    pub original_code: String,
    #[serde(default)]
    pub original_image: Option<ImageRef>,
    #[serde(default)]
    pub trajectory: Trajectory,
    #[serde(default)]
    pub knowledge_refs: Vec<String>,
    #[serde(default)]
    pub tool_refs: Vec<String>,
    #[serde(default)]
    pub difficulty_depth: u8,
    pub status: SampleStatus,
    pub provenance: Provenance,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tags: Vec<CoordinateTag>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perception_level: Option<PerceptionLevel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub route: Option<DataRoute>,
}

impl SampleBody {
    pub fn new(
        question: impl Into<String>,
        answer: impl Into<String>,
        original_code: impl Into<String>,
    ) -> Self {
        Self {
            question: question.into(),
            answer: answer.into(),
            original_code: original_code.into(),
            original_image: None,
            trajectory: Trajectory::default(),
            knowledge_refs: Vec::new(),
            tool_refs: Vec::new(),
            difficulty_depth: 0,
            status: SampleStatus::Generated,
            provenance: Provenance::default(),
            tags: Vec::new(),
            perception_level: None,
            route: None,
        }
    }

    pub fn canonical_bytes(&self) -> Result<String> {
        canonical_json(self)
    }

    pub fn content_id(&self) -> Result<String> {
        Ok(sha256_hex(self.canonical_bytes()?))
    }

    /// Every image the sample references, original first.
    pub fn image_refs(&self) -> impl Iterator<Item = &ImageRef> {
        self.original_image.iter().chain(self.trajectory.images())
    }

    /// The image the latest reasoning state is drawn on.
    pub fn current_image(&self) -> Option<&ImageRef> {
        self.trajectory.final_image().or(self.original_image.as_ref())
    }

    /// Checks the structural invariants that do not need the image store.
    pub fn validate(&self) -> Result<()> {
        if self.difficulty_depth > MAX_DIFFICULTY_DEPTH {
            return Err(DataError::DepthExceeded(self.difficulty_depth));
        }
        if self.original_image.is_none() {
            return Err(DataError::MissingOriginalImage);
        }
        for (pos, step) in self.trajectory.steps.iter().enumerate() {
            let index = pos + 1;
            let invalid = |reason: &str| DataError::InvalidStep {
                index,
                reason: reason.to_string(),
            };
            if step.index as usize != index {
                return Err(invalid("steps must be numbered 1..T in order"));
            }
            if step.code.is_some() != step.execution.is_some() {
                return Err(invalid("code and execution must be present together"));
            }
            if step.output_image.is_some() && step.code.is_none() {
                return Err(invalid("output image without code"));
            }
        }
        if self.status == SampleStatus::Verified
            && !self
                .provenance
                .verdict
                .as_ref()
                .is_some_and(CheckVerdict::passed)
        {
            return Err(DataError::UnverifiedStatus);
        }
        Ok(())
    }
}

/// A content-addressed, validated sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    #[serde(flatten)]
    pub body: SampleBody,
}

impl std::ops::Deref for Sample {
    type Target = SampleBody;

    fn deref(&self) -> &SampleBody {
        &self.body
    }
}

impl Sample {
    /// Returns the body for editing; the result must go through
    /// [`canonicalize`] again to get a valid id.
    pub fn into_body(self) -> SampleBody {
        self.body
    }

    pub fn id_matches(&self) -> Result<bool> {
        Ok(self.body.content_id()? == self.id)
    }
}

/// Validates a sample body against the store and assigns its content id.
pub fn canonicalize(body: SampleBody, store: &ImageStore) -> Result<Sample> {
    body.validate()?;
    for image in body.image_refs() {
        if !store.contains(&image.digest) {
            return Err(DataError::DanglingImage(image.digest.clone()));
        }
    }
    let id = body.content_id()?;
    Ok(Sample { id, body })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn rendered_body(store: &ImageStore) -> SampleBody {
        let img = image::RgbaImage::from_pixel(4, 3, image::Rgba([255, 255, 255, 255]));
        let original = store.put_image(&img).unwrap();
        let mut edited = img.clone();
        edited.put_pixel(1, 1, image::Rgba([255, 0, 0, 255]));
        let edited = store.put_image(&edited).unwrap();
        let mut body = SampleBody::new("What is 1+1?", "2", "img = new_canvas(4, 3)");
        body.original_image = Some(original);
        body.trajectory.steps.push(Step {
            index: 1,
            thought: "mark the point".into(),
            code: Some("put(img)".into()),
            output_image: Some(edited),
            execution: Some(ExecutionSummary {
                status: ExecStatus::Ok,
                output_count: 1,
                trace: String::new(),
            }),
            malformed: false,
        });
        body.trajectory.final_answer = "2".into();
        body.provenance.generator = "test".into();
        body
    }

    #[test]
    fn canonical_serialization_is_stable() {
        let dir = tempfile::tempdir().unwrap();
        let store = ImageStore::open(dir.path()).unwrap();
        let a = canonicalize(rendered_body(&store), &store).unwrap();
        let b = canonicalize(rendered_body(&store), &store).unwrap();
        assert_eq!(a.canonical_bytes().unwrap(), b.canonical_bytes().unwrap());
        assert_eq!(a.id, b.id);
    }

    #[test]
    fn keys_are_sorted() {
        let dir = tempfile::tempdir().unwrap();
        let store = ImageStore::open(dir.path()).unwrap();
        let text = rendered_body(&store).canonical_bytes().unwrap();
        let answer = text.find("\"answer\"").unwrap();
        let question = text.find("\"question\"").unwrap();
        let status = text.find("\"status\"").unwrap();
        assert!(answer < question && question < status);
    }

    #[test]
    fn depth_above_cap_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let store = ImageStore::open(dir.path()).unwrap();
        let mut body = rendered_body(&store);
        body.difficulty_depth = 4;
        assert!(matches!(
            canonicalize(body, &store),
            Err(DataError::DepthExceeded(4))
        ));
    }

    #[test]
    fn dangling_image_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let store = ImageStore::open(dir.path()).unwrap();
        let mut body = rendered_body(&store);
        body.original_image.as_mut().unwrap().digest = "ab".repeat(32);
        assert!(matches!(
            canonicalize(body, &store),
            Err(DataError::DanglingImage(_))
        ));
    }

    #[test]
    fn step_invariants() {
        let dir = tempfile::tempdir().unwrap();
        let store = ImageStore::open(dir.path()).unwrap();
        let mut body = rendered_body(&store);
        body.trajectory.steps[0].execution = None;
        assert!(matches!(
            canonicalize(body, &store),
            Err(DataError::InvalidStep { index: 1, .. })
        ));

        let mut body = rendered_body(&store);
        body.trajectory.steps[0].index = 2;
        assert!(canonicalize(body, &store).is_err());
    }

    #[test]
    fn verified_requires_passing_verdict() {
        let dir = tempfile::tempdir().unwrap();
        let store = ImageStore::open(dir.path()).unwrap();
        let mut body = rendered_body(&store);
        body.status = SampleStatus::Verified;
        assert!(matches!(
            canonicalize(body.clone(), &store),
            Err(DataError::UnverifiedStatus)
        ));
        body.provenance.verdict = Some(CheckVerdict {
            answer_ok: true,
            image_ok: true,
            states_ok: true,
            rationale: String::new(),
            checker: "c".into(),
            attempt: 1,
        });
        assert!(canonicalize(body, &store).is_ok());
    }

    #[test]
    fn id_changes_with_any_field() {
        let dir = tempfile::tempdir().unwrap();
        let store = ImageStore::open(dir.path()).unwrap();
        let base = canonicalize(rendered_body(&store), &store).unwrap();
        let mut edits: Vec<SampleBody> = Vec::new();
        let mut b = rendered_body(&store);
        b.question.push('?');
        edits.push(b);
        let mut b = rendered_body(&store);
        b.tool_refs.push("t-1".into());
        edits.push(b);
        let mut b = rendered_body(&store);
        b.provenance.round = 9;
        edits.push(b);
        let mut b = rendered_body(&store);
        b.trajectory.steps[0].thought.clear();
        edits.push(b);
        for body in edits {
            assert_ne!(canonicalize(body, &store).unwrap().id, base.id);
        }
    }
}
