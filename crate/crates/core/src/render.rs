//! Turning generated code into stored images and trajectory steps.

use base64::Engine;

use crate::datamodel::{ExecStatus, ExecutionSummary, ImageRef, ImageStore, Sample, Step};
use crate::executor::{render_original, CodeExecutor, ExecError, ExecutionRequest};
use crate::gateway::{CandidateSample, SampleContext, StepDraft};

/// Binding name step code uses to load the image it draws on.
pub const CURRENT_BINDING: &str = "current";

#[derive(Debug, thiserror::Error)]
pub enum RenderError {
    #[error("original code: {0}")]
    Original(ExecError),
    #[error("step {index}: {reason}")]
    Step { index: u32, reason: String },
    #[error("image store: {0}")]
    Store(#[from] crate::datamodel::DataError),
}

/// Runs one step's code against `current` and records the outcome.
///
/// Returns the step even when execution fails, so callers that surface
/// errors as observations can keep it; `Step::output_image` is set only on
/// success with at least one saved image.
pub fn execute_step(
    executor: &dyn CodeExecutor,
    index: u32,
    thought: &str,
    code: &str,
    current: &ImageRef,
) -> Step {
    let request = ExecutionRequest::new(code).with_input(CURRENT_BINDING, current.clone());
    let (summary, image) = match executor.execute(request) {
        Ok(result) => {
            let image = if result.is_ok() {
                result.output_images.last().cloned()
            } else {
                None
            };
            (result.summary(), image)
        }
        Err(e) => (
            ExecutionSummary {
                status: ExecStatus::Error,
                output_count: 0,
                trace: e.to_string(),
            },
            None,
        ),
    };
    Step {
        index,
        thought: thought.to_string(),
        code: Some(code.to_string()),
        output_image: image,
        execution: Some(summary),
        malformed: false,
    }
}

/// Like [`execute_step`] but failing unless the step produced an image.
pub fn execute_step_strict(
    executor: &dyn CodeExecutor,
    index: u32,
    thought: &str,
    code: &str,
    current: &ImageRef,
) -> Result<Step, RenderError> {
    let step = execute_step(executor, index, thought, code, current);
    let summary = step.execution.as_ref().expect("code step has execution");
    if summary.status != ExecStatus::Ok {
        return Err(RenderError::Step {
            index,
            reason: format!("status {:?}: {}", summary.status, summary.trace),
        });
    }
    if step.output_image.is_none() {
        return Err(RenderError::Step {
            index,
            reason: "no image saved".into(),
        });
    }
    Ok(step)
}

/// Renders `c_0` and then every coded step in order, each on the previous
/// state.
pub fn render_candidate(
    executor: &dyn CodeExecutor,
    candidate: &CandidateSample,
) -> Result<(ImageRef, Vec<Step>), RenderError> {
    let original = render_original(executor, &candidate.original_code).map_err(RenderError::Original)?;
    let mut current = original.clone();
    let mut steps = Vec::with_capacity(candidate.steps.len());
    for (pos, draft) in candidate.steps.iter().enumerate() {
        let index = pos as u32 + 1;
        let step = match &draft.code {
            Some(code) => {
                let step = execute_step_strict(executor, index, &draft.thought, code, &current)?;
                current = step.output_image.clone().expect("strict step has image");
                step
            }
            None => Step::thought_only(index, &draft.thought),
        };
        steps.push(step);
    }
    Ok((original, steps))
}

pub fn data_url(store: &ImageStore, image: &ImageRef) -> Result<String, crate::datamodel::DataError> {
    let bytes = store.get(image)?;
    Ok(format!(
        "data:{};base64,{}",
        image.media,
        base64::engine::general_purpose::STANDARD.encode(bytes)
    ))
}

/// Checker/repairer/extension view of a sample: text plus every image.
pub fn sample_context(
    sample: &Sample,
    store: &ImageStore,
) -> Result<SampleContext, crate::datamodel::DataError> {
    let mut images = Vec::new();
    for image in sample.image_refs() {
        images.push(data_url(store, image)?);
    }
    Ok(SampleContext {
        sample_id: sample.id.clone(),
        question: sample.question.clone(),
        answer: sample.answer.clone(),
        original_code: sample.original_code.clone(),
        steps: sample
            .trajectory
            .steps
            .iter()
            .map(|s| StepDraft {
                thought: s.thought.clone(),
                code: s.code.clone(),
            })
            .collect(),
        images,
    })
}
