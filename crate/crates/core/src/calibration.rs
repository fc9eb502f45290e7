//! Checker and repairer loop.
//!
//! Each item is checked against three criteria. A pass is retained, a wrong
//! answer over a valid image with coherent states is repaired by
//! reconstructing the question and re-checked, and anything else is
//! rejected. Repaired samples go back through the same routing. The loop is
//! bounded by `max_iters` check rounds per item.

use std::io::Write;
use std::path::Path;
use std::sync::Mutex;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::datamodel::{canonicalize, CheckVerdict, DataError, ImageStore, Sample, SampleStatus};
use crate::gateway::{self, GatewayError, GenMode, GenPayload, GenRequest, Generator};
use crate::render::sample_context;
use crate::util::{fan_out, DEFAULT_BUDGET};

pub const DEFAULT_MAX_ITERS: u32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CalibError {
    #[error("sample {0} is not fully rendered")]
    NotRendered(String),
    #[error("verdict is not repairable (answer_ok={answer_ok}, image_ok={image_ok}, states_ok={states_ok})")]
    NotRepairable {
        answer_ok: bool,
        image_ok: bool,
        states_ok: bool,
    },
    #[error("judge: {0}")]
    Judge(#[from] GatewayError),
    #[error("data: {0}")]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditAction {
    Verified,
    Repaired,
    Rejected,
    CheckFailed,
    RepairFailed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub sample_id: String,
    /// Input sample this chain of checks started from.
    pub origin_id: String,
    pub iteration: u32,
    pub verdict: Option<CheckVerdict>,
    pub action: AuditAction,
    /// True when the checked sample is itself the output of a repair.
    pub reentered: bool,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub note: String,
}

/// Append-only audit sink; keeps entries in memory and optionally mirrors
/// them to a line-delimited file.
pub struct AuditLog {
    entries: Mutex<Vec<AuditEntry>>,
    file: Option<Mutex<std::fs::File>>,
}

impl Default for AuditLog {
    fn default() -> Self {
        Self::in_memory()
    }
}

impl AuditLog {
    pub fn in_memory() -> Self {
        Self {
            entries: Mutex::new(Vec::new()),
            file: None,
        }
    }

    pub fn to_file(path: &Path) -> std::io::Result<Self> {
        let file = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            entries: Mutex::new(Vec::new()),
            file: Some(Mutex::new(file)),
        })
    }

    pub fn push(&self, entry: AuditEntry) {
        if let Some(file) = &self.file {
            let line = serde_json::to_string(&entry).expect("audit entry serializes") + "\n";
            if let Err(e) = file.lock().expect("audit file").write_all(line.as_bytes()) {
                warn!("audit write failed: {e}");
            }
        }
        self.entries.lock().expect("audit entries").push(entry);
    }

    pub fn entries(&self) -> Vec<AuditEntry> {
        self.entries.lock().expect("audit entries").clone()
    }
}

fn ensure_rendered(sample: &Sample, store: &ImageStore) -> Result<(), CalibError> {
    let missing = || CalibError::NotRendered(sample.id.clone());
    if sample.original_image.is_none() {
        return Err(missing());
    }
    for step in &sample.trajectory.steps {
        if step.code.is_some() && step.output_image.is_none() {
            return Err(missing());
        }
    }
    if sample.image_refs().any(|i| !store.contains(&i.digest)) {
        return Err(missing());
    }
    Ok(())
}

pub fn check_sample(
    sample: &Sample,
    checker: &dyn Generator,
    store: &ImageStore,
    attempt: u32,
) -> Result<CheckVerdict, CalibError> {
    ensure_rendered(sample, store)?;
    let mut request = GenRequest::new(GenMode::Check, GenPayload::Sample(sample_context(sample, store)?));
    request.attempt = attempt;
    let draft = gateway::check(checker, &request)?;
    Ok(CheckVerdict {
        answer_ok: draft.answer_ok,
        image_ok: draft.image_ok,
        states_ok: draft.states_ok,
        rationale: draft.rationale,
        checker: checker.id().to_string(),
        attempt,
    })
}

/// Reconstructs question and answer from the visual states. Images,
/// trajectory steps and refs are carried over unchanged.
pub fn repair_sample(
    sample: &Sample,
    verdict: &CheckVerdict,
    repairer: &dyn Generator,
    store: &ImageStore,
) -> Result<Sample, CalibError> {
    if !verdict.repairable() {
        return Err(CalibError::NotRepairable {
            answer_ok: verdict.answer_ok,
            image_ok: verdict.image_ok,
            states_ok: verdict.states_ok,
        });
    }
    let mut request = GenRequest::new(GenMode::Repair, GenPayload::Sample(sample_context(sample, store)?));
    request.attempt = verdict.attempt;
    let draft = gateway::repair(repairer, &request)?;
    let mut body = sample.body.clone();
    body.question = draft.question;
    body.answer = draft.answer.clone();
    body.trajectory.final_answer = draft.answer;
    body.status = SampleStatus::Repaired;
    body.provenance.repaired_from = Some(sample.id.clone());
    body.provenance.verdict = Some(verdict.clone());
    Ok(canonicalize(body, store)?)
}

#[derive(Debug, Default)]
pub struct CalibrationOutcome {
    pub verified: Vec<Sample>,
    pub rejected: Vec<Sample>,
    pub audit: Vec<AuditEntry>,
}

pub struct Calibrator<'a> {
    pub checker: &'a dyn Generator,
    pub repairer: &'a dyn Generator,
    pub store: &'a ImageStore,
    pub max_iters: u32,
    pub budget: usize,
}

enum Routed {
    Verified(Sample),
    Rejected(Sample),
}

impl<'a> Calibrator<'a> {
    pub fn new(checker: &'a dyn Generator, repairer: &'a dyn Generator, store: &'a ImageStore) -> Self {
        Self {
            checker,
            repairer,
            store,
            max_iters: DEFAULT_MAX_ITERS,
            budget: DEFAULT_BUDGET,
        }
    }

    pub fn with_max_iters(mut self, max_iters: u32) -> Self {
        self.max_iters = max_iters.max(1);
        self
    }

    fn finish(&self, sample: &Sample, status: SampleStatus, verdict: Option<CheckVerdict>) -> Sample {
        let mut body = sample.body.clone();
        body.status = status;
        if verdict.is_some() {
            body.provenance.verdict = verdict;
        }
        let id = body.content_id().expect("sample serializes");
        Sample { id, body }
    }

    fn route(&self, input: Sample, log: &AuditLog) -> Routed {
        let origin = input.id.clone();
        let mut current = input;
        let mut last = None;
        for iteration in 1..=self.max_iters {
            let reentered = current.provenance.repaired_from.is_some();
            let entry = |sample: &Sample, verdict: Option<CheckVerdict>, action, note: String| AuditEntry {
                sample_id: sample.id.clone(),
                origin_id: origin.clone(),
                iteration,
                verdict,
                action,
                reentered,
                note,
            };
            let verdict = match check_sample(&current, self.checker, self.store, iteration) {
                Ok(v) => v,
                Err(CalibError::NotRendered(id)) => {
                    log.push(entry(&current, None, AuditAction::Rejected, format!("{id} not rendered")));
                    return Routed::Rejected(self.finish(&current, SampleStatus::Rejected, None));
                }
                Err(e) => {
                    log.push(entry(&current, None, AuditAction::CheckFailed, e.to_string()));
                    continue;
                }
            };
            last = Some(verdict.clone());
            if verdict.passed() {
                log.push(entry(&current, Some(verdict.clone()), AuditAction::Verified, String::new()));
                return Routed::Verified(self.finish(&current, SampleStatus::Verified, Some(verdict)));
            }
            if !verdict.repairable() {
                log.push(entry(&current, Some(verdict.clone()), AuditAction::Rejected, "not repairable".into()));
                return Routed::Rejected(self.finish(&current, SampleStatus::Rejected, Some(verdict)));
            }
            if iteration == self.max_iters {
                break;
            }
            match repair_sample(&current, &verdict, self.repairer, self.store) {
                Ok(repaired) => {
                    log.push(entry(&current, Some(verdict), AuditAction::Repaired, repaired.id.clone()));
                    current = repaired;
                }
                Err(e) => {
                    log.push(entry(&current, Some(verdict), AuditAction::RepairFailed, e.to_string()));
                }
            }
        }
        log.push(AuditEntry {
            sample_id: current.id.clone(),
            origin_id: origin,
            iteration: self.max_iters,
            verdict: last.clone(),
            action: AuditAction::Rejected,
            reentered: current.provenance.repaired_from.is_some(),
            note: "check budget exhausted".into(),
        });
        Routed::Rejected(self.finish(&current, SampleStatus::Rejected, last))
    }

    /// Partitions `batch` into verified and rejected samples, in input order.
    pub fn calibrate(&self, batch: Vec<Sample>, log: &AuditLog) -> CalibrationOutcome {
        let before = log.entries().len();
        let routed = fan_out(batch, self.budget, |s| self.route(s, log));
        let mut out = CalibrationOutcome::default();
        for r in routed {
            match r {
                Routed::Verified(s) => out.verified.push(s),
                Routed::Rejected(s) => out.rejected.push(s),
            }
        }
        out.audit = log.entries().split_off(before);
        out
    }
}

/// Convenience wrapper with an in-memory audit log.
pub fn calibrate(
    batch: Vec<Sample>,
    checker: &dyn Generator,
    repairer: &dyn Generator,
    store: &ImageStore,
    max_iters: u32,
) -> CalibrationOutcome {
    Calibrator::new(checker, repairer, store)
        .with_max_iters(max_iters)
        .calibrate(batch, &AuditLog::in_memory())
}
