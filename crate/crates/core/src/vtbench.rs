//! Benchmark loading, the three track protocols and report aggregation.
//!
//! Code-producing tracks run through the same executor as synthesis. Judges
//! are ordinary generators answering the judge modes; they see the candidate
//! render and the annotation image side by side.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::datamodel::{read_records, write_records, DataError, ImageRef, ImageStore, ShardManifest};
use crate::executor::{CodeExecutor, ExecutionRequest};
use crate::gateway::{self, GenMode, GenPayload, GenRequest, Generator, JudgeContext};
use crate::render::{data_url, CURRENT_BINDING};
use crate::util::fan_out;

/// Items per track in the full official set.
pub const OFFICIAL_TRACK_SIZE: usize = 500;
pub const VOTE_PANEL: usize = 5;
pub const VOTE_QUORUM: usize = 3;
/// How judges see images; recorded in every report.
pub const JUDGE_VIEW: &str = "side_by_side";

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("item {index}: {reason}")]
    Schema { index: usize, reason: String },
    #[error("expected {VOTE_PANEL} votes, got {0}")]
    VoteCount(usize),
    #[error("item {id} is on the {actual} track, not {expected}")]
    WrongTrack {
        id: String,
        expected: &'static str,
        actual: &'static str,
    },
    #[error("no scored items")]
    NothingScored,
    #[error("data: {0}")]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Track {
    Perception,
    Instruction,
    Reasoning,
}

impl Track {
    pub const ALL: [Track; 3] = [Track::Perception, Track::Instruction, Track::Reasoning];

    pub fn as_str(self) -> &'static str {
        match self {
            Track::Perception => "perception",
            Track::Instruction => "instruction",
            Track::Reasoning => "reasoning",
        }
    }

    pub fn heading(self) -> &'static str {
        match self {
            Track::Perception => "Perception",
            Track::Instruction => "Instruction-Guided Interaction",
            Track::Reasoning => "Interactive Reasoning",
        }
    }

    fn judge_mode(self) -> GenMode {
        match self {
            Track::Perception => GenMode::JudgePerception,
            Track::Instruction => GenMode::JudgeInstruction,
            Track::Reasoning => GenMode::JudgeReasoning,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Domain {
    #[serde(rename = "Logical Reasoning")]
    LogicalReasoning,
    Geometry,
    Algebra,
    Statistics,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchItem {
    pub id: String,
    pub track: Track,
    pub question: String,
    pub image: ImageRef,
    #[serde(default)]
    pub annotation: Option<ImageRef>,
    #[serde(default)]
    pub gold_answer: Option<String>,
    pub source: String,
    pub domain: Domain,
}

impl BenchItem {
    fn check(&self, index: usize, store: &ImageStore) -> Result<(), BenchError> {
        let fail = |reason: String| Err(BenchError::Schema { index, reason });
        if self.id.trim().is_empty() {
            return fail("empty id".into());
        }
        match self.track {
            Track::Perception | Track::Instruction if self.annotation.is_none() => {
                return fail(format!("{} item {} has no annotation image", self.track.as_str(), self.id));
            }
            Track::Reasoning if self.gold_answer.as_deref().is_none_or(|a| a.trim().is_empty()) => {
                return fail(format!("reasoning item {} has no gold answer", self.id));
            }
            _ => {}
        }
        for image in std::iter::once(&self.image).chain(&self.annotation) {
            if !store.contains(&image.digest) {
                return fail(format!("image {} is missing from the store", image.digest));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Benchmark {
    pub items: Vec<BenchItem>,
    pub store: ImageStore,
    pub manifest: Option<ShardManifest>,
    /// Set when an official manifest does not hold exactly 500 per track.
    pub count_warning: Option<String>,
}

impl Benchmark {
    pub fn track_counts(&self) -> BTreeMap<Track, usize> {
        let mut counts: BTreeMap<Track, usize> = Track::ALL.iter().map(|t| (*t, 0)).collect();
        for item in &self.items {
            *counts.entry(item.track).or_default() += 1;
        }
        counts
    }
}

/// Reads a benchmark shard; images live in the store next to it.
pub fn load_benchmark(path: &Path) -> Result<Benchmark, BenchError> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let store = ImageStore::open(dir)?;
    let mut failure = None;
    let result = read_records(path, |line, item: &BenchItem| {
        if let Err(e) = item.check(line, &store) {
            failure = Some(e);
            return Err(DataError::MalformedLine {
                line,
                message: "schema".into(),
            });
        }
        Ok(())
    });
    let (items, manifest) = match (result, failure) {
        (_, Some(e)) => return Err(e),
        (Err(DataError::MalformedLine { line, message }), None) => {
            return Err(BenchError::Schema {
                index: line,
                reason: message,
            })
        }
        (r, None) => r?,
    };
    let mut bench = Benchmark {
        items,
        store,
        manifest,
        count_warning: None,
    };
    if bench.manifest.as_ref().is_some_and(|m| m.official) {
        let counts = bench.track_counts();
        if counts.values().any(|c| *c != OFFICIAL_TRACK_SIZE) {
            let msg = format!(
                "official set should hold {OFFICIAL_TRACK_SIZE} items per track, found {}",
                Track::ALL
                    .iter()
                    .map(|t| format!("{}={}", t.as_str(), counts[t]))
                    .collect::<Vec<_>>()
                    .join(" ")
            );
            warn!("{msg}");
            bench.count_warning = Some(msg);
        }
    }
    Ok(bench)
}

/// Construction-time necessity gate: at least 3 of 5 experts agree.
pub fn expert_vote_gate(votes: &[bool]) -> Result<bool, BenchError> {
    if votes.len() != VOTE_PANEL {
        return Err(BenchError::VoteCount(votes.len()));
    }
    Ok(votes.iter().filter(|v| **v).count() >= VOTE_QUORUM)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Correct,
    Incorrect,
    Unscored,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub item_id: String,
    pub track: Track,
    pub outcome: Outcome,
    pub reason: String,
    pub judge: String,
}

fn verdict(item: &BenchItem, outcome: Outcome, reason: impl Into<String>, judge: &dyn Generator) -> Verdict {
    Verdict {
        item_id: item.id.clone(),
        track: item.track,
        outcome,
        reason: reason.into(),
        judge: judge.id().to_string(),
    }
}

fn expect_track(item: &BenchItem, track: Track) -> Result<(), BenchError> {
    if item.track != track {
        return Err(BenchError::WrongTrack {
            id: item.id.clone(),
            expected: track.as_str(),
            actual: item.track.as_str(),
        });
    }
    Ok(())
}

fn ask_judge(item: &BenchItem, ctx: JudgeContext, judge: &dyn Generator) -> Verdict {
    let request = GenRequest::new(item.track.judge_mode(), GenPayload::Judge(ctx));
    match gateway::judge(judge, &request) {
        Ok(j) => {
            let outcome = if j.correct { Outcome::Correct } else { Outcome::Incorrect };
            verdict(item, outcome, j.reason, judge)
        }
        Err(e) => verdict(item, Outcome::Unscored, format!("judge: {e}"), judge),
    }
}

fn eval_drawing(
    item: &BenchItem,
    track: Track,
    code: &str,
    executor: &dyn CodeExecutor,
    judge: &dyn Generator,
) -> Result<Verdict, BenchError> {
    expect_track(item, track)?;
    let store = executor.store();
    let request = ExecutionRequest::new(code).with_input(CURRENT_BINDING, item.image.clone());
    let rendered = match executor.execute(request) {
        Ok(r) if r.is_ok() => r.output_images.last().cloned(),
        _ => None,
    };
    let Some(rendered) = rendered else {
        return Ok(verdict(item, Outcome::Incorrect, "execution", judge));
    };
    let annotation = item.annotation.as_ref().expect("checked at load");
    let ctx = JudgeContext {
        item_id: item.id.clone(),
        question: item.question.clone(),
        candidate_image: Some(data_url(store, &rendered)?),
        reference_image: Some(data_url(store, annotation)?),
        candidate_answer: None,
        gold_answer: None,
    };
    Ok(ask_judge(item, ctx, judge))
}

/// Runs the candidate's code on the item image and asks the judge whether
/// the drawn point matches the annotation.
pub fn eval_perception(
    item: &BenchItem,
    candidate_code: &str,
    executor: &dyn CodeExecutor,
    judge: &dyn Generator,
) -> Result<Verdict, BenchError> {
    eval_drawing(item, Track::Perception, candidate_code, executor, judge)
}

pub fn eval_instruction(
    item: &BenchItem,
    candidate_code: &str,
    executor: &dyn CodeExecutor,
    judge: &dyn Generator,
) -> Result<Verdict, BenchError> {
    eval_drawing(item, Track::Instruction, candidate_code, executor, judge)
}

pub fn eval_reasoning(item: &BenchItem, candidate_answer: &str, judge: &dyn Generator) -> Result<Verdict, BenchError> {
    expect_track(item, Track::Reasoning)?;
    if candidate_answer.trim().is_empty() {
        return Ok(verdict(item, Outcome::Incorrect, "empty answer", judge));
    }
    let ctx = JudgeContext {
        item_id: item.id.clone(),
        question: item.question.clone(),
        candidate_image: None,
        reference_image: None,
        candidate_answer: Some(candidate_answer.to_string()),
        gold_answer: item.gold_answer.clone(),
    };
    Ok(ask_judge(item, ctx, judge))
}

/// Candidate output for one item: code for drawing tracks, an answer for
/// reasoning.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub item_id: String,
    #[serde(default)]
    pub code: Option<String>,
    #[serde(default)]
    pub answer: Option<String>,
}

/// Evaluates every item concurrently; items without a candidate are
/// incorrect.
pub fn evaluate(
    bench: &Benchmark,
    candidates: &[Candidate],
    executor: &dyn CodeExecutor,
    judge: &dyn Generator,
    budget: usize,
) -> Result<Vec<Verdict>, BenchError> {
    let by_id: BTreeMap<&str, &Candidate> = candidates.iter().map(|c| (c.item_id.as_str(), c)).collect();
    fan_out(bench.items.iter().collect(), budget, |item: &BenchItem| {
        let cand = by_id.get(item.id.as_str());
        match item.track {
            Track::Reasoning => {
                let answer = cand.and_then(|c| c.answer.as_deref()).unwrap_or_default();
                eval_reasoning(item, answer, judge)
            }
            track => match cand.and_then(|c| c.code.as_deref()) {
                Some(code) => eval_drawing(item, track, code, executor, judge),
                None => Ok(verdict(item, Outcome::Incorrect, "no candidate", judge)),
            },
        }
    })
    .into_iter()
    .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrackStats {
    pub attempted: usize,
    pub correct: usize,
    pub incorrect: usize,
    pub unscored: usize,
    /// Percent correct over scored items, one decimal; none if nothing scored.
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tracks: BTreeMap<Track, TrackStats>,
    pub overall: Option<f64>,
    pub judge: String,
    pub judge_view: String,
    pub config_digest: String,
    pub verdicts: Vec<Verdict>,
}

pub fn round1(v: f64) -> f64 {
    (v * 10.0).round() / 10.0
}

fn percent(correct: usize, scored: usize) -> Option<f64> {
    (scored > 0).then(|| round1(100.0 * correct as f64 / scored as f64))
}

pub fn aggregate(verdicts: Vec<Verdict>, judge: &str, config_digest: &str) -> Result<EvalReport, BenchError> {
    let mut tracks: BTreeMap<Track, TrackStats> = BTreeMap::new();
    for v in &verdicts {
        let s = tracks.entry(v.track).or_default();
        s.attempted += 1;
        match v.outcome {
            Outcome::Correct => s.correct += 1,
            Outcome::Incorrect => s.incorrect += 1,
            Outcome::Unscored => s.unscored += 1,
        }
    }
    let (mut correct, mut scored) = (0, 0);
    for s in tracks.values_mut() {
        s.accuracy = percent(s.correct, s.correct + s.incorrect);
        correct += s.correct;
        scored += s.correct + s.incorrect;
    }
    if scored == 0 {
        return Err(BenchError::NothingScored);
    }
    Ok(EvalReport {
        tracks,
        overall: percent(correct, scored),
        judge: judge.to_string(),
        judge_view: JUDGE_VIEW.to_string(),
        config_digest: config_digest.to_string(),
        verdicts,
    })
}

/// Plain-text table, one column per track.
pub fn report_table(report: &EvalReport, model: &str) -> String {
    let cell = |t: Track| {
        report
            .tracks
            .get(&t)
            .and_then(|s| s.accuracy)
            .map_or("-".to_string(), |a| format!("{a:.1}"))
    };
    let widths: Vec<usize> = Track::ALL.iter().map(|t| t.heading().len()).collect();
    let name_w = model.len().max(5);
    let mut out = format!("{:<name_w$}", "Model");
    for (t, w) in Track::ALL.iter().zip(&widths) {
        let _ = write!(out, "  {:<w$}", t.heading());
    }
    out.push('\n');
    let _ = write!(out, "{model:<name_w$}");
    for (t, w) in Track::ALL.iter().zip(&widths) {
        let _ = write!(out, "  {:<w$}", cell(*t));
    }
    out.push('\n');
    let unscored: usize = report.tracks.values().map(|s| s.unscored).sum();
    let _ = writeln!(
        out,
        "overall {} | unscored {unscored} | judge {} ({}) | config {}",
        report.overall.map_or("-".into(), |a| format!("{a:.1}")),
        report.judge,
        report.judge_view,
        report.config_digest
    );
    out
}

pub fn write_verdicts(verdicts: &[Verdict], path: &Path) -> Result<ShardManifest, DataError> {
    write_records(verdicts, path)
}
