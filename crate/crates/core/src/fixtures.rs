//! Small deterministic datasets shared by tests, the acceptance suite and
//! offline demos.

use std::path::{Path, PathBuf};

use crate::datamodel::{canonicalize, write_records, DataError, ImageRef, Sample, SampleBody, ShardManifest};
use crate::executor::{render_original, CodeExecutor, ExecError};
use crate::forest::{ConceptProposal, ForestError, KnowledgeForest, ToolProposal, ToolSet};
use crate::gateway::{DEFECT_ANSWER, DEFECT_IMAGE, STICKY};
use crate::render::{execute_step_strict, RenderError};
use crate::vtbench::{BenchItem, Candidate, Domain, Track};

#[derive(Debug, thiserror::Error)]
pub enum FixtureError {
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Forest(#[from] ForestError),
}

pub fn seed_concepts() -> Vec<ConceptProposal> {
    let c = |n: &str, d: &str, dom: &str| ConceptProposal {
        domain: Some(dom.into()),
        ..ConceptProposal::new(n, d)
    };
    vec![
        c("triangle median", "segment from a vertex to the midpoint of the opposite side", "Geometry"),
        c("rectangle diagonal", "segment joining opposite corners of a rectangle", "Geometry"),
        c("midpoint", "point halfway along a segment", "Geometry"),
        c("coordinate distance", "euclidean distance between two plane points", "Algebra"),
    ]
}

pub fn seed_tools() -> Vec<ToolProposal> {
    let t = |n: &str, d: &str, s: &str| ToolProposal {
        signature: s.into(),
        ..ToolProposal::new(n, d)
    };
    vec![
        t("draw line", "connect two points with a straight segment", "(img, x1, y1, x2, y2)"),
        t("mark point", "draw a filled dot at a location", "(img, x, y)"),
        t("label text", "write a short label next to a point", "(img, x, y, s)"),
    ]
}

pub fn seed_sets() -> Result<(KnowledgeForest, ToolSet), ForestError> {
    Ok((
        KnowledgeForest::from_seeds(&seed_concepts())?,
        ToolSet::from_seeds(&seed_tools())?,
    ))
}

/// Seed files in the TOML layout the CLI reads.
pub fn write_seed_files(dir: &Path) -> std::io::Result<(PathBuf, PathBuf)> {
    let mut k = String::new();
    for c in seed_concepts() {
        k.push_str(&format!(
            "[[concept]]\nname = {:?}\ndescription = {:?}\ndomain = {:?}\n\n",
            c.name,
            c.description,
            c.domain.unwrap_or_default()
        ));
    }
    let mut t = String::new();
    for tool in seed_tools() {
        t.push_str(&format!(
            "[[tool]]\nname = {:?}\ndescription = {:?}\nsignature = {:?}\n\n",
            tool.name, tool.description, tool.signature
        ));
    }
    std::fs::create_dir_all(dir)?;
    let (kp, tp) = (dir.join("knowledge.toml"), dir.join("tools.toml"));
    std::fs::write(&kp, k)?;
    std::fs::write(&tp, t)?;
    Ok((kp, tp))
}

/// Composition of the calibration defect corpus.
pub const CORPUS_CLEAN: usize = 12;
pub const CORPUS_ANSWER_DEFECTS: usize = 5;
pub const CORPUS_IMAGE_DEFECTS: usize = 2;
pub const CORPUS_STICKY: usize = 1;
pub const CORPUS_SIZE: usize = CORPUS_CLEAN + CORPUS_ANSWER_DEFECTS + CORPUS_IMAGE_DEFECTS + CORPUS_STICKY;

fn corpus_sample(executor: &dyn CodeExecutor, i: usize, marker: &str, answer: &str) -> Result<Sample, FixtureError> {
    let x = 10 + 4 * i;
    let code = format!(
        "img = new_canvas(64, 48)\n# entity: A 0 0\n# entity: B {x} 40\nline(img, 0, 0, {x}, 40, \"black\")\nsave(img, \"o.png\")"
    );
    let value = format!("{:.2}", ((x * x + 1600) as f64).sqrt());
    let step_code = format!(
        "img = load(\"current\")\n# value: {value}\npoint(img, {x}, 40, \"red\")\nsave(img, \"s.png\")"
    );
    let original = render_original(executor, &code)?;
    let step = execute_step_strict(executor, 1, "Mark B and measure AB.", &step_code, &original)?;
    let question = format!("Item {i}: how long is segment AB, to two decimals? {marker}").trim().to_string();
    let answer = if answer.is_empty() { value } else { answer.to_string() };
    let mut body = SampleBody::new(question, answer.clone(), code);
    body.original_image = Some(original);
    body.trajectory.steps.push(step);
    body.trajectory.final_answer = answer;
    body.provenance.generator = "fixture".into();
    Ok(canonicalize(body, executor.store())?)
}

/// 20 rendered samples: 12 clean, 5 with a wrong answer the repairer can
/// fix, 2 with a bad original image and 1 whose repair never takes. Under
/// the mock checker and repairer this routes to 17 verified and 3 rejected.
pub fn defect_corpus(executor: &dyn CodeExecutor) -> Result<Vec<Sample>, FixtureError> {
    let mut out = Vec::with_capacity(CORPUS_SIZE);
    for i in 0..CORPUS_SIZE {
        let (marker, answer) = if i < CORPUS_CLEAN {
            (String::new(), "")
        } else if i < CORPUS_CLEAN + CORPUS_ANSWER_DEFECTS {
            (DEFECT_ANSWER.to_string(), "999.00")
        } else if i < CORPUS_SIZE - CORPUS_STICKY {
            (DEFECT_IMAGE.to_string(), "")
        } else {
            (format!("{DEFECT_ANSWER} {STICKY}"), "999.00")
        };
        out.push(corpus_sample(executor, i, &marker, answer)?);
    }
    Ok(out)
}

/// Expected per-track accuracies of [`bench_fixture`] under the mock judge.
pub const BENCH_EXPECTED: [(Track, f64); 3] = [
    (Track::Perception, 75.0),
    (Track::Instruction, 50.0),
    (Track::Reasoning, 75.0),
];
pub const BENCH_EXPECTED_OVERALL: f64 = 66.7;

pub struct BenchFixture {
    pub path: PathBuf,
    pub candidates: Vec<Candidate>,
    pub manifest: ShardManifest,
}

fn mark_code(x: i32, y: i32, color: &str) -> String {
    format!("img = load(\"current\")\npoint(img, {x}, {y}, \"{color}\")\nsave(img, \"answer.png\")")
}

/// 12-item benchmark (4 per track) written to `dir/bench.jsonl` with its
/// images in `dir/images`, plus candidates with a hand-countable outcome:
/// perception 3 of 4, instruction 2 of 4 (one fails to execute),
/// reasoning 3 of 4 (one empty answer).
pub fn bench_fixture(dir: &Path, executor_for: impl Fn(&Path) -> Box<dyn CodeExecutor>) -> Result<BenchFixture, FixtureError> {
    std::fs::create_dir_all(dir).map_err(DataError::from)?;
    let executor = executor_for(dir);
    let ex = executor.as_ref();
    let base = |i: usize| -> Result<ImageRef, FixtureError> {
        let code = format!(
            "img = new_canvas(80, 60)\nline(img, 5, 5, {}, 50, \"blue\")\ncircle(img, 40, 30, {}, \"green\")\nsave(img, \"q.png\")",
            20 + 5 * i,
            8 + i
        );
        Ok(render_original(ex, &code)?)
    };
    let render_with = |image: &ImageRef, code: &str| -> Result<ImageRef, FixtureError> {
        let step = execute_step_strict(ex, 1, "", code, image)?;
        Ok(step.output_image.expect("strict"))
    };
    let mut items = Vec::new();
    let mut candidates = Vec::new();
    let domains = [Domain::Geometry, Domain::Algebra, Domain::Statistics, Domain::LogicalReasoning];
    for i in 0..4 {
        let image = base(i)?;
        let (x, y) = (10 + 10 * i as i32, 20);
        let annotation = render_with(&image, &mark_code(x, y, "red"))?;
        let id = format!("perception-{i}");
        items.push(BenchItem {
            id: id.clone(),
            track: Track::Perception,
            question: format!("Mark the endpoint of the blue segment nearest ({x}, {y})."),
            image,
            annotation: Some(annotation),
            gold_answer: None,
            source: "fixture".into(),
            domain: domains[i],
        });
        let (cx, cy) = if i == 3 { (x + 15, y + 15) } else { (x, y) };
        candidates.push(Candidate {
            item_id: id,
            code: Some(mark_code(cx, cy, "red")),
            answer: None,
        });
    }
    for i in 0..4 {
        let image = base(4 + i)?;
        let draw = format!("img = load(\"current\")\nline(img, 0, {y}, 79, {y}, \"orange\")\nsave(img, \"answer.png\")", y = 10 + 8 * i);
        let annotation = render_with(&image, &draw)?;
        let id = format!("instruction-{i}");
        items.push(BenchItem {
            id: id.clone(),
            track: Track::Instruction,
            question: format!("Draw a horizontal orange line at y = {}.", 10 + 8 * i),
            image,
            annotation: Some(annotation),
            gold_answer: None,
            source: "fixture".into(),
            domain: domains[i],
        });
        let code = match i {
            2 => draw.replace("orange", "purple"),
            3 => "img = load(\"current\")\nundefined_tool(img)\nsave(img, \"answer.png\")".to_string(),
            _ => draw,
        };
        candidates.push(Candidate {
            item_id: id,
            code: Some(code),
            answer: None,
        });
    }
    for i in 0..4 {
        let image = base(8 + i)?;
        let gold = format!("{}", 3 + i * 2);
        let id = format!("reasoning-{i}");
        items.push(BenchItem {
            id: id.clone(),
            track: Track::Reasoning,
            question: format!("How many units long is segment {i}?"),
            image,
            annotation: None,
            gold_answer: Some(gold.clone()),
            source: "fixture".into(),
            domain: domains[i],
        });
        candidates.push(Candidate {
            item_id: id,
            code: None,
            answer: Some(if i == 3 { String::new() } else { gold }),
        });
    }
    let path = dir.join("bench.jsonl");
    let manifest = write_records(&items, &path)?;
    Ok(BenchFixture {
        path,
        candidates,
        manifest,
    })
}
