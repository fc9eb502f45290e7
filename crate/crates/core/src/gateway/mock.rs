//! Deterministic offline generator.
//!
//! Every response is rendered as block-fenced text and goes through the same
//! parsers as model output. All randomness comes from the mock seed, the
//! request seed and the request payload, so identical requests always get
//! identical responses.
//!
//! Problems are templated geometry tasks (a triangle median and a rectangle
//! diagonal-to-midpoint segment) whose code carries `# entity:` geometry and
//! a `# value:` comment with the correct answer. Checking and repair read
//! defect markers planted in question text: `[defect:answer]`,
//! `[defect:image]`, `[defect:states]`, plus `[sticky]` for a repair that
//! never takes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::prompt::{GenMode, GenPayload, GenRequest, JudgeContext, SampleContext};
use super::{GatewayError, Generator};
use crate::datamodel::canonical_json;
use crate::sketch::{annotations, Annotations};
use crate::util::{answers_match, derive_seed};

pub const DEFECT_ANSWER: &str = "[defect:answer]";
pub const DEFECT_IMAGE: &str = "[defect:image]";
pub const DEFECT_STATES: &str = "[defect:states]";
pub const STICKY: &str = "[sticky]";

/// How many novel counterpart elements one generation call predicts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Novelty {
    Fixed(usize),
    /// `ceil(rate * set_size)`, where `set_size` is the size of the set the
    /// combo was drawn from.
    Proportional { rate: f64 },
}

#[derive(Debug, Clone)]
pub struct MockGenerator {
    seed: u64,
    novelty: Novelty,
    defect_rate: f64,
    id: String,
}

impl MockGenerator {
    pub fn new(seed: u64, novelty: Novelty) -> Self {
        Self {
            seed,
            novelty,
            defect_rate: 0.0,
            id: format!("mock:{seed}"),
        }
    }

    /// Fraction of generated samples that get a wrong answer planted.
    pub fn with_defect_rate(mut self, rate: f64) -> Self {
        self.defect_rate = rate.clamp(0.0, 1.0);
        self
    }

    fn rng_for(&self, request: &GenRequest) -> ChaCha8Rng {
        let payload = canonical_json(&request.payload).unwrap_or_default();
        let seed = derive_seed(
            self.seed,
            &[
                request.mode.as_str(),
                &payload,
                &request.seed.to_string(),
                &request.attempt.to_string(),
            ],
        );
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn novel_count(&self, set_size: usize) -> usize {
        match self.novelty {
            Novelty::Fixed(n) => n,
            Novelty::Proportional { rate } => (rate * set_size as f64).ceil().max(0.0) as usize,
        }
    }
}

const SYLLABLES: &[&str] = &[
    "ka", "lo", "mi", "ne", "ru", "sa", "ti", "vo", "ze", "qua", "bri", "dor", "fen", "gal",
    "hex", "jun", "mor", "nix", "pel", "ros", "tav", "ulm", "wen", "yar", "zil", "cor", "dra",
    "eph", "gor", "isk",
];

fn pseudo_word<R: Rng>(rng: &mut R) -> String {
    (0..4).map(|_| SYLLABLES[rng.random_range(0..SYLLABLES.len())]).collect()
}

const DOMAINS: &[&str] = &["Geometry", "Algebra", "Statistics", "Logical Reasoning"];

fn fmt2(v: f64) -> String {
    format!("{v:.2}")
}

fn dist(a: (i32, i32), b: (i32, i32)) -> f64 {
    f64::from(a.0 - b.0).hypot(f64::from(a.1 - b.1))
}

struct Problem {
    question: String,
    answer: String,
    code: String,
    thought: String,
    step_code: String,
}

fn label_code(out: &mut String, pts: &[(&str, (i32, i32))], color: &str) {
    for (name, (x, y)) in pts {
        out.push_str(&format!("point(img, {x}, {y}, \"{color}\")\n"));
        out.push_str(&format!("text(img, {}, {}, \"{name}\", \"{color}\")\n", x + 6, y - 12));
    }
}

fn triangle_median<R: Rng>(rng: &mut R) -> Problem {
    loop {
        let a: (i32, i32) = (rng.random_range(80..560), rng.random_range(60..200));
        let b = (rng.random_range(60..300), rng.random_range(300..420));
        let mut c = (rng.random_range(340..580), rng.random_range(300..420));
        if (b.0 + c.0) % 2 != 0 {
            c.0 += 1;
        }
        if (b.1 + c.1) % 2 != 0 {
            c.1 += 1;
        }
        let area2 = ((b.0 - a.0) * (c.1 - a.1) - (c.0 - a.0) * (b.1 - a.1)).abs();
        if area2 < 20_000 {
            continue;
        }
        let m = ((b.0 + c.0) / 2, (b.1 + c.1) / 2);
        let value = fmt2(dist(a, m));
        let mut code = String::new();
        for (n, p) in [("A", a), ("B", b), ("C", c)] {
            code.push_str(&format!("# entity: {n} @ {} {}\n", p.0, p.1));
        }
        code.push_str(&format!("# value: {value}\nimg = new_canvas(640, 480)\n"));
        for (p, q) in [(a, b), (b, c), (c, a)] {
            code.push_str(&format!("line(img, {}, {}, {}, {}, \"black\")\n", p.0, p.1, q.0, q.1));
        }
        label_code(&mut code, &[("A", a), ("B", b), ("C", c)], "black");
        code.push_str("save(img, \"original.png\")");
        let mut step = format!(
            "# entity: M @ {} {}\n# entity: AM @ {} {} {} {}\nimg = load(\"current\")\n",
            m.0, m.1, a.0, a.1, m.0, m.1
        );
        step.push_str(&format!("line(img, {}, {}, {}, {}, \"red\")\n", a.0, a.1, m.0, m.1));
        label_code(&mut step, &[("M", m)], "red");
        step.push_str("save(img, \"step1.png\")");
        return Problem {
            question: format!(
                "Triangle ABC has vertices A({}, {}), B({}, {}) and C({}, {}) in pixel coordinates. M is the midpoint of BC. Find the length of the median AM, rounded to two decimals.",
                a.0, a.1, b.0, b.1, c.0, c.1
            ),
            answer: value,
            code,
            thought: "Mark the midpoint M of BC and draw the median AM to read off its endpoints.".into(),
            step_code: step,
        };
    }
}

fn rectangle_dm<R: Rng>(rng: &mut R) -> Problem {
    let x = rng.random_range(60..240);
    let y = rng.random_range(60..160);
    let w = rng.random_range(160..340);
    let h = 2 * rng.random_range(60..130);
    let (a, b, c, d) = ((x, y), (x + w, y), (x + w, y + h), (x, y + h));
    let m = (x + w, y + h / 2);
    let value = fmt2(dist(d, m));
    let mut code = String::new();
    for (n, p) in [("A", a), ("B", b), ("C", c), ("D", d)] {
        code.push_str(&format!("# entity: {n} @ {} {}\n", p.0, p.1));
    }
    code.push_str(&format!("# value: {value}\nimg = new_canvas(640, 480)\n"));
    code.push_str(&format!("rect(img, {x}, {y}, {w}, {h}, \"black\")\n"));
    label_code(&mut code, &[("A", a), ("B", b), ("C", c), ("D", d)], "black");
    code.push_str("save(img, \"original.png\")");
    let mut step = format!(
        "# entity: M @ {} {}\n# entity: DM @ {} {} {} {}\nimg = load(\"current\")\n",
        m.0, m.1, d.0, d.1, m.0, m.1
    );
    step.push_str(&format!("line(img, {}, {}, {}, {}, \"blue\")\n", d.0, d.1, m.0, m.1));
    label_code(&mut step, &[("M", m)], "blue");
    step.push_str("save(img, \"step1.png\")");
    Problem {
        question: format!(
            "Rectangle ABCD has A({}, {}) at the top left, width {w} and height {h} pixels. M is the midpoint of BC. Find the length of DM, rounded to two decimals.",
            x, y
        ),
        answer: value,
        code,
        thought: "Mark the midpoint M of BC and connect it to D.".into(),
        step_code: step,
    }
}

fn render_sample(out: &mut String, p: &Problem) {
    out.push_str(&format!(
        "[[sample]]\n[[question]]\n{}\n[[/question]]\n[[answer]] {} [[/answer]]\n[[code]]\n{}\n[[/code]]\n[[step]]\n[[thought]] {} [[/thought]]\n[[code]]\n{}\n[[/code]]\n[[/step]]\n[[/sample]]\n",
        p.question, p.answer, p.code, p.thought, p.step_code
    ));
}

impl MockGenerator {
    fn generation(&self, request: &GenRequest, rng: &mut ChaCha8Rng) -> String {
        let GenPayload::Elements {
            elements,
            catalog,
            set_size,
        } = &request.payload
        else {
            unreachable!("validated");
        };
        let names: Vec<&str> = elements.iter().map(|e| e.name.as_str()).collect();
        let mut out = String::new();
        for _ in 0..request.batch.max(1) {
            let mut p = if rng.random_bool(0.5) {
                triangle_median(rng)
            } else {
                rectangle_dm(rng)
            };
            p.question = format!("{} (Focus: {}.)", p.question, names.join(", "));
            if self.defect_rate > 0.0 && rng.random_bool(self.defect_rate) {
                p.question.push(' ');
                p.question.push_str(DEFECT_ANSWER);
                let wrong: f64 = p.answer.parse::<f64>().unwrap_or(0.0) + 1.0;
                p.answer = fmt2(wrong);
            }
            render_sample(&mut out, &p);
        }
        let novel = self.novel_count(*set_size);
        let predicting_tools = request.mode == GenMode::FromKnowledge;
        if let Some(dup) = (!catalog.is_empty()).then(|| &catalog[rng.random_range(0..catalog.len())]) {
            if predicting_tools {
                out.push_str(&format!("[[tool]] [[name]] {dup} [[/name]] [[/tool]]\n"));
            } else {
                out.push_str(&format!("[[concept]] [[name]] {dup} [[/name]] [[/concept]]\n"));
            }
        }
        for _ in 0..novel {
            let (w1, w2) = (pseudo_word(rng), pseudo_word(rng));
            if predicting_tools {
                out.push_str(&format!(
                    "[[tool]]\n[[name]] {w1} {w2} marker [[/name]]\n[[description]] draws the {w1} {w2} aid [[/description]]\n[[signature]] (img, x, y) [[/signature]]\n[[/tool]]\n"
                ));
            } else {
                let domain = DOMAINS[rng.random_range(0..DOMAINS.len())];
                let parent = (!catalog.is_empty() && rng.random_bool(0.5))
                    .then(|| catalog[rng.random_range(0..catalog.len())].clone());
                out.push_str(&format!(
                    "[[concept]]\n[[name]] {w1} {w2} [[/name]]\n[[description]] {w1} {w2} property [[/description]]\n[[domain]] {domain} [[/domain]]\n"
                ));
                if let Some(p) = parent {
                    out.push_str(&format!("[[parent]] {p} [[/parent]]\n"));
                }
                out.push_str("[[/concept]]\n");
            }
        }
        out
    }

    fn verdict(ctx: &SampleContext) -> String {
        let q = &ctx.question;
        let expected_images = 1 + ctx.steps.iter().filter(|s| s.code.is_some()).count();
        let answer_ok = !q.contains(DEFECT_ANSWER);
        let image_ok = !q.contains(DEFECT_IMAGE) && !ctx.images.is_empty();
        let states_ok = !q.contains(DEFECT_STATES) && ctx.images.len() == expected_images;
        format!(
            "[[verdict]]\n[[answer_ok]] {answer_ok} [[/answer_ok]]\n[[image_ok]] {image_ok} [[/image_ok]]\n[[states_ok]] {states_ok} [[/states_ok]]\n[[rationale]] mock rules [[/rationale]]\n[[/verdict]]\n"
        )
    }

    fn repair(ctx: &SampleContext) -> String {
        if ctx.question.contains(STICKY) {
            return format!(
                "[[repair]]\n[[question]] {} [[/question]]\n[[answer]] {} [[/answer]]\n[[/repair]]\n",
                ctx.question, ctx.answer
            );
        }
        let question = ctx.question.replace(DEFECT_ANSWER, "").trim().to_string();
        let value = std::iter::once(ctx.original_code.as_str())
            .chain(ctx.steps.iter().filter_map(|s| s.code.as_deref()))
            .filter_map(|c| annotations(c).value)
            .last()
            .unwrap_or_else(|| ctx.answer.clone());
        format!(
            "[[repair]]\n[[question]] {question} [[/question]]\n[[answer]] {value} [[/answer]]\n[[/repair]]\n"
        )
    }

    fn extension(ctx: &SampleContext, sequential: bool, rng: &mut ChaCha8Rng) -> String {
        let original = annotations(&ctx.original_code);
        let steps: Vec<Annotations> = ctx
            .steps
            .iter()
            .filter_map(|s| s.code.as_deref())
            .map(annotations)
            .collect();
        let n = steps.len() + 1;
        let vertex = original
            .entities
            .iter()
            .find(|e| e.coords.len() == 2)
            .map(|e| (e.label.clone(), (e.coords[0] as i32, e.coords[1] as i32)))
            .unwrap_or_else(|| ("O".into(), (0, 0)));
        if !sequential {
            let s = rng.random_range(30..80);
            let x = rng.random_range(20..600 - s);
            let y = rng.random_range(20..440 - s);
            let value = fmt2(f64::from(s) * std::f64::consts::SQRT_2);
            let label = format!("S{n}");
            let code = format!(
                "# entity: {label} @ {x} {y} {s}\n# value: {value}\nimg = load(\"current\")\nrect(img, {x}, {y}, {s}, {s}, \"green\")\ntext(img, {}, {}, \"{label}\", \"green\")\nsave(img, \"step{n}.png\")",
                x + 2,
                y + 2
            );
            return format!(
                "[[extension]]\n[[strategy]] parallel [[/strategy]]\n[[thought]] Draw an independent auxiliary square {label}. [[/thought]]\n[[code]]\n{code}\n[[/code]]\n[[question]] {} Additionally, square {label} with side {s} pixels has its top-left corner at ({x}, {y}). Find the length of its diagonal, rounded to two decimals. [[/question]]\n[[answer]] {value} [[/answer]]\n[[/extension]]\n",
                ctx.question
            );
        }
        let segment = steps
            .iter()
            .rev()
            .flat_map(|a| a.entities.iter().rev())
            .find(|e| e.coords.len() == 4)
            .cloned();
        let (seg_label, p) = match segment {
            Some(e) => (
                e.label,
                (
                    ((e.coords[0] + e.coords[2]) / 2.0).round() as i32,
                    ((e.coords[1] + e.coords[3]) / 2.0).round() as i32,
                ),
            ),
            // No prior-step element to build on: reference an original
            // vertex, which the sequential rule rejects.
            None => (vertex.0.clone(), vertex.1),
        };
        let label = format!("P{n}");
        let value = fmt2(dist(vertex.1, p));
        let (v, vl) = (vertex.1, &vertex.0);
        let code = format!(
            "# ref: {seg_label}\n# entity: {label} @ {} {}\n# entity: {vl}{label} @ {} {} {} {}\n# value: {value}\nimg = load(\"current\")\npoint(img, {}, {}, \"purple\")\nline(img, {}, {}, {}, {}, \"purple\")\ntext(img, {}, {}, \"{label}\", \"purple\")\nsave(img, \"step{n}.png\")",
            p.0, p.1, v.0, v.1, p.0, p.1, p.0, p.1, v.0, v.1, p.0, p.1, p.0 + 6, p.1 + 6
        );
        format!(
            "[[extension]]\n[[strategy]] sequential [[/strategy]]\n[[thought]] Take the midpoint {label} of {seg_label} and join it to {vl}. [[/thought]]\n[[code]]\n{code}\n[[/code]]\n[[question]] {} Let {label} be the midpoint of {seg_label}. Find the distance from {vl} to {label}, rounded to two decimals. [[/question]]\n[[answer]] {value} [[/answer]]\n[[/extension]]\n",
            ctx.question
        )
    }

    fn judgement(mode: GenMode, ctx: &JudgeContext) -> String {
        let (correct, reason) = match mode {
            GenMode::JudgeReasoning => {
                let ok = answers_match(
                    ctx.candidate_answer.as_deref().unwrap_or_default(),
                    ctx.gold_answer.as_deref().unwrap_or_default(),
                );
                (ok, if ok { "answers agree" } else { "answers differ" })
            }
            _ => {
                let ok = ctx.candidate_image.is_some() && ctx.candidate_image == ctx.reference_image;
                (ok, if ok { "images identical" } else { "images differ" })
            }
        };
        format!("[[judgement]]\n[[correct]] {correct} [[/correct]]\n[[reason]] {reason} [[/reason]]\n[[/judgement]]\n")
    }
}

impl Generator for MockGenerator {
    fn id(&self) -> &str {
        &self.id
    }

    fn respond(&self, request: &GenRequest) -> Result<String, GatewayError> {
        request.validate()?;
        let mut rng = self.rng_for(request);
        Ok(match (&request.mode, &request.payload) {
            (GenMode::FromKnowledge | GenMode::FromTools, _) => self.generation(request, &mut rng),
            (GenMode::Check, GenPayload::Sample(ctx)) => Self::verdict(ctx),
            (GenMode::Repair, GenPayload::Sample(ctx)) => Self::repair(ctx),
            (GenMode::ExtendParallel, GenPayload::Sample(ctx)) => Self::extension(ctx, false, &mut rng),
            (GenMode::ExtendSequential, GenPayload::Sample(ctx)) => Self::extension(ctx, true, &mut rng),
            (mode, GenPayload::Judge(ctx)) => Self::judgement(*mode, ctx),
            _ => return Err(GatewayError::PayloadMismatch(request.mode.as_str().into())),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{generate, ElementContext};

    fn request(mode: GenMode, catalog: Vec<String>) -> GenRequest {
        GenRequest::new(
            mode,
            GenPayload::Elements {
                elements: vec![ElementContext {
                    id: "k-1".into(),
                    name: "triangle median".into(),
                    description: "d".into(),
                    detail: "Geometry".into(),
                }],
                catalog,
                set_size: 10,
            },
        )
        .with_seed(3)
    }

    #[test]
    fn fixed_novelty_one_is_exact() {
        let g = MockGenerator::new(7, Novelty::Fixed(1));
        let b = generate(&g, &request(GenMode::FromTools, vec![])).unwrap();
        assert_eq!(b.counts(), (2, 1, 0));
        let b = generate(&g, &request(GenMode::FromKnowledge, vec!["draw line".into()])).unwrap();
        assert_eq!(b.predicted_tools.len(), 2);
        assert_eq!(b.predicted_tools[0].name, "draw line");
    }

    #[test]
    fn same_seed_same_batch() {
        let g = MockGenerator::new(7, Novelty::Fixed(2));
        let r = request(GenMode::FromKnowledge, vec![]);
        assert_eq!(generate(&g, &r).unwrap(), generate(&g, &r).unwrap());
        let other = MockGenerator::new(8, Novelty::Fixed(2));
        assert_ne!(generate(&g, &r).unwrap(), generate(&other, &r).unwrap());
    }

    #[test]
    fn zero_novelty_only_repeats_catalog() {
        let g = MockGenerator::new(7, Novelty::Fixed(0));
        let b = generate(&g, &request(GenMode::FromTools, vec!["circle".into()])).unwrap();
        assert!(b.predicted_concepts.iter().all(|c| c.name == "circle"));
    }

    #[test]
    fn proportional_novelty() {
        let g = MockGenerator::new(1, Novelty::Proportional { rate: 0.25 });
        let b = generate(&g, &request(GenMode::FromTools, vec![])).unwrap();
        assert_eq!(b.predicted_concepts.len(), 3);
    }

    #[test]
    fn templates_answer_their_own_value_comment() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            for p in [triangle_median(&mut rng), rectangle_dm(&mut rng)] {
                assert_eq!(annotations(&p.code).value.as_deref(), Some(p.answer.as_str()));
            }
        }
    }
}
