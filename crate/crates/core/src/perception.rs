//! Perception scene synthesis.
//!
//! Coordinates are drawn first and the drawing code is templated from them,
//! so every coordinate tag is exact ground truth. Questions come in three
//! levels: surface (read a tag), semantic (pick a tag by a geometric rule)
//! and integrated (compute a point from several tags).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datamodel::{
    canonicalize, CoordinateTag, DataError, DataRoute, ImageRef, PerceptionLevel, Sample, SampleBody,
};
use crate::executor::{render_original, CodeExecutor, ExecError};
use crate::forest::KnowledgeForest;
use crate::util::{derive_seed, fan_out, DEFAULT_BUDGET};

pub const CANVAS_WIDTH: i32 = 640;
pub const CANVAS_HEIGHT: i32 = 480;
pub const COUNT_MEAN: f64 = 8.0;
/// Standard deviation of the element count; the variance is 4.
pub const COUNT_STD: f64 = 2.0;
pub const COUNT_MIN: usize = 2;
pub const COUNT_MAX: usize = 20;
/// Tolerance for relation checks, in pixels.
pub const RELATION_TOLERANCE: f64 = 0.5;

#[derive(Debug, thiserror::Error)]
pub enum SceneError {
    #[error("scene invariant: {0}")]
    Invalid(String),
    #[error("element {label} has a coordinate outside the {CANVAS_WIDTH}x{CANVAS_HEIGHT} canvas")]
    OutOfBounds { label: String },
    #[error("render: {0}")]
    Render(#[from] ExecError),
    #[error("data: {0}")]
    Data(#[from] DataError),
    #[error("{failed} scenes failed to render before reaching the target; last error: {last}")]
    TooManyFailures { failed: usize, last: String },
}

/// Element count: a normal draw with mean 8 and variance 4, rounded and
/// clamped to `[2, 20]`.
pub fn sample_count<R: Rng + ?Sized>(rng: &mut R) -> usize {
    let normal = Normal::new(COUNT_MEAN, COUNT_STD).expect("valid normal");
    let v: f64 = normal.sample(rng);
    (v.round().max(COUNT_MIN as f64) as usize).min(COUNT_MAX)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElementKind {
    Point,
    Line,
    Angle,
    Circle,
    Text,
    Symbol,
}

/// One drawable element.
///
/// `params` by kind: point `[x, y]`; line `[x1, y1, x2, y2]`; angle
/// `[vx, vy, ax, ay, bx, by]`; circle `[cx, cy, r]`; text `[x, y]`;
/// symbol `[x1, y1, x2, y2]` for arrows, `[x, y]` for ticks and
/// `[x, y, side]` for squares. `glyph` carries the text or symbol name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneElement {
    pub kind: ElementKind,
    pub label: String,
    pub params: Vec<i32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub glyph: Option<String>,
}

impl SceneElement {
    fn new(kind: ElementKind, label: String, params: Vec<i32>) -> Self {
        Self {
            kind,
            label,
            params,
            glyph: None,
        }
    }

    fn glyph(mut self, g: &str) -> Self {
        self.glyph = Some(g.to_string());
        self
    }

    fn is_square(&self) -> bool {
        self.kind == ElementKind::Symbol && self.glyph.as_deref() == Some("square")
    }

    /// Every pixel position the element occupies at its extremes.
    fn extent(&self) -> Vec<(i32, i32)> {
        let p = &self.params;
        match (self.kind, self.glyph.as_deref()) {
            (ElementKind::Circle, _) => vec![(p[0] - p[2], p[1] - p[2]), (p[0] + p[2], p[1] + p[2])],
            (ElementKind::Symbol, Some("square")) => vec![(p[0], p[1]), (p[0] + p[2], p[1] + p[2])],
            _ => p.chunks(2).filter(|c| c.len() == 2).map(|c| (c[0], c[1])).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelationKind {
    PointOnLine,
    PointOutsideCircle,
    PointInsideCircle,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Relation {
    pub kind: RelationKind,
    pub subject: String,
    pub object: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub elements: Vec<SceneElement>,
    pub relations: Vec<Relation>,
    pub count: usize,
    pub concepts: Vec<String>,
    pub seed: u64,
}

fn in_canvas((x, y): (i32, i32)) -> bool {
    (0..CANVAS_WIDTH).contains(&x) && (0..CANVAS_HEIGHT).contains(&y)
}

impl SceneSpec {
    pub fn element(&self, label: &str) -> Option<&SceneElement> {
        self.elements.iter().find(|e| e.label == label)
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        let invalid = |m: String| Err(SceneError::Invalid(m));
        if self.count != self.elements.len() {
            return invalid(format!("count {} but {} elements", self.count, self.elements.len()));
        }
        let mut labels = std::collections::HashSet::new();
        for e in &self.elements {
            if !labels.insert(e.label.as_str()) {
                return invalid(format!("duplicate label {}", e.label));
            }
            let arity = match (e.kind, e.glyph.as_deref()) {
                (ElementKind::Point | ElementKind::Text, _) => 2,
                (ElementKind::Line, _) => 4,
                (ElementKind::Angle, _) => 6,
                (ElementKind::Circle, _) => 3,
                (ElementKind::Symbol, Some("arrow")) => 4,
                (ElementKind::Symbol, Some("tick")) => 2,
                (ElementKind::Symbol, Some("square")) => 3,
                (ElementKind::Symbol, g) => return invalid(format!("unknown symbol {g:?}")),
            };
            if e.params.len() != arity {
                return invalid(format!("{} needs {arity} params", e.label));
            }
        }
        for r in &self.relations {
            let (Some(s), Some(o)) = (self.element(&r.subject), self.element(&r.object)) else {
                return invalid(format!("relation {:?} names a missing element", r.kind));
            };
            let want = match r.kind {
                RelationKind::PointOnLine => ElementKind::Line,
                _ => ElementKind::Circle,
            };
            if s.kind != ElementKind::Point || o.kind != want {
                return invalid(format!("relation {:?} has the wrong element kinds", r.kind));
            }
        }
        for e in &self.elements {
            if !e.extent().into_iter().all(in_canvas) {
                return Err(SceneError::OutOfBounds { label: e.label.clone() });
            }
        }
        Ok(())
    }
}

/// Checks one relation numerically against the spec coordinates.
pub fn relation_holds(spec: &SceneSpec, relation: &Relation) -> bool {
    let (Some(s), Some(o)) = (spec.element(&relation.subject), spec.element(&relation.object)) else {
        return false;
    };
    let (px, py) = (f64::from(s.params[0]), f64::from(s.params[1]));
    let q: Vec<f64> = o.params.iter().map(|v| f64::from(*v)).collect();
    match relation.kind {
        RelationKind::PointOnLine => {
            let (dx, dy) = (q[2] - q[0], q[3] - q[1]);
            let len = dx.hypot(dy);
            let off = ((px - q[0]) * dy - (py - q[1]) * dx).abs() / len;
            let t = ((px - q[0]) * dx + (py - q[1]) * dy) / (len * len);
            off <= RELATION_TOLERANCE && (0.0..=1.0).contains(&t)
        }
        RelationKind::PointOutsideCircle => (px - q[0]).hypot(py - q[1]) > q[2] + 1.0,
        RelationKind::PointInsideCircle => (px - q[0]).hypot(py - q[1]) < q[2] - 1.0,
    }
}

fn gcd(a: i32, b: i32) -> i32 {
    if b == 0 {
        a.abs()
    } else {
        gcd(b, a % b)
    }
}

const WORDS: &[&str] = &["note", "scale", "figure", "given", "sketch", "ref"];
const SYMBOLS: &[&str] = &["arrow", "tick", "square"];

struct Labeler {
    points: usize,
    other: std::collections::HashMap<&'static str, usize>,
}

impl Labeler {
    fn point(&mut self) -> String {
        let i = self.points;
        self.points += 1;
        let letter = (b'A' + (i % 26) as u8) as char;
        if i < 26 {
            letter.to_string()
        } else {
            format!("{letter}{}", i / 26)
        }
    }

    fn next(&mut self, prefix: &'static str) -> String {
        let n = self.other.entry(prefix).or_insert(0);
        *n += 1;
        format!("{prefix}{n}")
    }
}

fn free_point<R: Rng + ?Sized>(rng: &mut R) -> [i32; 2] {
    [rng.random_range(20..620), rng.random_range(20..460)]
}

fn random_line<R: Rng + ?Sized>(rng: &mut R) -> Vec<i32> {
    loop {
        let [x, y] = free_point(rng);
        let (dx, dy) = (rng.random_range(-40..=40), rng.random_range(-40..=40));
        if dx * dx + dy * dy < 100 {
            continue;
        }
        let k = rng.random_range(3..=8);
        let (x2, y2) = (x + k * dx, y + k * dy);
        if (20..620).contains(&x2) && (20..460).contains(&y2) {
            return vec![x, y, x2, y2];
        }
    }
}

fn random_circle<R: Rng + ?Sized>(rng: &mut R) -> Vec<i32> {
    let r = rng.random_range(30..=90);
    vec![rng.random_range(r + 10..630 - r), rng.random_range(r + 10..470 - r), r]
}

/// Integer point strictly inside a segment, exactly on it.
fn point_on<R: Rng + ?Sized>(line: &[i32], rng: &mut R) -> [i32; 2] {
    let (dx, dy) = (line[2] - line[0], line[3] - line[1]);
    let g = gcd(dx, dy);
    let j = rng.random_range(1..g);
    [line[0] + j * dx / g, line[1] + j * dy / g]
}

fn point_near_circle<R: Rng + ?Sized>(c: &[i32], outside: bool, rng: &mut R) -> Option<[i32; 2]> {
    let (cx, cy, r) = (f64::from(c[0]), f64::from(c[1]), f64::from(c[2]));
    for _ in 0..50 {
        let theta = rng.random_range(0.0..std::f64::consts::TAU);
        let d = if outside {
            r + rng.random_range(12.0..60.0)
        } else {
            rng.random_range(0.0..(r - 8.0))
        };
        let p = [(cx + d * theta.cos()).round() as i32, (cy + d * theta.sin()).round() as i32];
        let dist = (f64::from(p[0]) - cx).hypot(f64::from(p[1]) - cy);
        let ok = if outside { dist > r + 1.0 } else { dist < r - 1.0 };
        if ok && (10..630).contains(&p[0]) && (10..470).contains(&p[1]) {
            return Some(p);
        }
    }
    None
}

/// Draws a scene spec: count, element kinds, coordinates and relations.
pub fn sample_scene<R: Rng + ?Sized>(forest: Option<&KnowledgeForest>, rng: &mut R) -> SceneSpec {
    let seed = rng.random();
    let count = sample_count(rng);
    let mut labels = Labeler {
        points: 0,
        other: Default::default(),
    };
    let mut elements: Vec<SceneElement> = Vec::with_capacity(count);
    let mut relations = Vec::new();
    for i in 0..count {
        let roll = if i == 0 { 0 } else { rng.random_range(0..100) };
        let element = match roll {
            0..=34 => {
                let label = labels.point();
                let lines: Vec<&SceneElement> =
                    elements.iter().filter(|e| e.kind == ElementKind::Line).collect();
                let circles: Vec<&SceneElement> =
                    elements.iter().filter(|e| e.kind == ElementKind::Circle).collect();
                let mut placed = None;
                if (!lines.is_empty() || !circles.is_empty()) && rng.random_bool(0.6) {
                    let use_line = !lines.is_empty() && (circles.is_empty() || rng.random_bool(0.5));
                    if use_line {
                        let l = lines[rng.random_range(0..lines.len())];
                        placed = Some((point_on(&l.params, rng), RelationKind::PointOnLine, l.label.clone()));
                    } else {
                        let c = circles[rng.random_range(0..circles.len())];
                        let outside = rng.random_bool(0.6);
                        let kind = if outside {
                            RelationKind::PointOutsideCircle
                        } else {
                            RelationKind::PointInsideCircle
                        };
                        placed = point_near_circle(&c.params, outside, rng).map(|p| (p, kind, c.label.clone()));
                    }
                }
                let p = match placed {
                    Some((p, kind, object)) => {
                        relations.push(Relation {
                            kind,
                            subject: label.clone(),
                            object,
                        });
                        p
                    }
                    None => free_point(rng),
                };
                SceneElement::new(ElementKind::Point, label, p.to_vec())
            }
            35..=54 => SceneElement::new(ElementKind::Line, labels.next("l"), random_line(rng)),
            55..=66 => SceneElement::new(ElementKind::Circle, labels.next("c"), random_circle(rng)),
            67..=74 => {
                let v = [rng.random_range(140..500), rng.random_range(140..340)];
                let ray = |rng: &mut R| {
                    let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                    let len: f64 = rng.random_range(60.0..120.0);
                    [
                        (f64::from(v[0]) + len * theta.cos()).round() as i32,
                        (f64::from(v[1]) + len * theta.sin()).round() as i32,
                    ]
                };
                let (a, b) = (ray(rng), ray(rng));
                SceneElement::new(ElementKind::Angle, labels.next("ang"), vec![v[0], v[1], a[0], a[1], b[0], b[1]])
            }
            75..=84 => {
                let p = free_point(rng);
                let word = WORDS[rng.random_range(0..WORDS.len())];
                SceneElement::new(ElementKind::Text, labels.next("t"), vec![p[0].min(560), p[1]]).glyph(word)
            }
            _ => {
                let glyph = SYMBOLS[rng.random_range(0..SYMBOLS.len())];
                let params = match glyph {
                    "arrow" => {
                        let [x, y] = free_point(rng);
                        let (dx, dy) = (rng.random_range(-60..=60), rng.random_range(-60..=60));
                        vec![x, y, (x + dx).clamp(10, 629), (y + dy).clamp(10, 469)]
                    }
                    "tick" => free_point(rng).to_vec(),
                    _ => {
                        let s = rng.random_range(30..=120);
                        vec![rng.random_range(10..630 - s), rng.random_range(10..470 - s), s]
                    }
                };
                let prefix = if glyph == "square" { "sq" } else { "s" };
                SceneElement::new(ElementKind::Symbol, labels.next(prefix), params).glyph(glyph)
            }
        };
        elements.push(element);
    }
    let concepts = forest
        .filter(|f| !f.is_empty())
        .and_then(|f| f.combos(None, 1, rng).ok())
        .and_then(|mut c| c.pop())
        .unwrap_or_default();
    SceneSpec {
        count: elements.len(),
        elements,
        relations,
        concepts,
        seed,
    }
}

/// Exact coordinates emitted by the drawing code.
pub fn scene_tags(spec: &SceneSpec) -> Vec<CoordinateTag> {
    let tag = |label: String, x: i32, y: i32, role: &str| CoordinateTag {
        label,
        x,
        y,
        role: role.to_string(),
    };
    let mut tags = Vec::new();
    for e in &spec.elements {
        let p = &e.params;
        let l = &e.label;
        match (e.kind, e.glyph.as_deref()) {
            (ElementKind::Point, _) => tags.push(tag(l.clone(), p[0], p[1], "point")),
            (ElementKind::Line, _) => {
                tags.push(tag(format!("{l}:1"), p[0], p[1], "endpoint"));
                tags.push(tag(format!("{l}:2"), p[2], p[3], "endpoint"));
            }
            (ElementKind::Angle, _) => tags.push(tag(l.clone(), p[0], p[1], "vertex")),
            (ElementKind::Circle, _) => tags.push(tag(l.clone(), p[0], p[1], "center")),
            (ElementKind::Text, _) => tags.push(tag(l.clone(), p[0], p[1], "text")),
            (ElementKind::Symbol, Some("arrow")) => tags.push(tag(l.clone(), p[2], p[3], "arrow_head")),
            (ElementKind::Symbol, Some("square")) => {
                let s = p[2];
                for (i, (x, y)) in [(p[0], p[1]), (p[0] + s, p[1]), (p[0] + s, p[1] + s), (p[0], p[1] + s)]
                    .into_iter()
                    .enumerate()
                {
                    tags.push(tag(format!("{l}:{}", i + 1), x, y, "corner"));
                }
            }
            (ElementKind::Symbol, _) => tags.push(tag(l.clone(), p[0], p[1], "tick")),
        }
    }
    tags
}

/// Drawing code for a spec, on a white 640x480 canvas.
pub fn scene_code(spec: &SceneSpec) -> String {
    let mut code = format!("img = new_canvas({CANVAS_WIDTH}, {CANVAS_HEIGHT}, \"white\")\n");
    for e in &spec.elements {
        let p = &e.params;
        let l = &e.label;
        match (e.kind, e.glyph.as_deref()) {
            (ElementKind::Point, _) => {
                code.push_str(&format!("point(img, {}, {}, \"black\")\n", p[0], p[1]));
                code.push_str(&format!("text(img, {}, {}, \"{l}\", \"black\")\n", p[0] + 6, p[1] - 14));
            }
            (ElementKind::Line, _) => {
                code.push_str(&format!("line(img, {}, {}, {}, {}, \"blue\")\n", p[0], p[1], p[2], p[3]));
            }
            (ElementKind::Angle, _) => {
                for (x, y) in [(p[2], p[3]), (p[4], p[5])] {
                    code.push_str(&format!("line(img, {}, {}, {x}, {y}, \"purple\")\n", p[0], p[1]));
                }
                code.push_str(&format!("arc_r = 14\ncircle(img, {}, {}, arc_r, \"purple\")\n", p[0], p[1]));
            }
            (ElementKind::Circle, _) => {
                code.push_str(&format!("circle(img, {}, {}, {}, \"green\")\n", p[0], p[1], p[2]));
            }
            (ElementKind::Text, g) => {
                code.push_str(&format!("text(img, {}, {}, \"{}\", \"gray\")\n", p[0], p[1], g.unwrap_or("")));
            }
            (ElementKind::Symbol, Some("arrow")) => {
                code.push_str(&format!("arrow(img, {}, {}, {}, {}, \"orange\")\n", p[0], p[1], p[2], p[3]));
            }
            (ElementKind::Symbol, Some("square")) => {
                code.push_str(&format!("rect(img, {}, {}, {s}, {s}, \"red\")\n", p[0], p[1], s = p[2]));
            }
            (ElementKind::Symbol, _) => {
                code.push_str(&format!(
                    "line(img, {}, {}, {}, {}, \"black\")\n",
                    p[0] - 5,
                    p[1] + 5,
                    p[0] + 5,
                    p[1] - 5
                ));
            }
        }
    }
    code.push_str("save(img, \"scene.png\")");
    code
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedScene {
    pub image: ImageRef,
    pub tags: Vec<CoordinateTag>,
    pub code: String,
}

pub fn render_scene(spec: &SceneSpec, executor: &dyn CodeExecutor) -> Result<RenderedScene, SceneError> {
    spec.validate()?;
    let code = scene_code(spec);
    let image = render_original(executor, &code)?;
    Ok(RenderedScene {
        image,
        tags: scene_tags(spec),
        code,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerceptionItem {
    pub level: PerceptionLevel,
    pub question: String,
    pub answer: String,
}

/// Integers print bare; halves keep one decimal.
pub fn format_coord(v: f64) -> String {
    if v.fract() == 0.0 {
        format!("{}", v as i64)
    } else {
        format!("{v:.1}")
    }
}

pub fn format_point(x: f64, y: f64) -> String {
    format!("({}, {})", format_coord(x), format_coord(y))
}

/// Top-left vertex under image coordinates: min x, then min y.
pub fn top_left(tags: &[&CoordinateTag]) -> Option<(i32, i32)> {
    tags.iter().map(|t| (t.x, t.y)).min()
}

/// At most one question per level.
pub fn make_questions<R: Rng + ?Sized>(spec: &SceneSpec, tags: &[CoordinateTag], rng: &mut R) -> Vec<PerceptionItem> {
    let mut items = Vec::new();
    let points: Vec<&CoordinateTag> = tags.iter().filter(|t| t.role == "point").collect();
    let squares: Vec<&SceneElement> = spec.elements.iter().filter(|e| e.is_square()).collect();
    let lines: Vec<&SceneElement> = spec.elements.iter().filter(|e| e.kind == ElementKind::Line).collect();

    if !points.is_empty() {
        let p = points[rng.random_range(0..points.len())];
        items.push(PerceptionItem {
            level: PerceptionLevel::Surface,
            question: format!("What are the pixel coordinates of point {}? Answer as (x, y).", p.label),
            answer: format_point(f64::from(p.x), f64::from(p.y)),
        });
    }

    let mut semantic = Vec::new();
    for sq in &squares {
        let prefix = format!("{}:", sq.label);
        let corners: Vec<&CoordinateTag> = tags.iter().filter(|t| t.label.starts_with(&prefix)).collect();
        if let Some((x, y)) = top_left(&corners) {
            semantic.push(PerceptionItem {
                level: PerceptionLevel::Semantic,
                question: format!(
                    "What are the pixel coordinates of the top-left vertex of square {}? Answer as (x, y).",
                    sq.label
                ),
                answer: format_point(f64::from(x), f64::from(y)),
            });
        }
    }
    if points.len() >= 2 {
        let min_x = points.iter().map(|p| p.x).min().expect("non-empty");
        let leftmost: Vec<&&CoordinateTag> = points.iter().filter(|p| p.x == min_x).collect();
        if leftmost.len() == 1 {
            semantic.push(PerceptionItem {
                level: PerceptionLevel::Semantic,
                question: "Which labeled point lies farthest to the left? Answer with its label.".into(),
                answer: leftmost[0].label.clone(),
            });
        }
    }
    if !semantic.is_empty() {
        items.push(semantic.swap_remove(rng.random_range(0..semantic.len())));
    }

    let mut integrated = Vec::new();
    for sq in &squares {
        let (x, y, s) = (sq.params[0], sq.params[1], f64::from(sq.params[2]));
        integrated.push(PerceptionItem {
            level: PerceptionLevel::Integrated,
            question: format!(
                "Square {} has its top-left vertex at ({x}, {y}) and side length {} pixels. What are the coordinates of its center?",
                sq.label, sq.params[2]
            ),
            answer: format_point(f64::from(x) + s / 2.0, f64::from(y) + s / 2.0),
        });
    }
    for l in &lines {
        let p = &l.params;
        integrated.push(PerceptionItem {
            level: PerceptionLevel::Integrated,
            question: format!("What are the pixel coordinates of the midpoint of the blue segment labeled {}?", l.label),
            answer: format_point(f64::from(p[0] + p[2]) / 2.0, f64::from(p[1] + p[3]) / 2.0),
        });
    }
    if lines.is_empty() && squares.is_empty() && points.len() >= 2 {
        let (a, b) = (points[0], points[1]);
        integrated.push(PerceptionItem {
            level: PerceptionLevel::Integrated,
            question: format!("What are the pixel coordinates of the midpoint of {}{}?", a.label, b.label),
            answer: format_point(f64::from(a.x + b.x) / 2.0, f64::from(a.y + b.y) / 2.0),
        });
    }
    if !integrated.is_empty() {
        items.push(integrated.swap_remove(rng.random_range(0..integrated.len())));
    }
    items
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerceptionConfig {
    pub seed: u64,
    pub budget: usize,
}

impl Default for PerceptionConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            budget: DEFAULT_BUDGET,
        }
    }
}

#[derive(Debug, Default)]
pub struct PerceptionOutcome {
    pub samples: Vec<Sample>,
    pub scenes: usize,
    pub failures: Vec<String>,
}

type SceneResult = Result<(SceneSpec, RenderedScene, Vec<PerceptionItem>), SceneError>;

/// Samples, renders and questions scenes until `n` items exist.
pub fn synth_perception(
    n: usize,
    forest: Option<&KnowledgeForest>,
    config: &PerceptionConfig,
    executor: &dyn CodeExecutor,
) -> Result<PerceptionOutcome, SceneError> {
    let mut out = PerceptionOutcome::default();
    let chunk = config.budget.max(1);
    let mut next = 0usize;
    while out.samples.len() < n {
        let ids: Vec<usize> = (next..next + chunk).collect();
        next += chunk;
        let results: Vec<SceneResult> = fan_out(ids, config.budget, |i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &["scene", &i.to_string()]));
            let spec = sample_scene(forest, &mut rng);
            let rendered = render_scene(&spec, executor)?;
            let items = make_questions(&spec, &rendered.tags, &mut rng);
            Ok((spec, rendered, items))
        });
        for result in results {
            match result {
                Ok((spec, rendered, items)) => {
                    out.scenes += 1;
                    for item in items {
                        if out.samples.len() == n {
                            break;
                        }
                        let mut body = SampleBody::new(item.question, item.answer, rendered.code.clone());
                        body.original_image = Some(rendered.image.clone());
                        body.tags = rendered.tags.clone();
                        body.perception_level = Some(item.level);
                        body.knowledge_refs = spec.concepts.clone();
                        body.route = Some(DataRoute::ColdStartPerception);
                        body.provenance.generator = "perception".into();
                        out.samples.push(canonicalize(body, executor.store())?);
                    }
                }
                Err(e) => out.failures.push(e.to_string()),
            }
        }
        if out.failures.len() > 3 * n + 10 {
            return Err(SceneError::TooManyFailures {
                failed: out.failures.len(),
                last: out.failures.last().cloned().unwrap_or_default(),
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn count_is_clamped_and_seeded() {
        let mut a = ChaCha8Rng::seed_from_u64(1);
        let mut b = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..2000 {
            let v = sample_count(&mut a);
            assert!((COUNT_MIN..=COUNT_MAX).contains(&v));
            assert_eq!(v, sample_count(&mut b));
        }
    }

    #[test]
    fn square_questions() {
        let spec = SceneSpec {
            elements: vec![
                SceneElement::new(ElementKind::Symbol, "sq1".into(), vec![0, 0, 10]).glyph("square"),
                SceneElement::new(ElementKind::Point, "A".into(), vec![120, 80]),
            ],
            relations: vec![],
            count: 2,
            concepts: vec![],
            seed: 0,
        };
        spec.validate().unwrap();
        let tags = scene_tags(&spec);
        let items = make_questions(&spec, &tags, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(items[0].answer, "(120, 80)");
        let integrated = items.iter().find(|i| i.level == PerceptionLevel::Integrated).unwrap();
        assert_eq!(integrated.answer, "(5, 5)");
    }

    #[test]
    fn out_of_bounds_is_caught_before_render() {
        let spec = SceneSpec {
            elements: vec![SceneElement::new(ElementKind::Point, "A".into(), vec![700, 10])],
            relations: vec![],
            count: 1,
            concepts: vec![],
            seed: 0,
        };
        assert!(matches!(spec.validate(), Err(SceneError::OutOfBounds { .. })));
    }

    #[test]
    fn sampled_specs_are_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..300 {
            let spec = sample_scene(None, &mut rng);
            spec.validate().unwrap();
            assert!(spec.relations.iter().all(|r| relation_holds(&spec, r)));
        }
    }

    #[test]
    fn scenes_render_and_tag_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let ex = crate::executor::InProcessExecutor::new(crate::datamodel::ImageStore::open(dir.path()).unwrap());
        let out = synth_perception(12, None, &PerceptionConfig::default(), &ex).unwrap();
        assert_eq!(out.samples.len(), 12);
        for s in &out.samples {
            let img = ex.store().load(s.original_image.as_ref().unwrap()).unwrap();
            assert_eq!(img.dimensions(), (640, 480));
            for t in s.tags.iter().filter(|t| t.role == "point") {
                assert_ne!(img.get_pixel(t.x as u32, t.y as u32).0, [255, 255, 255, 255], "{}", t.label);
            }
        }
    }
}
