//! Reference interpreter for drawing segments.
//!
//! This backs the stub sandbox worker and the in-process executor. It
//! understands a small Python-compatible prelude (`new_canvas`, `load`,
//! `line`, `circle`, `point`, `rect`, `text`, `arrow`, `save`, `print`) so
//! the same segments run unchanged on a real interpreter that defines those
//! helpers. Saved files are confined to the per-request scratch directory
//! and network modules are refused.

mod annotate;
mod font;
pub mod parse;

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use image::{Rgba, RgbaImage};

use crate::datamodel::ExecStatus;
pub use annotate::{annotations, Annotations, EntityMark};
pub use parse::{parse_program, Expr, Stmt, StmtKind, SyntaxError};

/// Modules a segment may import. Everything else is refused.
pub const ALLOWED_MODULES: &[&str] = &["math", "vtdraw", "random"];
const NETWORK_MODULES: &[&str] = &[
    "socket", "urllib", "urllib.request", "requests", "http", "http.client", "httpx", "ftplib",
    "smtplib", "asyncio",
];

#[derive(Debug, Clone, Copy)]
pub struct Limits {
    pub timeout: Duration,
    pub memory_bytes: u64,
}

impl Default for Limits {
    fn default() -> Self {
        Self {
            timeout: Duration::from_millis(10_000),
            memory_bytes: 512 * 1024 * 1024,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub status: ExecStatus,
    /// Files saved by the segment, in first-save order.
    pub saved: Vec<PathBuf>,
    pub stdout: String,
    pub trace: String,
}

#[derive(Debug, Clone)]
enum Value {
    Num(f64),
    Str(String),
    Bool(bool),
    None,
    Image(usize),
}

impl Value {
    fn type_name(&self) -> &'static str {
        match self {
            Value::Num(_) => "float",
            Value::Str(_) => "str",
            Value::Bool(_) => "bool",
            Value::None => "NoneType",
            Value::Image(_) => "Image",
        }
    }

    fn display(&self) -> String {
        match self {
            Value::Num(v) if v.fract() == 0.0 && v.abs() < 1e15 => format!("{}", *v as i64),
            Value::Num(v) => format!("{v}"),
            Value::Str(s) => s.clone(),
            Value::Bool(b) => if *b { "True" } else { "False" }.to_string(),
            Value::None => "None".into(),
            Value::Image(i) => format!("<Image #{i}>"),
        }
    }
}

/// Failure raised while executing a segment.
#[derive(Debug)]
enum Fault {
    Raised { kind: String, message: String },
    Timeout,
    Memory(u64),
}

fn raise(kind: &str, message: impl Into<String>) -> Fault {
    Fault::Raised {
        kind: kind.to_string(),
        message: message.into(),
    }
}

struct Machine<'a> {
    scratch: &'a Path,
    bindings: &'a HashMap<String, PathBuf>,
    limits: Limits,
    deadline: Instant,
    vars: HashMap<String, Value>,
    images: Vec<RgbaImage>,
    allocated: u64,
    saved: Vec<PathBuf>,
    stdout: String,
    imported: Vec<String>,
}

/// Executes `code` with the given input bindings inside `scratch`.
pub fn run(
    code: &str,
    scratch: &Path,
    bindings: &HashMap<String, PathBuf>,
    limits: Limits,
) -> RunOutput {
    let started = Instant::now();
    let program = match parse_program(code) {
        Ok(p) => p,
        Err(e) => {
            return RunOutput {
                status: ExecStatus::Error,
                saved: Vec::new(),
                stdout: String::new(),
                trace: format!("  File \"<segment>\", line {}\nSyntaxError: {}", e.line, e.message),
            }
        }
    };
    let mut m = Machine {
        scratch,
        bindings,
        limits,
        deadline: started + limits.timeout,
        vars: HashMap::new(),
        images: Vec::new(),
        allocated: 0,
        saved: Vec::new(),
        stdout: String::new(),
        imported: Vec::new(),
    };
    let source: Vec<&str> = code.lines().collect();
    let result = m.exec_block(&program);
    let (status, trace) = match result {
        Ok(()) => (ExecStatus::Ok, String::new()),
        Err((line, fault)) => {
            let src = source.get(line.wrapping_sub(1)).map(|s| s.trim()).unwrap_or("");
            let head = format!(
                "Traceback (most recent call last):\n  File \"<segment>\", line {line}\n    {src}\n"
            );
            match fault {
                Fault::Raised { kind, message } => {
                    (ExecStatus::Error, format!("{head}{kind}: {message}"))
                }
                Fault::Timeout => (
                    ExecStatus::Timeout,
                    format!(
                        "{head}TimeoutError: wall-clock limit of {} ms exceeded",
                        m.limits.timeout.as_millis()
                    ),
                ),
                Fault::Memory(bytes) => (
                    ExecStatus::Killed,
                    format!(
                        "{head}MemoryError: allocation of {bytes} bytes exceeds the {} byte ceiling",
                        m.limits.memory_bytes
                    ),
                ),
            }
        }
    };
    let saved = if status == ExecStatus::Ok {
        std::mem::take(&mut m.saved)
    } else {
        Vec::new()
    };
    RunOutput {
        status,
        saved,
        stdout: m.stdout,
        trace,
    }
}

type Exec<T> = Result<T, (usize, Fault)>;

impl Machine<'_> {
    fn exec_block(&mut self, block: &[Stmt]) -> Exec<()> {
        for stmt in block {
            self.exec(stmt)?;
        }
        Ok(())
    }

    fn check_deadline(&self, line: usize) -> Exec<()> {
        if Instant::now() >= self.deadline {
            Err((line, Fault::Timeout))
        } else {
            Ok(())
        }
    }

    fn exec(&mut self, stmt: &Stmt) -> Exec<()> {
        let line = stmt.line;
        self.check_deadline(line)?;
        let at = |f: Fault| (line, f);
        match &stmt.kind {
            StmtKind::Pass => Ok(()),
            StmtKind::Import(modules) => {
                for module in modules {
                    let root = module.split('.').next().unwrap_or(module);
                    if NETWORK_MODULES.contains(&module.as_str()) || NETWORK_MODULES.contains(&root)
                    {
                        return Err(at(raise(
                            "PermissionError",
                            format!("network access blocked: import of '{module}' is not permitted"),
                        )));
                    }
                    if !ALLOWED_MODULES.contains(&root) {
                        return Err(at(raise(
                            "ImportError",
                            format!("module '{module}' is not on the sandbox allow-list"),
                        )));
                    }
                    self.imported.push(root.to_string());
                }
                Ok(())
            }
            StmtKind::Assign(name, expr) => {
                let value = self.eval(expr).map_err(at)?;
                self.vars.insert(name.clone(), value);
                Ok(())
            }
            StmtKind::Expr(expr) => {
                self.eval(expr).map_err(at)?;
                Ok(())
            }
            StmtKind::Raise { kind, message } => {
                let message = match message {
                    Some(e) => self.eval(e).map_err(at)?.display(),
                    None => String::new(),
                };
                Err(at(raise(kind, message)))
            }
            StmtKind::Loop(body) => loop {
                self.check_deadline(line)?;
                self.exec_block(body)?;
                std::hint::spin_loop();
            },
        }
    }

    fn eval(&mut self, expr: &Expr) -> Result<Value, Fault> {
        if Instant::now() >= self.deadline {
            return Err(Fault::Timeout);
        }
        Ok(match expr {
            Expr::Num(v) => Value::Num(*v),
            Expr::Str(s) => Value::Str(s.clone()),
            Expr::Bool(b) => Value::Bool(*b),
            Expr::NoneLit => Value::None,
            Expr::Name(n) => match self.vars.get(n) {
                Some(v) => v.clone(),
                None if n == "math.pi" => Value::Num(std::f64::consts::PI),
                None => return Err(raise("NameError", format!("name '{n}' is not defined"))),
            },
            Expr::Neg(e) => Value::Num(-self.num(e)?),
            Expr::Binary(op, a, b) => {
                let (x, y) = (self.num(a)?, self.num(b)?);
                Value::Num(match op {
                    parse::BinOp::Add => x + y,
                    parse::BinOp::Sub => x - y,
                    parse::BinOp::Mul => x * y,
                    parse::BinOp::Div => {
                        if y == 0.0 {
                            return Err(raise("ZeroDivisionError", "division by zero"));
                        }
                        x / y
                    }
                })
            }
            Expr::Call { func, args, kwargs } => {
                let mut pos = Vec::with_capacity(args.len());
                for a in args {
                    pos.push(self.eval(a)?);
                }
                let mut kw = HashMap::new();
                for (k, v) in kwargs {
                    let value = self.eval(v)?;
                    kw.insert(k.as_str(), value);
                }
                self.call(func, pos, kw)?
            }
        })
    }

    fn num(&mut self, expr: &Expr) -> Result<f64, Fault> {
        match self.eval(expr)? {
            Value::Num(v) => Ok(v),
            Value::Bool(b) => Ok(if b { 1.0 } else { 0.0 }),
            other => Err(raise(
                "TypeError",
                format!("expected a number, got {}", other.type_name()),
            )),
        }
    }

    fn call(
        &mut self,
        func: &str,
        args: Vec<Value>,
        kwargs: HashMap<&str, Value>,
    ) -> Result<Value, Fault> {
        let root = func.split('.').next().unwrap_or(func);
        if NETWORK_MODULES.contains(&root) {
            return Err(raise(
                "PermissionError",
                format!("network access blocked: call to {func}() is not permitted"),
            ));
        }
        if matches!(root, "os" | "subprocess" | "shutil" | "sys" | "pathlib") || func == "open" {
            return Err(raise(
                "PermissionError",
                format!("{func}() is not permitted inside the sandbox; use save() to write images"),
            ));
        }
        if matches!(func, "eval" | "exec" | "compile" | "__import__") {
            return Err(raise("PermissionError", format!("{func}() is not permitted")));
        }
        if let Some(method) = func.strip_prefix("math.") {
            if !self.imported.iter().any(|m| m == "math") {
                return Err(raise("NameError", "name 'math' is not defined"));
            }
            return self.math(method, &args);
        }
        // `img.save("out.png")` style calls on image variables.
        if let Some((obj, method)) = func.split_once('.') {
            if let Some(Value::Image(idx)) = self.vars.get(obj).cloned() {
                let mut full = vec![Value::Image(idx)];
                full.extend(args);
                return self.call(method, full, kwargs);
            }
            return Err(raise("NameError", format!("name '{obj}' is not defined")));
        }

        let color = |i: usize, args: &[Value]| -> Result<Rgba<u8>, Fault> {
            match kwargs
                .get("fill")
                .or_else(|| kwargs.get("color"))
                .or_else(|| args.get(i))
            {
                None => Ok(Rgba([0, 0, 0, 255])),
                Some(Value::Str(s)) => parse_color(s),
                Some(other) => Err(raise(
                    "TypeError",
                    format!("color must be a string, got {}", other.type_name()),
                )),
            }
        };
        let width = match kwargs.get("width") {
            Some(Value::Num(w)) => w.round().clamp(1.0, 32.0) as i64,
            _ => 1,
        };

        match func {
            "new_canvas" => {
                let w = arg_num(&args, 0, func)?;
                let h = arg_num(&args, 1, func)?;
                if !(1.0..=16384.0).contains(&w) || !(1.0..=16384.0).contains(&h) {
                    return Err(raise("ValueError", "canvas dimensions must be within 1..=16384"));
                }
                let bg = match args.get(2).or_else(|| kwargs.get("background")) {
                    Some(Value::Str(s)) => parse_color(s)?,
                    _ => Rgba([255, 255, 255, 255]),
                };
                let (w, h) = (w as u32, h as u32);
                self.reserve(u64::from(w) * u64::from(h) * 4)?;
                self.images.push(RgbaImage::from_pixel(w, h, bg));
                Ok(Value::Image(self.images.len() - 1))
            }
            "load" => {
                let name = arg_str(&args, 0, func)?;
                let path = self
                    .bindings
                    .get(&name)
                    .or_else(|| self.bindings.get(name.trim_end_matches(".png")))
                    .cloned()
                    .ok_or_else(|| {
                        raise("FileNotFoundError", format!("no input image bound as '{name}'"))
                    })?;
                let img = image::open(&path)
                    .map_err(|e| raise("OSError", format!("cannot decode '{name}': {e}")))?
                    .to_rgba8();
                self.reserve(u64::from(img.width()) * u64::from(img.height()) * 4)?;
                self.images.push(img);
                Ok(Value::Image(self.images.len() - 1))
            }
            "copy" => {
                let idx = self.image_arg(&args, 0, func)?;
                let img = self.images[idx].clone();
                self.reserve(u64::from(img.width()) * u64::from(img.height()) * 4)?;
                self.images.push(img);
                Ok(Value::Image(self.images.len() - 1))
            }
            "line" | "arrow" => {
                let idx = self.image_arg(&args, 0, func)?;
                let p: Vec<f64> = (1..5).map(|i| arg_num(&args, i, func)).collect::<Result<_, _>>()?;
                let c = color(5, &args)?;
                let img = &mut self.images[idx];
                draw_line(img, p[0], p[1], p[2], p[3], width, c);
                if func == "arrow" {
                    draw_arrow_head(img, p[0], p[1], p[2], p[3], width, c);
                }
                Ok(Value::None)
            }
            "circle" => {
                let idx = self.image_arg(&args, 0, func)?;
                let (cx, cy, r) = (arg_num(&args, 1, func)?, arg_num(&args, 2, func)?, arg_num(&args, 3, func)?);
                if r < 0.0 {
                    return Err(raise("ValueError", "radius must be non-negative"));
                }
                let c = color(4, &args)?;
                draw_circle(&mut self.images[idx], cx, cy, r, width, c);
                Ok(Value::None)
            }
            "point" => {
                let idx = self.image_arg(&args, 0, func)?;
                let (x, y) = (arg_num(&args, 1, func)?, arg_num(&args, 2, func)?);
                let c = color(3, &args)?;
                fill_disc(&mut self.images[idx], x, y, 3.0, c);
                Ok(Value::None)
            }
            "rect" => {
                let idx = self.image_arg(&args, 0, func)?;
                let p: Vec<f64> = (1..5).map(|i| arg_num(&args, i, func)).collect::<Result<_, _>>()?;
                let c = color(5, &args)?;
                let (x, y, w, h) = (p[0], p[1], p[2], p[3]);
                let img = &mut self.images[idx];
                draw_line(img, x, y, x + w, y, width, c);
                draw_line(img, x + w, y, x + w, y + h, width, c);
                draw_line(img, x + w, y + h, x, y + h, width, c);
                draw_line(img, x, y + h, x, y, width, c);
                Ok(Value::None)
            }
            "text" => {
                let idx = self.image_arg(&args, 0, func)?;
                let (x, y) = (arg_num(&args, 1, func)?, arg_num(&args, 2, func)?);
                let s = match args.get(3) {
                    Some(v) => v.display(),
                    None => return Err(raise("TypeError", "text() missing the text argument")),
                };
                let c = color(4, &args)?;
                draw_text(&mut self.images[idx], x, y, &s, c);
                Ok(Value::None)
            }
            "save" => {
                let idx = self.image_arg(&args, 0, func)?;
                let name = arg_str(&args, 1, func)?;
                let path = self.scratch_path(&name)?;
                let bytes = crate::datamodel::encode_png(&self.images[idx])
                    .map_err(|e| raise("OSError", e.to_string()))?;
                std::fs::write(&path, bytes).map_err(|e| raise("OSError", e.to_string()))?;
                if !self.saved.contains(&path) {
                    self.saved.push(path);
                }
                Ok(Value::None)
            }
            "print" => {
                let parts: Vec<String> = args.iter().map(Value::display).collect();
                self.stdout.push_str(&parts.join(" "));
                self.stdout.push('\n');
                Ok(Value::None)
            }
            "str" => Ok(Value::Str(args.first().map(Value::display).unwrap_or_default())),
            "int" => Ok(Value::Num(arg_num(&args, 0, func)?.trunc())),
            "float" => Ok(Value::Num(arg_num(&args, 0, func)?)),
            "round" => Ok(Value::Num(arg_num(&args, 0, func)?.round())),
            "abs" => Ok(Value::Num(arg_num(&args, 0, func)?.abs())),
            "min" | "max" => {
                let nums: Vec<f64> = (0..args.len()).map(|i| arg_num(&args, i, func)).collect::<Result<_, _>>()?;
                let folded = if func == "min" {
                    nums.iter().copied().fold(f64::INFINITY, f64::min)
                } else {
                    nums.iter().copied().fold(f64::NEG_INFINITY, f64::max)
                };
                if nums.is_empty() {
                    return Err(raise("ValueError", format!("{func}() arg is an empty sequence")));
                }
                Ok(Value::Num(folded))
            }
            "width" | "height" => {
                let idx = self.image_arg(&args, 0, func)?;
                let img = &self.images[idx];
                Ok(Value::Num(f64::from(if func == "width" { img.width() } else { img.height() })))
            }
            other => Err(raise("NameError", format!("name '{other}' is not defined"))),
        }
    }

    fn math(&self, method: &str, args: &[Value]) -> Result<Value, Fault> {
        let f = |i| arg_num(args, i, method);
        Ok(Value::Num(match method {
            "sqrt" => {
                let x = f(0)?;
                if x < 0.0 {
                    return Err(raise("ValueError", "math domain error"));
                }
                x.sqrt()
            }
            "sin" => f(0)?.sin(),
            "cos" => f(0)?.cos(),
            "tan" => f(0)?.tan(),
            "atan2" => f(0)?.atan2(f(1)?),
            "radians" => f(0)?.to_radians(),
            "degrees" => f(0)?.to_degrees(),
            "hypot" => f(0)?.hypot(f(1)?),
            "floor" => f(0)?.floor(),
            "ceil" => f(0)?.ceil(),
            other => {
                return Err(raise(
                    "AttributeError",
                    format!("module 'math' has no attribute '{other}'"),
                ))
            }
        }))
    }

    fn reserve(&mut self, bytes: u64) -> Result<(), Fault> {
        self.allocated = self.allocated.saturating_add(bytes);
        if self.allocated > self.limits.memory_bytes {
            return Err(Fault::Memory(self.allocated));
        }
        Ok(())
    }

    fn image_arg(&self, args: &[Value], i: usize, func: &str) -> Result<usize, Fault> {
        match args.get(i) {
            Some(Value::Image(idx)) => Ok(*idx),
            Some(other) => Err(raise(
                "TypeError",
                format!("{func}() expects an Image, got {}", other.type_name()),
            )),
            None => Err(raise("TypeError", format!("{func}() missing an image argument"))),
        }
    }

    fn scratch_path(&self, name: &str) -> Result<PathBuf, Fault> {
        let plain = !name.is_empty()
            && !name.starts_with('.')
            && !name.contains(['/', '\\', '\0'])
            && name.len() <= 128;
        if !plain {
            return Err(raise(
                "PermissionError",
                format!("path '{name}' escapes the scratch directory"),
            ));
        }
        if !name.to_ascii_lowercase().ends_with(".png") {
            return Err(raise("ValueError", format!("only .png outputs are captured, got '{name}'")));
        }
        Ok(self.scratch.join(name))
    }
}

fn arg_num(args: &[Value], i: usize, func: &str) -> Result<f64, Fault> {
    match args.get(i) {
        Some(Value::Num(v)) if v.is_finite() => Ok(*v),
        Some(Value::Num(_)) => Err(raise("ValueError", format!("{func}() argument {i} is not finite"))),
        Some(Value::Bool(b)) => Ok(if *b { 1.0 } else { 0.0 }),
        Some(other) => Err(raise(
            "TypeError",
            format!("{func}() argument {i} must be a number, got {}", other.type_name()),
        )),
        None => Err(raise("TypeError", format!("{func}() missing argument {i}"))),
    }
}

fn arg_str(args: &[Value], i: usize, func: &str) -> Result<String, Fault> {
    match args.get(i) {
        Some(Value::Str(s)) => Ok(s.clone()),
        Some(other) => Err(raise(
            "TypeError",
            format!("{func}() argument {i} must be a string, got {}", other.type_name()),
        )),
        None => Err(raise("TypeError", format!("{func}() missing argument {i}"))),
    }
}

fn parse_color(s: &str) -> Result<Rgba<u8>, Fault> {
    let named = match s.to_ascii_lowercase().as_str() {
        "black" => Some([0, 0, 0]),
        "white" => Some([255, 255, 255]),
        "red" => Some([220, 30, 30]),
        "green" => Some([30, 160, 60]),
        "blue" => Some([30, 80, 220]),
        "orange" => Some([240, 140, 20]),
        "purple" => Some([140, 60, 180]),
        "gray" | "grey" => Some([128, 128, 128]),
        _ => None,
    };
    if let Some([r, g, b]) = named {
        return Ok(Rgba([r, g, b, 255]));
    }
    let hex = s.strip_prefix('#').filter(|h| h.len() == 6 && h.is_ascii());
    if let Some(hex) = hex {
        let channel = |i: usize| u8::from_str_radix(&hex[i..i + 2], 16);
        if let (Ok(r), Ok(g), Ok(b)) = (channel(0), channel(2), channel(4)) {
            return Ok(Rgba([r, g, b, 255]));
        }
    }
    Err(raise("ValueError", format!("unknown color '{s}'")))
}

fn plot(img: &mut RgbaImage, x: i64, y: i64, c: Rgba<u8>) {
    if x >= 0 && y >= 0 && (x as u64) < u64::from(img.width()) && (y as u64) < u64::from(img.height()) {
        img.put_pixel(x as u32, y as u32, c);
    }
}

fn stamp(img: &mut RgbaImage, x: i64, y: i64, width: i64, c: Rgba<u8>) {
    let lo = -(width - 1) / 2;
    let hi = width / 2;
    for dy in lo..=hi {
        for dx in lo..=hi {
            plot(img, x + dx, y + dy, c);
        }
    }
}

/// Bresenham segment between rounded endpoints.
fn draw_line(img: &mut RgbaImage, x0: f64, y0: f64, x1: f64, y1: f64, width: i64, c: Rgba<u8>) {
    let clamp = |v: f64| v.round().clamp(-1.0e6, 1.0e6) as i64;
    let (mut x, mut y, x1, y1) = (clamp(x0), clamp(y0), clamp(x1), clamp(y1));
    let dx = (x1 - x).abs();
    let dy = -(y1 - y).abs();
    let sx = if x < x1 { 1 } else { -1 };
    let sy = if y < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    let mut guard = 0u64;
    loop {
        stamp(img, x, y, width, c);
        if x == x1 && y == y1 {
            break;
        }
        guard += 1;
        if guard > 4_000_000 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

fn draw_arrow_head(img: &mut RgbaImage, x0: f64, y0: f64, x1: f64, y1: f64, width: i64, c: Rgba<u8>) {
    let angle = (y1 - y0).atan2(x1 - x0);
    for side in [-1.0f64, 1.0] {
        let a = angle + std::f64::consts::PI + side * 0.5;
        draw_line(img, x1, y1, x1 + 10.0 * a.cos(), y1 + 10.0 * a.sin(), width, c);
    }
}

/// Midpoint circle outline.
fn draw_circle(img: &mut RgbaImage, cx: f64, cy: f64, r: f64, width: i64, c: Rgba<u8>) {
    let (cx, cy) = (cx.round() as i64, cy.round() as i64);
    let r = r.round().min(100_000.0) as i64;
    let mut x = r;
    let mut y = 0i64;
    let mut err = 1 - r;
    while x >= y {
        for (px, py) in [
            (x, y), (y, x), (-y, x), (-x, y), (-x, -y), (-y, -x), (y, -x), (x, -y),
        ] {
            stamp(img, cx + px, cy + py, width, c);
        }
        y += 1;
        if err < 0 {
            err += 2 * y + 1;
        } else {
            x -= 1;
            err += 2 * (y - x) + 1;
        }
    }
}

fn fill_disc(img: &mut RgbaImage, cx: f64, cy: f64, r: f64, c: Rgba<u8>) {
    let (cx, cy) = (cx.round() as i64, cy.round() as i64);
    let r = r as i64;
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r * r {
                plot(img, cx + dx, cy + dy, c);
            }
        }
    }
}

fn draw_text(img: &mut RgbaImage, x: f64, y: f64, s: &str, c: Rgba<u8>) {
    let (mut ox, oy) = (x.round() as i64, y.round() as i64);
    for ch in s.chars().take(256) {
        if let Some(rows) = font::glyph(ch) {
            for (row, bits) in rows.iter().enumerate() {
                for col in 0..5 {
                    if bits & (0x10 >> col) != 0 {
                        plot(img, ox + col, oy + row as i64, c);
                    }
                }
            }
        }
        ox += 6;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn exec(code: &str) -> (RunOutput, tempfile::TempDir) {
        let dir = tempfile::tempdir().unwrap();
        let out = run(code, dir.path(), &HashMap::new(), Limits::default());
        (out, dir)
    }

    #[test]
    fn draws_and_saves() {
        let (out, _dir) = exec(
            "img = new_canvas(64, 48)\nline(img, 0, 0, 63, 47, \"red\")\ntext(img, 2, 2, \"A\")\nsave(img, \"out.png\")",
        );
        assert_eq!(out.status, ExecStatus::Ok, "{}", out.trace);
        assert_eq!(out.saved.len(), 1);
        let img = image::open(&out.saved[0]).unwrap().to_rgba8();
        assert_eq!(img.dimensions(), (64, 48));
        assert_eq!(img.get_pixel(0, 0), &Rgba([220, 30, 30, 255]));
        assert_eq!(img.get_pixel(63, 47), &Rgba([220, 30, 30, 255]));
    }

    #[test]
    fn exception_produces_trace() {
        let (out, _dir) = exec("x = 1\nraise ValueError(\"bad figure\")");
        assert_eq!(out.status, ExecStatus::Error);
        assert!(out.trace.contains("ValueError: bad figure"));
        assert!(out.trace.contains("line 2"));
        assert!(out.saved.is_empty());
    }

    #[test]
    fn spin_loop_times_out() {
        let dir = tempfile::tempdir().unwrap();
        let limits = Limits {
            timeout: Duration::from_millis(100),
            ..Limits::default()
        };
        let started = Instant::now();
        let out = run("while True: pass", dir.path(), &HashMap::new(), limits);
        assert_eq!(out.status, ExecStatus::Timeout);
        assert!(started.elapsed() < Duration::from_millis(200));
    }

    #[test]
    fn memory_ceiling_kills() {
        let dir = tempfile::tempdir().unwrap();
        let limits = Limits {
            memory_bytes: 1024 * 1024,
            ..Limits::default()
        };
        let out = run(
            "a = new_canvas(1000, 1000)",
            dir.path(),
            &HashMap::new(),
            limits,
        );
        assert_eq!(out.status, ExecStatus::Killed);
    }

    #[test]
    fn network_and_escape_are_refused() {
        let (out, _d) = exec("import socket\ns = socket.socket()");
        assert_eq!(out.status, ExecStatus::Error);
        assert!(out.trace.contains("network access blocked"));

        let (out, dir) = exec("img = new_canvas(4, 4)\nsave(img, \"../escape.png\")");
        assert_eq!(out.status, ExecStatus::Error);
        assert!(out.trace.contains("escapes the scratch directory"));
        assert!(!dir.path().parent().unwrap().join("escape.png").exists());

        let (out, _d) = exec("f = open(\"/tmp/x\", \"w\")");
        assert_eq!(out.status, ExecStatus::Error);
    }

    #[test]
    fn method_style_save_and_arithmetic() {
        let (out, _d) = exec(
            "import math\nimg = new_canvas(10, 10)\nr = math.sqrt(16) + 1\ncircle(img, 5, 5, r - 2, \"blue\")\nimg.save(\"a.png\")\nprint(\"r\", r)",
        );
        assert_eq!(out.status, ExecStatus::Ok, "{}", out.trace);
        assert_eq!(out.stdout, "r 5\n");
        assert_eq!(out.saved.len(), 1);
    }
}
