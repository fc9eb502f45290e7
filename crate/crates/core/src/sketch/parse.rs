//! Parser for the drawing-segment subset understood by the stub worker.
//!
//! The subset is line-oriented Python: imports, assignments, calls, `raise`,
//! `pass` and `while True:` loops. Anything else is a syntax error.

use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Str(String),
    Bool(bool),
    NoneLit,
    Name(String),
    Call {
        func: String,
        args: Vec<Expr>,
        kwargs: Vec<(String, Expr)>,
    },
    Binary(BinOp, Box<Expr>, Box<Expr>),
    Neg(Box<Expr>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StmtKind {
    Import(Vec<String>),
    Assign(String, Expr),
    Expr(Expr),
    Raise { kind: String, message: Option<Expr> },
    Pass,
    Loop(Vec<Stmt>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stmt {
    /// 1-based source line.
    pub line: usize,
    pub kind: StmtKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntaxError {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for SyntaxError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

impl std::error::Error for SyntaxError {}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Name(String),
    Num(f64),
    Str(String),
    Op(char),
    Eq,
    EqEq,
}

fn tokenize(src: &str, line: usize) -> Result<Vec<Tok>, SyntaxError> {
    let err = |message: String| SyntaxError { line, message };
    let chars: Vec<char> = src.chars().collect();
    let mut i = 0;
    let mut out = Vec::new();
    while i < chars.len() {
        let c = chars[i];
        match c {
            ' ' | '\t' => i += 1,
            '#' => break,
            '"' | '\'' => {
                let quote = c;
                let mut s = String::new();
                i += 1;
                loop {
                    match chars.get(i) {
                        None => return Err(err("unterminated string literal".into())),
                        Some(&ch) if ch == quote => {
                            i += 1;
                            break;
                        }
                        Some('\\') => {
                            let esc = chars
                                .get(i + 1)
                                .ok_or_else(|| err("unterminated string literal".into()))?;
                            s.push(match esc {
                                'n' => '\n',
                                't' => '\t',
                                other => *other,
                            });
                            i += 2;
                        }
                        Some(&ch) => {
                            s.push(ch);
                            i += 1;
                        }
                    }
                }
                out.push(Tok::Str(s));
            }
            '0'..='9' | '.' if c != '.' || chars.get(i + 1).is_some_and(|d| d.is_ascii_digit()) => {
                let start = i;
                while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.' || chars[i] == '_')
                {
                    i += 1;
                }
                let text: String = chars[start..i].iter().filter(|&&c| c != '_').collect();
                let value = text
                    .parse::<f64>()
                    .map_err(|_| err(format!("invalid number literal {text:?}")))?;
                out.push(Tok::Num(value));
            }
            c if c.is_alphabetic() || c == '_' => {
                let start = i;
                while i < chars.len()
                    && (chars[i].is_alphanumeric() || chars[i] == '_' || chars[i] == '.')
                {
                    i += 1;
                }
                let name: String = chars[start..i].iter().collect();
                if name.ends_with('.') || name.contains("..") {
                    return Err(err(format!("invalid name {name:?}")));
                }
                out.push(Tok::Name(name));
            }
            '=' => {
                if chars.get(i + 1) == Some(&'=') {
                    out.push(Tok::EqEq);
                    i += 2;
                } else {
                    out.push(Tok::Eq);
                    i += 1;
                }
            }
            '(' | ')' | ',' | '+' | '-' | '*' | '/' | ':' => {
                out.push(Tok::Op(c));
                i += 1;
            }
            other => return Err(err(format!("unexpected character {other:?}"))),
        }
    }
    Ok(out)
}

struct ExprParser<'a> {
    toks: &'a [Tok],
    pos: usize,
    line: usize,
}

impl<'a> ExprParser<'a> {
    fn err<T>(&self, message: impl Into<String>) -> Result<T, SyntaxError> {
        Err(SyntaxError {
            line: self.line,
            message: message.into(),
        })
    }

    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos)
    }

    fn eat_op(&mut self, op: char) -> bool {
        if self.peek() == Some(&Tok::Op(op)) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expr(&mut self, depth: usize) -> Result<Expr, SyntaxError> {
        if depth > 64 {
            return self.err("expression nested too deeply");
        }
        let mut lhs = self.term(depth)?;
        loop {
            let op = match self.peek() {
                Some(Tok::Op('+')) => BinOp::Add,
                Some(Tok::Op('-')) => BinOp::Sub,
                _ => return Ok(lhs),
            };
            self.pos += 1;
            let rhs = self.term(depth)?;
            lhs = Expr::Binary(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn term(&mut self, depth: usize) -> Result<Expr, SyntaxError> {
        let mut lhs = self.unary(depth)?;
        loop {
            let op = match self.peek() {
                Some(Tok::Op('*')) => BinOp::Mul,
                Some(Tok::Op('/')) => BinOp::Div,
                _ => return Ok(lhs),
            };
            self.pos += 1;
            let rhs = self.unary(depth)?;
            lhs = Expr::Binary(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn unary(&mut self, depth: usize) -> Result<Expr, SyntaxError> {
        if depth > 64 {
            return self.err("expression nested too deeply");
        }
        if self.eat_op('-') {
            return Ok(Expr::Neg(Box::new(self.unary(depth + 1)?)));
        }
        if self.eat_op('+') {
            return self.unary(depth + 1);
        }
        self.primary(depth)
    }

    fn primary(&mut self, depth: usize) -> Result<Expr, SyntaxError> {
        let tok = match self.peek() {
            Some(t) => t.clone(),
            None => return self.err("unexpected end of line"),
        };
        self.pos += 1;
        match tok {
            Tok::Num(v) => Ok(Expr::Num(v)),
            Tok::Str(s) => Ok(Expr::Str(s)),
            Tok::Name(n) => match n.as_str() {
                "True" => Ok(Expr::Bool(true)),
                "False" => Ok(Expr::Bool(false)),
                "None" => Ok(Expr::NoneLit),
                _ if self.eat_op('(') => self.call(n, depth),
                _ => Ok(Expr::Name(n)),
            },
            Tok::Op('(') => {
                let e = self.expr(depth + 1)?;
                if !self.eat_op(')') {
                    return self.err("expected ')'");
                }
                Ok(e)
            }
            other => self.err(format!("unexpected token {other:?}")),
        }
    }

    fn call(&mut self, func: String, depth: usize) -> Result<Expr, SyntaxError> {
        let mut args = Vec::new();
        let mut kwargs = Vec::new();
        if self.eat_op(')') {
            return Ok(Expr::Call { func, args, kwargs });
        }
        loop {
            let is_kw = matches!(
                (self.toks.get(self.pos), self.toks.get(self.pos + 1)),
                (Some(Tok::Name(_)), Some(Tok::Eq))
            );
            if is_kw {
                let Some(Tok::Name(key)) = self.peek().cloned() else {
                    unreachable!()
                };
                self.pos += 2;
                kwargs.push((key, self.expr(depth + 1)?));
            } else {
                if !kwargs.is_empty() {
                    return self.err("positional argument follows keyword argument");
                }
                args.push(self.expr(depth + 1)?);
            }
            if self.eat_op(')') {
                return Ok(Expr::Call { func, args, kwargs });
            }
            if !self.eat_op(',') {
                return self.err("expected ',' or ')'");
            }
            if self.eat_op(')') {
                return Ok(Expr::Call { func, args, kwargs });
            }
        }
    }
}

fn parse_expr_tokens(toks: &[Tok], line: usize) -> Result<Expr, SyntaxError> {
    let mut p = ExprParser { toks, pos: 0, line };
    let e = p.expr(0)?;
    if p.pos != toks.len() {
        return p.err("unexpected trailing tokens");
    }
    Ok(e)
}

fn indent_of(line: &str) -> usize {
    line.chars()
        .take_while(|c| *c == ' ' || *c == '\t')
        .map(|c| if c == '\t' { 4 } else { 1 })
        .sum()
}

fn parse_simple(text: &str, line: usize) -> Result<StmtKind, SyntaxError> {
    let err = |message: &str| SyntaxError {
        line,
        message: message.to_string(),
    };
    let toks = tokenize(text, line)?;
    match toks.as_slice() {
        [] => Ok(StmtKind::Pass),
        [Tok::Name(kw)] if kw == "pass" => Ok(StmtKind::Pass),
        [Tok::Name(kw), rest @ ..] if kw == "import" => {
            let mut modules = Vec::new();
            for (i, t) in rest.iter().enumerate() {
                match (i % 2, t) {
                    (0, Tok::Name(m)) => modules.push(m.clone()),
                    (1, Tok::Op(',')) => {}
                    _ => return Err(err("malformed import")),
                }
            }
            if modules.is_empty() || rest.len() % 2 == 0 {
                return Err(err("malformed import"));
            }
            Ok(StmtKind::Import(modules))
        }
        [Tok::Name(kw), Tok::Name(module), Tok::Name(imp), ..] if kw == "from" && imp == "import" => {
            Ok(StmtKind::Import(vec![module.clone()]))
        }
        [Tok::Name(kw), rest @ ..] if kw == "raise" => match rest {
            [] => Ok(StmtKind::Raise {
                kind: "RuntimeError".into(),
                message: None,
            }),
            [Tok::Name(kind)] => Ok(StmtKind::Raise {
                kind: kind.clone(),
                message: None,
            }),
            [Tok::Name(kind), Tok::Op('('), inner @ .., Tok::Op(')')] => Ok(StmtKind::Raise {
                kind: kind.clone(),
                message: if inner.is_empty() {
                    None
                } else {
                    Some(parse_expr_tokens(inner, line)?)
                },
            }),
            _ => Err(err("malformed raise")),
        },
        [Tok::Name(kw), ..]
            if matches!(
                kw.as_str(),
                "def" | "class" | "if" | "elif" | "else" | "for" | "with" | "try" | "except"
                    | "finally" | "return" | "lambda" | "global" | "del" | "yield"
            ) =>
        {
            Err(SyntaxError {
                line,
                message: format!("statement '{kw}' is not supported in drawing segments"),
            })
        }
        [Tok::Name(name), Tok::Eq, rest @ ..] if !name.contains('.') => {
            Ok(StmtKind::Assign(name.clone(), parse_expr_tokens(rest, line)?))
        }
        _ => Ok(StmtKind::Expr(parse_expr_tokens(&toks, line)?)),
    }
}

fn is_while_true(text: &str) -> Option<&str> {
    let rest = text.strip_prefix("while")?;
    let rest = rest.trim_start();
    let rest = rest
        .strip_prefix("True")
        .or_else(|| rest.strip_prefix("1"))?
        .trim_start();
    rest.strip_prefix(':').map(str::trim)
}

/// Parses a whole segment.
pub fn parse_program(src: &str) -> Result<Vec<Stmt>, SyntaxError> {
    let lines: Vec<(usize, usize, &str)> = src
        .lines()
        .enumerate()
        .filter_map(|(i, raw)| {
            let body = raw.trim();
            if body.is_empty() || body.starts_with('#') {
                None
            } else {
                Some((i + 1, indent_of(raw), body))
            }
        })
        .collect();
    let mut pos = 0;
    let stmts = parse_block(&lines, &mut pos, 0, 0)?;
    Ok(stmts)
}

fn parse_block(
    lines: &[(usize, usize, &str)],
    pos: &mut usize,
    indent: usize,
    depth: usize,
) -> Result<Vec<Stmt>, SyntaxError> {
    let mut out = Vec::new();
    while let Some(&(line, ind, text)) = lines.get(*pos) {
        if ind < indent {
            break;
        }
        if ind > indent {
            return Err(SyntaxError {
                line,
                message: "unexpected indent".into(),
            });
        }
        *pos += 1;
        if let Some(inline) = is_while_true(text) {
            if depth > 16 {
                return Err(SyntaxError {
                    line,
                    message: "loops nested too deeply".into(),
                });
            }
            let body = if inline.is_empty() {
                let child_indent = match lines.get(*pos) {
                    Some(&(_, ci, _)) if ci > indent => ci,
                    _ => {
                        return Err(SyntaxError {
                            line,
                            message: "expected an indented block".into(),
                        })
                    }
                };
                parse_block(lines, pos, child_indent, depth + 1)?
            } else {
                vec![Stmt {
                    line,
                    kind: parse_simple(inline, line)?,
                }]
            };
            out.push(Stmt {
                line,
                kind: StmtKind::Loop(body),
            });
        } else if text.starts_with("while") {
            return Err(SyntaxError {
                line,
                message: "only 'while True:' loops are supported".into(),
            });
        } else {
            out.push(Stmt {
                line,
                kind: parse_simple(text, line)?,
            });
        }
    }
    Ok(out)
}
