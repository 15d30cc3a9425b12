use std::collections::HashSet;
use std::fmt;

use thiserror::Error;

use super::{Activation, ArchGraph, Dim, LayerKind, LayerSpec, PoolTechnique};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseErrorKind {
    #[error("unknown layer kind '{0}'")]
    UnknownKind(String),
    #[error("malformed attribute: {0}")]
    MalformedAttribute(String),
    #[error("unknown pooling technique '{0}'")]
    UnknownPoolingTechnique(String),
    #[error("duplicate label '{0}'")]
    DuplicateLabel(String),
    #[error("unresolved reference '{0}'")]
    UnresolvedReference(String),
    #[error("{0}")]
    Syntax(String),
}

/// First error found, with a 1-based position.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub struct ParseError {
    pub kind: ParseErrorKind,
    pub line: usize,
    pub column: usize,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "line {}, column {}: {}",
            self.line, self.column, self.kind
        )
    }
}

struct Source<'a> {
    text: &'a str,
}

impl Source<'_> {
    fn error(&self, offset: usize, kind: ParseErrorKind) -> ParseError {
        let before = &self.text[..offset.min(self.text.len())];
        let line = before.matches('\n').count() + 1;
        let line_start = before.rfind('\n').map_or(0, |i| i + 1);
        ParseError {
            kind,
            line,
            column: before[line_start..].chars().count() + 1,
        }
    }
}

/// A slice of the input remembering where it starts.
#[derive(Clone, Copy)]
struct Span<'a> {
    text: &'a str,
    offset: usize,
}

impl<'a> Span<'a> {
    fn trim(self) -> Self {
        let lead = self.text.len() - self.text.trim_start().len();
        Span {
            text: self.text.trim(),
            offset: self.offset + lead,
        }
    }

    fn split_at(self, i: usize, skip: usize) -> (Self, Self) {
        (
            Span {
                text: &self.text[..i],
                offset: self.offset,
            },
            Span {
                text: &self.text[i + skip..],
                offset: self.offset + i + skip,
            },
        )
    }

    fn fields(self) -> Vec<Span<'a>> {
        let mut out = Vec::new();
        let mut start = 0;
        for (i, c) in self.text.char_indices() {
            if c == ':' {
                out.push(self.split_at(i, 1).0.slice(start));
                start = i + 1;
            }
        }
        out.push(self.slice(start));
        out.into_iter().map(Span::trim).collect()
    }

    fn slice(self, start: usize) -> Self {
        Span {
            text: &self.text[start..],
            offset: self.offset + start,
        }
    }
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    chars
        .next()
        .is_some_and(|c| c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

type Result<T> = std::result::Result<T, ParseError>;

struct Parser<'a> {
    src: Source<'a>,
}

impl<'a> Parser<'a> {
    fn malformed(&self, at: Span<'_>, message: impl Into<String>) -> ParseError {
        self.src.error(
            at.offset,
            ParseErrorKind::MalformedAttribute(message.into()),
        )
    }

    fn positive(&self, at: Span<'_>, what: &str) -> Result<usize> {
        match at.text.parse::<usize>() {
            Ok(v) if v > 0 => Ok(v),
            _ => Err(self.malformed(
                at,
                format!("{what} must be a positive integer, got '{}'", at.text),
            )),
        }
    }

    fn dim(&self, at: Span<'_>, what: &str) -> Result<Dim> {
        if is_ident(at.text) {
            Ok(Dim::Sym(at.text.to_string()))
        } else {
            self.positive(at, what).map(Dim::Lit)
        }
    }

    fn activations(&self, at: Option<&Span<'_>>) -> Result<Vec<Activation>> {
        let Some(at) = at else {
            return Ok(Vec::new());
        };
        let mut acts = Vec::new();
        for c in at.text.chars() {
            let a = match c {
                'b' => Activation::BatchNorm,
                'r' => Activation::Relu,
                _ => return Err(self.malformed(*at, format!("unknown activation '{c}'"))),
            };
            if acts.contains(&a) {
                return Err(self.malformed(*at, format!("repeated activation '{c}'")));
            }
            acts.push(a);
        }
        Ok(acts)
    }

    fn arity(&self, fields: &[Span<'_>], min: usize, max: usize, kind: &str) -> Result<()> {
        if fields.len() < min || fields.len() > max {
            let at = fields.get(max).copied().unwrap_or(fields[0]);
            return Err(self.malformed(
                at,
                format!(
                    "{kind} takes {} to {} fields, got {}",
                    min - 1,
                    max - 1,
                    fields.len() - 1
                ),
            ));
        }
        Ok(())
    }

    fn input(&self, fields: &[Span<'_>]) -> Result<LayerKind> {
        self.arity(fields, 3, 4, "in")?;
        let axes = fields[1];
        if axes.text.is_empty() || !axes.text.chars().all(|c| c.is_ascii_lowercase()) {
            return Err(self.malformed(axes, format!("bad signal axes '{}'", axes.text)));
        }
        let features = if fields.len() == 4 && !fields[2].text.is_empty() {
            Some(self.positive(fields[2], "feature count")?)
        } else {
            None
        };
        let tail = fields[fields.len() - 1];
        let (name, extent) = match tail.text.find('(') {
            Some(i) => {
                let (name, rest) = tail.split_at(i, 1);
                let Some(inner) = rest.text.strip_suffix(')') else {
                    return Err(self.malformed(tail, "missing ')' after input extent"));
                };
                let inner = Span {
                    text: inner,
                    offset: rest.offset,
                }
                .trim();
                (name.trim(), Some(self.positive(inner, "input extent")?))
            }
            None => (tail, None),
        };
        if !is_ident(name.text) {
            return Err(self.malformed(name, format!("bad input name '{}'", name.text)));
        }
        Ok(LayerKind::Input {
            axes: axes.text.to_string(),
            features,
            name: name.text.to_string(),
            extent,
        })
    }

    fn conv(&self, fields: &[Span<'_>]) -> Result<LayerKind> {
        self.arity(fields, 2, 4, "conv")?;
        let spec = fields[1];
        let Some(x) = spec.text.find('x') else {
            return Err(self.malformed(spec, format!("expected KxC, got '{}'", spec.text)));
        };
        let (k, c) = spec.split_at(x, 1);
        let kernel = self.positive(k.trim(), "kernel size")?;
        let count = self.dim(c.trim(), "kernel count")?;
        let padded = match fields.get(2).map(|f| f.text) {
            None | Some("") => false,
            Some("p") => true,
            Some(o) => return Err(self.malformed(fields[2], format!("unknown conv option '{o}'"))),
        };
        Ok(LayerKind::Conv {
            kernel,
            count,
            padded,
            activations: self.activations(fields.get(3))?,
        })
    }

    fn pool(&self, fields: &[Span<'_>]) -> Result<LayerKind> {
        self.arity(fields, 3, 3, "pool")?;
        let size = self.positive(fields[1], "pool size")?;
        let technique = match fields[2].text {
            "m" => PoolTechnique::Max,
            "" => return Err(self.malformed(fields[2], "missing pooling technique")),
            other => {
                return Err(self.src.error(
                    fields[2].offset,
                    ParseErrorKind::UnknownPoolingTechnique(other.to_string()),
                ))
            }
        };
        Ok(LayerKind::Pool { size, technique })
    }

    fn dropout(&self, fields: &[Span<'_>]) -> Result<LayerKind> {
        self.arity(fields, 2, 2, "drop")?;
        match fields[1].text.parse::<f64>() {
            Ok(p) if p > 0.0 && p < 100.0 => Ok(LayerKind::Dropout { percent: p }),
            _ => Err(self.malformed(
                fields[1],
                format!(
                    "dropout percent must lie in (0, 100), got '{}'",
                    fields[1].text
                ),
            )),
        }
    }

    fn dense(&self, fields: &[Span<'_>]) -> Result<LayerKind> {
        self.arity(fields, 2, 4, "dense")?;
        let count = self.dim(fields[1], "feature count")?;
        if let Some(o) = fields.get(2).filter(|o| !o.text.is_empty()) {
            return Err(self.malformed(*o, format!("unknown dense option '{}'", o.text)));
        }
        Ok(LayerKind::Dense {
            count,
            activations: self.activations(fields.get(3))?,
        })
    }

    fn clause(&self, body: Span<'_>) -> Result<LayerKind> {
        if let Some(label) = body.text.strip_prefix("<-") {
            let label = Span {
                text: label,
                offset: body.offset + 2,
            }
            .trim();
            if !is_ident(label.text) {
                return Err(self.malformed(label, format!("bad label '{}'", label.text)));
            }
            return Ok(LayerKind::LabelRef {
                label: label.text.to_string(),
            });
        }
        if let Some(rest) = body.text.strip_prefix("centers") {
            if rest.trim_start().starts_with('(') || rest.is_empty() {
                let inner = rest
                    .trim()
                    .strip_prefix('(')
                    .and_then(|r| r.strip_suffix(')'))
                    .map(str::trim);
                return match inner {
                    Some(p) if is_ident(p) => Ok(LayerKind::Centers {
                        param: p.to_string(),
                    }),
                    _ => Err(self.malformed(body, "expected centers(NAME)")),
                };
            }
        }
        let fields = body.fields();
        match fields[0].text {
            "in" => self.input(&fields),
            "conv" => self.conv(&fields),
            "pool" => self.pool(&fields),
            "drop" => self.dropout(&fields),
            "dense" => self.dense(&fields),
            "norm" => {
                self.arity(&fields, 1, 1, "norm")?;
                Ok(LayerKind::Normalize)
            }
            other => Err(self.src.error(
                fields[0].offset,
                ParseErrorKind::UnknownKind(other.to_string()),
            )),
        }
    }
}

/// Parses architecture text into a graph, stopping at the first error.
pub fn parse(text: &str) -> std::result::Result<ArchGraph, ParseError> {
    // blank out comments so offsets keep pointing into `text`
    let mut clean = String::with_capacity(text.len());
    let mut in_comment = false;
    for c in text.chars() {
        match c {
            '\n' => {
                in_comment = false;
                clean.push('\n');
            }
            '#' => {
                in_comment = true;
                clean.push(' ');
            }
            _ if in_comment => clean.extend(std::iter::repeat_n(' ', c.len_utf8())),
            _ => clean.push(c),
        }
    }
    let parser = Parser {
        src: Source { text },
    };
    let syntax = |offset: usize, msg: &str| {
        parser
            .src
            .error(offset, ParseErrorKind::Syntax(msg.to_string()))
    };

    let mut layers: Vec<LayerSpec> = Vec::new();
    let mut labels = HashSet::new();
    let mut rest = Span {
        text: &clean,
        offset: 0,
    };
    loop {
        let Some(end) = rest.text.find(';') else {
            let tail = rest.trim();
            if !tail.text.is_empty() {
                return Err(syntax(tail.offset, "missing ';' after clause"));
            }
            break;
        };
        let (clause, next) = rest.split_at(end, 1);
        rest = next;
        let clause = clause.trim();
        if clause.text.is_empty() {
            return Err(syntax(clause.offset, "empty clause"));
        }
        let (body, label) = match clause.text.find("->") {
            Some(i) => {
                let (b, l) = clause.split_at(i, 2);
                (b.trim(), Some(l.trim()))
            }
            None => (clause, None),
        };
        let kind = parser.clause(body)?;
        let label = match label {
            Some(l) if !is_ident(l.text) => {
                return Err(parser.malformed(l, format!("bad label '{}'", l.text)))
            }
            Some(l) => {
                if matches!(kind, LayerKind::LabelRef { .. }) {
                    return Err(parser.malformed(l, "a reference cannot define a label"));
                }
                if !labels.insert(l.text.to_string()) {
                    return Err(parser
                        .src
                        .error(l.offset, ParseErrorKind::DuplicateLabel(l.text.to_string())));
                }
                Some(l.text.to_string())
            }
            None => None,
        };
        match &kind {
            LayerKind::Input { .. } if !layers.is_empty() => {
                return Err(syntax(
                    body.offset,
                    "input layer must be the only first clause",
                ))
            }
            LayerKind::Input { .. } => {}
            _ if layers.is_empty() => {
                return Err(syntax(
                    body.offset,
                    "the first clause must be an input layer",
                ))
            }
            LayerKind::LabelRef { label } if !labels.contains(label) => {
                return Err(parser.src.error(
                    body.offset + 2,
                    ParseErrorKind::UnresolvedReference(label.clone()),
                ))
            }
            LayerKind::Centers { .. } if !labels.contains("x") => {
                return Err(parser
                    .src
                    .error(body.offset, ParseErrorKind::UnresolvedReference("x".into())))
            }
            _ => {}
        }
        layers.push(LayerSpec { kind, label });
    }
    if layers.is_empty() {
        return Err(syntax(0, "no input layer"));
    }
    Ok(ArchGraph::from_layers(layers))
}
