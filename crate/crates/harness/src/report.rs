//! Deterministic JSON and CSV writers: fixed field order, 17 significant
//! digits for every float.

use crate::error::HarnessError;
use std::fmt::Write as _;
use std::path::Path;

/// 17 significant digits round-trip any f64 exactly.
pub fn fmt_float(v: f64) -> String {
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    format!("{v:.16e}")
}

pub fn write_text(path: &Path, text: &str) -> Result<(), HarnessError> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| HarnessError::Io {
                path: dir.display().to_string(),
                source: e,
            })?;
        }
    }
    std::fs::write(path, text).map_err(|e| HarnessError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

/// Minimal JSON document builder. Only the shapes the reports need:
/// objects, float/int/bool scalars, float arrays, nested objects.
pub struct JsonObject {
    buf: String,
    empty: bool,
    indent: usize,
}

impl JsonObject {
    pub fn root() -> Self {
        JsonObject {
            buf: String::from("{"),
            empty: true,
            indent: 1,
        }
    }

    fn key(&mut self, name: &str) {
        if !self.empty {
            self.buf.push(',');
        }
        self.empty = false;
        self.buf.push('\n');
        for _ in 0..self.indent {
            self.buf.push_str("  ");
        }
        let _ = write!(self.buf, "\"{name}\": ");
    }

    pub fn float(&mut self, name: &str, v: f64) -> &mut Self {
        self.key(name);
        // JSON has no inf/nan literals; encode as strings.
        if v.is_finite() {
            self.buf.push_str(&fmt_float(v));
        } else {
            let _ = write!(self.buf, "\"{}\"", fmt_float(v));
        }
        self
    }

    pub fn int(&mut self, name: &str, v: u64) -> &mut Self {
        self.key(name);
        let _ = write!(self.buf, "{v}");
        self
    }

    pub fn bool(&mut self, name: &str, v: bool) -> &mut Self {
        self.key(name);
        let _ = write!(self.buf, "{v}");
        self
    }

    /// Plain string value; callers pass only identifier-like text.
    pub fn string(&mut self, name: &str, v: &str) -> &mut Self {
        self.key(name);
        let _ = write!(self.buf, "\"{v}\"");
        self
    }

    pub fn float_array(&mut self, name: &str, vs: &[f64]) -> &mut Self {
        self.key(name);
        self.buf.push('[');
        for (i, v) in vs.iter().enumerate() {
            if i > 0 {
                self.buf.push_str(", ");
            }
            if v.is_finite() {
                self.buf.push_str(&fmt_float(*v));
            } else {
                let _ = write!(self.buf, "\"{}\"", fmt_float(*v));
            }
        }
        self.buf.push(']');
        self
    }

    /// Open a nested object; build it in the closure.
    pub fn object<F>(&mut self, name: &str, f: F) -> &mut Self
    where
        F: FnOnce(&mut JsonObject),
    {
        self.key(name);
        let mut child = JsonObject {
            buf: String::from("{"),
            empty: true,
            indent: self.indent + 1,
        };
        f(&mut child);
        self.buf.push_str(&child.finish_inner());
        self
    }

    fn finish_inner(mut self) -> String {
        if !self.empty {
            self.buf.push('\n');
            for _ in 0..self.indent - 1 {
                self.buf.push_str("  ");
            }
        }
        self.buf.push('}');
        self.buf
    }

    pub fn finish(self) -> String {
        let mut s = self.finish_inner();
        s.push('\n');
        s
    }
}

/// CSV value: integers plain, floats at full precision, text verbatim.
pub enum Cell {
    Int(u64),
    Float(f64),
    Text(String),
    Empty,
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Int(v) => v.to_string(),
            Cell::Float(v) => fmt_float(*v),
            Cell::Text(s) => s.clone(),
            Cell::Empty => String::new(),
        }
    }
}

pub fn csv_document(header: &[&str], rows: &[Vec<Cell>]) -> String {
    let mut out = String::new();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in rows {
        debug_assert_eq!(row.len(), header.len(), "column count mismatch");
        let line: Vec<String> = row.iter().map(Cell::render).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}
