//! CSV tables and key=value summaries.
//!
//! Floats are written as `{:.16e}` (17 significant digits), which round-trips
//! every finite `f64`; non-finite values print as `nan`, `inf`, `-inf`.

use std::fmt::Write;

use crate::flow::TrajectoryRecord;

pub fn fmt_float(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v:.16e}")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Float(f64),
    Int(i64),
    Text(String),
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Float(v) => fmt_float(*v),
            Cell::Int(i) => i.to_string(),
            Cell::Text(s) if s.contains([',', '"', '\n']) => format!("\"{}\"", s.replace('"', "\"\"")),
            Cell::Text(s) => s.clone(),
        }
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Float(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<u64> for Cell {
    fn from(v: u64) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}

impl From<String> for Cell {
    fn from(v: String) -> Self {
        Cell::Text(v)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    header: Vec<String>,
    rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new<S: AsRef<str>>(header: &[S]) -> Self {
        Self { header: header.iter().map(|s| s.as_ref().to_string()).collect(), rows: Vec::new() }
    }

    pub fn header(&self) -> &[String] {
        &self.header
    }

    pub fn rows(&self) -> &[Vec<Cell>] {
        &self.rows
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        assert_eq!(row.len(), self.header.len(), "row width does not match header");
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(Cell::render).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

/// One row per `(frame, point)`: `t, i, x1..xd, logdet, acc_sto, acc_energy, acc_potential`.
pub fn trajectory_table(record: &TrajectoryRecord) -> Table {
    let mut header: Vec<String> = vec!["t".into(), "i".into()];
    header.extend((1..=record.dim).map(|k| format!("x{k}")));
    header.extend(["logdet", "acc_sto", "acc_energy", "acc_potential"].map(String::from));
    let mut table = Table::new(&header);
    for frame in &record.frames {
        for (i, p) in frame.points.chunks(record.dim).enumerate() {
            let mut row: Vec<Cell> = vec![frame.t.into(), i.into()];
            row.extend(p.iter().map(|&x| Cell::Float(x)));
            row.push(frame.logdet[i].into());
            for acc in [&frame.acc_sto, &frame.acc_energy, &frame.acc_potential] {
                row.push(Cell::Float(if record.has_accumulators { acc[i] } else { f64::NAN }));
            }
            table.push(row);
        }
    }
    table
}

/// Ordered `key=value` lines.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Summary {
    entries: Vec<(String, String)>,
}

impl Summary {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn text(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.entries.push((key.to_string(), value.to_string()));
        self
    }

    pub fn float(&mut self, key: &str, value: f64) -> &mut Self {
        self.text(key, fmt_float(value))
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            writeln!(out, "{k}={v}").unwrap();
        }
        out
    }

    /// Parses `key=value` lines, ignoring blanks and `#` comments.
    pub fn parse(text: &str) -> Self {
        let entries = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .filter_map(|l| l.split_once('=').map(|(k, v)| (k.trim().to_string(), v.trim().to_string())))
            .collect();
        Self { entries }
    }
}
