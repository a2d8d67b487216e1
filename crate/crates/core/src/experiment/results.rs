//! Long-format result rows, their CSV form, and the epsilon comparison
//! table built from them.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{BatError, Result};
use crate::task::Task;

pub const CSV_HEADER: &str = "run_id,task,dataset,epochs,dropout,epsilon,seed,split,metric,value";

/// Test metrics at the final epoch.
pub const SPLIT_TEST: &str = "test";
/// Test metrics at the epoch with the best validation score.
pub const SPLIT_TEST_BEST_VAL: &str = "test_best_val";
pub const SPLIT_VALIDATION: &str = "validation";
pub const SPLIT_TRAIN: &str = "train";

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub run_id: String,
    pub task: Task,
    pub dataset: String,
    pub epochs: usize,
    pub dropout: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

pub fn run_id(task: Task, dataset: &str, dropout: f64, epsilon: f64, seed: u64) -> String {
    format!("{task}-{dataset}-p{dropout}-eps{epsilon}-seed{seed}")
}

impl ResultRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.run_id,
            self.task,
            self.dataset,
            self.epochs,
            self.dropout,
            self.epsilon,
            self.seed,
            self.split,
            self.metric,
            self.value
        )
    }

    pub fn parse(line: &str, line_no: u32) -> Result<Self> {
        let f: Vec<&str> = line.split(',').collect();
        let err = |m: String| BatError::Parse { line: line_no, message: m };
        if f.len() != 10 {
            return Err(err(format!("expected 10 fields, got {}", f.len())));
        }
        let num = |i: usize| -> Result<f64> { f[i].parse().map_err(|_| err(format!("bad number {:?}", f[i]))) };
        Ok(ResultRow {
            run_id: f[0].to_string(),
            task: f[1].parse()?,
            dataset: f[2].to_string(),
            epochs: f[3].parse().map_err(|_| err(format!("bad epochs {:?}", f[3])))?,
            dropout: num(4)?,
            epsilon: num(5)?,
            seed: f[6].parse().map_err(|_| err(format!("bad seed {:?}", f[6])))?,
            split: f[7].to_string(),
            metric: f[8].to_string(),
            value: num(9)?,
        })
    }
}

pub fn to_csv(rows: &[ResultRow]) -> String {
    let mut s = String::with_capacity(rows.len() * 64);
    s.push_str(CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.to_csv());
        s.push('\n');
    }
    s
}

pub fn parse_csv(text: &str) -> Result<Vec<ResultRow>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == CSV_HEADER => {}
        _ => {
            return Err(BatError::Parse {
                line: 1,
                message: format!("expected header {CSV_HEADER:?}"),
            })
        }
    }
    lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| ResultRow::parse(l.trim(), n as u32 + 1))
        .collect()
}

pub fn write_csv(path: &Path, rows: &[ResultRow]) -> Result<()> {
    fs::write(path, to_csv(rows)).map_err(|e| BatError::io(path, e))
}

pub fn read_csv(path: &Path) -> Result<Vec<ResultRow>> {
    let text = fs::read_to_string(path).map_err(|e| BatError::io(path, e))?;
    parse_csv(&text)
}

/// Key of one sweep cell. Floats are kept as bit patterns so keys order
/// and compare exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CellKey {
    pub epochs: usize,
    dropout_bits: u64,
    epsilon_bits: u64,
}

impl CellKey {
    pub fn new(epochs: usize, dropout: f64, epsilon: f64) -> Self {
        // normalize -0.0
        CellKey {
            epochs,
            dropout_bits: (dropout + 0.0).to_bits(),
            epsilon_bits: (epsilon + 0.0).to_bits(),
        }
    }

    pub fn dropout(&self) -> f64 {
        f64::from_bits(self.dropout_bits)
    }

    pub fn epsilon(&self) -> f64 {
        f64::from_bits(self.epsilon_bits)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub key: CellKey,
    /// `(seed, value)` in seed order.
    pub scores: Vec<(u64, f64)>,
}

impl Cell {
    pub fn mean(&self) -> f64 {
        self.scores.iter().map(|s| s.1).sum::<f64>() / self.scores.len() as f64
    }
}

/// Per-cell seed scores for one `(split, metric)`.
pub fn aggregate(rows: &[ResultRow], split: &str, metric: &str) -> Vec<Cell> {
    let mut map: BTreeMap<CellKey, BTreeMap<u64, f64>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.split == split && r.metric == metric) {
        map.entry(CellKey::new(r.epochs, r.dropout, r.epsilon))
            .or_default()
            .insert(r.seed, r.value);
    }
    map.into_iter()
        .map(|(key, s)| Cell {
            key,
            scores: s.into_iter().collect(),
        })
        .collect()
}

/// Headline metrics shown in the comparison table.
pub fn table_metrics(task: Task) -> &'static [(&'static str, &'static str)] {
    match task {
        Task::Ae => &[("f1", "F1")],
        Task::Asc => &[("accuracy", "Acc"), ("macro_f1", "MF1")],
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    /// `None` for the baseline.
    pub epsilon: Option<f64>,
    /// Per table metric: mean over seeds, and the difference to the
    /// baseline mean.
    pub values: Vec<Option<(f64, f64)>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpsilonTable {
    pub task: Task,
    pub dataset: String,
    pub epochs: usize,
    pub dropout: f64,
    pub split: String,
    pub columns: Vec<String>,
    pub baseline: Vec<Option<f64>>,
    pub rows: Vec<TableRow>,
}

/// Baseline row plus one row per epsilon at the given epochs and dropout.
/// Deltas are `mean - baseline mean`.
pub fn epsilon_table(
    rows: &[ResultRow],
    task: Task,
    dataset: &str,
    epochs: usize,
    dropout: f64,
    epsilons: &[f64],
    split: &str,
) -> EpsilonTable {
    let metrics = table_metrics(task);
    let cells: Vec<Vec<Cell>> = metrics.iter().map(|(m, _)| aggregate(rows, split, m)).collect();
    let mean_at = |mi: usize, eps: f64| {
        let key = CellKey::new(epochs, dropout, eps);
        cells[mi].iter().find(|c| c.key == key).map(Cell::mean)
    };
    let baseline: Vec<Option<f64>> = (0..metrics.len()).map(|mi| mean_at(mi, 0.0)).collect();
    let mut out = vec![TableRow {
        epsilon: None,
        values: baseline.iter().map(|b| b.map(|v| (v, 0.0))).collect(),
    }];
    for &eps in epsilons.iter().filter(|&&e| e > 0.0) {
        out.push(TableRow {
            epsilon: Some(eps),
            values: (0..metrics.len())
                .map(|mi| match (mean_at(mi, eps), baseline[mi]) {
                    (Some(v), Some(b)) => Some((v, v - b)),
                    (Some(v), None) => Some((v, f64::NAN)),
                    _ => None,
                })
                .collect(),
        });
    }
    EpsilonTable {
        task,
        dataset: dataset.to_string(),
        epochs,
        dropout,
        split: split.to_string(),
        columns: metrics.iter().map(|(_, label)| label.to_string()).collect(),
        baseline,
        rows: out,
    }
}

fn pct(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

fn signed_pct(v: f64) -> String {
    let s = format!("{:.2}", 100.0 * v);
    if s.starts_with('-') {
        s
    } else {
        format!("+{s}")
    }
}

impl EpsilonTable {
    pub fn row_label(row: &TableRow) -> String {
        match row.epsilon {
            None => "Baseline".to_string(),
            Some(e) => format!("BAT (eps={e})"),
        }
    }

    /// Scores in percent, deltas in parentheses.
    pub fn cell_text(row: &TableRow, col: usize) -> String {
        match row.values[col] {
            None => "n/a".into(),
            Some((v, _)) if row.epsilon.is_none() => pct(v),
            Some((v, d)) if d.is_nan() => pct(v),
            Some((v, d)) => format!("{} ({})", pct(v), signed_pct(d)),
        }
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        writeln!(
            s,
            "{} on {} ({} epochs, dropout {}, {})",
            self.task.to_string().to_uppercase(),
            self.dataset,
            self.epochs,
            self.dropout,
            self.split
        )
        .unwrap();
        let labels: Vec<String> = self.rows.iter().map(Self::row_label).collect();
        let w0 = labels.iter().map(String::len).chain(["Methods".len()]).max().unwrap_or(8);
        let texts: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| (0..self.columns.len()).map(|c| Self::cell_text(r, c)).collect())
            .collect();
        let widths: Vec<usize> = (0..self.columns.len())
            .map(|c| texts.iter().map(|t| t[c].len()).chain([self.columns[c].len()]).max().unwrap_or(4))
            .collect();
        write!(s, "{:<w0$}", "Methods").unwrap();
        for (c, name) in self.columns.iter().enumerate() {
            write!(s, " | {:<w$}", name, w = widths[c]).unwrap();
        }
        s.push('\n');
        let rule = w0 + widths.iter().map(|w| w + 3).sum::<usize>();
        writeln!(s, "{}", "-".repeat(rule)).unwrap();
        for (i, (label, t)) in labels.iter().zip(&texts).enumerate() {
            write!(s, "{label:<w0$}").unwrap();
            for (c, text) in t.iter().enumerate() {
                write!(s, " | {:<w$}", text, w = widths[c]).unwrap();
            }
            s.push('\n');
            if i == 0 {
                writeln!(s, "{}", "-".repeat(rule)).unwrap();
            }
        }
        s
    }

    /// Raw numbers behind the rendered table, one line per (row, column).
    pub const CSV_HEADER: &'static str = "method,epsilon,metric,mean,baseline,delta,formatted";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for row in &self.rows {
            for (c, col) in self.columns.iter().enumerate() {
                let (mean, delta) = match row.values[c] {
                    Some((v, d)) => (v.to_string(), d.to_string()),
                    None => (String::new(), String::new()),
                };
                writeln!(
                    s,
                    "{},{},{},{},{},{},{}",
                    Self::row_label(row),
                    row.epsilon.unwrap_or(0.0),
                    col,
                    mean,
                    self.baseline[c].map(|b| b.to_string()).unwrap_or_default(),
                    delta,
                    Self::cell_text(row, c)
                )
                .unwrap();
            }
        }
        s
    }
}
