//! Evaluation with SemEval semantics: exact-match span F1 for extraction,
//! accuracy and macro-F1 for sentiment classification.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use crate::error::{BatError, Result};
use crate::task::Task;
use crate::tokenizer::Bio;

/// Inclusive `(start_word, end_word)` spans of one sentence.
pub type SpanSet = BTreeSet<(usize, usize)>;

/// Spans from a BIO sequence. `B` always opens a new span; an `I` with no
/// open span also opens one.
pub fn decode_bio(labels: &[Bio]) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut open: Option<usize> = None;
    for (i, &l) in labels.iter().enumerate() {
        match l {
            Bio::B => {
                if let Some(s) = open.take() {
                    spans.push((s, i - 1));
                }
                open = Some(i);
            }
            Bio::I => {
                if open.is_none() {
                    open = Some(i);
                }
            }
            Bio::O => {
                if let Some(s) = open.take() {
                    spans.push((s, i - 1));
                }
            }
        }
    }
    if let Some(s) = open {
        spans.push((s, labels.len() - 1));
    }
    spans
}

pub fn span_set(labels: &[Bio]) -> SpanSet {
    decode_bio(labels).into_iter().collect()
}

/// Canonical BIO sequence of length `n` for a set of spans.
pub fn encode_bio(spans: &SpanSet, n: usize) -> Vec<Bio> {
    let mut out = vec![Bio::O; n];
    for &(s, e) in spans {
        out[s] = Bio::B;
        for l in out.iter_mut().take(e + 1).skip(s + 1) {
            *l = Bio::I;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn f1_of(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Micro-averaged exact-match P/R/F1 over aligned sentence lists.
///
/// Duplicate spans count once (sets). A corpus with no gold and no
/// predicted spans scores 1 across the board.
pub fn span_f1(pred: &[SpanSet], gold: &[SpanSet]) -> Result<Prf> {
    if pred.len() != gold.len() {
        return Err(BatError::usage(format!(
            "{} predicted sentences vs {} gold sentences",
            pred.len(),
            gold.len()
        )));
    }
    let (mut tp, mut np, mut ng) = (0, 0, 0);
    for (p, g) in pred.iter().zip(gold) {
        tp += p.intersection(g).count();
        np += p.len();
        ng += g.len();
    }
    if np == 0 && ng == 0 {
        return Ok(Prf {
            precision: 1.0,
            recall: 1.0,
            f1: 1.0,
        });
    }
    let precision = ratio(tp, np);
    let recall = ratio(tp, ng);
    Ok(Prf {
        precision,
        recall,
        f1: f1_of(precision, recall),
    })
}

fn check_labels(pred: &[usize], gold: &[usize]) -> Result<()> {
    if pred.is_empty() {
        return Err(BatError::usage("no labels to score"));
    }
    if pred.len() != gold.len() {
        return Err(BatError::usage(format!(
            "{} predictions vs {} gold labels",
            pred.len(),
            gold.len()
        )));
    }
    Ok(())
}

pub fn accuracy(pred: &[usize], gold: &[usize]) -> Result<f64> {
    check_labels(pred, gold)?;
    let hits = pred.iter().zip(gold).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / pred.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassStats {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
    pub predicted: usize,
}

pub fn class_stats(pred: &[usize], gold: &[usize], classes: usize) -> Result<Vec<ClassStats>> {
    check_labels(pred, gold)?;
    if let Some(&bad) = pred.iter().chain(gold).find(|&&c| c >= classes) {
        return Err(BatError::Index(format!("class {bad} out of range for {classes}")));
    }
    Ok((0..classes)
        .map(|c| {
            let tp = pred.iter().zip(gold).filter(|(&p, &g)| p == c && g == c).count();
            let predicted = pred.iter().filter(|&&p| p == c).count();
            let support = gold.iter().filter(|&&g| g == c).count();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            ClassStats {
                precision,
                recall,
                f1: f1_of(precision, recall),
                support,
                predicted,
            }
        })
        .collect())
}

/// Unweighted mean of per-class F1. Classes absent from both gold and
/// predictions are left out of the mean.
pub fn macro_f1(pred: &[usize], gold: &[usize], classes: usize) -> Result<f64> {
    let stats = class_stats(pred, gold, classes)?;
    let present: Vec<f64> = stats
        .iter()
        .filter(|s| s.support > 0 || s.predicted > 0)
        .map(|s| s.f1)
        .collect();
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub task: Task,
    pub split: String,
    pub examples: usize,
    pub seed: u64,
    pub fingerprint: String,
    /// Span P/R/F1 for extraction.
    pub spans: Option<Prf>,
    pub accuracy: Option<f64>,
    pub macro_f1: Option<f64>,
    /// Positive, negative, neutral.
    pub classes: Vec<ClassStats>,
}

pub const CLASS_NAMES: [&str; 3] = ["positive", "negative", "neutral"];

impl MetricsReport {
    pub fn for_spans(pred: &[SpanSet], gold: &[SpanSet]) -> Result<Self> {
        let prf = span_f1(pred, gold)?;
        Ok(MetricsReport {
            task: Task::Ae,
            split: String::new(),
            examples: gold.len(),
            seed: 0,
            fingerprint: String::new(),
            spans: Some(prf),
            accuracy: None,
            macro_f1: None,
            classes: Vec::new(),
        })
    }

    pub fn for_classes(pred: &[usize], gold: &[usize]) -> Result<Self> {
        Ok(MetricsReport {
            task: Task::Asc,
            split: String::new(),
            examples: gold.len(),
            seed: 0,
            fingerprint: String::new(),
            spans: None,
            accuracy: Some(accuracy(pred, gold)?),
            macro_f1: Some(macro_f1(pred, gold, 3)?),
            classes: class_stats(pred, gold, 3)?,
        })
    }

    pub fn with_context(mut self, split: &str, seed: u64, fingerprint: &str) -> Self {
        self.split = split.to_string();
        self.seed = seed;
        self.fingerprint = fingerprint.to_string();
        self
    }

    /// The headline number: span F1 for extraction, accuracy for
    /// classification.
    pub fn primary(&self) -> f64 {
        match self.task {
            Task::Ae => self.spans.map(|p| p.f1).unwrap_or(0.0),
            Task::Asc => self.accuracy.unwrap_or(0.0),
        }
    }

    /// `(metric, value)` pairs, in a fixed order.
    pub fn metrics(&self) -> Vec<(&'static str, f64)> {
        match self.task {
            Task::Ae => {
                let p = self.spans.expect("extraction report has spans");
                vec![("precision", p.precision), ("recall", p.recall), ("f1", p.f1)]
            }
            Task::Asc => vec![
                ("accuracy", self.accuracy.unwrap_or(0.0)),
                ("macro_f1", self.macro_f1.unwrap_or(0.0)),
            ],
        }
    }

    pub const CSV_HEADER: &'static str = "task,split,seed,fingerprint,examples,precision,recall,f1,accuracy,macro_f1,\
pos_precision,pos_recall,pos_f1,pos_support,neg_precision,neg_recall,neg_f1,neg_support,\
neu_precision,neu_recall,neu_f1,neu_support";

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(fmt_rate).unwrap_or_default();
        let mut row = format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.task,
            self.split,
            self.seed,
            self.fingerprint,
            self.examples,
            opt(self.spans.map(|p| p.precision)),
            opt(self.spans.map(|p| p.recall)),
            opt(self.spans.map(|p| p.f1)),
            opt(self.accuracy),
            opt(self.macro_f1),
        );
        for c in 0..3 {
            match self.classes.get(c) {
                Some(s) => write!(
                    row,
                    ",{},{},{},{}",
                    fmt_rate(s.precision),
                    fmt_rate(s.recall),
                    fmt_rate(s.f1),
                    s.support
                )
                .unwrap(),
                None => row.push_str(",,,,"),
            }
        }
        row
    }

    pub fn text_block(&self) -> String {
        let mut s = String::new();
        writeln!(s, "task: {}  split: {}  seed: {}", self.task, self.split, self.seed).unwrap();
        writeln!(s, "config: {}", self.fingerprint).unwrap();
        writeln!(s, "examples: {}", self.examples).unwrap();
        if let Some(p) = self.spans {
            writeln!(
                s,
                "span P/R/F1: {:.2} / {:.2} / {:.2}",
                100.0 * p.precision,
                100.0 * p.recall,
                100.0 * p.f1
            )
            .unwrap();
        }
        if let (Some(a), Some(m)) = (self.accuracy, self.macro_f1) {
            writeln!(s, "accuracy: {:.2}  macro-F1: {:.2}", 100.0 * a, 100.0 * m).unwrap();
            for (name, c) in CLASS_NAMES.iter().zip(&self.classes) {
                writeln!(
                    s,
                    "  {name:<8} P {:.2}  R {:.2}  F1 {:.2}  n={}",
                    100.0 * c.precision,
                    100.0 * c.recall,
                    100.0 * c.f1,
                    c.support
                )
                .unwrap();
            }
        }
        s
    }
}

pub fn fmt_rate(v: f64) -> String {
    format!("{v:.6}")
}
