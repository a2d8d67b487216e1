//! SemEval 2014 task 4 and SemEval 2016 task 5 XML readers.

use std::fs;
use std::path::Path;

use roxmltree::{Document, Node};
use serde::{Deserialize, Serialize};

use crate::error::{BatError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
    Neutral,
    Conflict,
    None,
}

impl Polarity {
    pub const CLASSES: [Polarity; 3] = [Polarity::Positive, Polarity::Negative, Polarity::Neutral];

    pub fn parse(s: &str) -> Self {
        match s.trim().to_ascii_lowercase().as_str() {
            "positive" => Polarity::Positive,
            "negative" => Polarity::Negative,
            "neutral" => Polarity::Neutral,
            "conflict" => Polarity::Conflict,
            _ => Polarity::None,
        }
    }

    /// Class index in the three-way sentiment label set.
    pub fn class(self) -> Option<usize> {
        match self {
            Polarity::Positive => Some(0),
            Polarity::Negative => Some(1),
            Polarity::Neutral => Some(2),
            _ => None,
        }
    }

    pub fn from_class(c: usize) -> Option<Self> {
        Self::CLASSES.get(c).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Polarity::Positive => "positive",
            Polarity::Negative => "negative",
            Polarity::Neutral => "neutral",
            Polarity::Conflict => "conflict",
            Polarity::None => "none",
        }
    }
}

/// Aspect term with `char` offsets `[from, to)` into the sentence text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AspectSpan {
    pub term: String,
    pub from: usize,
    pub to: usize,
    pub polarity: Polarity,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawSentence {
    pub id: String,
    pub text: String,
    pub aspects: Vec<AspectSpan>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schema {
    SemEval2014,
    SemEval2016,
}

pub fn parse_semeval2014(xml: &str) -> Result<Vec<RawSentence>> {
    let doc = parse_doc(xml)?;
    doc.descendants()
        .filter(|n| n.has_tag_name("sentence"))
        .map(|s| {
            let (id, text) = sentence_header(&doc, s)?;
            let terms = s
                .descendants()
                .filter(|n| n.has_tag_name("aspectTerm"))
                .map(|a| aspect_from(&doc, a, &id, "term"))
                .collect::<Result<Vec<_>>>()?;
            finish(id, text, terms.into_iter().flatten().collect())
        })
        .collect()
}

/// Opinions whose target is `NULL` carry no span and are skipped. Opinions
/// repeating an identical span (one per category) are kept once.
pub fn parse_semeval2016(xml: &str) -> Result<Vec<RawSentence>> {
    let doc = parse_doc(xml)?;
    doc.descendants()
        .filter(|n| n.has_tag_name("sentence"))
        .map(|s| {
            let (id, text) = sentence_header(&doc, s)?;
            let terms = s
                .descendants()
                .filter(|n| n.has_tag_name("Opinion"))
                .map(|a| aspect_from(&doc, a, &id, "target"))
                .collect::<Result<Vec<_>>>()?;
            finish(id, text, terms.into_iter().flatten().collect())
        })
        .collect()
}

pub fn detect_schema(xml: &str) -> Result<Schema> {
    let doc = parse_doc(xml)?;
    match doc.root_element().tag_name().name() {
        "sentences" => Ok(Schema::SemEval2014),
        "Reviews" => Ok(Schema::SemEval2016),
        other => Err(BatError::data(format!(
            "unknown SemEval root element <{other}>"
        ))),
    }
}

pub fn parse_auto(xml: &str) -> Result<Vec<RawSentence>> {
    match detect_schema(xml)? {
        Schema::SemEval2014 => parse_semeval2014(xml),
        Schema::SemEval2016 => parse_semeval2016(xml),
    }
}

pub fn load_xml(path: &Path) -> Result<Vec<RawSentence>> {
    let xml = fs::read_to_string(path).map_err(|e| BatError::io(path, e))?;
    parse_auto(&xml)
}

fn parse_doc(xml: &str) -> Result<Document<'_>> {
    Document::parse(xml).map_err(|e| BatError::Parse {
        line: e.pos().row,
        message: e.to_string(),
    })
}

fn line_of(doc: &Document, n: Node) -> u32 {
    doc.text_pos_at(n.range().start).row
}

fn sentence_header(doc: &Document, s: Node) -> Result<(String, String)> {
    let id = s.attribute("id").unwrap_or("").to_string();
    let text_node = s
        .children()
        .find(|c| c.has_tag_name("text"))
        .ok_or_else(|| BatError::Parse {
            line: line_of(doc, s),
            message: format!("sentence {id:?} has no <text>"),
        })?;
    let text: String = text_node
        .descendants()
        .filter(|n| n.is_text())
        .filter_map(|n| n.text())
        .collect();
    Ok((id, text))
}

fn aspect_from(doc: &Document, a: Node, id: &str, term_attr: &str) -> Result<Option<AspectSpan>> {
    let line = line_of(doc, a);
    let attr = |name: &str| {
        a.attribute(name).ok_or_else(|| BatError::Parse {
            line,
            message: format!("sentence {id:?}: <{}> missing {name}", a.tag_name().name()),
        })
    };
    let term = attr(term_attr)?;
    if term_attr == "target" && term == "NULL" {
        return Ok(None);
    }
    let offset = |name: &str| -> Result<usize> {
        attr(name)?
            .trim()
            .parse()
            .map_err(|_| BatError::data_in(id, format!("bad {name} offset on {term:?}")))
    };
    Ok(Some(AspectSpan {
        term: term.to_string(),
        from: offset("from")?,
        to: offset("to")?,
        polarity: Polarity::parse(a.attribute("polarity").unwrap_or("")),
    }))
}

fn finish(id: String, text: String, aspects: Vec<AspectSpan>) -> Result<RawSentence> {
    let chars: Vec<char> = text.chars().collect();
    let mut kept: Vec<AspectSpan> = Vec::with_capacity(aspects.len());
    for a in aspects {
        if a.from >= a.to || a.to > chars.len() {
            return Err(BatError::data_in(
                &id,
                format!(
                    "aspect {:?} span [{}, {}) outside text of length {}",
                    a.term,
                    a.from,
                    a.to,
                    chars.len()
                ),
            ));
        }
        let slice: String = chars[a.from..a.to].iter().collect();
        if slice != a.term {
            return Err(BatError::data_in(
                &id,
                format!(
                    "aspect {:?} does not match text slice {slice:?} at [{}, {})",
                    a.term, a.from, a.to
                ),
            ));
        }
        if kept.iter().any(|k| k.from == a.from && k.to == a.to) {
            continue;
        }
        if let Some(k) = kept.iter().find(|k| a.from < k.to && k.from < a.to) {
            return Err(BatError::data_in(
                &id,
                format!("aspects {:?} and {:?} overlap", k.term, a.term),
            ));
        }
        kept.push(a);
    }
    Ok(RawSentence {
        id,
        text,
        aspects: kept,
    })
}
