//! Subword vocabulary, greedy longest-match segmentation and sequence
//! encoding in the `[CLS] w1 .. wn [SEP]` layout.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{BatError, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const RESERVED: [&str; 4] = [PAD, UNK, CLS, SEP];

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const CLS_ID: u32 = 2;
pub const SEP_ID: u32 = 3;

/// Prefix marking a piece that continues a word.
pub const CONTINUATION: &str = "##";

const MAX_WORD_CHARS: usize = 100;

/// A pre-tokenized word with character offsets into the source text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Word {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

/// Splits on whitespace and detaches every punctuation character into its
/// own word. Offsets count `char`s, not bytes.
pub fn pre_tokenize(text: &str) -> Vec<Word> {
    let mut words = Vec::new();
    let mut cur = String::new();
    let mut start = 0;
    let flush = |cur: &mut String, start: usize, end: usize, words: &mut Vec<Word>| {
        if !cur.is_empty() {
            words.push(Word {
                text: std::mem::take(cur),
                start,
                end,
            });
        }
    };
    for (i, c) in text.chars().enumerate() {
        if c.is_whitespace() {
            flush(&mut cur, start, i, &mut words);
        } else if is_punct(c) {
            flush(&mut cur, start, i, &mut words);
            words.push(Word {
                text: c.to_string(),
                start: i,
                end: i + 1,
            });
        } else {
            if cur.is_empty() {
                start = i;
            }
            cur.push(c);
        }
    }
    let n = text.chars().count();
    flush(&mut cur, start, n, &mut words);
    words
}

fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation() || (!c.is_alphanumeric() && !c.is_whitespace() && !c.is_control())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    pub lowercase: bool,
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>, lowercase: bool) -> Result<Self> {
        for (i, r) in RESERVED.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*r) {
                return Err(BatError::data(format!(
                    "vocabulary must start with {RESERVED:?}; line {} is not {r}",
                    i + 1
                )));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() {
                return Err(BatError::data(format!("empty token at line {}", i + 1)));
            }
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(BatError::data(format!("duplicate token {t:?}")));
            }
        }
        Ok(Vocab {
            tokens,
            index,
            lowercase,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One token per line; line number (from 0) is the id.
    pub fn to_file_string(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_file_string()).map_err(|e| BatError::io(path, e))
    }

    pub fn parse(text: &str, lowercase: bool) -> Result<Self> {
        let tokens = text.lines().map(str::to_string).collect();
        Self::from_tokens(tokens, lowercase)
    }

    pub fn load(path: &Path, lowercase: bool) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| BatError::io(path, e))?;
        Self::parse(&text, lowercase)
    }

    fn normalize(&self, text: &str) -> String {
        if self.lowercase {
            text.to_lowercase()
        } else {
            text.to_string()
        }
    }

    /// Greedy longest-prefix segmentation of one word. A word with any
    /// unmatched remainder becomes a single `[UNK]`.
    pub fn word_pieces(&self, word: &str) -> Vec<u32> {
        let word = self.normalize(word);
        let chars: Vec<char> = word.chars().collect();
        if chars.is_empty() {
            return Vec::new();
        }
        if chars.len() > MAX_WORD_CHARS {
            return vec![UNK_ID];
        }
        let mut pieces = Vec::new();
        let mut start = 0;
        while start < chars.len() {
            let mut found = None;
            let mut end = chars.len();
            while end > start {
                let mut cand: String = chars[start..end].iter().collect();
                if start > 0 {
                    cand.insert_str(0, CONTINUATION);
                }
                if let Some(id) = self.id(&cand) {
                    found = Some(id);
                    break;
                }
                end -= 1;
            }
            match found {
                Some(id) => {
                    pieces.push(id);
                    start = end;
                }
                None => return vec![UNK_ID],
            }
        }
        pieces
    }

    /// Token ids and word-start flags for free text.
    pub fn tokenize(&self, text: &str) -> (Vec<u32>, Vec<bool>) {
        let words = pre_tokenize(text);
        self.tokenize_words(&words)
    }

    pub fn tokenize_words(&self, words: &[Word]) -> (Vec<u32>, Vec<bool>) {
        let mut ids = Vec::new();
        let mut starts = Vec::new();
        for w in words {
            for (k, id) in self.word_pieces(&w.text).into_iter().enumerate() {
                ids.push(id);
                starts.push(k == 0);
            }
        }
        (ids, starts)
    }
}

/// Builds a vocabulary by repeatedly merging the most frequent adjacent
/// symbol pair, starting from single characters.
///
/// Ties break on the merged string, then on the left symbol, so the result
/// depends only on the corpus contents. Every character seen in the corpus
/// is kept even if that overshoots `target_size`.
pub fn build_vocab<S: AsRef<str>>(corpus: &[S], target_size: usize, lowercase: bool) -> Result<Vocab> {
    if target_size <= RESERVED.len() {
        return Err(BatError::config(format!(
            "vocabulary size {target_size} leaves no room beyond {} reserved tokens",
            RESERVED.len()
        )));
    }
    let mut freq: IndexMap<String, usize> = IndexMap::new();
    for text in corpus {
        let text = if lowercase {
            text.as_ref().to_lowercase()
        } else {
            text.as_ref().to_string()
        };
        for w in pre_tokenize(&text) {
            if w.text.chars().count() <= MAX_WORD_CHARS {
                *freq.entry(w.text).or_default() += 1;
            }
        }
    }
    if freq.is_empty() {
        return Err(BatError::data("empty corpus"));
    }

    let mut words: Vec<(Vec<String>, usize)> = freq
        .iter()
        .map(|(w, &n)| {
            let syms = w
                .chars()
                .enumerate()
                .map(|(i, c)| {
                    if i == 0 {
                        c.to_string()
                    } else {
                        format!("{CONTINUATION}{c}")
                    }
                })
                .collect();
            (syms, n)
        })
        .collect();

    let alphabet: BTreeSet<String> = words.iter().flat_map(|(s, _)| s.iter().cloned()).collect();
    let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
    let mut seen: std::collections::HashSet<String> = tokens.iter().cloned().collect();
    for a in alphabet {
        if seen.insert(a.clone()) {
            tokens.push(a);
        }
    }

    while tokens.len() < target_size {
        let mut pairs: HashMap<(&str, &str), usize> = HashMap::new();
        for (syms, n) in &words {
            for w in syms.windows(2) {
                *pairs.entry((w[0].as_str(), w[1].as_str())).or_default() += n;
            }
        }
        let best = pairs
            .into_iter()
            .map(|((l, r), n)| (n, merge_name(l, r), l.to_string(), r.to_string()))
            .max_by(|a, b| a.0.cmp(&b.0).then_with(|| b.1.cmp(&a.1)).then_with(|| b.2.cmp(&a.2)));
        let Some((_, merged, left, right)) = best else {
            break;
        };
        for (syms, _) in &mut words {
            let mut i = 0;
            while i + 1 < syms.len() {
                if syms[i] == left && syms[i + 1] == right {
                    syms[i] = merged.clone();
                    syms.remove(i + 1);
                }
                i += 1;
            }
        }
        if seen.insert(merged.clone()) {
            tokens.push(merged);
        }
    }
    Vocab::from_tokens(tokens, lowercase)
}

fn merge_name(left: &str, right: &str) -> String {
    let mut s = left.to_string();
    s.push_str(right.strip_prefix(CONTINUATION).unwrap_or(right));
    s
}

/// Bytes-on-the-wire form of one model input.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizedExample {
    pub input_ids: Vec<u32>,
    pub segment_ids: Vec<u8>,
    pub position_ids: Vec<u32>,
    pub attention_mask: Vec<u8>,
    /// True at the first piece of each word of the first segment.
    pub word_start: Vec<bool>,
    /// Words in the first segment before truncation.
    pub num_words: usize,
}

impl TokenizedExample {
    pub fn max_len(&self) -> usize {
        self.input_ids.len()
    }

    /// Number of non-padding positions.
    pub fn real_len(&self) -> usize {
        self.attention_mask.iter().filter(|&&m| m == 1).count()
    }

    /// Ids strictly between `[CLS]` and the first `[SEP]`.
    pub fn content_ids(&self) -> &[u32] {
        let end = self
            .input_ids
            .iter()
            .position(|&t| t == SEP_ID)
            .unwrap_or(self.input_ids.len());
        &self.input_ids[1..end]
    }

    /// Words of the first segment that survived truncation.
    pub fn kept_words(&self) -> usize {
        self.word_start.iter().filter(|&&s| s).count()
    }

    pub fn is_special(&self, pos: usize) -> bool {
        matches!(self.input_ids[pos], CLS_ID | SEP_ID | PAD_ID)
    }
}

fn check_max_len(max_len: usize, min: usize) -> Result<()> {
    if max_len < min {
        return Err(BatError::config(format!(
            "max_len {max_len} too small; need at least {min}"
        )));
    }
    Ok(())
}

/// `[CLS] tokens [SEP]`, right-truncated to fit and right-padded to
/// `max_len`.
pub fn encode_sequence(tokens: &[u32], word_start: &[bool], max_len: usize) -> Result<TokenizedExample> {
    check_max_len(max_len, 3)?;
    if word_start.len() != tokens.len() {
        return Err(BatError::usage("word_start flags must match tokens"));
    }
    let keep = tokens.len().min(max_len - 2);
    let mut ids = Vec::with_capacity(max_len);
    let mut starts = Vec::with_capacity(max_len);
    ids.push(CLS_ID);
    starts.push(false);
    ids.extend_from_slice(&tokens[..keep]);
    starts.extend_from_slice(&word_start[..keep]);
    ids.push(SEP_ID);
    starts.push(false);
    Ok(pad(ids, vec![0; keep + 2], starts, max_len, count_words(word_start)))
}

/// `[CLS] a [SEP] b [SEP]` with segment ids 0 then 1. The longer side is
/// trimmed first until the pair fits.
pub fn encode_pair(
    a: &[u32],
    a_start: &[bool],
    b: &[u32],
    max_len: usize,
) -> Result<TokenizedExample> {
    check_max_len(max_len, 5)?;
    if a_start.len() != a.len() {
        return Err(BatError::usage("word_start flags must match tokens"));
    }
    let (mut na, mut nb) = (a.len(), b.len());
    while na + nb > max_len - 3 {
        if na >= nb {
            na -= 1;
        } else {
            nb -= 1;
        }
    }
    let mut ids = vec![CLS_ID];
    ids.extend_from_slice(&a[..na]);
    ids.push(SEP_ID);
    ids.extend_from_slice(&b[..nb]);
    ids.push(SEP_ID);
    let mut segs = vec![0u8; na + 2];
    segs.extend(std::iter::repeat(1u8).take(nb + 1));
    let mut starts = vec![false];
    starts.extend_from_slice(&a_start[..na]);
    starts.extend(std::iter::repeat(false).take(nb + 2));
    Ok(pad(ids, segs, starts, max_len, count_words(a_start)))
}

fn count_words(starts: &[bool]) -> usize {
    starts.iter().filter(|&&s| s).count()
}

fn pad(
    mut ids: Vec<u32>,
    mut segs: Vec<u8>,
    mut starts: Vec<bool>,
    max_len: usize,
    num_words: usize,
) -> TokenizedExample {
    let real = ids.len();
    ids.resize(max_len, PAD_ID);
    segs.resize(max_len, 0);
    starts.resize(max_len, false);
    let mut mask = vec![1u8; real];
    mask.resize(max_len, 0);
    TokenizedExample {
        input_ids: ids,
        segment_ids: segs,
        position_ids: (0..max_len as u32).collect(),
        attention_mask: mask,
        word_start: starts,
        num_words,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Bio {
    B,
    I,
    O,
}

impl Bio {
    pub fn index(self) -> usize {
        match self {
            Bio::B => 0,
            Bio::I => 1,
            Bio::O => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(Bio::B),
            1 => Some(Bio::I),
            2 => Some(Bio::O),
            _ => None,
        }
    }

    pub fn as_char(self) -> char {
        match self {
            Bio::B => 'B',
            Bio::I => 'I',
            Bio::O => 'O',
        }
    }
}

/// Moves word-level labels onto the first piece of each word. Continuation
/// pieces and special tokens get `O` with score-mask 0. Labels for words
/// cut off by truncation are dropped.
pub fn align_bio(word_labels: &[Bio], ex: &TokenizedExample) -> Result<(Vec<Bio>, Vec<bool>)> {
    if word_labels.len() != ex.num_words {
        return Err(BatError::data(format!(
            "{} labels for {} words",
            word_labels.len(),
            ex.num_words
        )));
    }
    let mut labels = vec![Bio::O; ex.max_len()];
    let mut score = vec![false; ex.max_len()];
    let mut w = 0;
    for pos in 0..ex.max_len() {
        if ex.word_start[pos] {
            labels[pos] = word_labels[w];
            score[pos] = true;
            w += 1;
        }
    }
    Ok((labels, score))
}
