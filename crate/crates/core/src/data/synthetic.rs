//! Small generated review corpus in the shape of the SemEval data, for
//! smoke runs and demos when the official files are not available.

use rand::seq::SliceRandom;
use rand::Rng;

use super::examples::{make_ae_examples, make_asc_examples, AeExample, AscExample};
use super::semeval::{AspectSpan, Polarity, RawSentence};
use crate::error::Result;
use crate::rng::{stream, Stream};
use crate::tokenizer::{build_vocab, Vocab};

const ASPECTS: &[&str] = &[
    "battery",
    "screen",
    "keyboard",
    "hard disk",
    "battery life",
    "price",
    "touch pad",
    "speakers",
    "food",
    "service",
    "wine list",
    "staff",
];

const POSITIVE: &[&str] = &["great", "excellent", "amazing", "good", "fantastic"];
const NEGATIVE: &[&str] = &["terrible", "awful", "bad", "slow", "poor"];
const NEUTRAL: &[&str] = &["okay", "average", "standard", "acceptable"];

const FILLER: &[&str] = &[
    "i bought it last week",
    "we went there on a sunday",
    "nothing else to report",
    "i use it every day for work",
];

struct Builder {
    text: String,
    aspects: Vec<AspectSpan>,
}

impl Builder {
    fn new() -> Self {
        Builder {
            text: String::new(),
            aspects: Vec::new(),
        }
    }

    fn push(&mut self, s: &str) {
        if !self.text.is_empty() {
            self.text.push(' ');
        }
        self.text.push_str(s);
    }

    fn aspect(&mut self, term: &str, polarity: Polarity) {
        if !self.text.is_empty() {
            self.text.push(' ');
        }
        let from = self.text.chars().count();
        self.text.push_str(term);
        self.aspects.push(AspectSpan {
            term: term.to_string(),
            from,
            to: from + term.chars().count(),
            polarity,
        });
    }
}

fn opinion(rng: &mut impl Rng) -> (Polarity, &'static str) {
    match rng.gen_range(0..3) {
        0 => (Polarity::Positive, POSITIVE.choose(rng).unwrap()),
        1 => (Polarity::Negative, NEGATIVE.choose(rng).unwrap()),
        _ => (Polarity::Neutral, NEUTRAL.choose(rng).unwrap()),
    }
}

/// `n` sentences with zero, one or two aspects each. Roughly one sentence
/// in twenty-five carries a `conflict` aspect.
pub fn sentences(n: usize, seed: u64) -> Vec<RawSentence> {
    let mut rng = stream(seed, Stream::Data);
    (0..n)
        .map(|i| {
            let mut b = Builder::new();
            let mut picks: Vec<&str> = ASPECTS.choose_multiple(&mut rng, 2).copied().collect();
            picks.shuffle(&mut rng);
            match rng.gen_range(0..10) {
                0 => b.push(FILLER.choose(&mut rng).unwrap()),
                1..=5 => {
                    let (p, adj) = opinion(&mut rng);
                    if rng.gen_bool(0.04) {
                        b.push("the");
                        b.aspect(picks[0], Polarity::Conflict);
                        b.push("is great but also bad");
                    } else if rng.gen_bool(0.5) {
                        b.push("the");
                        b.aspect(picks[0], p);
                        b.push(&format!("is {adj}"));
                    } else {
                        b.push(&format!("{adj} {}", if rng.gen_bool(0.5) { "and cheap ," } else { "," }));
                        b.push("especially the");
                        b.aspect(picks[0], p);
                    }
                }
                _ => {
                    let (p1, a1) = opinion(&mut rng);
                    let (p2, a2) = opinion(&mut rng);
                    b.push("the");
                    b.aspect(picks[0], p1);
                    b.push(&format!("was {a1} but the"));
                    b.aspect(picks[1], p2);
                    b.push(&format!("was {a2} ."));
                }
            }
            RawSentence {
                id: format!("syn-{i}"),
                text: b.text,
                aspects: b.aspects,
            }
        })
        .collect()
}

/// Word-piece vocabulary over the texts of `sentences`.
pub fn vocab_for(sentences: &[RawSentence], target_size: usize) -> Result<Vocab> {
    let texts: Vec<&str> = sentences.iter().map(|s| s.text.as_str()).collect();
    build_vocab(&texts, target_size, true)
}

/// Generated extraction set with its vocabulary.
pub fn ae_set(n: usize, seed: u64, max_len: usize) -> Result<(Vocab, Vec<AeExample>)> {
    let s = sentences(n, seed);
    let vocab = vocab_for(&s, 200)?;
    let examples = make_ae_examples(&s, &vocab, max_len)?;
    Ok((vocab, examples))
}

/// Generated sentiment set with its vocabulary; at least `n` examples are
/// produced when possible, truncated to exactly `n`.
pub fn asc_set(n: usize, seed: u64, max_len: usize) -> Result<(Vocab, Vec<AscExample>)> {
    let s = sentences(n * 2, seed);
    let vocab = vocab_for(&s, 200)?;
    let mut examples = make_asc_examples(&s, &vocab, max_len)?;
    examples.truncate(n);
    Ok((vocab, examples))
}
