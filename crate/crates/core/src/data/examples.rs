//! Task examples built from parsed sentences.

use serde::{Deserialize, Serialize};

use super::semeval::{Polarity, RawSentence};
use crate::error::{BatError, Result};
use crate::tokenizer::{align_bio, encode_pair, encode_sequence, pre_tokenize, Bio, TokenizedExample, Vocab, Word};

/// Validation examples taken from the end of the training file.
pub const VALIDATION_SIZE: usize = 150;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AeExample {
    pub id: String,
    pub tokens: TokenizedExample,
    /// Per-piece labels; only positions with `score_mask` set are scored.
    pub labels: Vec<Bio>,
    pub score_mask: Vec<bool>,
    /// Word-level gold labels for the words kept after truncation.
    pub word_labels: Vec<Bio>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AscExample {
    pub id: String,
    pub tokens: TokenizedExample,
    pub aspect: String,
    pub polarity: Polarity,
}

impl AscExample {
    pub fn label(&self) -> usize {
        self.polarity.class().expect("ASC examples hold a three-way polarity")
    }
}

/// Word-level BIO tags from character spans: the first word touching a span
/// is `B`, later words touching it are `I`.
pub fn word_bio(sentence: &RawSentence, words: &[Word]) -> Result<Vec<Bio>> {
    let mut labels = vec![Bio::O; words.len()];
    let mut aspects: Vec<_> = sentence.aspects.iter().collect();
    aspects.sort_by_key(|a| a.from);
    for a in aspects {
        let mut first = true;
        for (i, w) in words.iter().enumerate() {
            if w.start < a.to && a.from < w.end {
                if labels[i] != Bio::O {
                    return Err(BatError::data_in(
                        &sentence.id,
                        format!("word {:?} touches more than one aspect", w.text),
                    ));
                }
                labels[i] = if first { Bio::B } else { Bio::I };
                first = false;
            }
        }
        if first {
            return Err(BatError::data_in(
                &sentence.id,
                format!("aspect {:?} covers no word", a.term),
            ));
        }
    }
    Ok(labels)
}

pub fn make_ae_example(sentence: &RawSentence, vocab: &Vocab, max_len: usize) -> Result<AeExample> {
    let words = pre_tokenize(&sentence.text);
    let word_labels = word_bio(sentence, &words)?;
    let (ids, starts) = vocab.tokenize_words(&words);
    let tokens = encode_sequence(&ids, &starts, max_len)?;
    let kept = tokens.kept_words();
    if word_labels[kept..].iter().any(|&l| l != Bio::O) {
        return Err(BatError::data_in(
            &sentence.id,
            format!("aspect truncated away at max_len {max_len}"),
        ));
    }
    let (labels, score_mask) = align_bio(&word_labels, &tokens)?;
    Ok(AeExample {
        id: sentence.id.clone(),
        tokens,
        labels,
        score_mask,
        word_labels: word_labels[..kept].to_vec(),
    })
}

pub fn make_ae_examples(sentences: &[RawSentence], vocab: &Vocab, max_len: usize) -> Result<Vec<AeExample>> {
    sentences
        .iter()
        .map(|s| make_ae_example(s, vocab, max_len))
        .collect()
}

/// One example per aspect with a three-way polarity; the aspect term is
/// encoded as the second segment.
pub fn make_asc_examples(sentences: &[RawSentence], vocab: &Vocab, max_len: usize) -> Result<Vec<AscExample>> {
    let mut out = Vec::new();
    for s in sentences {
        let aspects: Vec<_> = s.aspects.iter().filter(|a| a.polarity.class().is_some()).collect();
        if aspects.is_empty() {
            continue;
        }
        let (ids, starts) = vocab.tokenize(&s.text);
        for a in aspects {
            let (aspect_ids, _) = vocab.tokenize(&a.term);
            out.push(AscExample {
                id: s.id.clone(),
                tokens: encode_pair(&ids, &starts, &aspect_ids, max_len)?,
                aspect: a.term.clone(),
                polarity: a.polarity,
            });
        }
    }
    Ok(out)
}

/// Keeps file order; the last `VALIDATION_SIZE` examples become validation.
pub fn split_train_validation<T>(examples: Vec<T>) -> Result<(Vec<T>, Vec<T>)> {
    split_last(examples, VALIDATION_SIZE)
}

pub fn split_last<T>(mut examples: Vec<T>, n: usize) -> Result<(Vec<T>, Vec<T>)> {
    if examples.len() <= n {
        return Err(BatError::data(format!(
            "need more than {n} examples to hold out {n} for validation, got {}",
            examples.len()
        )));
    }
    let validation = examples.split_off(examples.len() - n);
    Ok((examples, validation))
}

/// Character spans `[from, to)` recovered from word-level BIO labels.
pub fn spans_from_word_labels(labels: &[Bio], words: &[Word]) -> Vec<(usize, usize)> {
    crate::metrics::decode_bio(labels)
        .into_iter()
        .map(|(s, e)| (words[s].start, words[e].end))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::semeval::AspectSpan;
    use crate::tokenizer::{build_vocab, SEP_ID};

    fn sentence(text: &str, aspects: &[(&str, Polarity)]) -> RawSentence {
        let aspects = aspects
            .iter()
            .map(|(term, p)| {
                let byte = text.find(term).unwrap();
                let from = text[..byte].chars().count();
                AspectSpan {
                    term: term.to_string(),
                    from,
                    to: from + term.chars().count(),
                    polarity: *p,
                }
            })
            .collect();
        RawSentence {
            id: "s".into(),
            text: text.into(),
            aspects,
        }
    }

    fn vocab_for(texts: &[&str]) -> Vocab {
        build_vocab(texts, 200, true).unwrap()
    }

    #[test]
    fn single_word_aspect() {
        let s = sentence("The spaghetti was great", &[("spaghetti", Polarity::Positive)]);
        let words = pre_tokenize(&s.text);
        assert_eq!(word_bio(&s, &words).unwrap(), [Bio::O, Bio::B, Bio::O, Bio::O]);
    }

    #[test]
    fn multi_word_aspect_and_no_aspect() {
        let s = sentence("the hard disk failed", &[("hard disk", Polarity::Negative)]);
        let words = pre_tokenize(&s.text);
        assert_eq!(word_bio(&s, &words).unwrap(), [Bio::O, Bio::B, Bio::I, Bio::O]);

        let s = sentence("nothing to see", &[]);
        let words = pre_tokenize(&s.text);
        assert_eq!(word_bio(&s, &words).unwrap(), [Bio::O; 3]);
    }

    #[test]
    fn ae_example_aligns_pieces() {
        let s = sentence("The spaghetti was great", &[("spaghetti", Polarity::Positive)]);
        let v = build_vocab(&["the spaghetti was great"], 24, true).unwrap();
        let e = make_ae_example(&s, &v, 64).unwrap();
        // spaghetti is split into several pieces; only its first is scored
        let scored: Vec<Bio> = e
            .labels
            .iter()
            .zip(&e.score_mask)
            .filter(|(_, &m)| m)
            .map(|(&l, _)| l)
            .collect();
        assert_eq!(scored, [Bio::O, Bio::B, Bio::O, Bio::O]);
        assert!(e.tokens.real_len() > 6);
    }

    #[test]
    fn truncated_aspect_is_an_error() {
        let s = sentence("a b c d e target", &[("target", Polarity::Positive)]);
        let v = vocab_for(&["a b c d e target"]);
        let err = make_ae_example(&s, &v, 6).unwrap_err();
        assert!(err.to_string().contains("truncated"));
        // an O-only tail may be cut
        let s = sentence("target a b c d e", &[("target", Polarity::Positive)]);
        let e = make_ae_example(&s, &v, 6).unwrap();
        assert_eq!(e.word_labels.len(), 4);
    }

    #[test]
    fn asc_duplicates_per_aspect_and_drops_conflict() {
        let v = vocab_for(&["great food but slow service"]);
        let s = sentence(
            "great food but slow service",
            &[("food", Polarity::Positive), ("service", Polarity::Negative)],
        );
        let ex = make_asc_examples(&[s], &v, 32).unwrap();
        assert_eq!(ex.len(), 2);
        assert_eq!((ex[0].label(), ex[1].label()), (0, 1));
        assert_eq!(ex[1].aspect, "service");
        assert_eq!(ex[0].tokens.input_ids.iter().filter(|&&t| t == SEP_ID).count(), 2);
        assert_ne!(ex[0].tokens.input_ids, ex[1].tokens.input_ids);

        let c = sentence("great food but slow service", &[("food", Polarity::Conflict)]);
        assert!(make_asc_examples(&[c], &v, 32).unwrap().is_empty());
        let none = sentence("great food", &[]);
        assert!(make_asc_examples(&[none], &v, 32).unwrap().is_empty());
    }

    #[test]
    fn validation_split() {
        let (t, v) = split_train_validation((0..500).collect()).unwrap();
        assert_eq!((t.len(), v.len()), (350, 150));
        assert_eq!(v[0], 350);
        assert_eq!(*v.last().unwrap(), 499);
        let (t, v) = split_train_validation((0..151).collect()).unwrap();
        assert_eq!((t, v.len()), (vec![0], 150));
        assert!(split_train_validation((0..150).collect::<Vec<_>>()).is_err());
    }

    #[test]
    fn bio_spans_reproduce_terms() {
        let s = sentence(
            "The hard-disk and battery life (sadly) died.",
            &[("hard-disk", Polarity::Negative), ("battery life", Polarity::Negative)],
        );
        let words = pre_tokenize(&s.text);
        let labels = word_bio(&s, &words).unwrap();
        let chars: Vec<char> = s.text.chars().collect();
        let terms: Vec<String> = spans_from_word_labels(&labels, &words)
            .into_iter()
            .map(|(a, b)| chars[a..b].iter().collect())
            .collect();
        assert_eq!(terms, ["hard-disk", "battery life"]);
    }
}
