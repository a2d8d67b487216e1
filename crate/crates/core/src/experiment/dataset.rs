//! Loading and splitting task data for a run.

use std::path::{Path, PathBuf};

use super::config::{DataSource, TrainConfig};
use crate::data::{
    load_xml, make_ae_examples, make_asc_examples, read_records, split_last, synthetic, AeExample,
    AscExample, RawSentence, Record,
};
use crate::error::{BatError, Result};
use crate::metrics::{span_set, SpanSet};
use crate::model::Batch;
use crate::task::Task;
use crate::tokenizer::{build_vocab, Vocab};

/// Environment variable naming the directory with the official files.
pub const DATA_DIR_ENV: &str = "BAT_DATA_DIR";

/// Seed offset separating the generated test corpus from training.
const SYNTHETIC_TEST_OFFSET: u64 = 0x5EED;

#[derive(Debug, Clone, PartialEq)]
pub enum Examples {
    Ae(Vec<AeExample>),
    Asc(Vec<AscExample>),
}

impl Examples {
    pub fn len(&self) -> usize {
        match self {
            Examples::Ae(v) => v.len(),
            Examples::Asc(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn task(&self) -> Task {
        match self {
            Examples::Ae(_) => Task::Ae,
            Examples::Asc(_) => Task::Asc,
        }
    }

    /// Batch of the examples at `indices`, in that order.
    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        match self {
            Examples::Ae(v) => Batch::ae(indices.iter().map(|&i| &v[i])),
            Examples::Asc(v) => Batch::asc(indices.iter().map(|&i| &v[i])),
        }
    }

    /// Consecutive batches covering every example once.
    pub fn batches(&self, batch_size: usize) -> Result<Vec<Batch>> {
        let idx: Vec<usize> = (0..self.len()).collect();
        idx.chunks(batch_size.max(1)).map(|c| self.batch(c)).collect()
    }

    pub fn gold_spans(&self) -> Option<Vec<SpanSet>> {
        match self {
            Examples::Ae(v) => Some(v.iter().map(|e| span_set(&e.word_labels)).collect()),
            Examples::Asc(_) => None,
        }
    }

    pub fn gold_classes(&self) -> Option<Vec<usize>> {
        match self {
            Examples::Asc(v) => Some(v.iter().map(AscExample::label).collect()),
            Examples::Ae(_) => None,
        }
    }

    fn split_last(self, n: usize) -> Result<(Examples, Examples)> {
        if n == 0 {
            let empty = match &self {
                Examples::Ae(_) => Examples::Ae(Vec::new()),
                Examples::Asc(_) => Examples::Asc(Vec::new()),
            };
            return Ok((self, empty));
        }
        Ok(match self {
            Examples::Ae(v) => {
                let (a, b) = split_last(v, n)?;
                (Examples::Ae(a), Examples::Ae(b))
            }
            Examples::Asc(v) => {
                let (a, b) = split_last(v, n)?;
                (Examples::Asc(a), Examples::Asc(b))
            }
        })
    }
}

/// Everything a run needs, shared read-only across seeds and sweep cells.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub dataset: String,
    pub task: Task,
    pub vocab: Vocab,
    pub train: Examples,
    pub validation: Examples,
    pub test: Examples,
}

pub fn examples_for(task: Task, sentences: &[RawSentence], vocab: &Vocab, max_len: usize) -> Result<Examples> {
    Ok(match task {
        Task::Ae => Examples::Ae(make_ae_examples(sentences, vocab, max_len)?),
        Task::Asc => Examples::Asc(make_asc_examples(sentences, vocab, max_len)?),
    })
}

fn examples_from_records(task: Task, records: Vec<Record>, path: &Path) -> Result<Examples> {
    let mismatch = || {
        BatError::data(format!(
            "{} holds records of the other task; expected {task}",
            path.display()
        ))
    };
    match task {
        Task::Ae => records
            .into_iter()
            .map(|r| match r {
                Record::Ae(e) => Ok(e),
                Record::Asc(_) => Err(mismatch()),
            })
            .collect::<Result<Vec<_>>>()
            .map(Examples::Ae),
        Task::Asc => records
            .into_iter()
            .map(|r| match r {
                Record::Asc(e) => Ok(e),
                Record::Ae(_) => Err(mismatch()),
            })
            .collect::<Result<Vec<_>>>()
            .map(Examples::Asc),
    }
}

pub fn vocab_from_sentences(sentences: &[RawSentence], size: usize, lowercase: bool) -> Result<Vocab> {
    let texts: Vec<&str> = sentences.iter().map(|s| s.text.as_str()).collect();
    build_vocab(&texts, size, lowercase)
}

/// Loads, tokenizes and splits the configured data. All data errors are
/// raised here, before any training.
pub fn prepare_data(cfg: &TrainConfig) -> Result<PreparedData> {
    cfg.check_data()?;
    let (vocab, train, test) = match &cfg.data {
        DataSource::Synthetic { train, test, seed } => {
            let tr = synthetic::sentences(*train, *seed);
            let te = synthetic::sentences(*test, seed.wrapping_add(SYNTHETIC_TEST_OFFSET));
            let vocab = vocab_from_sentences(&tr, cfg.vocab_size, cfg.lowercase)?;
            let a = examples_for(cfg.task, &tr, &vocab, cfg.max_len)?;
            let b = examples_for(cfg.task, &te, &vocab, cfg.max_len)?;
            (vocab, a, b)
        }
        DataSource::Xml { train, test } => {
            let tr = load_xml(train)?;
            let te = load_xml(test)?;
            let vocab = vocab_from_sentences(&tr, cfg.vocab_size, cfg.lowercase)?;
            let a = examples_for(cfg.task, &tr, &vocab, cfg.max_len)?;
            let b = examples_for(cfg.task, &te, &vocab, cfg.max_len)?;
            (vocab, a, b)
        }
        DataSource::Records { train, test, vocab } => {
            let vocab = Vocab::load(vocab, cfg.lowercase)?;
            let a = examples_from_records(cfg.task, read_records(train)?, train)?;
            let b = examples_from_records(cfg.task, read_records(test)?, test)?;
            (vocab, a, b)
        }
    };
    if test.is_empty() {
        return Err(BatError::data("test set is empty"));
    }
    let (train, validation) = train.split_last(cfg.validation_size)?;
    if train.is_empty() {
        return Err(BatError::data("training set is empty"));
    }
    Ok(PreparedData {
        dataset: cfg.dataset.clone(),
        task: cfg.task,
        vocab,
        train,
        validation,
        test,
    })
}

/// Examples from a SemEval XML file or a record file, told apart by the
/// first non-blank character.
pub fn load_examples(task: Task, path: &Path, vocab: &Vocab, max_len: usize) -> Result<Examples> {
    let text = std::fs::read_to_string(path).map_err(|e| BatError::io(path, e))?;
    if text.trim_start().starts_with('<') {
        examples_for(task, &crate::data::parse_auto(&text)?, vocab, max_len)
    } else {
        examples_from_records(task, read_records(path)?, path)
    }
}

/// Points a config that names an official dataset, and no files, at the
/// files under `data_dir`.
pub fn resolve_dataset(cfg: &mut TrainConfig, data_dir: Option<&Path>) -> Result<()> {
    if !matches!(cfg.data, DataSource::Synthetic { .. }) || official_files(&cfg.dataset).is_none() {
        return Ok(());
    }
    let dir = data_dir.ok_or_else(|| {
        BatError::config(format!(
            "dataset {} needs a data directory ({DATA_DIR_ENV})",
            cfg.dataset
        ))
    })?;
    cfg.data = resolve_official(&cfg.dataset, dir)?;
    Ok(())
}

/// Official file names tried under the data directory, by dataset label.
pub fn official_files(dataset: &str) -> Option<(&'static [&'static str], &'static [&'static str])> {
    match dataset {
        "laptop" => Some((
            &["Laptop_Train_v2.xml", "Laptops_Train.xml", "Laptop_Train.xml"],
            &["Laptops_Test_Gold.xml", "Laptop_Test_Gold.xml"],
        )),
        "rest14" => Some((
            &["Restaurants_Train_v2.xml", "Restaurants_Train.xml"],
            &["Restaurants_Test_Gold.xml"],
        )),
        "rest16" => Some((
            &["ABSA16_Restaurants_Train_SB1_v2.xml", "ABSA16_Restaurants_Train_SB1.xml"],
            &["EN_REST_SB1_TEST.xml.gold", "EN_REST_SB1_TEST_gold.xml"],
        )),
        _ => None,
    }
}

/// Finds the official train and test files for `dataset` in `dir`.
pub fn resolve_official(dataset: &str, dir: &Path) -> Result<DataSource> {
    let (train, test) = official_files(dataset)
        .ok_or_else(|| BatError::config(format!("no official files known for dataset {dataset:?}")))?;
    let find = |names: &[&str]| -> Result<PathBuf> {
        names
            .iter()
            .map(|n| dir.join(n))
            .find(|p| p.is_file())
            .ok_or_else(|| {
                BatError::config(format!(
                    "none of {names:?} found in {}",
                    dir.display()
                ))
            })
    };
    Ok(DataSource::Xml {
        train: find(train)?,
        test: find(test)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(task: Task) -> TrainConfig {
        let mut c = TrainConfig::new(task);
        c.data = DataSource::Synthetic {
            train: 60,
            test: 20,
            seed: 5,
        };
        c.validation_size = 10;
        c
    }

    #[test]
    fn synthetic_split_sizes() {
        let d = prepare_data(&small(Task::Ae)).unwrap();
        assert_eq!((d.train.len(), d.validation.len(), d.test.len()), (50, 10, 20));
        let d = prepare_data(&small(Task::Asc)).unwrap();
        assert_eq!(d.validation.len(), 10);
        assert!(d.train.len() > 10);
    }

    #[test]
    fn zero_validation_is_allowed() {
        let mut c = small(Task::Ae);
        c.validation_size = 0;
        let d = prepare_data(&c).unwrap();
        assert_eq!(d.train.len(), 60);
        assert!(d.validation.is_empty());
    }

    #[test]
    fn batches_cover_everything() {
        let d = prepare_data(&small(Task::Ae)).unwrap();
        let b = d.train.batches(16).unwrap();
        assert_eq!(b.iter().map(|b| b.size).collect::<Vec<_>>(), [16, 16, 16, 2]);
    }

    #[test]
    fn unknown_official_dataset() {
        assert!(resolve_official("mystery", Path::new(".")).is_err());
        let dir = tempfile::tempdir().unwrap();
        assert!(resolve_official("laptop", dir.path()).is_err());
        std::fs::write(dir.path().join("Laptops_Train.xml"), "<sentences/>").unwrap();
        std::fs::write(dir.path().join("Laptops_Test_Gold.xml"), "<sentences/>").unwrap();
        assert!(matches!(
            resolve_official("laptop", dir.path()).unwrap(),
            DataSource::Xml { .. }
        ));
    }
}
