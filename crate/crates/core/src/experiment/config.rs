//! Run configuration and the `key=value` config file format.

use std::fs;
use std::path::{Path, PathBuf};

use crate::adversarial::AdvConfig;
use crate::data::VALIDATION_SIZE;
use crate::error::{BatError, Result};
use crate::model::ModelConfig;
use crate::params::AdamConfig;
use crate::task::Task;

/// Where training and test data come from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    /// Generated sentences; `seed` picks the corpus, test uses a derived seed.
    Synthetic { train: usize, test: usize, seed: u64 },
    /// SemEval XML files (schema detected from the root element).
    Xml { train: PathBuf, test: PathBuf },
    /// Line-delimited JSON records written by `prepare`, with their vocabulary.
    Records { train: PathBuf, test: PathBuf, vocab: PathBuf },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub task: Task,
    /// Label used in outputs.
    pub dataset: String,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub dropout: f64,
    pub epsilon: f64,
    /// Adversarial term on/off; off also when `epsilon == 0`.
    pub adversarial: bool,
    pub seeds: Vec<u64>,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub lowercase: bool,
    /// Examples held out from the end of the training data.
    pub validation_size: usize,
    pub data: DataSource,
    pub out_dir: Option<PathBuf>,
}

impl TrainConfig {
    pub fn new(task: Task) -> Self {
        TrainConfig {
            task,
            dataset: "synthetic".into(),
            lr: 1e-3,
            batch_size: 16,
            epochs: 4,
            dropout: 0.1,
            epsilon: 0.0,
            adversarial: true,
            seeds: vec![1],
            hidden: 64,
            layers: 2,
            heads: 2,
            ff: 256,
            max_len: 64,
            vocab_size: 4000,
            lowercase: true,
            validation_size: VALIDATION_SIZE,
            data: DataSource::Synthetic {
                train: 600,
                test: 200,
                seed: 2024,
            },
            out_dir: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(BatError::config(format!("learning rate {} must be > 0", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(BatError::config("batch size must be at least 1"));
        }
        if self.epochs == 0 {
            return Err(BatError::config("epochs must be at least 1"));
        }
        if self.seeds.is_empty() {
            return Err(BatError::config("at least one seed is required"));
        }
        if self.dataset.is_empty() || self.dataset.contains([',', '\n']) {
            return Err(BatError::config(format!("bad dataset label {:?}", self.dataset)));
        }
        self.adv_config()?;
        self.model_config(5).validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig::with_lr(self.lr)
    }

    pub fn adv_config(&self) -> Result<AdvConfig> {
        if self.adversarial {
            AdvConfig::new(self.task, self.epsilon)
        } else {
            AdvConfig::new(self.task, self.epsilon)?;
            Ok(AdvConfig::disabled(self.task))
        }
    }

    /// Epsilon actually applied.
    pub fn effective_epsilon(&self) -> f64 {
        if self.adversarial {
            self.epsilon
        } else {
            0.0
        }
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            hidden: self.hidden,
            layers: self.layers,
            heads: self.heads,
            ff: self.ff,
            max_len: self.max_len,
            dropout: self.dropout,
            task: self.task,
            lowercase: self.lowercase,
        }
    }

    /// Applies one setting by its config-file / flag name.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let bad = || BatError::config(format!("bad value {value:?} for {key}"));
        macro_rules! parse {
            () => {
                value.trim().parse().map_err(|_| bad())?
            };
        }
        match normalize_key(key).as_str() {
            "task" => self.task = value.parse()?,
            "dataset" => self.dataset = value.trim().to_string(),
            "lr" => self.lr = parse!(),
            "batch-size" => self.batch_size = parse!(),
            "epochs" => self.epochs = parse!(),
            "dropout" => self.dropout = parse!(),
            "epsilon" => self.epsilon = parse!(),
            "adversarial" => self.adversarial = parse!(),
            "seeds" => self.seeds = parse_list(value).map_err(|_| bad())?,
            "hidden" => self.hidden = parse!(),
            "layers" => self.layers = parse!(),
            "heads" => self.heads = parse!(),
            "ff" => self.ff = parse!(),
            "max-len" => self.max_len = parse!(),
            "vocab-size" => self.vocab_size = parse!(),
            "lowercase" => self.lowercase = parse!(),
            "validation-size" => self.validation_size = parse!(),
            "out" => self.out_dir = Some(PathBuf::from(value.trim())),
            "train-file" => self.set_file(Some(value), None, None),
            "test-file" => self.set_file(None, Some(value), None),
            "vocab" => self.set_file(None, None, Some(value)),
            "synthetic-train" | "synthetic-test" | "data-seed" => {
                let (mut train, mut test, mut seed) = match self.data {
                    DataSource::Synthetic { train, test, seed } => (train, test, seed),
                    _ => (600, 200, 2024),
                };
                match normalize_key(key).as_str() {
                    "synthetic-train" => train = parse!(),
                    "synthetic-test" => test = parse!(),
                    _ => seed = parse!(),
                }
                self.data = DataSource::Synthetic { train, test, seed };
            }
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn set_file(&mut self, train: Option<&str>, test: Option<&str>, vocab: Option<&str>) {
        let (mut tr, mut te, mut vo) = match &self.data {
            DataSource::Xml { train, test } => (Some(train.clone()), Some(test.clone()), None),
            DataSource::Records { train, test, vocab } => {
                (Some(train.clone()), Some(test.clone()), Some(vocab.clone()))
            }
            DataSource::Synthetic { .. } => (None, None, None),
        };
        if let Some(p) = train {
            tr = Some(PathBuf::from(p.trim()));
        }
        if let Some(p) = test {
            te = Some(PathBuf::from(p.trim()));
        }
        if let Some(p) = vocab {
            vo = Some(PathBuf::from(p.trim()));
        }
        let train = tr.unwrap_or_default();
        let test = te.unwrap_or_default();
        self.data = match vo {
            Some(vocab) => DataSource::Records { train, test, vocab },
            None => DataSource::Xml { train, test },
        };
    }

    /// Checks that file-backed sources name both files.
    pub fn check_data(&self) -> Result<()> {
        let missing = |p: &Path| p.as_os_str().is_empty();
        match &self.data {
            DataSource::Xml { train, test } | DataSource::Records { train, test, .. }
                if missing(train) || missing(test) =>
            {
                Err(BatError::config("both a training file and a test file are required"))
            }
            _ => Ok(()),
        }
    }
}

/// Lower case, with `_` treated as `-`.
pub fn normalize_key(key: &str) -> String {
    key.trim().to_ascii_lowercase().replace('_', "-")
}

pub fn parse_list<T: std::str::FromStr>(value: &str) -> std::result::Result<Vec<T>, T::Err> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::parse)
        .collect()
}

/// `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| BatError::Parse {
            line: n as u32 + 1,
            message: format!("expected key=value, got {line:?}"),
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn read_kv_file(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).map_err(|e| BatError::io(path, e))?;
    parse_kv(&text)
}
