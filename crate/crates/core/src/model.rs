//! Small BERT-style encoder with a token-tagging head (aspect extraction)
//! and a `[CLS]` classification head (aspect sentiment).

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::checkpoint;
use crate::data::{AeExample, AscExample};
use crate::error::{BatError, Result};
use crate::params::{ParamSet, ParamView};
use crate::rng::{stream, BatRng, Stream};
use crate::tape::{Tape, Var};
use crate::task::Task;
use crate::tensor::{Real, Tensor};
use crate::tokenizer::{encode_pair, encode_sequence, Bio, TokenizedExample, Vocab, CLS_ID, SEP_ID};

const LN_EPS: f64 = 1e-12;
const MASK_NEG: f64 = -1e9;
const SEGMENTS: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub task: Task,
    pub lowercase: bool,
}

impl ModelConfig {
    /// Desk-scale defaults: d=64, two layers, two heads.
    pub fn new(task: Task, vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            hidden: 64,
            layers: 2,
            heads: 2,
            ff: 256,
            max_len: 64,
            dropout: 0.1,
            task,
            lowercase: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(BatError::config(m));
        if self.vocab_size == 0 || self.hidden == 0 || self.heads == 0 || self.ff == 0 {
            return fail(format!("model sizes must be positive: {self:?}"));
        }
        if self.hidden % self.heads != 0 {
            return fail(format!(
                "hidden size {} not divisible by {} heads",
                self.hidden, self.heads
            ));
        }
        if self.layers == 0 {
            return fail("need at least one layer".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        let min_len = match self.task {
            Task::Ae => 3,
            Task::Asc => 5,
        };
        if self.max_len < min_len {
            return fail(format!("max_len {} below {min_len}", self.max_len));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    /// `key=value` lines, stored alongside checkpoints.
    pub fn to_manifest(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            writeln!(s, "{k}={v}").unwrap();
        }
        s
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("task", self.task.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
            ("hidden", self.hidden.to_string()),
            ("layers", self.layers.to_string()),
            ("heads", self.heads.to_string()),
            ("ff", self.ff.to_string()),
            ("max_len", self.max_len.to_string()),
            ("dropout", self.dropout.to_string()),
            ("lowercase", self.lowercase.to_string()),
        ]
    }

    /// Reads the fields it knows from a manifest; other keys are ignored.
    pub fn from_manifest(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::new(Task::Ae, 0);
        let mut seen_task = false;
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| BatError::Parse {
                line: n as u32 + 1,
                message: format!("expected key=value, got {line:?}"),
            })?;
            let (k, v) = (k.trim(), v.trim());
            let bad = || BatError::Parse {
                line: n as u32 + 1,
                message: format!("bad value {v:?} for {k}"),
            };
            let num = || v.parse::<usize>().map_err(|_| bad());
            match k {
                "task" => {
                    cfg.task = v.parse()?;
                    seen_task = true;
                }
                "vocab_size" => cfg.vocab_size = num()?,
                "hidden" => cfg.hidden = num()?,
                "layers" => cfg.layers = num()?,
                "heads" => cfg.heads = num()?,
                "ff" => cfg.ff = num()?,
                "max_len" => cfg.max_len = num()?,
                "dropout" => cfg.dropout = v.parse().map_err(|_| bad())?,
                "lowercase" => cfg.lowercase = v.parse().map_err(|_| bad())?,
                _ => {}
            }
        }
        if !seen_task {
            return Err(BatError::config("model manifest has no task"));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Compact summary used to tag reports.
    pub fn fingerprint(&self) -> String {
        format!(
            "{}-v{}-d{}-L{}-H{}-ff{}-len{}-p{}",
            self.task, self.vocab_size, self.hidden, self.layers, self.heads, self.ff, self.max_len, self.dropout
        )
    }

    /// Every parameter name with its shape, in creation order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, ff) = (self.hidden, self.ff);
        let mut out = vec![
            ("emb.token".to_string(), vec![self.vocab_size, d]),
            ("emb.segment".to_string(), vec![SEGMENTS, d]),
            ("emb.position".to_string(), vec![self.max_len, d]),
            ("emb.ln.gamma".to_string(), vec![d]),
            ("emb.ln.beta".to_string(), vec![d]),
        ];
        for l in 0..self.layers {
            let p = |s: &str| format!("layer{l}.{s}");
            for m in ["q", "k", "v", "o"] {
                out.push((p(&format!("attn.{m}.w")), vec![d, d]));
                out.push((p(&format!("attn.{m}.b")), vec![d]));
            }
            out.push((p("ln1.gamma"), vec![d]));
            out.push((p("ln1.beta"), vec![d]));
            out.push((p("ffn.w1"), vec![d, ff]));
            out.push((p("ffn.b1"), vec![ff]));
            out.push((p("ffn.w2"), vec![ff, d]));
            out.push((p("ffn.b2"), vec![d]));
            out.push((p("ln2.gamma"), vec![d]));
            out.push((p("ln2.beta"), vec![d]));
        }
        out.push(("head.w".to_string(), vec![d, self.task.num_labels()]));
        out.push(("head.b".to_string(), vec![self.task.num_labels()]));
        out
    }
}

/// Role of one position in a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Content,
    Cls,
    Sep,
    Pad,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Labels {
    None,
    /// Per-position BIO index plus an ignore flag for unscored positions.
    Ae { labels: Vec<usize>, ignore: Vec<bool> },
    Asc(Vec<usize>),
}

/// Examples stacked to `[size, seq]`, trimmed to the longest real length.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub seq: usize,
    pub input_ids: Vec<usize>,
    pub segment_ids: Vec<usize>,
    pub position_ids: Vec<usize>,
    pub kinds: Vec<TokenKind>,
    /// Positions of the first piece of each word, per example.
    pub word_positions: Vec<Vec<usize>>,
    pub labels: Labels,
}

impl Batch {
    pub fn from_tokens<'a>(examples: impl IntoIterator<Item = &'a TokenizedExample>) -> Result<Self> {
        let examples: Vec<&TokenizedExample> = examples.into_iter().collect();
        if examples.is_empty() {
            return Err(BatError::usage("empty batch"));
        }
        let seq = examples.iter().map(|e| e.real_len()).max().unwrap_or(0);
        let size = examples.len();
        let mut b = Batch {
            size,
            seq,
            input_ids: Vec::with_capacity(size * seq),
            segment_ids: Vec::with_capacity(size * seq),
            position_ids: Vec::with_capacity(size * seq),
            kinds: Vec::with_capacity(size * seq),
            word_positions: Vec::with_capacity(size),
            labels: Labels::None,
        };
        for e in examples {
            if e.max_len() < seq {
                return Err(BatError::usage("example shorter than batch length"));
            }
            for p in 0..seq {
                let id = e.input_ids[p];
                b.input_ids.push(id as usize);
                b.segment_ids.push(e.segment_ids[p] as usize);
                b.position_ids.push(e.position_ids[p] as usize);
                b.kinds.push(if e.attention_mask[p] == 0 {
                    TokenKind::Pad
                } else if id == CLS_ID {
                    TokenKind::Cls
                } else if id == SEP_ID {
                    TokenKind::Sep
                } else {
                    TokenKind::Content
                });
            }
            b.word_positions
                .push((0..seq).filter(|&p| e.word_start[p]).collect());
        }
        Ok(b)
    }

    pub fn ae<'a>(examples: impl IntoIterator<Item = &'a AeExample>) -> Result<Self> {
        let examples: Vec<&AeExample> = examples.into_iter().collect();
        let mut b = Batch::from_tokens(examples.iter().map(|e| &e.tokens))?;
        let mut labels = Vec::with_capacity(b.size * b.seq);
        let mut ignore = Vec::with_capacity(b.size * b.seq);
        for e in &examples {
            for p in 0..b.seq {
                labels.push(e.labels[p].index());
                ignore.push(!e.score_mask[p]);
            }
        }
        b.labels = Labels::Ae { labels, ignore };
        Ok(b)
    }

    pub fn asc<'a>(examples: impl IntoIterator<Item = &'a AscExample>) -> Result<Self> {
        let examples: Vec<&AscExample> = examples.into_iter().collect();
        let mut b = Batch::from_tokens(examples.iter().map(|e| &e.tokens))?;
        b.labels = Labels::Asc(examples.iter().map(|e| e.label()).collect());
        Ok(b)
    }

    pub fn rows(&self) -> usize {
        self.size * self.seq
    }

    pub fn kind(&self, example: usize, pos: usize) -> TokenKind {
        self.kinds[example * self.seq + pos]
    }

    pub fn is_pad(&self, row: usize) -> bool {
        self.kinds[row] == TokenKind::Pad
    }

    /// Additive attention mask `[size * heads, seq, seq]`: large negative on
    /// padded keys.
    fn attention_bias<T: Real>(&self, heads: usize) -> Tensor<T> {
        let (b, l) = (self.size, self.seq);
        let mut data = vec![T::zero(); b * heads * l * l];
        let neg = T::lit(MASK_NEG);
        for e in 0..b {
            for h in 0..heads {
                let base = (e * heads + h) * l * l;
                for q in 0..l {
                    for k in 0..l {
                        if self.kinds[e * l + k] == TokenKind::Pad {
                            data[base + q * l + k] = neg;
                        }
                    }
                }
            }
        }
        Tensor::new(vec![b * heads, l, l], data).expect("mask shape")
    }
}

/// Forward-pass settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pass {
    pub training: bool,
    /// Read parameters as constants.
    pub detached: bool,
}

impl Pass {
    pub const TRAIN: Pass = Pass {
        training: true,
        detached: false,
    };
    pub const EVAL: Pass = Pass {
        training: false,
        detached: false,
    };

    pub fn detached(self) -> Self {
        Pass {
            detached: true,
            ..self
        }
    }
}

#[derive(Debug, Clone)]
pub struct Model<T: Real> {
    pub config: ModelConfig,
    pub params: ParamSet<T>,
}

/// Task predictions for one batch.
#[derive(Debug, Clone, PartialEq)]
pub enum Prediction {
    /// Word-level BIO tags per example.
    Ae(Vec<Vec<Bio>>),
    Asc(Vec<usize>),
}

impl<T: Real> Model<T> {
    /// Truncated-normal weights (std 0.02), zero biases, unit layer-norm
    /// gains.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(seed, Stream::Init);
        let mut params = ParamSet::new();
        for (name, shape) in config.param_shapes() {
            if name.ends_with(".gamma") {
                params.insert_filled(&name, &shape, 1.0)?;
            } else if name.ends_with(".beta") || shape.len() == 1 {
                params.insert_filled(&name, &shape, 0.0)?;
            } else {
                params.insert_weight(&name, &shape, &mut rng)?;
            }
        }
        Ok(Model { config, params })
    }

    /// Wraps an existing parameter set after checking names and shapes.
    pub fn from_params(config: ModelConfig, params: ParamSet<T>) -> Result<Self> {
        config.validate()?;
        let expected = config.param_shapes();
        if expected.len() != params.len() {
            return Err(BatError::config(format!(
                "expected {} parameters, found {}",
                expected.len(),
                params.len()
            )));
        }
        for (name, shape) in &expected {
            let t = params
                .get(name)
                .ok_or_else(|| BatError::config(format!("missing parameter {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(BatError::config(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(Model { config, params })
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    fn view(&self, pass: Pass) -> ParamView<'_, T> {
        if pass.detached {
            self.params.detached()
        } else {
            self.params.view()
        }
    }

    fn p(&self, tape: &mut Tape<T>, pass: Pass, name: &str) -> Result<Var> {
        tape.param(self.view(pass), name)
    }

    /// Token + segment + position embeddings, before normalization.
    pub fn embed_sum(&self, tape: &mut Tape<T>, batch: &Batch, pass: Pass) -> Result<Var> {
        if batch.segment_ids.iter().any(|&s| s >= SEGMENTS) {
            return Err(BatError::Index(format!("segment id outside 0..{SEGMENTS}")));
        }
        let tok = self.p(tape, pass, "emb.token")?;
        let seg = self.p(tape, pass, "emb.segment")?;
        let pos = self.p(tape, pass, "emb.position")?;
        let t = tape.gather(tok, &batch.input_ids)?;
        let s = tape.gather(seg, &batch.segment_ids)?;
        let p = tape.gather(pos, &batch.position_ids)?;
        let ts = tape.add(t, s)?;
        tape.add(ts, p)
    }

    /// Embedding-layer output `x` as `[size * seq, d]`: summed embeddings,
    /// layer norm, dropout.
    pub fn embed(&self, tape: &mut Tape<T>, batch: &Batch, pass: Pass, rng: &mut BatRng) -> Result<Var> {
        let sum = self.embed_sum(tape, batch, pass)?;
        let g = self.p(tape, pass, "emb.ln.gamma")?;
        let b = self.p(tape, pass, "emb.ln.beta")?;
        let x = tape.layer_norm(sum, g, b, LN_EPS)?;
        tape.dropout(x, self.config.dropout, pass.training, rng)
    }

    fn linear(&self, tape: &mut Tape<T>, pass: Pass, x: Var, w: &str, b: &str) -> Result<Var> {
        let w = self.p(tape, pass, w)?;
        let b = self.p(tape, pass, b)?;
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }

    fn norm(&self, tape: &mut Tape<T>, pass: Pass, x: Var, prefix: &str) -> Result<Var> {
        let g = self.p(tape, pass, &format!("{prefix}.gamma"))?;
        let b = self.p(tape, pass, &format!("{prefix}.beta"))?;
        tape.layer_norm(x, g, b, LN_EPS)
    }

    /// Post-norm transformer blocks over `x[size * seq, d]`.
    pub fn encode(&self, tape: &mut Tape<T>, batch: &Batch, x: Var, pass: Pass, rng: &mut BatRng) -> Result<Var> {
        let cfg = &self.config;
        let (b, l, h) = (batch.size, batch.seq, cfg.heads);
        let p = cfg.dropout;
        let bias = batch.attention_bias::<T>(h);
        let scale = 1.0 / (cfg.head_dim() as f64).sqrt();
        let mut hid = x;
        for layer in 0..cfg.layers {
            let n = |s: &str| format!("layer{layer}.{s}");
            let q = self.linear(tape, pass, hid, &n("attn.q.w"), &n("attn.q.b"))?;
            let k = self.linear(tape, pass, hid, &n("attn.k.w"), &n("attn.k.b"))?;
            let v = self.linear(tape, pass, hid, &n("attn.v.w"), &n("attn.v.b"))?;
            let q = tape.split_heads(q, b, l, h)?;
            let k = tape.split_heads(k, b, l, h)?;
            let v = tape.split_heads(v, b, l, h)?;
            let scores = tape.bmm(q, k, true)?;
            let scores = tape.scale(scores, scale)?;
            let scores = tape.add_const(scores, &bias)?;
            let probs = tape.softmax(scores, 2)?;
            let probs = tape.dropout(probs, p, pass.training, rng)?;
            let ctx = tape.bmm(probs, v, false)?;
            let ctx = tape.merge_heads(ctx, b, l, h)?;
            let attn = self.linear(tape, pass, ctx, &n("attn.o.w"), &n("attn.o.b"))?;
            let attn = tape.dropout(attn, p, pass.training, rng)?;
            let res = tape.add(hid, attn)?;
            hid = self.norm(tape, pass, res, &n("ln1"))?;

            let f = self.linear(tape, pass, hid, &n("ffn.w1"), &n("ffn.b1"))?;
            let f = tape.gelu(f)?;
            let f = self.linear(tape, pass, f, &n("ffn.w2"), &n("ffn.b2"))?;
            let f = tape.dropout(f, p, pass.training, rng)?;
            let res = tape.add(hid, f)?;
            hid = self.norm(tape, pass, res, &n("ln2"))?;
        }
        Ok(hid)
    }

    /// Per-position logits `[size * seq, 3]`.
    pub fn ae_head(&self, tape: &mut Tape<T>, encoded: Var, pass: Pass, rng: &mut BatRng) -> Result<Var> {
        if self.config.task != Task::Ae {
            return Err(BatError::usage("ae_head on a sentiment model"));
        }
        let e = tape.dropout(encoded, self.config.dropout, pass.training, rng)?;
        self.linear(tape, pass, e, "head.w", "head.b")
    }

    /// Logits `[size, 3]` read from the `[CLS]` position of each example.
    pub fn asc_head(
        &self,
        tape: &mut Tape<T>,
        batch: &Batch,
        encoded: Var,
        pass: Pass,
        rng: &mut BatRng,
    ) -> Result<Var> {
        if self.config.task != Task::Asc {
            return Err(BatError::usage("asc_head on an extraction model"));
        }
        let rows: Vec<usize> = (0..batch.size).map(|e| e * batch.seq).collect();
        let cls = tape.select_rows(encoded, &rows)?;
        let cls = tape.dropout(cls, self.config.dropout, pass.training, rng)?;
        self.linear(tape, pass, cls, "head.w", "head.b")
    }

    pub fn head(&self, tape: &mut Tape<T>, batch: &Batch, encoded: Var, pass: Pass, rng: &mut BatRng) -> Result<Var> {
        match self.config.task {
            Task::Ae => self.ae_head(tape, encoded, pass, rng),
            Task::Asc => self.asc_head(tape, batch, encoded, pass, rng),
        }
    }

    /// Encoder, head and mean cross-entropy from a given embedding output.
    /// Examples flagged in `skip` contribute nothing.
    pub fn loss_from_embedding(
        &self,
        tape: &mut Tape<T>,
        batch: &Batch,
        x: Var,
        pass: Pass,
        rng: &mut BatRng,
        skip: Option<&[bool]>,
    ) -> Result<(Var, Var)> {
        let encoded = self.encode(tape, batch, x, pass, rng)?;
        let logits = self.head(tape, batch, encoded, pass, rng)?;
        let skipped = |e: usize| skip.is_some_and(|s| s[e]);
        let loss = match (&batch.labels, self.config.task) {
            (Labels::Ae { labels, ignore }, Task::Ae) => {
                let ignore: Vec<bool> = ignore
                    .iter()
                    .enumerate()
                    .map(|(r, &i)| i || skipped(r / batch.seq))
                    .collect();
                tape.cross_entropy(logits, labels, &ignore)?
            }
            (Labels::Asc(labels), Task::Asc) => {
                let ignore: Vec<bool> = (0..batch.size).map(skipped).collect();
                tape.cross_entropy(logits, labels, &ignore)?
            }
            (Labels::None, _) => return Err(BatError::usage("batch has no labels")),
            _ => {
                return Err(BatError::usage(format!(
                    "batch labels do not match the {} task",
                    self.config.task
                )))
            }
        };
        Ok((loss, logits))
    }

    /// Full forward pass: `(loss, logits)`.
    pub fn task_loss(&self, tape: &mut Tape<T>, batch: &Batch, pass: Pass, rng: &mut BatRng) -> Result<(Var, Var)> {
        let x = self.embed(tape, batch, pass, rng)?;
        self.loss_from_embedding(tape, batch, x, pass, rng, None)
    }

    /// Evaluation-mode logits as a plain tensor.
    pub fn logits(&self, batch: &Batch) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let mut rng = stream(0, Stream::Dropout);
        let pass = Pass::EVAL.detached();
        let x = self.embed(&mut tape, batch, pass, &mut rng)?;
        let enc = self.encode(&mut tape, batch, x, pass, &mut rng)?;
        let logits = self.head(&mut tape, batch, enc, pass, &mut rng)?;
        Ok(tape.value(logits).detached())
    }

    pub fn predict(&self, batch: &Batch) -> Result<Prediction> {
        let logits = self.logits(batch)?;
        let c = self.config.task.num_labels();
        let argmax = |row: usize| -> usize {
            let r = &logits.data()[row * c..(row + 1) * c];
            (0..c).fold(0, |best, j| if r[j] > r[best] { j } else { best })
        };
        Ok(match self.config.task {
            Task::Ae => Prediction::Ae(
                batch
                    .word_positions
                    .iter()
                    .enumerate()
                    .map(|(e, pos)| {
                        pos.iter()
                            .map(|&p| Bio::from_index(argmax(e * batch.seq + p)).expect("3 classes"))
                            .collect()
                    })
                    .collect(),
            ),
            Task::Asc => Prediction::Asc((0..batch.size).map(argmax).collect()),
        })
    }

    /// Mean evaluation-mode loss over batches.
    pub fn eval_loss(&self, batches: &[Batch]) -> Result<f64> {
        let losses = batches
            .par_iter()
            .map(|b| {
                let mut tape = Tape::new();
                let mut rng = stream(0, Stream::Dropout);
                let (loss, _) = self.task_loss(&mut tape, b, Pass::EVAL.detached(), &mut rng)?;
                Ok(tape.value(loss).data()[0].as_f64())
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
    }
}

impl Model<f32> {
    /// Predictions for many batches, evaluated in parallel.
    pub fn predict_all(&self, batches: &[Batch]) -> Result<Vec<Prediction>> {
        batches.par_iter().map(|b| self.predict(b)).collect()
    }

    /// Prediction for one raw sentence. Sentiment models need `aspect`;
    /// extraction models reject it.
    pub fn predict_text(&self, vocab: &Vocab, text: &str, aspect: Option<&str>) -> Result<Prediction> {
        if vocab.len() != self.config.vocab_size {
            return Err(BatError::usage(format!(
                "vocabulary has {} entries, model expects {}",
                vocab.len(),
                self.config.vocab_size
            )));
        }
        let (ids, starts) = vocab.tokenize(text);
        let tokens = match (self.config.task, aspect) {
            (Task::Ae, None) => encode_sequence(&ids, &starts, self.config.max_len)?,
            (Task::Asc, Some(a)) => encode_pair(&ids, &starts, &vocab.tokenize(a).0, self.config.max_len)?,
            (Task::Ae, Some(_)) => return Err(BatError::usage("extraction takes no aspect")),
            (Task::Asc, None) => return Err(BatError::usage("sentiment classification needs an aspect")),
        };
        self.predict(&Batch::from_tokens([&tokens])?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.config.to_manifest(), &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (manifest, params) = checkpoint::load(path)?;
        let config = ModelConfig::from_manifest(&manifest)?;
        Model::from_params(config, params)
    }
}

#[cfg(test)]
#[path = "model_tests.rs"]
mod tests;
