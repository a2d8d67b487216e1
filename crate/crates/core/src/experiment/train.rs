//! Training loop with per-epoch evaluation.

use std::fs;

use rand::seq::SliceRandom;

use super::config::TrainConfig;
use super::dataset::{Examples, PreparedData};
use super::results::{run_id, ResultRow, SPLIT_TEST, SPLIT_TEST_BEST_VAL, SPLIT_TRAIN, SPLIT_VALIDATION};
use crate::adversarial::{combined_step, TrainRngs};
use crate::error::{BatError, Result};
use crate::metrics::{span_set, MetricsReport, SpanSet};
use crate::model::{Model, Prediction};
use crate::params::ParamSet;
use crate::rng::{substream, Stream};

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Means over the epoch's steps.
    pub clean_loss: f64,
    pub adversarial_loss: f64,
    pub total_loss: f64,
    pub degenerate: usize,
    pub validation: Option<(MetricsReport, f64)>,
    pub test: MetricsReport,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    pub model: Model<f32>,
    /// Parameters at the best-validation epoch (the final ones when there
    /// is no validation set).
    pub best_params: ParamSet<f32>,
    pub best_epoch: usize,
}

impl RunResult {
    pub fn final_test(&self) -> &MetricsReport {
        &self.epochs.last().expect("at least one epoch").test
    }

    /// Best-validation epoch among the first `upto` epochs; ties go to the
    /// earlier epoch.
    pub fn best_epoch_upto(&self, upto: usize) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for r in self.epochs.iter().take(upto) {
            let (v, _) = r.validation.as_ref()?;
            if best.is_none_or(|(_, b)| v.primary() > b) {
                best = Some((r.epoch, v.primary()));
            }
        }
        best.map(|b| b.0)
    }

    pub fn best_val_test(&self) -> &MetricsReport {
        let e = self.best_epoch_upto(self.epochs.len()).unwrap_or(self.epochs.len());
        &self.epochs[e - 1].test
    }

    /// Long-format rows: for every epoch `e`, the state of a run trained
    /// for `e` epochs.
    pub fn rows(&self, cfg: &TrainConfig) -> Vec<ResultRow> {
        let eps = cfg.effective_epsilon();
        let id = run_id(cfg.task, &cfg.dataset, cfg.dropout, eps, self.seed);
        let mut out = Vec::new();
        let mut push = |epochs: usize, split: &str, metric: &str, value: f64| {
            out.push(ResultRow {
                run_id: id.clone(),
                task: cfg.task,
                dataset: cfg.dataset.clone(),
                epochs,
                dropout: cfg.dropout,
                epsilon: eps,
                seed: self.seed,
                split: split.to_string(),
                metric: metric.to_string(),
                value,
            })
        };
        for r in &self.epochs {
            let e = r.epoch;
            push(e, SPLIT_TRAIN, "clean_loss", r.clean_loss);
            push(e, SPLIT_TRAIN, "adversarial_loss", r.adversarial_loss);
            push(e, SPLIT_TRAIN, "total_loss", r.total_loss);
            push(e, SPLIT_TRAIN, "degenerate", r.degenerate as f64);
            if let Some((v, loss)) = &r.validation {
                push(e, SPLIT_VALIDATION, "loss", *loss);
                for (m, x) in v.metrics() {
                    push(e, SPLIT_VALIDATION, m, x);
                }
            }
            for (m, x) in r.test.metrics() {
                push(e, SPLIT_TEST, m, x);
            }
            if let Some(best) = self.best_epoch_upto(e) {
                push(e, SPLIT_TEST_BEST_VAL, "best_epoch", best as f64);
                for (m, x) in self.epochs[best - 1].test.metrics() {
                    push(e, SPLIT_TEST_BEST_VAL, m, x);
                }
            }
        }
        out
    }
}

/// Metrics and mean loss of `model` on `examples`.
pub fn evaluate(model: &Model<f32>, examples: &Examples, batch_size: usize) -> Result<(MetricsReport, f64)> {
    if examples.is_empty() {
        return Err(BatError::usage("nothing to evaluate"));
    }
    let batches = examples.batches(batch_size)?;
    let preds = model.predict_all(&batches)?;
    let loss = model.eval_loss(&batches)?;
    let report = match examples {
        Examples::Ae(_) => {
            let mut pred_spans: Vec<SpanSet> = Vec::with_capacity(examples.len());
            for p in preds {
                match p {
                    Prediction::Ae(tags) => pred_spans.extend(tags.iter().map(|t| span_set(t))),
                    Prediction::Asc(_) => return Err(BatError::usage("sentiment model on extraction data")),
                }
            }
            MetricsReport::for_spans(&pred_spans, &examples.gold_spans().expect("extraction gold"))?
        }
        Examples::Asc(_) => {
            let mut classes = Vec::with_capacity(examples.len());
            for p in preds {
                match p {
                    Prediction::Asc(c) => classes.extend(c),
                    Prediction::Ae(_) => return Err(BatError::usage("extraction model on sentiment data")),
                }
            }
            MetricsReport::for_classes(&classes, &examples.gold_classes().expect("sentiment gold"))?
        }
    };
    Ok((report, loss))
}

/// Trains one seed. Shuffling for epoch `e` depends only on `(seed, e)`
/// and the dropout streams run on across epochs, so the first `e` epochs
/// of a longer run equal an `e`-epoch run.
pub fn train(cfg: &TrainConfig, data: &PreparedData, seed: u64) -> Result<RunResult> {
    cfg.validate()?;
    if data.task != cfg.task || data.train.task() != cfg.task {
        return Err(BatError::config(format!(
            "data prepared for {} but config task is {}",
            data.task, cfg.task
        )));
    }
    let adv = cfg.adv_config()?;
    let adam = cfg.adam();
    let model_cfg = cfg.model_config(data.vocab.len());
    let mut model = Model::<f32>::new(model_cfg, seed)?;
    model.params.attach_adam();
    let mut rngs = TrainRngs::new(seed);
    let fingerprint = format!("{}-lr{}-bs{}-eps{}", model.config.fingerprint(), cfg.lr, cfg.batch_size, cfg.effective_epsilon());

    let mut records = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, ParamSet<f32>)> = None;
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut substream(seed, Stream::Shuffle, epoch as u64));
        let (mut clean, mut adv_sum, mut total, mut degenerate, mut steps) = (0.0, 0.0, 0.0, 0, 0);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = data.train.batch(chunk)?;
            let rep = combined_step(&mut model, &batch, &adv, &adam, &mut rngs)?;
            if !rep.total.is_finite() {
                return Err(BatError::usage(format!(
                    "loss diverged at epoch {epoch} (seed {seed})"
                )));
            }
            clean += rep.clean;
            adv_sum += rep.adversarial;
            total += rep.total;
            degenerate += rep.degenerate;
            steps += 1;
        }
        let n = steps as f64;
        let validation = if data.validation.is_empty() {
            None
        } else {
            let (r, loss) = evaluate(&model, &data.validation, cfg.batch_size)?;
            Some((r.with_context(SPLIT_VALIDATION, seed, &fingerprint), loss))
        };
        let (test, _) = evaluate(&model, &data.test, cfg.batch_size)?;
        if let Some((v, _)) = &validation {
            if best.as_ref().is_none_or(|(_, b, _)| v.primary() > *b) {
                best = Some((epoch, v.primary(), model.params.clone()));
            }
        }
        records.push(EpochRecord {
            epoch,
            clean_loss: clean / n,
            adversarial_loss: adv_sum / n,
            total_loss: total / n,
            degenerate,
            validation,
            test: test.with_context(SPLIT_TEST, seed, &fingerprint),
        });
    }
    let (best_epoch, best_params) = match best {
        Some((e, _, p)) => (e, p),
        None => (cfg.epochs, model.params.clone()),
    };
    Ok(RunResult {
        seed,
        epochs: records,
        model,
        best_params,
        best_epoch,
    })
}

/// Runs every configured seed and writes outputs when `out_dir` is set:
/// `results.csv`, `report.csv`, `report.txt`, `vocab.txt` and one
/// best-validation checkpoint per seed.
pub fn train_all(cfg: &TrainConfig, data: &PreparedData) -> Result<(Vec<RunResult>, Vec<ResultRow>)> {
    let mut runs = Vec::with_capacity(cfg.seeds.len());
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let run = train(cfg, data, seed)?;
        rows.extend(run.rows(cfg));
        runs.push(run);
    }
    if let Some(dir) = &cfg.out_dir {
        fs::create_dir_all(dir).map_err(|e| BatError::io(dir, e))?;
        super::results::write_csv(&dir.join("results.csv"), &rows)?;
        let mut report_csv = String::from(MetricsReport::CSV_HEADER);
        report_csv.push('\n');
        let mut text = String::new();
        for run in &runs {
            for (label, rep) in [("final", run.final_test()), ("best_val", run.best_val_test())] {
                let mut r = rep.clone();
                r.split = format!("test_{label}");
                report_csv.push_str(&r.csv_row());
                report_csv.push('\n');
                text.push_str(&r.text_block());
                text.push('\n');
            }
            let ckpt = dir.join(format!("model-seed{}.ckpt", run.seed));
            let best = Model::from_params(run.model.config.clone(), run.best_params.clone())?;
            best.save(&ckpt)?;
        }
        let write = |name: &str, body: &str| {
            let p = dir.join(name);
            fs::write(&p, body).map_err(|e| BatError::io(&p, e))
        };
        write("report.csv", &report_csv)?;
        write("report.txt", &text)?;
        data.vocab.save(&dir.join("vocab.txt"))?;
    }
    Ok((runs, rows))
}
