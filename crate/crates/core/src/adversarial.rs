//! Fast-gradient adversarial examples in embedding space.
//!
//! The perturbation is built from the gradient of the log-likelihood with
//! respect to the embedding-layer output, taken against a constant copy of
//! the parameters, then normalized per example to length `epsilon`.

use crate::error::{BatError, Result};
use crate::model::{Batch, Model, Pass, TokenKind};
use crate::params::AdamConfig;
use crate::rng::{stream, substream, BatRng, Stream};
use crate::tape::Tape;
use crate::task::Task;
use crate::tensor::{Real, Tensor};

/// Masked gradient norms below this produce no perturbation.
pub const DEGENERATE_NORM: f64 = 1e-12;

/// Which embedding rows are never perturbed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exclusion {
    /// Padding only (extraction).
    Padding,
    /// `[CLS]`, `[SEP]` and padding (sentiment).
    Specials,
}

impl Exclusion {
    pub fn for_task(task: Task) -> Self {
        match task {
            Task::Ae => Exclusion::Padding,
            Task::Asc => Exclusion::Specials,
        }
    }

    pub fn excludes(self, kind: TokenKind) -> bool {
        match self {
            Exclusion::Padding => kind == TokenKind::Pad,
            Exclusion::Specials => kind != TokenKind::Content,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdvConfig {
    pub epsilon: f64,
    pub exclusion: Exclusion,
    pub enabled: bool,
}

impl AdvConfig {
    /// Enabled exactly when `epsilon > 0`.
    pub fn new(task: Task, epsilon: f64) -> Result<Self> {
        if !(epsilon >= 0.0 && epsilon.is_finite()) {
            return Err(BatError::config(format!("epsilon {epsilon} must be finite and >= 0")));
        }
        Ok(AdvConfig {
            epsilon,
            exclusion: Exclusion::for_task(task),
            enabled: epsilon > 0.0,
        })
    }

    pub fn disabled(task: Task) -> Self {
        AdvConfig {
            epsilon: 0.0,
            exclusion: Exclusion::for_task(task),
            enabled: false,
        }
    }

    pub fn check_task(&self, task: Task) -> Result<()> {
        if self.exclusion != Exclusion::for_task(task) {
            return Err(BatError::config(format!(
                "exclusion {:?} does not fit the {task} task",
                self.exclusion
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation<T: Real> {
    /// `[size, seq, d]`.
    pub r_adv: Tensor<T>,
    /// Per position, `[size * seq]`.
    pub excluded: Vec<bool>,
    /// Masked gradient norm per example.
    pub norms: Vec<f64>,
    pub degenerate: Vec<bool>,
}

impl<T: Real> Perturbation<T> {
    pub fn degenerate_count(&self) -> usize {
        self.degenerate.iter().filter(|&&d| d).count()
    }
}

pub fn excluded_rows(batch: &Batch, exclusion: Exclusion) -> Vec<bool> {
    batch.kinds.iter().map(|&k| exclusion.excludes(k)).collect()
}

/// Gradient of the log-likelihood with respect to the embedding output `x`
/// (`[size * seq, d]`, flagged `requires_grad`), computed against detached
/// parameters. Returns `g` as `[size, seq, d]` and the loss.
pub fn input_gradient<T: Real>(
    model: &Model<T>,
    batch: &Batch,
    x: &Tensor<T>,
    training: bool,
    rng: &mut BatRng,
) -> Result<(Tensor<T>, f64)> {
    if !x.requires_grad {
        return Err(BatError::usage("input gradient requested for an embedding without gradient capture"));
    }
    let d = model.config.hidden;
    if x.shape() != [batch.rows(), d] {
        return Err(BatError::Dimension {
            op: "input_gradient",
            lhs: x.shape().to_vec(),
            rhs: vec![batch.rows(), d],
        });
    }
    let pass = Pass {
        training,
        detached: true,
    };
    let mut tape = Tape::new();
    let xv = tape.leaf(x.detached().with_grad());
    let (loss, _) = model.loss_from_embedding(&mut tape, batch, xv, pass, rng, None)?;
    // No parameter leaves are on this tape, so nothing is deposited here.
    let mut sink = crate::params::ParamSet::new();
    tape.backward(loss, &mut sink)?;
    let data: Vec<T> = match tape.grad(xv) {
        Some(g) => g.iter().map(|&v| -v).collect(),
        None => vec![T::zero(); x.len()],
    };
    let g = Tensor::new(vec![batch.size, batch.seq, d], data)?;
    Ok((g, tape.value(loss).data()[0].as_f64()))
}

/// `r_adv = -epsilon * g / ||g||` per example, over non-excluded rows.
pub fn fgm_perturbation<T: Real>(g: &Tensor<T>, cfg: &AdvConfig, batch: &Batch) -> Result<Perturbation<T>> {
    let excluded = excluded_rows(batch, cfg.exclusion);
    let rows = batch.rows();
    if rows == 0 || g.len() % rows != 0 {
        return Err(BatError::Dimension {
            op: "fgm_perturbation",
            lhs: g.shape().to_vec(),
            rhs: vec![batch.size, batch.seq],
        });
    }
    if !g.is_finite() {
        return Err(BatError::usage("input gradient is not finite"));
    }
    let d = g.len() / rows;
    let row_len = batch.seq * d;
    let src = g.data();
    let mut out = vec![T::zero(); g.len()];
    let mut norms = Vec::with_capacity(batch.size);
    let mut degenerate = Vec::with_capacity(batch.size);
    for e in 0..batch.size {
        let active = |p: usize| !excluded[e * batch.seq + p];
        let mut sq = 0.0f64;
        for p in (0..batch.seq).filter(|&p| active(p)) {
            for v in &src[e * row_len + p * d..e * row_len + (p + 1) * d] {
                sq += v.as_f64() * v.as_f64();
            }
        }
        let norm = sq.sqrt();
        norms.push(norm);
        let degen = norm < DEGENERATE_NORM;
        degenerate.push(degen);
        if degen || cfg.epsilon == 0.0 {
            continue;
        }
        let k = -cfg.epsilon / norm;
        for p in (0..batch.seq).filter(|&p| active(p)) {
            let at = e * row_len + p * d;
            for j in at..at + d {
                out[j] = T::lit(k * src[j].as_f64());
            }
        }
    }
    Ok(Perturbation {
        r_adv: Tensor::new(vec![batch.size, batch.seq, d], out)?,
        excluded,
        norms,
        degenerate,
    })
}

/// Loss on `x + r_adv` with the original labels and fresh dropout masks.
/// Gradients reach the parameters but not `r_adv`; degenerate examples
/// are left out.
pub fn adversarial_loss<T: Real>(
    model: &Model<T>,
    tape: &mut Tape<T>,
    batch: &Batch,
    perturbation: &Perturbation<T>,
    rng: &mut BatRng,
) -> Result<crate::tape::Var> {
    let d = model.config.hidden;
    if perturbation.r_adv.shape() != [batch.size, batch.seq, d] || perturbation.degenerate.len() != batch.size {
        return Err(BatError::usage(format!(
            "perturbation of shape {:?} does not belong to a batch of [{}, {}, {d}]",
            perturbation.r_adv.shape(),
            batch.size,
            batch.seq
        )));
    }
    let x = model.embed(tape, batch, Pass::TRAIN, rng)?;
    let r = perturbation.r_adv.detached().reshape(&[batch.rows(), d])?;
    let x_adv = tape.add_const(x, &r)?;
    let (loss, _) = model.loss_from_embedding(tape, batch, x_adv, Pass::TRAIN, rng, Some(&perturbation.degenerate))?;
    Ok(loss)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepReport {
    pub clean: f64,
    pub adversarial: f64,
    pub total: f64,
    pub degenerate: usize,
}

/// Random streams owned by one training run.
#[derive(Debug, Clone)]
pub struct TrainRngs {
    pub dropout: BatRng,
    pub adversarial: BatRng,
}

impl TrainRngs {
    pub fn new(seed: u64) -> Self {
        TrainRngs {
            dropout: stream(seed, Stream::Dropout),
            adversarial: stream(seed, Stream::AdvDropout),
        }
    }

    pub fn for_epoch(seed: u64, epoch: u64) -> Self {
        TrainRngs {
            dropout: substream(seed, Stream::Dropout, epoch),
            adversarial: substream(seed, Stream::AdvDropout, epoch),
        }
    }
}

/// One optimizer step on `clean + adversarial`. With the adversarial term
/// disabled this is a plain fine-tuning step and draws nothing from the
/// adversarial stream.
///
/// The input gradient is taken at the clean embedding output under the
/// clean pass's dropout masks.
pub fn combined_step<T: Real>(
    model: &mut Model<T>,
    batch: &Batch,
    cfg: &AdvConfig,
    adam: &AdamConfig,
    rngs: &mut TrainRngs,
) -> Result<StepReport> {
    cfg.check_task(model.config.task)?;
    let mut tape = Tape::new();
    let x = model.embed(&mut tape, batch, Pass::TRAIN, &mut rngs.dropout)?;
    let mut replay = rngs.dropout.clone();
    let (loss, _) = model.loss_from_embedding(&mut tape, batch, x, Pass::TRAIN, &mut rngs.dropout, None)?;
    let clean = tape.value(loss).data()[0].as_f64();

    let perturbation = if cfg.enabled {
        let xv = tape.value(x).detached().with_grad();
        let (g, _) = input_gradient(model, batch, &xv, true, &mut replay)?;
        Some(fgm_perturbation(&g, cfg, batch)?)
    } else {
        None
    };

    tape.backward(loss, &mut model.params)?;

    let mut report = StepReport {
        clean,
        total: clean,
        ..StepReport::default()
    };
    if let Some(p) = perturbation {
        let mut adv_tape = Tape::new();
        let adv = adversarial_loss(model, &mut adv_tape, batch, &p, &mut rngs.adversarial)?;
        report.adversarial = adv_tape.value(adv).data()[0].as_f64();
        report.total = clean + report.adversarial;
        report.degenerate = p.degenerate_count();
        adv_tape.backward(adv, &mut model.params)?;
    }
    model.params.adam_step(adam)?;
    Ok(report)
}

/// Input gradient and perturbation for one batch in evaluation mode.
pub fn perturb_batch<T: Real>(model: &Model<T>, batch: &Batch, cfg: &AdvConfig) -> Result<(Tensor<T>, Perturbation<T>)> {
    cfg.check_task(model.config.task)?;
    let mut tape = Tape::new();
    let mut rng = stream(0, Stream::Probe);
    let x = model.embed(&mut tape, batch, Pass::EVAL.detached(), &mut rng)?;
    let xv = tape.value(x).detached().with_grad();
    let (g, _) = input_gradient(model, batch, &xv, false, &mut rng)?;
    let p = fgm_perturbation(&g, cfg, batch)?;
    Ok((g, p))
}

/// Mean per-example norm of the loss gradient with respect to the
/// embedding output, in evaluation mode.
pub fn mean_input_gradient_norm<T: Real>(model: &Model<T>, batch: &Batch) -> Result<f64> {
    let cfg = AdvConfig {
        epsilon: 1.0,
        exclusion: Exclusion::for_task(model.config.task),
        enabled: true,
    };
    let (_, p) = perturb_batch(model, batch, &cfg)?;
    Ok(p.norms.iter().sum::<f64>() / p.norms.len() as f64)
}

#[cfg(test)]
#[path = "adversarial_tests.rs"]
mod tests;
