use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::synthetic;
use crate::gradcheck::{central_difference, max_rel_error};
use crate::params::AdamConfig;
use crate::tokenizer::PAD_ID;

fn tiny(task: Task, vocab: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab,
        hidden: 8,
        layers: 1,
        heads: 2,
        ff: 16,
        max_len: 32,
        dropout: 0.0,
        task,
        lowercase: true,
    }
}

fn ae_batch(n: usize, seed: u64) -> (usize, Batch) {
    let (v, ex) = synthetic::ae_set(n, seed, 32).unwrap();
    (v.len(), Batch::ae(&ex).unwrap())
}

fn asc_batch(n: usize, seed: u64) -> (usize, Batch) {
    let (v, ex) = synthetic::asc_set(n, seed, 32).unwrap();
    (v.len(), Batch::asc(&ex).unwrap())
}

fn rng() -> BatRng {
    stream(0, Stream::Dropout)
}

fn loss_of(model: &Model<f64>, batch: &Batch) -> f64 {
    let mut tape = Tape::new();
    let (loss, _) = model.task_loss(&mut tape, batch, Pass::TRAIN, &mut rng()).unwrap();
    tape.value(loss).data()[0]
}

#[test]
fn config_validation() {
    let mut c = tiny(Task::Ae, 50);
    assert!(c.validate().is_ok());
    c.heads = 3;
    assert!(c.validate().is_err());
    let mut c = tiny(Task::Ae, 50);
    c.layers = 0;
    assert!(c.validate().is_err());
    let mut c = tiny(Task::Ae, 50);
    c.dropout = 1.0;
    assert!(c.validate().is_err());
}

#[test]
fn manifest_round_trip() {
    let mut c = ModelConfig::new(Task::Asc, 321);
    c.dropout = 0.25;
    let back = ModelConfig::from_manifest(&c.to_manifest()).unwrap();
    assert_eq!(back, c);
    assert!(ModelConfig::from_manifest("hidden=8\n").is_err());
    assert!(matches!(
        ModelConfig::from_manifest("task=ae\nhidden=x\n"),
        Err(BatError::Parse { line: 2, .. })
    ));
}

#[test]
fn checkpoint_round_trip_and_shape_check() {
    let m = Model::<f32>::new(tiny(Task::Ae, 40), 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    m.save(&path).unwrap();
    let back = Model::load(&path).unwrap();
    assert_eq!(back.config, m.config);
    for ((n1, a), (n2, b)) in m.params.iter().zip(back.params.iter()) {
        assert_eq!(n1, n2);
        assert_eq!(a.data(), b.data());
    }
    let mut other = tiny(Task::Ae, 40);
    other.hidden = 16;
    other.heads = 4;
    assert!(Model::from_params(other, m.params.clone()).is_err());
}

#[test]
fn zero_tables_embed_to_zero() {
    let (v, batch) = ae_batch(3, 1);
    let mut m = Model::<f64>::new(tiny(Task::Ae, v), 1).unwrap();
    for name in ["emb.token", "emb.segment", "emb.position"] {
        m.params.get_mut(name).unwrap().data_mut().fill(0.0);
    }
    let mut tape = Tape::new();
    let x = m.embed_sum(&mut tape, &batch, Pass::EVAL).unwrap();
    assert!(tape.value(x).data().iter().all(|&v| v == 0.0));
}

#[test]
fn embedding_is_sum_of_three_lookups() {
    let (v, batch) = asc_batch(6, 2);
    let m = Model::<f64>::new(tiny(Task::Asc, v), 2).unwrap();
    let mut tape = Tape::new();
    let x = m.embed_sum(&mut tape, &batch, Pass::EVAL).unwrap();
    let d = m.config.hidden;
    let row = |name: &str, i: usize| m.params.get(name).unwrap().data()[i * d..(i + 1) * d].to_vec();
    for r in 0..batch.rows() {
        let t = row("emb.token", batch.input_ids[r]);
        let s = row("emb.segment", batch.segment_ids[r]);
        let p = row("emb.position", batch.position_ids[r]);
        for j in 0..d {
            assert_eq!(tape.value(x).data()[r * d + j], t[j] + s[j] + p[j]);
        }
    }
}

#[test]
fn out_of_range_id_is_index_error() {
    let (v, mut batch) = ae_batch(2, 1);
    batch.input_ids[1] = v + 5;
    let m = Model::<f32>::new(tiny(Task::Ae, v), 1).unwrap();
    let mut tape = Tape::new();
    assert!(matches!(
        m.embed(&mut tape, &batch, Pass::EVAL, &mut rng()),
        Err(BatError::Index(_))
    ));
}

#[test]
fn shapes() {
    let (v, batch) = ae_batch(4, 5);
    let m = Model::<f32>::new(tiny(Task::Ae, v), 1).unwrap();
    let mut tape = Tape::new();
    let x = m.embed(&mut tape, &batch, Pass::EVAL, &mut rng()).unwrap();
    let h = m.encode(&mut tape, &batch, x, Pass::EVAL, &mut rng()).unwrap();
    assert_eq!(tape.value(h).shape(), &[batch.rows(), 8]);
    let l = m.ae_head(&mut tape, h, Pass::EVAL, &mut rng()).unwrap();
    assert_eq!(tape.value(l).shape(), &[batch.rows(), 3]);

    let (v, batch) = asc_batch(4, 5);
    let m = Model::<f32>::new(tiny(Task::Asc, v), 1).unwrap();
    assert_eq!(m.logits(&batch).unwrap().shape(), &[4, 3]);
    assert!(batch.seq <= 32);
}

#[test]
fn batch_trims_and_maps_specials() {
    let (_, ex) = synthetic::asc_set(5, 3, 32).unwrap();
    let b = Batch::asc(&ex).unwrap();
    assert_eq!(b.seq, ex.iter().map(|e| e.tokens.real_len()).max().unwrap());
    for e in 0..b.size {
        assert_eq!(b.kind(e, 0), TokenKind::Cls);
        let real = ex[e].tokens.real_len();
        assert_eq!(b.kind(e, real - 1), TokenKind::Sep);
        assert_eq!(
            (0..b.seq).filter(|&p| b.kind(e, p) == TokenKind::Sep).count(),
            2
        );
        assert!((real..b.seq).all(|p| b.kind(e, p) == TokenKind::Pad));
    }
}

/// Runs the encoder on a given `x`, returning all output rows.
fn encode_from(m: &Model<f64>, batch: &Batch, x: Tensor<f64>) -> Vec<f64> {
    let mut tape = Tape::new();
    let x = tape.constant(x);
    let h = m.encode(&mut tape, batch, x, Pass::EVAL, &mut rng()).unwrap();
    tape.value(h).data().to_vec()
}

#[test]
fn padded_inputs_do_not_reach_real_outputs() {
    let (v, batch) = ae_batch(6, 4);
    assert!(batch.kinds.contains(&TokenKind::Pad));
    let mut cfg = tiny(Task::Ae, v);
    cfg.layers = 2;
    let m = Model::<f64>::new(cfg, 9).unwrap();
    let mut tape = Tape::new();
    let x = m.embed(&mut tape, &batch, Pass::EVAL, &mut rng()).unwrap();
    let x = tape.value(x).detached();
    let base = encode_from(&m, &batch, x.clone());

    let mut r = ChaCha8Rng::seed_from_u64(1);
    let mut noisy = x.clone();
    let d = m.config.hidden;
    for row in 0..batch.rows() {
        if batch.is_pad(row) {
            for v in &mut noisy.data_mut()[row * d..(row + 1) * d] {
                *v = r.gen_range(-50.0..50.0);
            }
        }
    }
    let out = encode_from(&m, &batch, noisy);
    for row in (0..batch.rows()).filter(|&r| !batch.is_pad(r)) {
        assert_eq!(base[row * d..(row + 1) * d], out[row * d..(row + 1) * d]);
    }

    // the same holds end to end for loss: changing padded ids is invisible
    let before = loss_of(&m, &batch);
    let mut other = batch.clone();
    for row in 0..other.rows() {
        if other.is_pad(row) {
            other.input_ids[row] = 7 % v;
        }
    }
    assert_eq!(loss_of(&m, &other), before);
    assert!(batch.input_ids.contains(&(PAD_ID as usize)));
}

#[test]
fn permuting_content_permutes_outputs_without_positions() {
    let (vocab, ex) = synthetic::ae_set(10, 8, 32).unwrap();
    let v = vocab.len();
    let e = ex.iter().max_by_key(|e| e.tokens.real_len()).unwrap();
    let batch = Batch::ae([e]).unwrap();
    let mut cfg = tiny(Task::Ae, v);
    cfg.layers = 2;
    let mut m = Model::<f64>::new(cfg, 4).unwrap();
    m.params.get_mut("emb.position").unwrap().data_mut().fill(0.0);

    let real = e.tokens.real_len();
    // reverse the content positions 1..real-1
    let perm: Vec<usize> = (0..batch.seq)
        .map(|p| if p >= 1 && p < real - 1 { real - 1 - p } else { p })
        .collect();
    let mut shuffled = batch.clone();
    for p in 0..batch.seq {
        shuffled.input_ids[p] = batch.input_ids[perm[p]];
    }
    let run = |b: &Batch| {
        let mut tape = Tape::new();
        let x = m.embed(&mut tape, b, Pass::EVAL, &mut rng()).unwrap();
        let h = m.encode(&mut tape, b, x, Pass::EVAL, &mut rng()).unwrap();
        tape.value(h).data().to_vec()
    };
    let (a, b) = (run(&batch), run(&shuffled));
    let d = m.config.hidden;
    for p in 0..real {
        for j in 0..d {
            let (x, y) = (a[perm[p] * d + j], b[p * d + j]);
            assert!((x - y).abs() < 1e-10, "pos {p} dim {j}: {x} vs {y}");
        }
    }
}

#[test]
fn zero_head_gives_uniform_loss() {
    let (v, batch) = ae_batch(4, 2);
    let mut m = Model::<f64>::new(tiny(Task::Ae, v), 1).unwrap();
    m.params.get_mut("head.w").unwrap().data_mut().fill(0.0);
    m.params.get_mut("head.b").unwrap().data_mut().fill(0.0);
    let logits = m.logits(&batch).unwrap();
    assert!(logits.data().iter().all(|&v| v == 0.0));
    assert!((loss_of(&m, &batch) - 3f64.ln()).abs() < 1e-12);
}

#[test]
fn unscored_positions_do_not_affect_loss() {
    let (v, batch) = ae_batch(4, 6);
    let m = Model::<f64>::new(tiny(Task::Ae, v), 1).unwrap();
    let Labels::Ae { labels, ignore } = &batch.labels else { panic!() };
    let logits = m.logits(&batch).unwrap();
    let ce = |l: Tensor<f64>| {
        let mut tape = Tape::new();
        let l = tape.constant(l);
        let loss = tape.cross_entropy(l, labels, ignore).unwrap();
        tape.value(loss).data()[0]
    };
    let base = ce(logits.clone());
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let mut noisy = logits;
    for (row, &ign) in ignore.iter().enumerate() {
        if ign {
            for v in &mut noisy.data_mut()[row * 3..row * 3 + 3] {
                *v = r.gen_range(-20.0..20.0);
            }
        }
    }
    assert_eq!(ce(noisy), base);
}

#[test]
fn asc_head_reads_only_cls() {
    let (v, batch) = asc_batch(4, 2);
    let m = Model::<f64>::new(tiny(Task::Asc, v), 1).unwrap();
    let d = m.config.hidden;
    let head = |enc: Tensor<f64>| {
        let mut tape = Tape::new();
        let e = tape.constant(enc);
        let l = m.asc_head(&mut tape, &batch, e, Pass::EVAL, &mut rng()).unwrap();
        tape.value(l).data().to_vec()
    };
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let enc = Tensor::from_f64(
        &[batch.rows(), d],
        &(0..batch.rows() * d).map(|_| r.gen_range(-1.0..1.0)).collect::<Vec<_>>(),
    )
    .unwrap();
    let base = head(enc.clone());
    let mut noisy = enc.clone();
    for row in 0..batch.rows() {
        if row % batch.seq != 0 {
            for v in &mut noisy.data_mut()[row * d..(row + 1) * d] {
                *v = r.gen_range(-9.0..9.0);
            }
        }
    }
    assert_eq!(head(noisy), base);

    // gradient reaches the [CLS] encoding
    let mut tape = Tape::new();
    let e = tape.leaf(enc.with_grad());
    let l = m.asc_head(&mut tape, &batch, e, Pass::EVAL, &mut rng()).unwrap();
    let Labels::Asc(y) = &batch.labels else { panic!() };
    let loss = tape.cross_entropy(l, y, &vec![false; y.len()]).unwrap();
    let mut p = m.params.clone();
    tape.backward(loss, &mut p).unwrap();
    let g = tape.grad(e).unwrap();
    assert!(g[..d].iter().any(|&v| v != 0.0));
    assert!(g[d..batch.seq * d].iter().all(|&v| v == 0.0));
}

#[test]
fn task_label_mismatch_is_usage_error() {
    let (v, batch) = asc_batch(3, 1);
    let m = Model::<f32>::new(tiny(Task::Ae, v), 1).unwrap();
    let mut tape = Tape::new();
    assert!(matches!(
        m.task_loss(&mut tape, &batch, Pass::TRAIN, &mut rng()),
        Err(BatError::Usage(_))
    ));
    let unlabeled = Batch::from_tokens([&synthetic::ae_set(2, 1, 32).unwrap().1[0].tokens]).unwrap();
    assert!(m.task_loss(&mut tape, &unlabeled, Pass::TRAIN, &mut rng()).is_err());
}

/// Every parameter gradient of a one-layer model against central
/// differences in f64.
fn full_gradient_check(task: Task) -> f64 {
    let (v, batch) = match task {
        Task::Ae => ae_batch(3, 11),
        Task::Asc => asc_batch(3, 11),
    };
    let mut m = Model::<f64>::new(tiny(task, v), 5).unwrap();
    // larger weights make the check sensitive to every term
    let mut r = ChaCha8Rng::seed_from_u64(17);
    for (_, t) in m.params.iter_mut() {
        for x in t.data_mut() {
            *x += r.gen_range(-0.3..0.3);
        }
    }
    let mut tape = Tape::new();
    let (loss, _) = m.task_loss(&mut tape, &batch, Pass::TRAIN, &mut rng()).unwrap();
    let mut grads = m.params.clone();
    tape.backward(loss, &mut grads).unwrap();

    let names: Vec<String> = m.params.names().map(str::to_string).collect();
    let mut worst = 0.0f64;
    for name in names {
        let base = m.params.get(&name).unwrap().data().to_vec();
        let analytic = grads.get(&name).unwrap().grad().map(<[f64]>::to_vec).unwrap_or(vec![0.0; base.len()]);
        let numeric = central_difference(
            |x| {
                let mut probe = m.clone();
                probe.params.get_mut(&name).unwrap().data_mut().copy_from_slice(x);
                loss_of(&probe, &batch)
            },
            &base,
            1e-5,
        );
        let err = max_rel_error(&analytic, &numeric, 1e-6);
        assert!(err < 1e-3, "{name}: rel err {err}");
        worst = worst.max(err);
    }
    m.params.zero_grad();
    worst
}

#[test]
fn every_parameter_gradient_matches_finite_differences() {
    assert!(full_gradient_check(Task::Ae) < 1e-3);
    assert!(full_gradient_check(Task::Asc) < 1e-3);
}

#[test]
fn overfits_four_examples_monotonically() {
    let (vocab, ex) = synthetic::ae_set(4, 21, 32).unwrap();
    let v = vocab.len();
    let batch = Batch::ae(&ex).unwrap();
    let mut cfg = tiny(Task::Ae, v);
    cfg.hidden = 16;
    let mut m = Model::<f32>::new(cfg, 2).unwrap();
    m.params.attach_adam();
    let adam = AdamConfig::with_lr(1e-3);
    let mut prev = f64::INFINITY;
    let mut r = rng();
    for step in 0..50 {
        let mut tape = Tape::new();
        let (loss, _) = m.task_loss(&mut tape, &batch, Pass::TRAIN, &mut r).unwrap();
        let value = tape.value(loss).data()[0] as f64;
        assert!(value < prev, "step {step}: {value} >= {prev}");
        prev = value;
        tape.backward(loss, &mut m.params).unwrap();
        m.params.adam_step(&adam).unwrap();
    }
}

#[test]
fn same_seed_same_loss_trace() {
    let (vocab, ex) = synthetic::ae_set(6, 3, 32).unwrap();
    let v = vocab.len();
    let batch = Batch::ae(&ex).unwrap();
    let trace = || {
        let mut cfg = tiny(Task::Ae, v);
        cfg.dropout = 0.1;
        let mut m = Model::<f32>::new(cfg, 8).unwrap();
        m.params.attach_adam();
        let mut r = stream(8, Stream::Dropout);
        (0..5)
            .map(|_| {
                let mut tape = Tape::new();
                let (loss, _) = m.task_loss(&mut tape, &batch, Pass::TRAIN, &mut r).unwrap();
                tape.backward(loss, &mut m.params).unwrap();
                m.params.adam_step(&AdamConfig::with_lr(1e-3)).unwrap();
                tape.value(loss).data()[0].to_bits()
            })
            .collect::<Vec<_>>()
    };
    assert_eq!(trace(), trace());
}

#[test]
fn predictions_have_one_tag_per_kept_word() {
    let (vocab, ex) = synthetic::ae_set(5, 4, 32).unwrap();
    let v = vocab.len();
    let batch = Batch::ae(&ex).unwrap();
    let m = Model::<f32>::new(tiny(Task::Ae, v), 1).unwrap();
    let Prediction::Ae(tags) = m.predict(&batch).unwrap() else { panic!() };
    for (t, e) in tags.iter().zip(&ex) {
        assert_eq!(t.len(), e.word_labels.len());
    }
}
