use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcheck::{central_difference, max_rel_error};
use crate::rng::{stream, Stream};

type OpFn = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, data).unwrap()
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect();
    t(shape, &data)
}

/// Runs `f` on `inputs`, reduces the output with fixed random weights and
/// compares tape gradients for every input against central differences.
fn fd_max_error(inputs: &[Tensor<f64>], f: &OpFn, rng: &mut ChaCha8Rng) -> f64 {
    let forward = |data: &[Vec<f64>], grad: bool| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs
            .iter()
            .zip(data)
            .map(|(x, d)| {
                let leaf = t(x.shape(), d);
                tape.leaf(if grad { leaf.with_grad() } else { leaf })
            })
            .collect();
        let out = f(&mut tape, &vars).unwrap();
        (tape, vars, out)
    };
    let base: Vec<Vec<f64>> = inputs.iter().map(|x| x.to_f64_vec()).collect();
    let (probe, _, out) = forward(&base, false);
    let out_len = probe.value(out).len();
    let weights: Vec<f64> = (0..out_len).map(|_| rng.gen_range(-1.0..1.0)).collect();

    let objective = |data: &[Vec<f64>]| {
        let (tape, _, out) = forward(data, false);
        tape.value(out)
            .data()
            .iter()
            .zip(&weights)
            .map(|(a, b)| a * b)
            .sum::<f64>()
    };

    let (mut tape, vars, out) = forward(&base, true);
    let shape = tape.value(out).shape().to_vec();
    let w = tape.constant(t(&shape, &weights));
    let prod = tape.mul(out, w).unwrap();
    let loss = tape.sum(prod).unwrap();
    tape.backward(loss, &mut ParamSet::new()).unwrap();

    let mut worst = 0.0f64;
    for (k, v) in vars.iter().enumerate() {
        let analytic = tape
            .grad(*v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; base[k].len()]);
        let numeric = central_difference(
            |x| {
                let mut d = base.clone();
                d[k] = x.to_vec();
                objective(&d)
            },
            &base[k],
            1e-6,
        );
        worst = worst.max(max_rel_error(&analytic, &numeric, 1e-6));
    }
    worst
}

fn check_trials(name: &str, make: impl Fn(&mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Box<OpFn>)) {
    let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64 * 7919);
    for trial in 0..20 {
        let (inputs, f) = make(&mut rng);
        let err = fd_max_error(&inputs, f.as_ref(), &mut rng);
        assert!(err < 1e-4, "{name} trial {trial}: rel err {err}");
    }
}

#[test]
fn matmul_examples() {
    let mut tape = Tape::<f64>::new();
    let a = tape.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let i = tape.leaf(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let c = tape.matmul(a, i).unwrap();
    assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);

    let b = tape.leaf(t(&[2, 1], &[5.0, 6.0]));
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(c).shape(), &[2, 1]);
    assert_eq!(tape.value(c).data(), &[17.0, 39.0]);
}

#[test]
fn matmul_dimension_error_names_shapes() {
    let mut tape = Tape::<f64>::new();
    let a = tape.leaf(Tensor::zeros(&[2, 3]));
    let b = tape.leaf(Tensor::zeros(&[4, 2]));
    let err = tape.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, BatError::Dimension { .. }));
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
}

#[test]
fn square_gradient() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(t(&[1], &[3.0]).with_grad());
    let y = tape.mul(x, x).unwrap();
    tape.backward(y, &mut ParamSet::new()).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[6.0]);
}

#[test]
fn repeated_backward_accumulates() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(t(&[1], &[3.0]).with_grad());
    let y = tape.mul(x, x).unwrap();
    let mut p = ParamSet::new();
    tape.backward(y, &mut p).unwrap();
    tape.backward(y, &mut p).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[12.0]);
}

#[test]
fn backward_rejects_foreign_and_non_scalar() {
    let mut a = Tape::<f64>::new();
    let mut b = Tape::<f64>::new();
    let x = a.leaf(t(&[1], &[1.0]).with_grad());
    assert!(matches!(
        b.backward(x, &mut ParamSet::new()),
        Err(BatError::Usage(_))
    ));
    let v = a.leaf(t(&[2], &[1.0, 2.0]).with_grad());
    assert!(matches!(
        a.backward(v, &mut ParamSet::new()),
        Err(BatError::Usage(_))
    ));
}

#[test]
fn parameter_leaves_deposit_into_param_set() {
    let mut p = ParamSet::<f64>::new();
    p.insert("w", t(&[2], &[1.0, -2.0])).unwrap();
    let mut tape = Tape::new();
    let w = tape.param(p.view(), "w").unwrap();
    let y = tape.mul(w, w).unwrap();
    let s = tape.sum(y).unwrap();
    tape.backward(s, &mut p).unwrap();
    assert_eq!(p.get("w").unwrap().grad().unwrap(), &[2.0, -4.0]);
}

#[test]
fn detached_view_contributes_no_gradient() {
    let mut p = ParamSet::<f64>::new();
    p.insert("w", t(&[2], &[1.0, -2.0])).unwrap();
    let mut tape = Tape::new();
    let w = tape.param(p.detached(), "w").unwrap();
    let x = tape.leaf(t(&[2], &[0.5, 0.5]).with_grad());
    let y = tape.mul(w, x).unwrap();
    let s = tape.sum(y).unwrap();
    tape.backward(s, &mut p).unwrap();
    assert!(p.get("w").unwrap().grad().is_none());
    assert_eq!(tape.grad(x).unwrap(), &[1.0, -2.0]);
}

#[test]
fn softmax_rows_and_shift_invariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let n = rng.gen_range(1..9);
        let rows = rng.gen_range(1..5);
        let x = random(&[rows, n], &mut rng);
        let c: f64 = rng.gen_range(-50.0..50.0);
        let mut tape = Tape::<f64>::new();
        let xv = tape.leaf(x.clone());
        let s = tape.softmax(xv, 1).unwrap();
        let shifted: Vec<f64> = x.data().iter().map(|v| v + c).collect();
        let xs = tape.leaf(t(&[rows, n], &shifted));
        let s2 = tape.softmax(xs, 1).unwrap();
        for r in 0..rows {
            let row = &tape.value(s).data()[r * n..(r + 1) * n];
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&p| p > 0.0 && p < 1.0 || n == 1));
        }
        for (a, b) in tape.value(s).data().iter().zip(tape.value(s2).data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}

#[test]
fn softmax_rows_sum_to_one_in_f32() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let data: Vec<f32> = (0..64).map(|_| rng.gen_range(-20.0..20.0)).collect();
    let x = Tensor::new(vec![8, 8], data).unwrap();
    let s = crate::tensor::softmax(&x, 1).unwrap();
    for row in s.data().chunks(8) {
        assert!((row.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn layer_norm_examples() {
    let mut tape = Tape::<f64>::new();
    let g = tape.leaf(t(&[2], &[1.0, 1.0]));
    let b = tape.leaf(t(&[2], &[0.0, 0.0]));
    let c = tape.leaf(t(&[1, 2], &[4.0, 4.0]));
    let y = tape.layer_norm(c, g, b, 1e-12).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0, 0.0]);

    let x = tape.leaf(t(&[1, 2], &[1.0, 3.0]));
    let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
    let d = tape.value(y).data();
    assert!((d[0] + 1.0).abs() < 1e-9 && (d[1] - 1.0).abs() < 1e-9);
}

#[test]
fn cross_entropy_examples() {
    let mut tape = Tape::<f64>::new();
    let confident = tape.leaf(t(&[1, 3], &[60.0, 0.0, 0.0]));
    let l = tape.cross_entropy(confident, &[0], &[false]).unwrap();
    assert!(tape.value(l).data()[0] < 1e-20);

    let uniform = tape.leaf(t(&[2, 3], &[0.0; 6]));
    let l = tape.cross_entropy(uniform, &[0, 2], &[false, false]).unwrap();
    assert!((tape.value(l).data()[0] - 3f64.ln()).abs() < 1e-12);

    let l = tape.cross_entropy(uniform, &[0, 2], &[true, true]).unwrap();
    assert_eq!(tape.value(l).data()[0], 0.0);

    assert!(matches!(
        tape.cross_entropy(uniform, &[0, 3], &[false, false]),
        Err(BatError::Index(_))
    ));
    // an out-of-range label on an ignored row is fine
    assert!(tape.cross_entropy(uniform, &[0, 7], &[false, true]).is_ok());
}

#[test]
fn dropout_identity_cases_and_config_error() {
    let mut rng = stream(1, Stream::Dropout);
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(Tensor::full(&[10], 2.0));
    assert_eq!(tape.dropout(x, 0.0, true, &mut rng).unwrap(), x);
    assert_eq!(tape.dropout(x, 0.5, false, &mut rng).unwrap(), x);
    assert!(matches!(
        tape.dropout(x, 1.0, true, &mut rng),
        Err(BatError::Config(_))
    ));
    assert!(tape.dropout(x, -0.1, true, &mut rng).is_err());
}

#[test]
fn dropout_keep_rate_and_scaling() {
    for p in [0.1, 0.3, 0.5] {
        let mut rng = stream(42, Stream::Dropout);
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::full(&[100_000], 1.0));
        let y = tape.dropout(x, p, true, &mut rng).unwrap();
        let vals = tape.value(y).data();
        let kept = vals.iter().filter(|&&v| v != 0.0).count() as f64 / 1e5;
        assert!((kept - (1.0 - p)).abs() < 0.01, "p={p} kept={kept}");
        let scale = (1.0 / (1.0 - p)) as f32;
        assert!(vals.iter().all(|&v| v == 0.0 || v == scale));
    }
}

#[test]
fn dropout_masks_repeat_with_seed() {
    let run = || {
        let mut rng = stream(9, Stream::Dropout);
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::full(&[1000], 1.0));
        let y = tape.dropout(x, 0.3, true, &mut rng).unwrap();
        tape.value(y).data().to_vec()
    };
    assert_eq!(run(), run());
}

#[test]
fn gather_rejects_out_of_range_ids() {
    let mut tape = Tape::<f64>::new();
    let table = tape.leaf(Tensor::zeros(&[4, 2]));
    assert!(matches!(tape.gather(table, &[0, 4]), Err(BatError::Index(_))));
}

// ----- finite-difference checks, 20 randomized trials per op -----

#[test]
fn fd_matmul() {
    check_trials("matmul", |rng| {
        let (m, k, n) = (rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(1..5));
        (
            vec![random(&[m, k], rng), random(&[k, n], rng)],
            Box::new(|tp: &mut Tape<f64>, v: &[Var]| tp.matmul(v[0], v[1])),
        )
    });
}

#[test]
fn fd_bmm() {
    for trans in [false, true] {
        check_trials(if trans { "bmm_t" } else { "bmm" }, move |rng| {
            let (b, m, k, n) = (
                rng.gen_range(1..4),
                rng.gen_range(1..4),
                rng.gen_range(1..4),
                rng.gen_range(1..4),
            );
            let bshape = if trans { [b, n, k] } else { [b, k, n] };
            (
                vec![random(&[b, m, k], rng), random(&bshape, rng)],
                Box::new(move |tp: &mut Tape<f64>, v: &[Var]| tp.bmm(v[0], v[1], trans)),
            )
        });
    }
}

#[test]
fn fd_elementwise() {
    check_trials("add_mul_scale", |rng| {
        let shape = [rng.gen_range(1..4), rng.gen_range(1..5)];
        (
            vec![random(&shape, rng), random(&shape, rng)],
            Box::new(|tp: &mut Tape<f64>, v: &[Var]| {
                let s = tp.add(v[0], v[1])?;
                let p = tp.mul(s, v[1])?;
                tp.scale(p, -0.7)
            }),
        )
    });
    check_trials("add_row", |rng| {
        let d = rng.gen_range(1..5);
        (
            vec![random(&[rng.gen_range(1..4), d], rng), random(&[d], rng)],
            Box::new(|tp: &mut Tape<f64>, v: &[Var]| tp.add_row(v[0], v[1])),
        )
    });
}

#[test]
fn fd_softmax() {
    check_trials("softmax", |rng| {
        let shape = [rng.gen_range(1..4), rng.gen_range(1..5), rng.gen_range(1..4)];
        let axis = rng.gen_range(0..3);
        (
            vec![random(&shape, rng)],
            Box::new(move |tp: &mut Tape<f64>, v: &[Var]| tp.softmax(v[0], axis)),
        )
    });
}

#[test]
fn fd_layer_norm() {
    check_trials("layer_norm", |rng| {
        let d = rng.gen_range(2..7);
        (
            vec![
                random(&[rng.gen_range(1..4), d], rng),
                random(&[d], rng),
                random(&[d], rng),
            ],
            Box::new(|tp: &mut Tape<f64>, v: &[Var]| tp.layer_norm(v[0], v[1], v[2], 1e-5)),
        )
    });
}

#[test]
fn fd_gelu() {
    check_trials("gelu", |rng| {
        (
            vec![random(&[rng.gen_range(1..4), rng.gen_range(1..6)], rng)],
            Box::new(|tp: &mut Tape<f64>, v: &[Var]| tp.gelu(v[0])),
        )
    });
}

#[test]
fn fd_heads_gather_select() {
    check_trials("heads", |rng| {
        let (b, l, h, dh) = (
            rng.gen_range(1..3),
            rng.gen_range(1..4),
            rng.gen_range(1..3),
            rng.gen_range(1..3),
        );
        (
            vec![random(&[b * l, h * dh], rng)],
            Box::new(move |tp: &mut Tape<f64>, v: &[Var]| {
                let s = tp.split_heads(v[0], b, l, h)?;
                let s = tp.scale(s, 2.0)?;
                tp.merge_heads(s, b, l, h)
            }),
        )
    });
    check_trials("gather_select", |rng| {
        let rows = rng.gen_range(2..6);
        let ids: Vec<usize> = (0..rng.gen_range(1..8)).map(|_| rng.gen_range(0..rows)).collect();
        (
            vec![random(&[rows, 3], rng)],
            Box::new(move |tp: &mut Tape<f64>, v: &[Var]| {
                let g = tp.gather(v[0], &ids)?;
                tp.select_rows(g, &[0, 0])
            }),
        )
    });
}

#[test]
fn fd_cross_entropy() {
    check_trials("cross_entropy", |rng| {
        let (n, c) = (rng.gen_range(1..6), rng.gen_range(2..5));
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
        let ignore: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.3)).collect();
        (
            vec![random(&[n, c], rng)],
            Box::new(move |tp: &mut Tape<f64>, v: &[Var]| tp.cross_entropy(v[0], &labels, &ignore)),
        )
    });
}

#[test]
fn fd_matmul_chain_through_reductions() {
    check_trials("chain", |rng| {
        let (m, k) = (rng.gen_range(1..4), rng.gen_range(1..4));
        (
            vec![random(&[m, k], rng), random(&[k, k], rng), random(&[k, 2], rng)],
            Box::new(|tp: &mut Tape<f64>, v: &[Var]| {
                let h = tp.matmul(v[0], v[1])?;
                let h = tp.gelu(h)?;
                let o = tp.matmul(h, v[2])?;
                let r = tp.reshape(o, &[o_len(tp, o)])?;
                tp.mean(r)
            }),
        )
    });
}

fn o_len(tp: &Tape<f64>, v: Var) -> usize {
    tp.value(v).len()
}
