use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn t(rows: usize, cols: usize, data: &[f64]) -> Tensor {
    Tensor::matrix(rows, cols, data.to_vec()).unwrap()
}

fn v(data: &[f64]) -> Tensor {
    Tensor::vector(data.to_vec()).unwrap()
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Central finite differences over every parameter coordinate, compared to
/// the tape gradient by vector-norm relative error.
fn check_grads(params: &ParamSet, build: impl Fn(&mut Tape) -> Var) -> f64 {
    let grads = {
        let mut tape = Tape::new(params);
        let loss = build(&mut tape);
        tape.backward(loss).unwrap()
    };
    let eval = |p: &ParamSet| {
        let mut tape = Tape::new(p);
        let loss = build(&mut tape);
        tape.value(loss).item()
    };
    let h = 1e-5;
    let (mut diff, mut scale) = (0.0f64, 0.0f64);
    for (id, param) in params.iter() {
        let ad = grads.get_or_zero(params, id);
        for i in 0..param.value.len() {
            let mut plus = params.clone();
            plus.get_mut(id).value.data_mut()[i] += h;
            let mut minus = params.clone();
            minus.get_mut(id).value.data_mut()[i] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            diff += (fd - ad.data()[i]).powi(2);
            scale = scale.max(fd.abs()).max(ad.data()[i].abs());
        }
    }
    diff.sqrt() / scale.max(1e-12)
}

#[test]
fn affine_examples() {
    let out = affine(&t(1, 2, &[1.0, 2.0]), &t(2, 2, &[1.0, 0.0, 0.0, 1.0]), &v(&[0.0, 0.0])).unwrap();
    assert_eq!(out.data(), &[1.0, 2.0]);
    let out = affine(&t(1, 2, &[1.0, 1.0]), &t(2, 2, &[2.0, 0.0, 0.0, 3.0]), &v(&[1.0, 1.0])).unwrap();
    assert_eq!(out.data(), &[3.0, 4.0]);
}

#[test]
fn affine_matches_naive_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&mut rng, &[3, 4]);
    let w = random(&mut rng, &[4, 5]);
    let b = random(&mut rng, &[5]);
    let out = affine(&x, &w, &b).unwrap();
    for i in 0..3 {
        for j in 0..5 {
            let mut s = b.data()[j];
            for k in 0..4 {
                s += x.get(i, k) * w.get(k, j);
            }
            assert!((out.get(i, j) - s).abs() < 1e-12);
        }
    }
}

#[test]
fn affine_shape_error_names_both_shapes() {
    let err = affine(&t(1, 3, &[1.0; 3]), &t(2, 2, &[1.0; 4]), &v(&[0.0, 0.0])).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[1, 3]") && msg.contains("[2, 2]"), "{msg}");
}

#[test]
fn softmax_examples() {
    let out = softmax_t(&t(1, 3, &[0.0, 0.0, 0.0]), 1.0).unwrap();
    for p in out.data() {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }
    let out = softmax_t(&t(1, 2, &[1.0, 0.0]), 0.01).unwrap();
    assert!((out.data()[0] - 1.0).abs() < 1e-40 && out.data()[1] < 1e-40);

    // e^k / (e + e^2 + e^3)
    let out = softmax_t(&t(1, 3, &[1.0, 2.0, 3.0]), 1.0).unwrap();
    let expect = [0.090_030_573_170_380_46, 0.244_728_471_054_797_64, 0.665_240_955_774_821_8];
    for (p, e) in out.data().iter().zip(expect) {
        assert!((p - e).abs() < 1e-15, "{p} vs {e}");
    }
    assert!(softmax_t(&t(1, 1, &[0.0]), 0.0).is_err());
    assert!(softmax_t(&t(1, 1, &[0.0]), -1.0).is_err());
}

#[test]
fn nll_examples() {
    let one_hot = t(1, 3, &[1.0, 0.0, 0.0]);
    assert_eq!(nll(&one_hot, &[0], &[true]).unwrap(), 0.0);
    let uniform = t(2, 4, &[0.25; 8]);
    let l = nll(&uniform, &[3, 1], &[true, true]).unwrap();
    assert!((l - 4f64.ln()).abs() < 1e-15);
    assert!((l - 1.3863).abs() < 1e-4);
    assert_eq!(nll(&uniform, &[3, 1], &[false, false]).unwrap(), 0.0);
}

#[test]
fn backward_of_sum_of_squares() {
    let mut params = ParamSet::new();
    let x = params.add("x", v(&[1.0, 2.0]));
    let mut tape = Tape::new(&params);
    let xv = tape.param(x);
    let sq = tape.mul(xv, xv).unwrap();
    let loss = tape.sum(sq);
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn constant_loss_has_zero_gradients() {
    let mut params = ParamSet::new();
    let x = params.add("x", v(&[1.0, 2.0]));
    let mut tape = Tape::new(&params);
    let xv = tape.param(x);
    let zeroed = tape.scale(xv, 0.0);
    let s = tape.sum(zeroed);
    let loss = tape.shift(s, 3.0);
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.get_or_zero(&params, x).data(), &[0.0, 0.0]);
}

#[test]
fn backward_accumulates_until_zeroed() {
    let mut params = ParamSet::new();
    let x = params.add("x", v(&[1.0, 2.0]));
    for _ in 0..2 {
        let grads = {
            let mut tape = Tape::new(&params);
            let xv = tape.param(x);
            let loss = tape.sum(xv);
            tape.backward(loss).unwrap()
        };
        params.accumulate(&grads, 1.0);
    }
    assert_eq!(params.get(x).grad.data(), &[2.0, 2.0]);
    params.zero_grad();
    assert_eq!(params.get(x).grad.data(), &[0.0, 0.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let params = ParamSet::new();
    let mut tape = Tape::new(&params);
    let x = tape.input(v(&[1.0, 2.0]));
    assert!(tape.backward(x).is_err());
}

#[test]
fn affine_softmax_nll_chain_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random(&mut rng, &[3, 4]);
    let mut params = ParamSet::new();
    let w = params.add("w", random(&mut rng, &[4, 5]));
    let b = params.add("b", random(&mut rng, &[5]));
    let err = check_grads(&params, |tape| {
        let xv = tape.input(x.clone());
        let (wv, bv) = (tape.param(w), tape.param(b));
        let logits = tape.affine(xv, wv, bv).unwrap();
        let probs = tape.softmax_t(logits, 0.7).unwrap();
        tape.nll(probs, &[1, 4, 0], &[true, false, true]).unwrap()
    });
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn transformer_ops_match_finite_differences() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let table = params.add("table", random(&mut rng, &[6, 4]));
        let regions = params.add("regions", random(&mut rng, &[3, 4]));
        let wq = params.add("wq", random(&mut rng, &[4, 4]));
        let wk = params.add("wk", random(&mut rng, &[4, 4]));
        let wv = params.add("wv", random(&mut rng, &[4, 4]));
        let gain = params.add("gain", random(&mut rng, &[4]));
        let bias = params.add("bias", random(&mut rng, &[4]));
        let head = params.add("head", random(&mut rng, &[4, 1]));
        let err = check_grads(&params, |tape| {
            let emb = tape.param(table);
            let toks = tape.gather(emb, &[1, 5, 1, 2]).unwrap();
            let reg = tape.param(regions);
            let x = tape.concat_rows(reg, toks).unwrap();
            let (g, b) = (tape.param(gain), tape.param(bias));
            let normed = tape.layer_norm(x, g, b).unwrap();
            let (q, k, v) = (tape.param(wq), tape.param(wk), tape.param(wv));
            let q = tape.matmul(normed, q).unwrap();
            let k = tape.matmul(normed, k).unwrap();
            let v = tape.matmul(normed, v).unwrap();
            let att = tape.attention(q, k, v, 2).unwrap();
            let res = tape.add(att, x).unwrap();
            let act = tape.sigmoid(res);
            let tail = tape.slice_rows(act, 2, 4).unwrap();
            let pooled = tape.mean_rows(tail).unwrap();
            let h = tape.param(head);
            let s = tape.matmul(pooled, h).unwrap();
            let s = tape.reshape(s, vec![]).unwrap();
            let r = tape.relu(s);
            let shifted = tape.shift(s, 0.3);
            let d = tape.sub(shifted, r).unwrap();
            let sq = tape.mul(d, d).unwrap();
            tape.mean(sq)
        });
        assert!(err < 1e-4, "seed {seed}: relative error {err}");
    }
}

#[test]
fn sgd_clips_by_global_norm() {
    let mut params = ParamSet::new();
    let x = params.add("x", v(&[0.0, 0.0]));
    params.get_mut(x).grad = v(&[30.0, 40.0]);
    let norm = Sgd::new(0.1, 5.0).step(&mut params);
    assert_eq!(norm, 50.0);
    let w = params.get(x).value.data();
    assert!((w[0] + 0.3).abs() < 1e-12 && (w[1] + 0.4).abs() < 1e-12);
    assert_eq!(params.get(x).grad.data(), &[0.0, 0.0]);
}

#[test]
fn tensor_rejects_bad_construction() {
    assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
    assert!(Tensor::new(vec![1], vec![f64::NAN]).is_err());
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(
        rows in prop::collection::vec(prop::collection::vec(-30.0f64..30.0, 5), 1..6),
        tau in 0.05f64..5.0,
    ) {
        let x = Tensor::from_rows(&rows).unwrap();
        let p = softmax_t(&x, tau).unwrap();
        for i in 0..p.rows() {
            let row = p.row(i);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}

#[test]
fn adam_first_step_moves_by_lr_times_sign() {
    let mut params = ParamSet::new();
    let x = params.add("x", v(&[1.0, -2.0, 0.5]));
    params.get_mut(x).grad = v(&[0.3, -4.0, 1e-3]);
    let mut adam = Adam::new(0.1, 0.0);
    adam.step(&mut params);
    let got = params.get(x).value.data().to_vec();
    for (g, want) in got.iter().zip([0.9, -1.9, 0.4]) {
        assert!((g - want).abs() < 1e-6, "{got:?}");
    }
    assert_eq!(params.get(x).grad.data(), &[0.0, 0.0, 0.0]);
}

#[test]
fn adam_weight_decay_is_decoupled() {
    let mut params = ParamSet::new();
    let x = params.add("x", v(&[2.0, -1.0]));
    let mut adam = Adam::new(0.1, 0.0);
    adam.weight_decay = 0.5;
    adam.step(&mut params);
    // Zero gradient: only the decay term acts, w <- w (1 - lr * wd).
    for (g, want) in params.get(x).value.data().iter().zip([1.9, -0.95]) {
        assert!((g - want).abs() < 1e-12);
    }
}

#[test]
fn adam_minimizes_a_quadratic() {
    let mut params = ParamSet::new();
    let x = params.add("x", v(&[3.0, -5.0]));
    let mut adam = Adam::new(0.05, 10.0);
    for _ in 0..2000 {
        let grads = {
            let mut tape = Tape::new(&params);
            let xv = tape.param(x);
            let c = tape.input(v(&[1.0, 2.0]));
            let d = tape.sub(xv, c).unwrap();
            let sq = tape.mul(d, d).unwrap();
            let loss = tape.sum(sq);
            tape.backward(loss).unwrap()
        };
        params.accumulate(&grads, 1.0);
        adam.step(&mut params);
    }
    for (g, want) in params.get(x).value.data().iter().zip([1.0, 2.0]) {
        assert!((g - want).abs() < 1e-3);
    }
}
