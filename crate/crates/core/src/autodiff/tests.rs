use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, v).unwrap()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn matmul_identity_and_hand_product() {
    let mut tape = Tape::<f64>::new();
    let i2 = tape.constant(Tensor::identity(2)).unwrap();
    let a = tape.constant(t(&[2, 2], &[1.5, -2.0, 0.25, 7.0])).unwrap();
    let p = tape.matmul(i2, a).unwrap();
    assert_eq!(tape.value(p), tape.value(a));

    let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
    let ones = tape.constant(t(&[2, 1], &[1.0, 1.0])).unwrap();
    let p = tape.matmul(a, ones).unwrap();
    assert_eq!(tape.value(p).data(), &[3.0, 7.0]);
}

#[test]
fn matmul_shape_mismatch_is_dimension_error() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
    let b = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
    assert!(matches!(tape.matmul(a, b), Err(Error::Shape { op: "matmul", .. })));
}

#[test]
fn matmul_gradient_of_sum_is_b_transpose() {
    let mut r = rng(1);
    let a = Tensor::<f64>::randn(&[3, 4], 1.0, &mut r);
    let b = Tensor::<f64>::randn(&[4, 2], 1.0, &mut r);
    let mut tape = Tape::new();
    let av = tape.param(a.clone()).unwrap();
    let bv = tape.constant(b.clone()).unwrap();
    let p = tape.matmul(av, bv).unwrap();
    let s = tape.sum(p).unwrap();
    let g = tape.backward(s).unwrap().wrt(av);
    for i in 0..3 {
        for k in 0..4 {
            let expect: f64 = (0..2).map(|j| b.get2(k, j)).sum();
            assert!((g.get2(i, k) - expect).abs() < 1e-12);
        }
    }
    let err = grad_check(
        |tp, x| {
            let bv = tp.constant(b.clone())?;
            let p = tp.matmul(x, bv)?;
            tp.sum(p)
        },
        &a,
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-6, "rel err {err}");
}

#[test]
fn stop_gradient_severs_one_branch() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::scalar(3.0)).unwrap();
    let sx = tape.stop_gradient(x);
    let y = tape.mul(x, sx).unwrap();
    let g = tape.backward(y).unwrap().wrt(x);
    assert_eq!(g.data(), &[3.0]);

    let mut tape = Tape::<f64>::new();
    let x = tape.param(t(&[3], &[1.0, -2.0, 5.0])).unwrap();
    let sx = tape.stop_gradient(x);
    let s = tape.sum(sx).unwrap();
    assert_eq!(tape.backward(s).unwrap().wrt(x).data(), &[0.0; 3]);
}

#[test]
fn stop_gradient_composes() {
    let base = t(&[2, 2], &[0.5, -1.0, 2.0, 3.0]);
    let run = |twice: bool| {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(base.clone()).unwrap();
        let mut s = tape.stop_gradient(x);
        if twice {
            s = tape.stop_gradient(s);
        }
        let y = tape.mul(x, s).unwrap();
        let y = tape.sum(y).unwrap();
        let g = tape.backward(y).unwrap().wrt(x);
        (tape.value(s).clone(), g)
    };
    assert_eq!(run(false), run(true));
}

#[test]
fn sum_of_squares_grad_check_is_tight() {
    let x = Tensor::<f64>::randn(&[5], 1.0, &mut rng(2));
    let err = grad_check(
        |tp, x| {
            let sq = tp.square(x)?;
            tp.sum(sq)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-8, "rel err {err}");
}

#[test]
fn constant_function_has_zero_gradients() {
    let x = Tensor::<f64>::randn(&[4], 1.0, &mut rng(3));
    let report = grad_check_report(
        |tp, x| {
            let z = tp.scale(x, 0.0)?;
            tp.sum(z)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert_eq!(report.max_abs_err, 0.0);
    assert_eq!(report.max_rel_err, 0.0);
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::full(&[2, 5], 0.7)).unwrap();
    let p = tape.softmax(x, None).unwrap();
    assert!(tape.value(p).data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
}

#[test]
fn cross_entropy_of_uniform_logits_is_ln_v() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(&[3, 7])).unwrap();
    let nll = tape.cross_entropy(x, &[Some(0), Some(6), Some(3)]).unwrap();
    for &v in tape.value(nll).data() {
        assert!((v - 7f64.ln()).abs() < 1e-14);
    }
}

#[test]
fn conv1d_with_unit_kernel_is_identity() {
    let mut r = rng(4);
    let x = Tensor::<f64>::randn(&[6, 3], 1.0, &mut r);
    let mut w = Tensor::zeros(&[3, 3, 1]);
    for c in 0..3 {
        w.data_mut()[c * 3 + c] = 1.0;
    }
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone()).unwrap();
    let wv = tape.constant(w).unwrap();
    let bv = tape.constant(Tensor::zeros(&[3])).unwrap();
    let y = tape.conv1d(xv, wv, bv, 1, 0).unwrap();
    assert_eq!(tape.value(y), &x);
}

#[test]
fn non_finite_values_name_the_operation() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::full(&[1, 2], 1e300)).unwrap();
    let y = tape.constant(Tensor::full(&[2, 1], 1e300)).unwrap();
    assert!(matches!(tape.matmul(x, y), Err(Error::NonFinite { op: "matmul" })));
    assert!(matches!(
        tape.constant(Tensor::full(&[1], f64::NAN)),
        Err(Error::NonFinite { op: "constant" })
    ));
}

#[test]
fn backward_twice_yields_identical_gradients() {
    let mut r = rng(5);
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::randn(&[3, 4], 1.0, &mut r)).unwrap();
    let w = tape.param(Tensor::randn(&[4, 4], 1.0, &mut r)).unwrap();
    // x is used three times; each use must contribute exactly once.
    let a = tape.matmul(x, w).unwrap();
    let b = tape.add(a, x).unwrap();
    let c = tape.mul(b, x).unwrap();
    let l = tape.sum(c).unwrap();
    let g1 = tape.backward(l).unwrap();
    let g2 = tape.backward(l).unwrap();
    assert_eq!(g1.wrt(x), g2.wrt(x));
    assert_eq!(g1.wrt(w), g2.wrt(w));
}

/// Randomized grad checks of every primitive on shapes up to 8 per axis.
#[test]
fn every_primitive_passes_grad_check() {
    let mut r = rng(6);
    for trial in 0..6 {
        let n = r.random_range(1..=8);
        let d = r.random_range(1..=8);
        let m = r.random_range(1..=8);
        let x = Tensor::<f64>::randn(&[n, d], 1.0, &mut r);
        let other = Tensor::<f64>::randn(&[n, d], 1.0, &mut r);
        let w = Tensor::<f64>::randn(&[d, m], 1.0, &mut r);
        let vec_d = Tensor::<f64>::randn(&[d], 1.0, &mut r);
        let weights = Tensor::<f64>::randn(&[n, d], 1.0, &mut r);
        let mix = Tensor::<f64>::randn(&[n, m], 1.0, &mut r);
        let tol = 1e-4;

        let weighted = |tp: &mut Tape<f64>, y: Var, wts: &Tensor<f64>| -> crate::error::Result<Var> {
            let c = tp.constant(wts.clone())?;
            let p = tp.mul(y, c)?;
            tp.sum(p)
        };

        let checks: Vec<(&str, f64)> = vec![
            ("matmul", grad_check(|tp, x| { let wv = tp.param(w.clone())?; let y = tp.matmul(x, wv)?; weighted(tp, y, &mix) }, &x, 1e-6).unwrap()),
            ("add", grad_check(|tp, x| { let o = tp.constant(other.clone())?; let y = tp.add(x, o)?; weighted(tp, y, &weights) }, &x, 1e-6).unwrap()),
            ("sub", grad_check(|tp, x| { let o = tp.constant(other.clone())?; let y = tp.sub(o, x)?; weighted(tp, y, &weights) }, &x, 1e-6).unwrap()),
            ("mul", grad_check(|tp, x| { let o = tp.constant(other.clone())?; let y = tp.mul(x, o)?; weighted(tp, y, &weights) }, &x, 1e-6).unwrap()),
            ("scale", grad_check(|tp, x| { let y = tp.scale(x, -1.7)?; weighted(tp, y, &weights) }, &x, 1e-6).unwrap()),
            ("add_row", grad_check(|tp, b| { let xv = tp.constant(x.clone())?; let y = tp.add_row(xv, b)?; weighted(tp, y, &weights) }, &vec_d, 1e-6).unwrap()),
            ("rms_norm.x", grad_check(|tp, x| { let g = tp.constant(vec_d.clone())?; let y = tp.rms_norm(x, g, 1e-6)?; weighted(tp, y, &weights) }, &x, 1e-6).unwrap()),
            ("rms_norm.gain", grad_check(|tp, g| { let xv = tp.constant(x.clone())?; let y = tp.rms_norm(xv, g, 1e-6)?; weighted(tp, y, &weights) }, &vec_d, 1e-6).unwrap()),
            ("gelu", grad_check(|tp, x| { let y = tp.activation(x, Activation::Gelu)?; weighted(tp, y, &weights) }, &x, 1e-6).unwrap()),
            ("relu", grad_check(|tp, x| { let y = tp.relu(x)?; weighted(tp, y, &weights) }, &x, 1e-7).unwrap()),
            ("softmax", grad_check(|tp, x| { let y = tp.softmax(x, None)?; weighted(tp, y, &weights) }, &x, 1e-6).unwrap()),
            ("abs", grad_check(|tp, x| { let y = tp.abs(x)?; weighted(tp, y, &weights) }, &x, 1e-7).unwrap()),
            ("square", grad_check(|tp, x| { let y = tp.square(x)?; tp.mean(y) }, &x, 1e-6).unwrap()),
            ("gather", grad_check(|tp, x| { let rows: Vec<usize> = (0..n).rev().chain(0..1).collect(); let y = tp.gather_rows(x, &rows)?; let y = tp.square(y)?; tp.sum(y) }, &x, 1e-6).unwrap()),
            ("merge", grad_check(|tp, x| {
                let even: Vec<usize> = (0..n).filter(|i| i % 2 == 0).collect();
                let odd: Vec<usize> = (0..n).filter(|i| i % 2 == 1).collect();
                let mut parts = vec![(tp.gather_rows(x, &even)?, even.clone())];
                if !odd.is_empty() {
                    let o = tp.gather_rows(x, &odd)?;
                    let o = tp.scale(o, 2.0)?;
                    parts.push((o, odd.clone()));
                }
                let y = tp.merge_rows(&parts, n)?;
                weighted(tp, y, &weights)
            }, &x, 1e-6).unwrap()),
            ("cross_entropy", grad_check(|tp, x| {
                let targets: Vec<Option<usize>> = (0..n).map(|i| if i % 3 == 1 { None } else { Some(i % d) }).collect();
                let y = tp.cross_entropy(x, &targets)?;
                tp.sum(y)
            }, &x, 1e-6).unwrap()),
            ("embedding", grad_check(|tp, table| {
                let ids: Vec<usize> = (0..5).map(|i| (i * 7) % n).collect();
                let y = tp.embedding(table, &ids)?;
                let y = tp.square(y)?;
                tp.sum(y)
            }, &x, 1e-6).unwrap()),
        ];
        for (name, err) in checks {
            assert!(err < tol, "trial {trial}: {name} rel err {err}");
        }
    }
}

#[test]
fn attention_grad_check_all_inputs() {
    let mut r = rng(7);
    let (n, d, heads) = (7, 6, 2);
    let segments = [(0, 3), (3, 4)];
    let q = Tensor::<f64>::randn(&[n, d], 1.0, &mut r);
    let k = Tensor::<f64>::randn(&[n, d], 1.0, &mut r);
    let v = Tensor::<f64>::randn(&[n, d], 1.0, &mut r);
    let wts = Tensor::<f64>::randn(&[n, d], 1.0, &mut r);
    let run = |tp: &mut Tape<f64>, q: Var, k: Var, v: Var| -> crate::error::Result<Var> {
        let o = tp.causal_attention(q, k, v, heads, &segments, 0.5)?;
        let c = tp.constant(wts.clone())?;
        let p = tp.mul(o, c)?;
        tp.sum(p)
    };
    let eq = grad_check(|tp, x| { let kk = tp.constant(k.clone())?; let vv = tp.constant(v.clone())?; run(tp, x, kk, vv) }, &q, 1e-6).unwrap();
    let ek = grad_check(|tp, x| { let qq = tp.constant(q.clone())?; let vv = tp.constant(v.clone())?; run(tp, qq, x, vv) }, &k, 1e-6).unwrap();
    let ev = grad_check(|tp, x| { let qq = tp.constant(q.clone())?; let kk = tp.constant(k.clone())?; run(tp, qq, kk, x) }, &v, 1e-6).unwrap();
    assert!(eq < 1e-4 && ek < 1e-4 && ev < 1e-4, "{eq} {ek} {ev}");
}

#[test]
fn attention_matches_explicit_masked_softmax() {
    let mut r = rng(8);
    let (n, d) = (5, 4);
    let q = Tensor::<f64>::randn(&[n, d], 1.0, &mut r);
    let k = Tensor::<f64>::randn(&[n, d], 1.0, &mut r);
    let v = Tensor::<f64>::randn(&[n, d], 1.0, &mut r);
    let mut tape = Tape::new();
    let (qv, kv, vv) = (tape.constant(q.clone()).unwrap(), tape.constant(k.clone()).unwrap(), tape.constant(v.clone()).unwrap());
    let o = tape.causal_attention(qv, kv, vv, 1, &[(0, n)], 0.5).unwrap();
    // Single head: softmax(q kᵀ / 2 masked) v
    for i in 0..n {
        let scores: Vec<f64> = (0..=i).map(|j| (0..d).map(|c| q.get2(i, c) * k.get2(j, c)).sum::<f64>() * 0.5).collect();
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
        for c in 0..d {
            let expect: f64 = (0..=i).map(|j| (scores[j] - max).exp() / z * v.get2(j, c)).sum();
            assert!((tape.value(o).get2(i, c) - expect).abs() < 1e-12);
        }
    }
    assert_eq!(tape.counters().attention_pairs, (n * n) as u64);
    assert_eq!(tape.counters().matmul_flops, 4 * (n * n * d) as u64);
}

#[test]
fn conv_grad_checks() {
    let mut r = rng(9);
    for &(len, cin, cout, k, stride, pad) in &[(8, 3, 2, 3, 1, 1), (8, 2, 3, 4, 2, 1), (5, 2, 2, 1, 1, 0)] {
        let x = Tensor::<f64>::randn(&[len, cin], 1.0, &mut r);
        let w = Tensor::<f64>::randn(&[cout, cin, k], 1.0, &mut r);
        let wt = Tensor::<f64>::randn(&[cin, cout, k], 1.0, &mut r);
        let b = Tensor::<f64>::randn(&[cout], 1.0, &mut r);
        let loss = |tp: &mut Tape<f64>, y: Var| -> crate::error::Result<Var> {
            let y = tp.square(y)?;
            tp.sum(y)
        };
        let ex = grad_check(|tp, xv| { let wv = tp.constant(w.clone())?; let bv = tp.constant(b.clone())?; let y = tp.conv1d(xv, wv, bv, stride, pad)?; loss(tp, y) }, &x, 1e-6).unwrap();
        let ew = grad_check(|tp, wv| { let xv = tp.constant(x.clone())?; let bv = tp.constant(b.clone())?; let y = tp.conv1d(xv, wv, bv, stride, pad)?; loss(tp, y) }, &w, 1e-6).unwrap();
        let eb = grad_check(|tp, bv| { let xv = tp.constant(x.clone())?; let wv = tp.constant(w.clone())?; let y = tp.conv1d(xv, wv, bv, stride, pad)?; loss(tp, y) }, &b, 1e-6).unwrap();
        let etx = grad_check(|tp, xv| { let wv = tp.constant(wt.clone())?; let bv = tp.constant(b.clone())?; let y = tp.conv_transpose1d(xv, wv, bv, stride, pad)?; loss(tp, y) }, &x, 1e-6).unwrap();
        let etw = grad_check(|tp, wv| { let xv = tp.constant(x.clone())?; let bv = tp.constant(b.clone())?; let y = tp.conv_transpose1d(xv, wv, bv, stride, pad)?; loss(tp, y) }, &wt, 1e-6).unwrap();
        for e in [ex, ew, eb, etx, etw] {
            assert!(e < 1e-4, "conv rel err {e}");
        }
    }
}

#[test]
fn transposed_conv_is_adjoint_of_conv() {
    // <conv(x), y> == <x, convT(y)> with the kernel reinterpreted.
    let mut r = rng(10);
    let (len, cin, cout, k, stride, pad) = (8, 3, 2, 4, 2, 1);
    let x = Tensor::<f64>::randn(&[len, cin], 1.0, &mut r);
    let w = Tensor::<f64>::randn(&[cout, cin, k], 1.0, &mut r);
    let mut tape = Tape::new();
    let (xv, wv) = (tape.constant(x.clone()).unwrap(), tape.constant(w.clone()).unwrap());
    let b0 = tape.constant(Tensor::zeros(&[cout])).unwrap();
    let cx = tape.conv1d(xv, wv, b0, stride, pad).unwrap();
    let out_len = tape.shape(cx)[0];
    let y = Tensor::<f64>::randn(&[out_len, cout], 1.0, &mut r);
    let yv = tape.constant(y.clone()).unwrap();
    // convT expects [c_in' × c_out' × k] = [cout × cin × k]: the same layout.
    let b1 = tape.constant(Tensor::zeros(&[cin])).unwrap();
    let ty = tape.conv_transpose1d(yv, wv, b1, stride, pad).unwrap();
    assert_eq!(tape.shape(ty), &[len, cin]);
    let lhs: f64 = tape.value(cx).data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
    let rhs: f64 = tape.value(ty).data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
    assert!((lhs - rhs).abs() < 1e-10);
}

#[test]
fn checkpoint_round_trip_and_truncation() {
    let mut r = rng(11);
    let mut store = ParamStore::<f64>::new();
    store.add("a.weight", ParamKind::Weight, Tensor::randn(&[3, 4], 1.0, &mut r));
    store.add("a.bias", ParamKind::Bias, Tensor::randn(&[4], 1.0, &mut r));
    store.add("norm", ParamKind::Norm, Tensor::randn(&[2, 2, 2], 1.0, &mut r));
    let bytes = write_checkpoint_bytes(&store);
    let back: ParamStore<f64> = read_checkpoint_bytes(&bytes).unwrap();
    assert_eq!(back, store);
    for cut in [0, 3, 10, bytes.len() - 1] {
        assert!(matches!(read_checkpoint_bytes::<f64>(&bytes[..cut]), Err(Error::Parse { .. })));
    }
    assert!(read_checkpoint_bytes::<f32>(&bytes).is_err());
}

#[test]
fn adamw_moves_against_gradient() {
    let mut store = ParamStore::<f64>::new();
    let id = store.add("w", ParamKind::Weight, Tensor::full(&[2], 1.0));
    let mut opt = AdamW::new(0.0);
    for _ in 0..50 {
        let mut tape = Tape::new();
        let b = store.bind(&mut tape, true).unwrap();
        let sq = tape.square(b[id]).unwrap();
        let l = tape.sum(sq).unwrap();
        let g = tape.backward(l).unwrap();
        opt.step(&mut store, &b, &g, 0.05);
    }
    assert!(store.get(id).data().iter().all(|v| v.abs() < 0.5));
}

#[test]
fn cosine_schedule_endpoints() {
    let s = CosineSchedule { base_lr: 1.0, min_lr: 0.1, warmup: 0, total: 100 };
    assert!((s.lr(0) - 1.0).abs() < 1e-12);
    assert!((s.lr(100) - 0.1).abs() < 1e-12);
    assert!((s.lr(50) - 0.55).abs() < 1e-12);
}
