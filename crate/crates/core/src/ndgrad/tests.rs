use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Direct nested-loop cross-correlation used as an independent oracle.
fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], stride: usize, pad: (usize, usize), out_hw: (usize, usize)) -> Tensor<f64> {
    let (bn, h, wd, cin) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (kh, kw, cout) = (w.shape()[0], w.shape()[1], w.shape()[3]);
    let mut out = Tensor::zeros(&[bn, out_hw.0, out_hw.1, cout]);
    for n in 0..bn {
        for oy in 0..out_hw.0 {
            for ox in 0..out_hw.1 {
                for co in 0..cout {
                    let mut s = b[co];
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * stride + ky) as isize - pad.0 as isize;
                            let ix = (ox * stride + kx) as isize - pad.1 as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            for ci in 0..cin {
                                s += x.get(&[n, iy as usize, ix as usize, ci]) * w.get(&[ky, kx, ci, co]);
                            }
                        }
                    }
                    out.set(&[n, oy, ox, co], s);
                }
            }
        }
    }
    out
}

#[test]
fn conv_identity_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand_tensor(&[2, 5, 5, 3], &mut rng);
    let mut w = Tensor::zeros(&[1, 1, 3, 3]);
    for c in 0..3 {
        w.set(&[0, 0, c, c], 1.0);
    }
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let wv = g.constant(w);
    let bv = g.constant(Tensor::zeros(&[3]));
    let y = g.conv2d(xv, wv, Some(bv), 1, Padding::Same, None).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn conv_same_stride2_halves() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[1, 32, 32, 4]));
    let w = g.constant(Tensor::zeros(&[4, 4, 4, 8]));
    let y = g.conv2d(x, w, None, 2, Padding::Same, None).unwrap();
    assert_eq!(g.shape(y), &[1, 16, 16, 8]);
}

#[test]
fn conv_matches_naive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_tensor(&[1, 5, 5, 2], &mut rng);
    let w = rand_tensor(&[3, 3, 2, 3], &mut rng);
    let b: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
    for (stride, padding) in [(1, Padding::Same), (1, Padding::Valid), (2, Padding::Same), (2, Padding::Valid)] {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let wv = g.constant(w.clone());
        let bv = g.constant(Tensor::new(&[3], b.clone()).unwrap());
        let y = g.conv2d(xv, wv, Some(bv), stride, padding, None).unwrap();
        let (ho, wo) = (g.shape(y)[1], g.shape(y)[2]);
        let pad = match padding {
            Padding::Same => {
                let total = ((ho - 1) * stride + 3).saturating_sub(5);
                (total / 2, total / 2)
            }
            Padding::Valid => (0, 0),
        };
        let expected = naive_conv(&x, &w, &b, stride, pad, (ho, wo));
        for (a, e) in g.value(y).data().iter().zip(expected.data()) {
            assert!((a - e).abs() < 1e-6, "{stride} {padding:?}: {a} vs {e}");
        }
    }
}

#[test]
fn conv_same_padding_extra_goes_bottom_right() {
    // 4x4 kernel, stride 1, SAME on 4 rows: total pad 3 -> 1 top, 2 bottom.
    let mut g = Graph::<f64>::new();
    let mut x = Tensor::zeros(&[1, 4, 4, 1]);
    x.set(&[0, 0, 0, 0], 1.0);
    let xv = g.constant(x);
    let wv = g.constant(Tensor::ones(&[4, 4, 1, 1]));
    let y = g.conv2d(xv, wv, None, 1, Padding::Same, None).unwrap();
    // Output (0,0) covers input rows -1..=2, cols -1..=2 so it sees (0,0).
    assert_eq!(g.value(y).get(&[0, 0, 0, 0]), 1.0);
    // Output (2,2) covers rows 1..=4: excludes (0,0).
    assert_eq!(g.value(y).get(&[0, 2, 2, 0]), 0.0);
    // Output (1,1) covers rows 0..=3: includes (0,0).
    assert_eq!(g.value(y).get(&[0, 1, 1, 0]), 1.0);
}

#[test]
fn conv_shape_errors_name_dimension() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[1, 4, 4, 3]));
    let w = g.constant(Tensor::zeros(&[3, 3, 2, 5]));
    match g.conv2d(x, w, None, 1, Padding::Same, None) {
        Err(Error::Shape { dim, expected: 2, found: 3, .. }) => assert_eq!(dim, "input channels"),
        other => panic!("unexpected {other:?}"),
    }
    let w = g.constant(Tensor::zeros(&[3, 3, 3, 5]));
    let m = Arc::new(Tensor::ones(&[3, 3, 3, 4]));
    assert!(matches!(
        g.conv2d(x, w, None, 1, Padding::Same, Some(m)),
        Err(Error::Shape { dim: "mask dimension", .. })
    ));
}

#[test]
fn all_ones_mask_is_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&[2, 6, 6, 3], &mut rng);
    let w = rand_tensor(&[3, 3, 3, 4], &mut rng);
    let mut g = Graph::new();
    let xv = g.constant(x);
    let wv = g.constant(w);
    let a = g.conv2d(xv, wv, None, 1, Padding::Same, None).unwrap();
    let b = g
        .conv2d(xv, wv, None, 1, Padding::Same, Some(Arc::new(Tensor::ones(&[3, 3, 3, 4]))))
        .unwrap();
    assert_eq!(g.value(a).data(), g.value(b).data());
}

#[test]
fn transposed_conv_shapes() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[1, 1, 1, 8]));
    let w = g.constant(Tensor::zeros(&[4, 4, 8, 6]));
    let y = g.conv_transpose2d(x, w, None, 1, Padding::Valid).unwrap();
    assert_eq!(g.shape(y), &[1, 4, 4, 6]);

    let x = g.constant(Tensor::zeros(&[1, 4, 4, 8]));
    let y = g.conv_transpose2d(x, w, None, 2, Padding::Same).unwrap();
    assert_eq!(g.shape(y), &[1, 8, 8, 6]);

    // Round trip through the matching convolution restores 4x4.
    let w2 = g.constant(Tensor::zeros(&[4, 4, 6, 8]));
    let z = g.conv2d(y, w2, None, 2, Padding::Same, None).unwrap();
    assert_eq!(g.shape(z), &[1, 4, 4, 8]);
}

#[test]
fn transposed_conv_is_adjoint_of_conv() {
    // <conv(x), y> == <x, conv_t(y)> for shared filters.
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (stride, padding, h) in [(2, Padding::Same, 8), (1, Padding::Valid, 4), (1, Padding::Same, 5)] {
        let x = rand_tensor(&[1, h, h, 2], &mut rng);
        let w = rand_tensor(&[4, 4, 2, 3], &mut rng);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let wv = g.constant(w.clone());
        let cx = g.conv2d(xv, wv, None, stride, padding, None).unwrap();
        let y = rand_tensor(g.shape(cx), &mut rng);
        let yv = g.constant(y.clone());
        // conv_transpose weight layout is [kh,kw,cin_t,cout_t] = swap of conv.
        let mut wt = Tensor::zeros(&[4, 4, 3, 2]);
        for ky in 0..4 {
            for kx in 0..4 {
                for a in 0..2 {
                    for b in 0..3 {
                        wt.set(&[ky, kx, b, a], w.get(&[ky, kx, a, b]));
                    }
                }
            }
        }
        let wtv = g.constant(wt);
        let ty = g.conv_transpose2d(yv, wtv, None, stride, padding).unwrap();
        assert_eq!(g.shape(ty), x.shape());
        let lhs: f64 = g.value(cx).data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(g.value(ty).data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }
}

#[test]
fn dense_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&[2, 3], &mut rng);
    let mut eye = Tensor::zeros(&[3, 3]);
    for i in 0..3 {
        eye.set(&[i, i], 1.0);
    }
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let iv = g.constant(eye);
    let zb = g.constant(Tensor::zeros(&[3]));
    let y = g.dense(xv, iv, Some(zb)).unwrap();
    assert_eq!(g.value(y), &x);

    let zw = g.constant(Tensor::zeros(&[3, 4]));
    let b = Tensor::from_f64(&[4], &[1.0, -2.0, 3.0, 0.5]).unwrap();
    let bv = g.constant(b.clone());
    let y = g.dense(xv, zw, Some(bv)).unwrap();
    for r in 0..2 {
        assert_eq!(&g.value(y).data()[r * 4..(r + 1) * 4], b.data());
    }

    let w = rand_tensor(&[3, 4], &mut rng);
    let wv = g.constant(w.clone());
    let y = g.dense(xv, wv, None).unwrap();
    for r in 0..2 {
        for c in 0..4 {
            let mut s = 0.0;
            for k in 0..3 {
                s += x.get(&[r, k]) * w.get(&[k, c]);
            }
            assert!((g.value(y).get(&[r, c]) - s).abs() < 1e-6);
        }
    }

    let bad = g.constant(Tensor::zeros(&[4, 2]));
    assert!(matches!(g.dense(xv, bad, None), Err(Error::Shape { dim: "inner dimension", .. })));
}

fn unit_moments(c: usize) -> BatchMoments<f64> {
    BatchMoments {
        mean: vec![0.0; c],
        var: vec![1.0; c],
    }
}

#[test]
fn batch_norm_cases() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[4, 3], 2.5));
    let gamma = g.constant(Tensor::ones(&[3]));
    let beta = g.constant(Tensor::zeros(&[3]));
    let (y, _) = g.batch_norm(x, gamma, beta, Mode::Train, &unit_moments(3), 1e-5).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let xr = g.constant(rand_tensor(&[8, 2, 2, 3], &mut rng));
    let zero_gamma = g.constant(Tensor::zeros(&[3]));
    let b = Tensor::from_f64(&[3], &[0.1, -0.2, 0.3]).unwrap();
    let bv = g.constant(b.clone());
    let (y, _) = g.batch_norm(xr, zero_gamma, bv, Mode::Train, &unit_moments(3), 1e-5).unwrap();
    for px in g.value(y).data().chunks_exact(3) {
        assert_eq!(px, b.data());
    }

    let (y, moments) = g.batch_norm(xr, gamma, beta, Mode::Train, &unit_moments(3), 1e-12).unwrap();
    assert!(moments.is_some());
    let out = g.value(y);
    for c in 0..3 {
        let vals: Vec<f64> = out.data().chunks_exact(3).map(|p| p[c]).collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
        assert!(m.abs() < 1e-5 && (v - 1.0).abs() < 1e-5, "channel {c}: mean {m} var {v}");
    }

    let single = g.constant(rand_tensor(&[1, 3], &mut rng));
    assert!(matches!(
        g.batch_norm(single, gamma, beta, Mode::Train, &unit_moments(3), 1e-5),
        Err(Error::BatchTooSmall(1))
    ));
    // Infer mode accepts a batch of one.
    assert!(g.batch_norm(single, gamma, beta, Mode::Infer, &unit_moments(3), 1e-5).is_ok());
}

#[test]
fn elu_values() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_f64(&[3], &[0.0, 2.0, -1.0]).unwrap());
    let y = g.elu(x);
    let v = g.value(y).data();
    assert_eq!(v[0], 0.0);
    assert_eq!(v[1], 2.0);
    assert!((v[2] - (-0.6321205588285577)).abs() < 1e-12);
}

#[test]
fn backward_simple_roots() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = rand_tensor(&[3, 4], &mut rng);
    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let s = g.sum(xv);
    g.backward(s).unwrap();
    assert!(g.grad(xv).unwrap().data().iter().all(|&v| v == 1.0));

    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let sq = g.square(xv);
    let s = g.sum(sq);
    g.backward(s).unwrap();
    for (gv, xv) in g.grad(xv).unwrap().data().iter().zip(x.data()) {
        assert_eq!(*gv, 2.0 * xv);
    }

    let mut g = Graph::new();
    let xv = g.param(x);
    let sq = g.square(xv);
    assert!(matches!(g.backward(sq), Err(Error::NonScalarRoot(_))));
}

#[test]
fn two_consumers_sum_their_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = rand_tensor(&[5], &mut rng);
    let path_a = |g: &mut Graph<f64>, v: Var| {
        let e = g.exp(v);
        g.sum(e)
    };
    let path_b = |g: &mut Graph<f64>, v: Var| {
        let t = g.tanh(v);
        g.sum(t)
    };
    let single = |f: &dyn Fn(&mut Graph<f64>, Var) -> Var| {
        let mut g = Graph::new();
        let v = g.param(x.clone());
        let r = f(&mut g, v);
        g.backward(r).unwrap();
        g.grad(v).unwrap().clone()
    };
    let ga = single(&path_a);
    let gb = single(&path_b);
    let mut g = Graph::new();
    let v = g.param(x.clone());
    let a = path_a(&mut g, v);
    let b = path_b(&mut g, v);
    let r = g.add(a, b).unwrap();
    g.backward(r).unwrap();
    for ((c, a), b) in g.grad(v).unwrap().data().iter().zip(ga.data()).zip(gb.data()) {
        assert!((c - (a + b)).abs() < 1e-15);
    }
}

#[test]
fn finite_diff_trivial_and_l2() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = rand_tensor(&[6], &mut rng);
    let err = finite_diff_check(|g, v| Ok(g.sum(v)), &x, 1e-5).unwrap();
    assert!(err < 1e-9, "{err}");
    let err = finite_diff_check(
        |g, v| {
            let s = g.square(v);
            Ok(g.sum(s))
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn finite_diff_rejects_non_finite() {
    let x = Tensor::from_f64(&[1], &[1000.0]).unwrap();
    let r = finite_diff_check(
        |g, v| {
            let e = g.exp(v);
            Ok(g.sum(e))
        },
        &x,
        1e-5,
    );
    assert!(matches!(r, Err(Error::NonFinite(_))));
}

#[test]
fn composite_conv_elu_dense_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = rand_tensor(&[2, 4, 4, 2], &mut rng);
    let w = rand_tensor(&[3, 3, 2, 3], &mut rng);
    let d = rand_tensor(&[48, 2], &mut rng);
    let build = |g: &mut Graph<f64>, xv: Var, wv: Var, dv: Var| -> crate::Result<Var> {
        let c = g.conv2d(xv, wv, None, 1, Padding::Same, None)?;
        let e = g.elu(c);
        let f = g.reshape(e, &[2, 48])?;
        let y = g.dense(f, dv, None)?;
        Ok(g.sum(y))
    };
    let (w1, d1) = (w.clone(), d.clone());
    let err = finite_diff_check(
        move |g, v| {
            let wv = g.constant(w1.clone());
            let dv = g.constant(d1.clone());
            build(g, v, wv, dv)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "input {err}");
    let (x1, d1) = (x.clone(), d.clone());
    let err = finite_diff_check(
        move |g, v| {
            let xv = g.constant(x1.clone());
            let dv = g.constant(d1.clone());
            build(g, xv, v, dv)
        },
        &w,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "weights {err}");
}
