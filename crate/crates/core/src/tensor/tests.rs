use super::*;

fn rt(shape: &[usize], seed: u64) -> Tensor<f64> {
    random_tensor(shape, seed, "tensor-test")
}

/// Six nested loops, zero padding, no kernel flip.
fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>) -> Tensor<f64> {
    let (n, cin, h, wd) = x.dims4().unwrap();
    let (cout, _, k, _) = w.dims4().unwrap();
    let pad = (k / 2) as isize;
    let mut out = Tensor::zeros(&[n, cout, h, wd]);
    for s in 0..n {
        for co in 0..cout {
            for y in 0..h {
                for xx in 0..wd {
                    let mut acc = b.map_or(0.0, |b| b.data()[co]);
                    for ci in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let sy = y as isize + ky as isize - pad;
                                let sx = xx as isize + kx as isize - pad;
                                if sy >= 0 && sy < h as isize && sx >= 0 && sx < wd as isize {
                                    acc += w.at4(co, ci, ky, kx) * x.at4(s, ci, sy as usize, sx as usize);
                                }
                            }
                        }
                    }
                    out.data_mut()[((s * cout + co) * h + y) * wd + xx] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn conv_identity_and_zero() {
    let x = rt(&[1, 3, 4, 5], 1);
    let mut eye = Tensor::zeros(&[3, 3, 1, 1]);
    for c in 0..3 {
        eye.data_mut()[c * 3 + c] = 1.0;
    }
    let mut g = Graph::new();
    let (xv, wv) = (g.constant(x.clone()), g.constant(eye));
    let y = g.conv2d(xv, wv, None).unwrap();
    assert_eq!(g.value(y), &x);
    let (wz, bz) = (g.constant(Tensor::zeros(&[2, 3, 3, 3])), g.constant(Tensor::zeros(&[2])));
    let y = g.conv2d(xv, wz, Some(bz)).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn conv_matches_naive_loops() {
    for (k, seed) in [(3, 2), (1, 3)] {
        let x = rt(&[2, 2, 5, 5], seed);
        let w = rt(&[4, 2, k, k], seed + 10);
        let b = rt(&[4], seed + 20);
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
        let y = g.conv2d(xv, wv, Some(bv)).unwrap();
        assert!(g.value(y).max_abs_diff(&naive_conv(&x, &w, Some(&b))) < 1e-12);
    }
}

#[test]
fn conv_rejects_mismatch() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
    let w = g.constant(Tensor::zeros(&[3, 5, 3, 3]));
    let err = g.conv2d(x, w, None).unwrap_err();
    assert_eq!(err.category(), "shape");
    assert!(err.to_string().contains("[1, 2, 4, 4]"));
}

#[test]
fn batch_norm_train_and_constant() {
    let x = rt(&[2, 3, 4, 4], 4).map(|v| 3.0 * v + 1.5);
    let mut g = Graph::new();
    let (xv, ga, be) =
        (g.constant(x.clone()), g.constant(Tensor::full(&[3], 1.0)), g.constant(Tensor::zeros(&[3])));
    let (y, stats) = g.batch_norm_train(xv, ga, be, 1e-5).unwrap();
    let yv = g.value(y);
    for c in 0..3 {
        let vals: Vec<f64> = (0..2).flat_map(|n| (0..16).map(move |i| (n, i))).map(|(n, i)| yv.data()[(n * 3 + c) * 16 + i]).collect();
        let m = vals.iter().sum::<f64>() / 32.0;
        let v = vals.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 32.0;
        assert!(m.abs() < 1e-5 && (v - 1.0).abs() < 1e-5, "channel {c}: mean {m} var {v}");
        // straight-line formula with the reported statistics
        let raw: Vec<f64> = (0..2).flat_map(|n| (0..16).map(move |i| (n, i))).map(|(n, i)| x.data()[(n * 3 + c) * 16 + i]).collect();
        let mu = raw.iter().sum::<f64>() / 32.0;
        let var = raw.iter().map(|a| (a - mu) * (a - mu)).sum::<f64>() / 32.0;
        assert!((stats.mean[c] - mu).abs() < 1e-12);
        assert!((stats.var[c] - var * 32.0 / 31.0).abs() < 1e-12);
        for (r, o) in raw.iter().zip(&vals) {
            assert!(((r - mu) / (var + 1e-5).sqrt() - o).abs() < 1e-12);
        }
    }
    let cst = Tensor::full(&[1, 2, 3, 3], 4.0);
    let (xv, ga, be) = (g.constant(cst), g.constant(Tensor::full(&[2], 2.0)), g.constant(Tensor::new(&[2], vec![0.5, -1.0]).unwrap()));
    let (y, _) = g.batch_norm_train(xv, ga, be, 1e-5).unwrap();
    for (i, &v) in g.value(y).data().iter().enumerate() {
        assert!((v - if i < 9 { 0.5 } else { -1.0 }).abs() < 1e-6);
    }
}

#[test]
fn elementwise_identities() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::new(&[2], vec![-1.0, 2.0]).unwrap());
    let r = g.relu(x);
    assert_eq!(g.value(r).data(), &[0.0, 2.0]);
    let z = g.constant(Tensor::scalar(0.0));
    let s = g.sigmoid(z);
    assert_eq!(g.value(s).item(), 0.5);
    let t = rt(&[50], 5).map(|v| 8.0 * v);
    let a = g.constant(t.clone());
    let na = g.constant(t.map(|v| -v));
    let (sa, sn) = (g.sigmoid(a), g.sigmoid(na));
    let sum = g.add(sa, sn).unwrap();
    assert!(g.value(sum).data().iter().all(|v| (v - 1.0).abs() < 1e-12));
}

#[test]
fn pooling_and_broadcast() {
    let mut g = Graph::<f64>::new();
    let c = g.constant(Tensor::full(&[1, 2, 3, 3], 0.75));
    let p = g.global_avg_pool(c).unwrap();
    assert!(g.value(p).data().iter().all(|&v| (v - 0.75).abs() < 1e-15));
    let one = rt(&[1, 3, 1, 1], 6);
    let ov = g.constant(one.clone());
    let p1 = g.global_avg_pool(ov).unwrap();
    assert_eq!(g.value(p1), &one);
    let x = rt(&[2, 3, 4, 5], 7);
    let xv = g.constant(x.clone());
    let p = g.global_avg_pool(xv).unwrap();
    for (i, plane) in x.data().chunks(20).enumerate() {
        assert!((plane.iter().sum::<f64>() / 20.0 - g.value(p).data()[i]).abs() < 1e-12);
    }
    let zero = g.constant(Tensor::zeros(&[2, 3, 1, 1]));
    let b = g.broadcast_add(zero, xv).unwrap();
    assert_eq!(g.value(b), &x);
    let a = rt(&[2, 3, 1, 1], 8);
    let av = g.constant(a.clone());
    let b = g.broadcast_add(av, xv).unwrap();
    let tiled = Tensor::from_fn(&[2, 3, 4, 5], |i| a.data()[i / 20]);
    let tv = g.constant(tiled);
    let expect = g.add(tv, xv).unwrap();
    assert_eq!(g.value(b), g.value(expect));
    let s = g.constant(rt(&[1, 3, 1, 1], 9));
    let t = g.constant(rt(&[1, 3, 1, 1], 10));
    let bs = g.broadcast_add(s, t).unwrap();
    let pl = g.add(s, t).unwrap();
    assert_eq!(g.value(bs), g.value(pl));
}

#[test]
fn matmul_transpose_concat() {
    let mut g = Graph::<f64>::new();
    let b = rt(&[4, 3], 11);
    let eye = Tensor::from_fn(&[4, 4], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 });
    let (ev, bv) = (g.constant(eye), g.constant(b.clone()));
    let p = g.matmul(ev, bv).unwrap();
    assert_eq!(g.value(p), &b);
    let t = g.transpose(bv).unwrap();
    let tt = g.transpose(t).unwrap();
    assert_eq!(g.value(tt), &b);
    let a = rt(&[7, 5], 12);
    let c = rt(&[5, 3], 13);
    let (av, cv) = (g.constant(a.clone()), g.constant(c.clone()));
    let p = g.matmul(av, cv).unwrap();
    for i in 0..7 {
        for j in 0..3 {
            let r: f64 = (0..5).map(|k| a.data()[i * 5 + k] * c.data()[k * 3 + j]).sum();
            assert!((g.value(p).data()[i * 3 + j] - r).abs() < 1e-12);
        }
    }
    let x = rt(&[2, 2, 2, 2], 14);
    let y = rt(&[2, 3, 2, 2], 15);
    let (xv, yv) = (g.constant(x.clone()), g.constant(y.clone()));
    let cat = g.concat_channels(xv, yv).unwrap();
    let cv = g.value(cat);
    assert_eq!(cv.shape(), &[2, 5, 2, 2]);
    assert_eq!(cv.at4(1, 1, 1, 0), x.at4(1, 1, 1, 0));
    assert_eq!(cv.at4(1, 4, 0, 1), y.at4(1, 2, 0, 1));
    assert!(g.matmul(av, av).is_err());
}

#[test]
fn pixel_shuffle_index_law() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::new(&[1, 4, 1, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let y = g.pixel_shuffle(x, 2).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 1, 2, 2]);
    assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    let id = g.pixel_shuffle(x, 1).unwrap();
    assert_eq!(g.value(id), g.value(x));

    let r = 2;
    let src = rt(&[1, 8, 3, 5], 16);
    let sv = g.constant(src.clone());
    let out = g.pixel_shuffle(sv, r).unwrap();
    let ov = g.value(out).clone();
    for c in 0..2 {
        for h in 0..3 {
            for w in 0..5 {
                for i in 0..r {
                    for j in 0..r {
                        assert_eq!(ov.at4(0, c, r * h + i, r * w + j), src.at4(0, c * r * r + i * r + j, h, w));
                    }
                }
            }
        }
    }
    let back = g.space_to_depth(out, r).unwrap();
    assert_eq!(g.value(back), &src);
    let img = rt(&[2, 2, 6, 4], 17);
    let iv = g.constant(img.clone());
    let d = g.space_to_depth(iv, 2).unwrap();
    let u = g.pixel_shuffle(d, 2).unwrap();
    assert_eq!(g.value(u), &img);
    let bad = g.constant(Tensor::zeros(&[1, 3, 2, 2]));
    assert!(g.pixel_shuffle(bad, 2).is_err());
}

#[test]
fn backward_examples() {
    let x = rt(&[3, 4], 18);
    let mut g = Graph::new();
    let xv = g.variable(x.clone());
    let s = g.sum(xv);
    let grads = g.backward(s).unwrap();
    assert!(grads.get(xv).unwrap().data().iter().all(|&v| v == 1.0));

    let mut g = Graph::new();
    let xv = g.variable(x.clone());
    let sq = g.mul(xv, xv).unwrap();
    let s = g.sum(sq);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(xv).unwrap(), &x.map(|v| 2.0 * v));
    assert!(g.backward(sq).is_err());
}

#[test]
fn shared_subexpression_doubles_gradient() {
    let x = rt(&[1, 2, 3, 3], 19);
    let w = rt(&[2, 2, 3, 3], 20);
    let build = |twice: bool| {
        let mut g = Graph::new();
        let xv = g.variable(x.clone());
        let wv = g.constant(w.clone());
        let c = g.conv2d(xv, wv, None).unwrap();
        let f = g.sigmoid(c);
        let y = if twice { g.add(f, f).unwrap() } else { f };
        let s = g.sum(y);
        g.backward(s).unwrap().take(xv).unwrap()
    };
    let once = build(false);
    assert_eq!(build(true), once.map(|v| 2.0 * v));
}

#[test]
fn grad_check_every_op() {
    for c in op_cases() {
        let r = grad_check(|g, v| (c.build)(g, v), &c.input, 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-4, "{}: {r:?}", c.name);
    }
}

#[test]
fn grad_check_sigmoid_chain_tight() {
    let x = rt(&[12], 62);
    let r = grad_check(
        |g, v| {
            let y = g.sigmoid(v);
            let y = g.sigmoid(y);
            let y = g.sigmoid(y);
            Ok(g.sum(y))
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-6, "{r:?}");
}

#[test]
fn grad_check_relu_away_from_kink() {
    let x = rt(&[16], 63).map(|v| if v.abs() < 0.1 { v + 0.25 } else { v });
    let w = rt(&[16], 64);
    let r = grad_check(
        |g, v| {
            let y = g.relu(v);
            let wv = g.constant(w.clone());
            let y = g.mul(y, wv)?;
            Ok(g.sum(y))
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-6, "{r:?}");
}

#[test]
fn grad_check_linear_is_exact() {
    let x = rt(&[6], 60);
    let w = rt(&[6], 61);
    let r = grad_check(
        |g, v| {
            let wv = g.constant(w.clone());
            let y = g.mul(v, wv)?;
            Ok(g.sum(y))
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-9, "{r:?}");
}
