use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::gradcheck;
use super::*;
use crate::error::Error;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape.to_vec(), data).unwrap()
}

const FD_STEP: f64 = 1e-5;
const FD_FLOOR: f64 = 1e-3;

fn assert_gradcheck(
    inputs: &[Tensor<f64>],
    tol: f64,
    f: impl Fn(&mut Tape<f64>, &[Var]) -> crate::Result<Var>,
) {
    let r = gradcheck::check(inputs, FD_STEP, FD_FLOOR, f).unwrap();
    assert!(r.max_rel_err <= tol, "gradient check failed: {r:?}");
}

/// Weighted sum with fixed random weights, so every output element matters.
fn probe(tape: &mut Tape<f64>, y: Var, seed: u64) -> crate::Result<Var> {
    let w = Tensor::uniform(tape.shape(y).to_vec(), -1.0, 1.0, &mut rng(seed));
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

// ── matmul ───────────────────────────────────────────────────────────

#[test]
fn matmul_identity() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let i = tape.constant(t64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let c = tape.matmul(a, i).unwrap();
    assert_eq!(tape.data(c), &[1.0, 2.0, 3.0, 4.0]);
    let c = tape.matmul(i, a).unwrap();
    assert_eq!(tape.data(c), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn matmul_shape_mismatch() {
    let mut tape = Tape::<f32>::new();
    let a = tape.constant(Tensor::zeros([2, 3]));
    let b = tape.constant(Tensor::zeros([2, 3]));
    assert!(matches!(tape.matmul(a, b), Err(Error::Dimension { .. })));
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let a = Tensor::uniform([3, 4], -1.0, 1.0, &mut rng(1));
    let b = Tensor::uniform([4, 2], -1.0, 1.0, &mut rng(2));
    assert_gradcheck(&[a, b], 1e-6, |t, v| {
        let c = t.matmul(v[0], v[1])?;
        probe(t, c, 3)
    });
}

#[test]
fn batched_matmul_gradient() {
    let a = Tensor::uniform([2, 3, 3, 4], -1.0, 1.0, &mut rng(4));
    let b = Tensor::uniform([2, 3, 4, 2], -1.0, 1.0, &mut rng(5));
    let w = Tensor::uniform([4, 5], -1.0, 1.0, &mut rng(6));
    assert_gradcheck(&[a, b, w], 1e-6, |t, v| {
        let c = t.matmul(v[0], v[1])?;
        let d = t.matmul(v[0], v[2])?;
        let p = probe(t, c, 7)?;
        let q = probe(t, d, 8)?;
        t.add(p, q)
    });
}

// ── softmax ──────────────────────────────────────────────────────────

#[test]
fn softmax_analytic_values() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t64(&[2, 2], &[1.0, 1.0, 0.0, 3f64.ln()]));
    let y = tape.softmax_rows(x).unwrap();
    let d = tape.data(y);
    assert!((d[0] - 0.5).abs() < 1e-12 && (d[1] - 0.5).abs() < 1e-12);
    assert!((d[2] - 0.25).abs() < 1e-12 && (d[3] - 0.75).abs() < 1e-12);
}

#[test]
fn softmax_jacobian_matches_finite_differences() {
    let x = Tensor::uniform([5, 6], -3.0, 3.0, &mut rng(9));
    assert_gradcheck(&[x], 1e-6, |t, v| {
        let y = t.softmax_rows(v[0])?;
        probe(t, y, 10)
    });
}

#[test]
fn softmax_stable_for_large_inputs() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::from_f64([1, 3], &[1000.0, 1000.0, -1000.0]).unwrap());
    let y = tape.softmax_rows(x).unwrap();
    assert!(tape.value(y).is_finite());
    assert!((tape.data(y)[0] - 0.5).abs() < 1e-6);
}

// ── layer norm ───────────────────────────────────────────────────────

fn ln_loop_oracle(x: &[f64], gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let mu = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    x.iter()
        .enumerate()
        .map(|(i, v)| (v - mu) / (var + eps).sqrt() * gamma[i] + beta[i])
        .collect()
}

#[test]
fn layer_norm_unit_vector() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t64(&[2], &[1.0, -1.0]));
    let g = tape.constant(Tensor::ones([2]));
    let b = tape.constant(Tensor::zeros([2]));
    let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
    assert!((tape.data(y)[0] - 1.0).abs() < 1e-9);
    assert!((tape.data(y)[1] + 1.0).abs() < 1e-9);
}

#[test]
fn layer_norm_constant_input_returns_beta() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::full([4], 3.5));
    let g = tape.constant(t64(&[4], &[2.0, -1.0, 0.5, 7.0]));
    let b = tape.constant(t64(&[4], &[0.1, 0.2, 0.3, 0.4]));
    let y = tape.layer_norm(x, g, b, LN_EPS).unwrap();
    for (got, want) in tape.data(y).iter().zip([0.1, 0.2, 0.3, 0.4]) {
        assert!((got - want).abs() < 1e-9);
    }
}

#[test]
fn layer_norm_matches_loop_oracle() {
    let mut r = rng(11);
    let x = Tensor::<f64>::uniform([8], -2.0, 2.0, &mut r);
    let g = Tensor::<f64>::uniform([8], 0.5, 1.5, &mut r);
    let b = Tensor::<f64>::uniform([8], -0.5, 0.5, &mut r);
    let want = ln_loop_oracle(x.data(), g.data(), b.data(), LN_EPS);
    let mut tape = Tape::new();
    let (xv, gv, bv) = (tape.constant(x), tape.constant(g), tape.constant(b));
    let y = tape.layer_norm(xv, gv, bv, LN_EPS).unwrap();
    for (got, want) in tape.data(y).iter().zip(want) {
        assert!((got - want).abs() < 1e-6);
    }
}

#[test]
fn layer_norm_gradient() {
    let mut r = rng(12);
    let x = Tensor::uniform([3, 6], -2.0, 2.0, &mut r);
    let g = Tensor::uniform([6], 0.5, 1.5, &mut r);
    let b = Tensor::uniform([6], -0.5, 0.5, &mut r);
    assert_gradcheck(&[x, g, b], 1e-6, |t, v| {
        let y = t.layer_norm(v[0], v[1], v[2], LN_EPS)?;
        probe(t, y, 13)
    });
}

#[test]
fn masked_layer_norm_gradient() {
    let mut r = rng(14);
    // two examples, widths 3 and 6 of 6 channels; inactive slots zero
    let mut x = Tensor::<f64>::uniform([2, 2, 6], -2.0, 2.0, &mut r);
    for row in 0..2 {
        for c in 3..6 {
            x.data_mut()[row * 6 + c] = 0.0;
        }
    }
    let g = Tensor::uniform([6], 0.5, 1.5, &mut r);
    let b = Tensor::uniform([6], -0.5, 0.5, &mut r);
    assert_gradcheck(&[x, g, b], 1e-6, |t, v| {
        let y = t.masked_layer_norm(v[0], &[3, 6], v[1], v[2], LN_EPS)?;
        probe(t, y, 15)
    });
}

#[test]
fn masked_layer_norm_rejects_bad_width() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::zeros([1, 4]));
    let g = tape.constant(Tensor::ones([4]));
    let b = tape.constant(Tensor::zeros([4]));
    assert!(matches!(tape.masked_layer_norm(x, &[0], g, b, LN_EPS), Err(Error::Contract(_))));
    assert!(matches!(tape.masked_layer_norm(x, &[5], g, b, LN_EPS), Err(Error::Contract(_))));
}

// ── gelu ─────────────────────────────────────────────────────────────

#[test]
fn gelu_values() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t64(&[3], &[0.0, 10.0, -10.0]));
    let y = tape.gelu(x).unwrap();
    let d = tape.data(y);
    assert_eq!(d[0], 0.0);
    assert!((d[1] - 10.0).abs() < 1e-3);
    assert!(d[2].abs() < 1e-3);
}

#[test]
fn gelu_gradient() {
    let x = Tensor::uniform([16], -4.0, 4.0, &mut rng(16));
    let r = gradcheck::check(&[x], FD_STEP, FD_FLOOR, |t, v| {
        let y = t.gelu(v[0])?;
        probe(t, y, 17)
    })
    .unwrap();
    assert!(r.max_rel_err <= 1e-5, "{r:?}");
}

// ── convolution ──────────────────────────────────────────────────────

#[allow(clippy::too_many_arguments)]
fn conv_loop_oracle(
    x: &[f64],
    w: &[f64],
    b: &[f64],
    (bs, ci, h, wd): (usize, usize, usize, usize),
    co: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; bs * co * ho * wo];
    for n in 0..bs {
        for o in 0..co {
            for y in 0..ho {
                for xx in 0..wo {
                    let mut acc = b[o];
                    for c in 0..ci {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xx * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += w[((o * ci + c) * k + ky) * k + kx]
                                    * x[((n * ci + c) * h + iy as usize) * wd + ix as usize];
                            }
                        }
                    }
                    out[((n * co + o) * ho + y) * wo + xx] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn conv_unit_kernel_is_identity() {
    let x = Tensor::<f64>::uniform([1, 1, 4, 4], -1.0, 1.0, &mut rng(18));
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let w = tape.constant(Tensor::ones([1, 1, 1, 1]));
    let y = tape.conv2d(xv, w, None, 1, 0).unwrap();
    assert_eq!(tape.data(y), x.data());
}

#[test]
fn conv_patch_embedding_grid() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::zeros([1, 2, 112, 112]));
    let w = tape.constant(Tensor::zeros([3, 2, 7, 7]));
    let y = tape.conv2d(x, w, None, 7, 0).unwrap();
    assert_eq!(tape.shape(y), &[1, 3, 16, 16]);
}

#[test]
fn conv_rejects_empty_output() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::zeros([1, 1, 2, 2]));
    let w = tape.constant(Tensor::zeros([1, 1, 3, 3]));
    assert!(matches!(tape.conv2d(x, w, None, 1, 0), Err(Error::Dimension { .. })));
}

#[test]
fn conv_matches_loop_oracle() {
    let mut r = rng(19);
    for (stride, pad) in [(1, 0), (1, 1), (2, 1), (2, 0)] {
        let x = Tensor::<f64>::uniform([1, 2, 5, 5], -1.0, 1.0, &mut r);
        let w = Tensor::<f64>::uniform([3, 2, 3, 3], -1.0, 1.0, &mut r);
        let b = Tensor::<f64>::uniform([3], -1.0, 1.0, &mut r);
        let want = conv_loop_oracle(x.data(), w.data(), b.data(), (1, 2, 5, 5), 3, 3, stride, pad);
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.constant(x), tape.constant(w), tape.constant(b));
        let y = tape.conv2d(xv, wv, Some(bv), stride, pad).unwrap();
        assert_eq!(tape.data(y).len(), want.len());
        for (got, want) in tape.data(y).iter().zip(&want) {
            assert!((got - want).abs() <= 1e-5);
        }
    }
}

#[test]
fn conv_gradient() {
    let mut r = rng(20);
    let x = Tensor::uniform([2, 2, 5, 5], -1.0, 1.0, &mut r);
    let w = Tensor::uniform([3, 2, 3, 3], -1.0, 1.0, &mut r);
    let b = Tensor::uniform([3], -1.0, 1.0, &mut r);
    assert_gradcheck(&[x, w, b], 1e-6, |t, v| {
        let y = t.conv2d(v[0], v[1], Some(v[2]), 2, 1)?;
        probe(t, y, 21)
    });
}

// ── pooling ──────────────────────────────────────────────────────────

#[test]
fn avg_pool_values() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t64(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let y = tape.avg_pool2d(x, 2, 2).unwrap();
    assert_eq!(tape.data(y), &[2.5]);

    let c = tape.constant(Tensor::full([1, 2, 4, 4], 1.75));
    let y = tape.avg_pool2d(c, 2, 2).unwrap();
    assert!(tape.data(y).iter().all(|&v| v == 1.75));

    let g = tape.constant(Tensor::zeros([1, 3, 16, 16]));
    let y = tape.avg_pool2d(g, 2, 2).unwrap();
    assert_eq!(tape.shape(y), &[1, 3, 8, 8]);
}

#[test]
fn avg_pool_rejects_odd_extent() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::zeros([1, 1, 5, 4]));
    assert!(matches!(tape.avg_pool2d(x, 2, 2), Err(Error::Dimension { .. })));
}

#[test]
fn avg_pool_gradient() {
    let x = Tensor::uniform([2, 2, 4, 4], -1.0, 1.0, &mut rng(22));
    assert_gradcheck(&[x], 1e-6, |t, v| {
        let y = t.avg_pool2d(v[0], 2, 2)?;
        probe(t, y, 23)
    });
}

// ── shape suite ──────────────────────────────────────────────────────

#[test]
fn zero_pad_appends_zeros() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t64(&[2], &[1.0, 2.0]));
    let y = tape.zero_pad_channels(x, 4).unwrap();
    assert_eq!(tape.data(y), &[1.0, 2.0, 0.0, 0.0]);
    assert!(matches!(tape.zero_pad_channels(x, 1), Err(Error::Dimension { .. })));
}

#[test]
fn seq_grid_round_trip() {
    let x = Tensor::<f64>::uniform([2, 256, 3], -1.0, 1.0, &mut rng(24));
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let g = tape.seq_to_grid(xv).unwrap();
    assert_eq!(tape.shape(g), &[2, 3, 16, 16]);
    // token (row 1, col 2) channel 1 of example 0 lands at grid[0, 1, 1, 2]
    assert_eq!(tape.data(g)[(16 + 1) * 16 + 2], x.data()[(16 + 2) * 3 + 1]);
    let back = tape.grid_to_seq(g).unwrap();
    assert_eq!(tape.value(back).data(), x.data());
    assert_eq!(tape.shape(back), &[2, 256, 3]);
}

#[test]
fn seq_to_grid_rejects_non_square() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::zeros([1, 10, 3]));
    assert!(matches!(tape.seq_to_grid(x), Err(Error::Dimension { .. })));
}

#[test]
fn shape_suite_gradients() {
    let mut r = rng(25);
    let a = Tensor::uniform([2, 4, 3], -1.0, 1.0, &mut r);
    let b = Tensor::uniform([2, 4, 2], -1.0, 1.0, &mut r);
    let bias = Tensor::uniform([5], -1.0, 1.0, &mut r);
    assert_gradcheck(&[a, b, bias], 1e-6, |t, v| {
        let c = t.concat(&[v[0], v[1]], 2)?; // [2,4,5]
        let c = t.add(c, v[2])?;
        let c = t.scale(c, 0.7)?;
        let g = t.seq_to_grid(c)?; // [2,5,2,2]
        let s = t.grid_to_seq(g)?;
        let p = t.zero_pad_channels(s, 7)?;
        let n = t.narrow(p, 1, 1, 2)?;
        let sl = t.slice_channels(n, 4)?;
        let m = t.mask_channels(sl, &[2, 4])?;
        let e = t.scale_examples(m, &[0.5, -2.0])?;
        let tr = t.transpose(e)?;
        let q = t.permute(tr, &[2, 0, 1])?;
        let q = t.reshape(q, &[4, 4])?;
        probe(t, q, 26)
    });
}

// ── backward ─────────────────────────────────────────────────────────

#[test]
fn backward_sum_gives_ones() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::uniform([3, 2], -1.0, 1.0, &mut rng(27)));
    let s = tape.sum(x).unwrap();
    tape.backward(s).unwrap();
    assert!(tape.grad(x).unwrap().iter().all(|&g| g == 1.0));
}

#[test]
fn backward_square_gives_twice_x() {
    let x = Tensor::<f64>::uniform([5], -1.0, 1.0, &mut rng(28));
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let sq = tape.mul(xv, xv).unwrap();
    let s = tape.sum(sq).unwrap();
    tape.backward(s).unwrap();
    for (g, v) in tape.grad(xv).unwrap().iter().zip(x.data()) {
        assert_eq!(*g, 2.0 * v);
    }
}

#[test]
fn backward_requires_scalar() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::zeros([2]));
    assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
}

#[test]
fn constants_receive_no_gradient() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::ones([2]));
    let c = tape.constant(Tensor::ones([2]));
    let y = tape.mul(x, c).unwrap();
    let s = tape.sum(y).unwrap();
    tape.backward(s).unwrap();
    assert!(tape.grad(c).is_none());
    assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0]);
}

#[test]
fn soft_cross_entropy_gradient_and_uniform_value() {
    let logits = Tensor::uniform([4, 5], -2.0, 2.0, &mut rng(29));
    let targets = {
        let mut t = Tensor::<f64>::uniform([4, 5], 0.0, 1.0, &mut rng(30));
        for row in t.data_mut().chunks_mut(5) {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        t
    };
    let tg = targets.clone();
    assert_gradcheck(&[logits], 1e-6, move |t, v| t.soft_cross_entropy(v[0], &tg));

    let mut tape = Tape::<f64>::new();
    let z = tape.constant(Tensor::zeros([3, 10]));
    let mut onehot = Tensor::zeros([3, 10]);
    onehot.data_mut()[2] = 1.0;
    onehot.data_mut()[15] = 1.0;
    onehot.data_mut()[29] = 1.0;
    let l = tape.soft_cross_entropy(z, &onehot).unwrap();
    assert!((tape.data(l)[0] - 10f64.ln()).abs() < 1e-12);
}

#[test]
fn finite_check_hook_reports_op() {
    let mut tape = Tape::<f32>::new();
    tape.set_check_finite(true);
    let x = tape.constant(Tensor::full([2], f32::MAX));
    assert!(matches!(tape.scale(x, 10.0), Err(Error::NonFinite { op: "scale" })));
}

#[test]
fn mac_counter_tracks_matmul_and_conv() {
    let mut tape = Tape::<f32>::new();
    let a = tape.constant(Tensor::zeros([2, 3]));
    let b = tape.constant(Tensor::zeros([3, 4]));
    let x = tape.constant(Tensor::zeros([1, 2, 4, 4]));
    let w = tape.constant(Tensor::zeros([5, 2, 3, 3]));
    let (_, macs) = mac_counter::count(|| {
        tape.matmul(a, b).unwrap();
        tape.conv2d(x, w, None, 1, 1).unwrap();
    });
    assert_eq!(macs, 2 * 3 * 4 + 16 * 9 * 2 * 5);
}

mod properties {
    use proptest::prelude::*;

    use super::*;

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-50.0f64..50.0, 1..40)) {
            let n = vals.len();
            let mut tape = Tape::<f64>::new();
            let x = tape.constant(Tensor::from_f64([1, n], &vals).unwrap());
            let y = tape.softmax_rows(x).unwrap();
            let s: f64 = tape.data(y).iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-6);
            prop_assert!(tape.data(y).iter().all(|&v| v >= 0.0));
        }

        #[test]
        fn layer_norm_shift_invariant(
            vals in proptest::collection::vec(-5.0f64..5.0, 4..16),
            shift in -10.0f64..10.0,
        ) {
            let n = vals.len();
            let mean = vals.iter().sum::<f64>() / n as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            prop_assume!(var > 1e-2);
            let shifted: Vec<f64> = vals.iter().map(|v| v + shift).collect();
            let mut tape = Tape::<f64>::new();
            let g = tape.constant(Tensor::ones([n]));
            let b = tape.constant(Tensor::zeros([n]));
            let x0 = tape.constant(Tensor::from_f64([n], &vals).unwrap());
            let x1 = tape.constant(Tensor::from_f64([n], &shifted).unwrap());
            let y0 = tape.layer_norm(x0, g, b, LN_EPS).unwrap();
            let y1 = tape.layer_norm(x1, g, b, LN_EPS).unwrap();
            prop_assert!(tape.value(y0).max_abs_diff(tape.value(y1)) <= 1e-5);
        }
    }
}

#[test]
fn forward_is_bitwise_deterministic() {
    let run = || {
        let mut r = rng(31);
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::uniform([2, 3, 6, 6], -1.0, 1.0, &mut r));
        let w = tape.constant(Tensor::uniform([4, 3, 3, 3], -1.0, 1.0, &mut r));
        let y = tape.conv2d(x, w, None, 1, 1).unwrap();
        let s = tape.grid_to_seq(y).unwrap();
        let s = tape.softmax_rows(s).unwrap();
        tape.value(s).clone()
    };
    assert_eq!(run(), run());
}
