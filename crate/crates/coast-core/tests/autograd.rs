//! Tape correctness: hand-evaluated values, finite-difference checks, and a
//! brute-force convolution oracle.

use coast_core::autograd::{argmax_classes, kl_per_pixel};
use coast_core::rng::stream;
use coast_core::{grad_check, CoastError, Real, Tape, Tensor, EPS_KL, EPS_STATS};
use rand::Rng;
use std::sync::Arc;

fn rand_tensor(shape: &[usize], seed: u64, lo: Real, hi: Real) -> Tensor {
    let mut rng = stream(seed, "test");
    let n: usize = shape.iter().product();
    let values = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), values).unwrap()
}

fn one_hot(classes: &[usize], n: usize, k: usize, h: usize, w: usize) -> Tensor {
    let hw = h * w;
    let mut values = vec![0.0; n * k * hw];
    for ni in 0..n {
        for p in 0..hw {
            values[(ni * k + classes[ni * hw + p]) * hw + p] = 1.0;
        }
    }
    Tensor::new(vec![n, k, h, w], values).unwrap()
}

fn rand_one_hot(n: usize, k: usize, h: usize, w: usize, seed: u64) -> Tensor {
    let mut rng = stream(seed, "target");
    let classes: Vec<usize> = (0..n * h * w).map(|_| rng.gen_range(0..k)).collect();
    one_hot(&classes, n, k, h, w)
}

// ---- channel statistics ----------------------------------------------------

#[test]
fn channel_stats_hand_values() {
    let mut tape = Tape::new();
    let z = tape.constant(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let (mu, sigma) = tape.channel_stats(z).unwrap();
    assert!((tape.values(mu)[0] - 2.5).abs() < 1e-12);
    let expect = (1.25 + EPS_STATS).sqrt();
    assert!((tape.values(sigma)[0] - expect).abs() < 1e-12);
    assert!((tape.values(sigma)[0] - 1.1180).abs() < 1e-4);
}

#[test]
fn channel_stats_constant_map() {
    let mut tape = Tape::new();
    let z = tape.constant(vec![1, 1, 3, 3], vec![7.0; 9]).unwrap();
    let (mu, sigma) = tape.channel_stats(z).unwrap();
    assert!((tape.values(mu)[0] - 7.0).abs() < 1e-12);
    assert!((tape.values(sigma)[0] - EPS_STATS.sqrt()).abs() < 1e-12);
}

#[test]
fn channel_stats_scaled_channel() {
    let base = rand_tensor(&[1, 1, 4, 4], 7, -1.0, 1.0);
    let mut values = base.values.clone();
    values.extend(base.values.iter().map(|v| 2.0 * v));
    let mut tape = Tape::new();
    let z = tape.constant(vec![1, 2, 4, 4], values).unwrap();
    let (mu, sigma) = tape.channel_stats(z).unwrap();
    let mv = tape.values(mu);
    let sv = tape.values(sigma);
    assert!((mv[1] - 2.0 * mv[0]).abs() < 1e-12);
    assert!((sv[1] - 2.0 * sv[0]).abs() < 1e-4);
}

#[test]
fn channel_stats_rejects_empty_spatial_extent() {
    let mut tape = Tape::new();
    let z = tape.constant(vec![1, 2, 0, 0], vec![]).unwrap();
    assert!(matches!(tape.channel_stats(z), Err(CoastError::InvalidShape(_))));
}

// ---- cross entropy -----------------------------------------------------------

#[test]
fn cross_entropy_uniform_logits() {
    let mut tape = Tape::new();
    let logits = tape.constant(vec![1, 2, 2, 2], vec![0.3; 8]).unwrap();
    let target = Arc::new(rand_one_hot(1, 2, 2, 2, 3));
    let loss = tape.softmax_cross_entropy(logits, target, None).unwrap();
    assert!((tape.scalar_value(loss) - (2.0 as Real).ln()).abs() < 1e-12);
}

#[test]
fn cross_entropy_confident_logits() {
    let mut tape = Tape::new();
    let logits = tape.constant(vec![1, 2, 1, 1], vec![10.0, -10.0]).unwrap();
    let target = Arc::new(one_hot(&[0], 1, 2, 1, 1));
    let loss = tape.softmax_cross_entropy(logits, target, None).unwrap();
    let expect = (1.0 + (-20.0 as Real).exp()).ln();
    assert!((tape.scalar_value(loss) - expect).abs() < 1e-15);
    assert!((tape.scalar_value(loss) - 2.06e-9).abs() < 1e-11);
}

#[test]
fn cross_entropy_zero_weights_annihilate() {
    let mut tape = Tape::new();
    let logits = tape.leaf(&rand_tensor(&[2, 3, 2, 2], 5, -2.0, 2.0));
    let target = Arc::new(rand_one_hot(2, 3, 2, 2, 6));
    let weights = Arc::new(Tensor::new(vec![2, 2, 2], vec![0.0; 8]).unwrap());
    let loss = tape.softmax_cross_entropy(logits, target, Some(weights)).unwrap();
    assert_eq!(tape.scalar_value(loss), 0.0);
}

#[test]
fn cross_entropy_rejects_bad_inputs() {
    let mut tape = Tape::new();
    let logits = tape.constant(vec![1, 2, 1, 1], vec![0.0, 0.0]).unwrap();
    let wrong_shape = Arc::new(Tensor::zeros(vec![1, 3, 1, 1]));
    assert!(matches!(
        tape.softmax_cross_entropy(logits, wrong_shape, None),
        Err(CoastError::ShapeMismatch(_))
    ));
    let not_one_hot = Arc::new(Tensor::new(vec![1, 2, 1, 1], vec![0.5, 0.5]).unwrap());
    assert!(matches!(
        tape.softmax_cross_entropy(logits, not_one_hot, None),
        Err(CoastError::NotOneHot { .. })
    ));
}

// ---- KL divergence ----------------------------------------------------------

#[test]
fn kl_identical_distributions_is_zero() {
    let mut tape = Tape::new();
    let logits = tape.leaf(&rand_tensor(&[1, 3, 2, 2], 11, -1.0, 1.0));
    let p = tape.softmax(logits).unwrap();
    let kl = tape.kl_divergence(p, p).unwrap();
    assert_eq!(tape.scalar_value(kl), 0.0);
}

#[test]
fn kl_hand_value() {
    let mut tape = Tape::new();
    let p = tape.constant(vec![1, 2, 1, 1], vec![1.0, 0.0]).unwrap();
    let q = tape.constant(vec![1, 2, 1, 1], vec![0.5, 0.5]).unwrap();
    let kl = tape.kl_divergence(p, q).unwrap();
    assert!((tape.scalar_value(kl) - (2.0 as Real).ln()).abs() < 1e-12);
}

#[test]
fn kl_clamped_tail_is_finite() {
    let mut tape = Tape::new();
    let p = tape.constant(vec![1, 2, 1, 1], vec![0.5, 0.5]).unwrap();
    let q = tape.constant(vec![1, 2, 1, 1], vec![1.0 - EPS_KL, EPS_KL]).unwrap();
    let kl = tape.kl_divergence(p, q).unwrap();
    let v = tape.scalar_value(kl);
    assert!(v.is_finite());
    assert!(v > 5.0);
}

#[test]
fn kl_rejects_unnormalized_input() {
    let mut tape = Tape::new();
    let p = tape.constant(vec![1, 2, 1, 1], vec![0.7, 0.7]).unwrap();
    let q = tape.constant(vec![1, 2, 1, 1], vec![0.5, 0.5]).unwrap();
    assert!(matches!(tape.kl_divergence(p, q), Err(CoastError::NotNormalized { .. })));
}

#[test]
fn kl_per_pixel_mean_matches_scalar_op() {
    let mut tape = Tape::new();
    let la = tape.leaf(&rand_tensor(&[2, 4, 3, 3], 21, -2.0, 2.0));
    let lb = tape.leaf(&rand_tensor(&[2, 4, 3, 3], 22, -2.0, 2.0));
    let p = tape.softmax(la).unwrap();
    let q = tape.softmax(lb).unwrap();
    let kl = tape.kl_divergence(p, q).unwrap();
    let map = kl_per_pixel(&tape.tensor(p), &tape.tensor(q)).unwrap();
    let mean: Real = map.values.iter().sum::<Real>() / map.values.len() as Real;
    assert!((mean - tape.scalar_value(kl)).abs() < 1e-12);
}

// ---- gradient checks ----------------------------------------------------------

#[test]
fn grad_check_polynomial() {
    let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
    let err = grad_check(
        |tape, x| {
            let sq = tape.mul(x, x)?;
            Ok(tape.sum(sq))
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-8, "max rel error {err}");

    let mut tape = Tape::new();
    let xid = tape.leaf(&x.clone().with_grad());
    let sq = tape.mul(xid, xid).unwrap();
    let s = tape.sum(sq);
    tape.backward(s).unwrap();
    let g = tape.grad(xid).unwrap();
    assert!((g[0] - 2.0).abs() < 1e-12 && (g[1] - 4.0).abs() < 1e-12);
}

#[test]
fn grad_check_softmax_cross_entropy() {
    let x = rand_tensor(&[2, 3, 4, 4], 31, -2.0, 2.0);
    let target = Arc::new(rand_one_hot(2, 3, 4, 4, 32));
    let err = grad_check(
        move |tape, x| tape.softmax_cross_entropy(x, Arc::clone(&target), None),
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "max rel error {err}");
}

#[test]
fn grad_check_kl_through_softmax() {
    let x = rand_tensor(&[2, 3, 3, 3], 41, -1.5, 1.5);
    let other = rand_tensor(&[2, 3, 3, 3], 42, -1.5, 1.5);
    // through the first argument
    let o = other.clone();
    let err = grad_check(
        move |tape, x| {
            let q_logits = tape.leaf(&o);
            let p = tape.softmax(x)?;
            let q = tape.softmax(q_logits)?;
            tape.kl_divergence(p, q)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "kl wrt p: {err}");
    // through the second argument
    let o = other;
    let err = grad_check(
        move |tape, x| {
            let p_logits = tape.leaf(&o);
            let p = tape.softmax(p_logits)?;
            let q = tape.softmax(x)?;
            tape.kl_divergence(p, q)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "kl wrt q: {err}");
}

/// Every forward op, composed down to a scalar, against finite differences.
#[test]
fn grad_check_forward_op_vocabulary() {
    let x = rand_tensor(&[2, 3, 4, 4], 51, -1.0, 1.0);
    let checks: Vec<(&str, Box<dyn Fn(&mut Tape, coast_core::TensorId) -> coast_core::Result<coast_core::TensorId>>)> = vec![
        ("relu", Box::new(|t: &mut Tape, x| {
            // offset avoids the kink at exactly zero
            let y = t.add_scalar(x, 0.05);
            let r = t.relu(y);
            t.mean(r)
        })),
        ("leaky_relu", Box::new(|t, x| {
            let y = t.add_scalar(x, 0.05);
            let r = t.leaky_relu(y, 0.2);
            t.mean(r)
        })),
        ("add_mul_div", Box::new(|t, x| {
            let a = t.mul_scalar(x, 1.7);
            let b = t.add_scalar(x, 3.0);
            let s = t.add(a, x)?;
            let d = t.div(s, b)?;
            let m = t.mul(d, x)?;
            let n = t.neg(m);
            let u = t.sub(n, x)?;
            t.mean(u)
        })),
        ("exp_ln", Box::new(|t, x| {
            let e = t.exp(x);
            let l = t.ln(e);
            let m = t.mul(l, e)?;
            t.mean(m)
        })),
        ("softmax", Box::new(|t, x| {
            let s = t.softmax(x)?;
            let w = t.mul(s, s)?;
            Ok(t.sum(w))
        })),
        ("log_softmax", Box::new(|t, x| {
            let s = t.log_softmax(x)?;
            let c = t.add_scalar(s, 2.0);
            let w = t.mul(c, c)?;
            t.mean(w)
        })),
        ("upsample", Box::new(|t, x| {
            let u = t.upsample_nearest(x, 2)?;
            let w = t.mul(u, u)?;
            t.mean(w)
        })),
        ("downsample", Box::new(|t, x| {
            let d = t.downsample_nearest(x, 2)?;
            let w = t.mul(d, d)?;
            t.mean(w)
        })),
        ("channel_mean", Box::new(|t, x| {
            let m = t.channel_mean(x)?;
            let w = t.mul(m, m)?;
            Ok(t.sum(w))
        })),
        ("channel_std", Box::new(|t, x| {
            let s = t.channel_std(x)?;
            let w = t.mul(s, s)?;
            Ok(t.sum(w))
        })),
        ("sum", Box::new(|t, x| Ok(t.sum(x)))),
        ("mean", Box::new(|t, x| t.mean(x))),
        ("bce", Box::new(|t, x| t.bce_with_logits(x, 1.0))),
    ];
    for (name, f) in checks {
        let err = grad_check(f, &x, 1e-5).unwrap();
        assert!(err < 1e-4, "{name}: max rel error {err}");
    }
}

#[test]
fn grad_check_conv_and_affine() {
    let x = rand_tensor(&[2, 3, 5, 5], 61, -1.0, 1.0);
    let weight = rand_tensor(&[4, 3, 3, 3], 62, -0.5, 0.5);
    let bias = rand_tensor(&[4], 63, -0.2, 0.2);

    // wrt input, stride 1
    let (w2, b2) = (weight.clone(), bias.clone());
    let err = grad_check(
        move |t, x| {
            let w = t.leaf(&w2);
            let b = t.leaf(&b2);
            let y = t.conv2d(x, w, b, 1, 1)?;
            let m = t.mul(y, y)?;
            t.mean(m)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "conv wrt input: {err}");

    // wrt weight, stride 2
    let x2 = x.clone();
    let b2 = bias.clone();
    let err = grad_check(
        move |t, w| {
            let xi = t.leaf(&x2);
            let b = t.leaf(&b2);
            let y = t.conv2d(xi, w, b, 2, 1)?;
            let m = t.mul(y, y)?;
            t.mean(m)
        },
        &weight,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "conv wrt weight: {err}");

    // wrt bias
    let x2 = x.clone();
    let w2 = weight.clone();
    let err = grad_check(
        move |t, b| {
            let xi = t.leaf(&x2);
            let w = t.leaf(&w2);
            let y = t.conv2d(xi, w, b, 1, 1)?;
            let m = t.mul(y, y)?;
            t.mean(m)
        },
        &bias,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "conv wrt bias: {err}");

    // channel affine wrt scale
    let x2 = x.clone();
    let scale = rand_tensor(&[3], 64, 0.5, 1.5);
    let shift = rand_tensor(&[3], 65, -0.3, 0.3);
    let sh2 = shift.clone();
    let err = grad_check(
        move |t, s| {
            let xi = t.leaf(&x2);
            let b = t.leaf(&sh2);
            let y = t.channel_affine(xi, s, b)?;
            let m = t.mul(y, y)?;
            t.mean(m)
        },
        &scale,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "affine wrt scale: {err}");

    // channel affine wrt input
    let sc2 = scale.clone();
    let sh2 = shift.clone();
    let err = grad_check(
        move |t, x| {
            let s = t.leaf(&sc2);
            let b = t.leaf(&sh2);
            let y = t.channel_affine(x, s, b)?;
            let m = t.mul(y, y)?;
            t.mean(m)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "affine wrt input: {err}");
}

#[test]
fn grad_check_nc_broadcast_ops() {
    let x = rand_tensor(&[2, 3, 4, 4], 71, 0.5, 2.0);
    let stats = rand_tensor(&[2, 3], 72, 0.5, 2.0);

    for (name, which) in [("add_nc", 0), ("sub_nc", 1), ("mul_nc", 2), ("div_nc", 3)] {
        // wrt map
        let s2 = stats.clone();
        let err = grad_check(
            move |t, x| {
                let s = t.leaf(&s2);
                let y = match which {
                    0 => t.add_nc(x, s)?,
                    1 => t.sub_nc(x, s)?,
                    2 => t.mul_nc(x, s)?,
                    _ => t.div_nc(x, s)?,
                };
                let m = t.mul(y, y)?;
                t.mean(m)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{name} wrt map: {err}");

        // wrt stats
        let x2 = x.clone();
        let err = grad_check(
            move |t, s| {
                let xi = t.leaf(&x2);
                let y = match which {
                    0 => t.add_nc(xi, s)?,
                    1 => t.sub_nc(xi, s)?,
                    2 => t.mul_nc(xi, s)?,
                    _ => t.div_nc(xi, s)?,
                };
                let m = t.mul(y, y)?;
                t.mean(m)
            },
            &stats,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{name} wrt stats: {err}");
    }
}

#[test]
fn grad_check_dropout_fixed_mask() {
    let x = rand_tensor(&[2, 3, 4, 4], 81, -1.0, 1.0);
    let err = grad_check(
        |t, x| {
            let mut rng = stream(99, "dropout");
            let d = t.dropout(x, 0.3, true, &mut rng)?;
            let m = t.mul(d, d)?;
            t.mean(m)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "dropout: {err}");
}

#[test]
fn grad_check_cross_entropy_probs() {
    let x = rand_tensor(&[2, 3, 3, 3], 91, -1.0, 1.0);
    let target = Arc::new(rand_one_hot(2, 3, 3, 3, 92));
    let weights = Arc::new(rand_tensor(&[2, 3, 3], 93, 0.1, 1.0));
    let err = grad_check(
        move |t, x| {
            let p = t.softmax(x)?;
            t.cross_entropy_probs(p, Arc::clone(&target), Some(Arc::clone(&weights)))
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "weighted ce on probs: {err}");
}

// ---- structural invariants ---------------------------------------------------

#[test]
fn shared_subexpression_gradients_accumulate() {
    let x = rand_tensor(&[4], 101, -1.0, 1.0).with_grad();

    let mut tape = Tape::new();
    let xid = tape.leaf(&x);
    let f = {
        let sq = tape.mul(xid, xid).unwrap();
        tape.sum(sq)
    };
    let g = tape.sum(xid);
    let total = tape.add(f, g).unwrap();
    tape.backward(total).unwrap();
    let combined = tape.grad(xid).unwrap().to_vec();

    let mut t1 = Tape::new();
    let x1 = t1.leaf(&x);
    let sq = t1.mul(x1, x1).unwrap();
    let f1 = t1.sum(sq);
    t1.backward(f1).unwrap();
    let gf = t1.grad(x1).unwrap().to_vec();

    let mut t2 = Tape::new();
    let x2 = t2.leaf(&x);
    let g2 = t2.sum(x2);
    t2.backward(g2).unwrap();
    let gg = t2.grad(x2).unwrap().to_vec();

    for i in 0..4 {
        assert!((combined[i] - (gf[i] + gg[i])).abs() < 1e-12);
    }
}

#[test]
fn gradient_absent_off_path() {
    let x = rand_tensor(&[4], 102, -1.0, 1.0).with_grad();
    let y = rand_tensor(&[4], 103, -1.0, 1.0).with_grad();
    let mut tape = Tape::new();
    let xid = tape.leaf(&x);
    let yid = tape.leaf(&y);
    let s = tape.sum(xid);
    tape.backward(s).unwrap();
    assert!(tape.grad(xid).is_some());
    assert!(tape.grad(yid).is_none());
}

#[test]
fn softmax_normalization_and_log_consistency() {
    let x = rand_tensor(&[2, 5, 4, 4], 111, -3.0, 3.0);
    let mut tape = Tape::new();
    let xid = tape.leaf(&x);
    let s = tape.softmax(xid).unwrap();
    let ls = tape.log_softmax(xid).unwrap();
    let sv = tape.values(s);
    let lsv = tape.values(ls);
    let (n, k, hw) = (2, 5, 16);
    for ni in 0..n {
        for p in 0..hw {
            let mut sum = 0.0;
            for ki in 0..k {
                sum += sv[(ni * k + ki) * hw + p];
            }
            assert!((sum - 1.0 as Real).abs() < 1e-9);
        }
    }
    for i in 0..sv.len() {
        assert!((lsv[i] - sv[i].ln()).abs() < 1e-9);
    }
}

#[test]
fn dropout_eval_mode_is_identity() {
    let x = rand_tensor(&[2, 3, 4, 4], 121, -1.0, 1.0);
    let mut tape = Tape::new();
    let xid = tape.leaf(&x);
    let mut rng = stream(0, "unused");
    let d = tape.dropout(xid, 0.5, false, &mut rng).unwrap();
    assert_eq!(d, xid);
}

#[test]
fn dropout_train_mode_deterministic_per_seed() {
    let x = rand_tensor(&[1, 2, 4, 4], 122, -1.0, 1.0);
    let run = || {
        let mut tape = Tape::new();
        let xid = tape.leaf(&x);
        let mut rng = stream(7, "dropout");
        let d = tape.dropout(xid, 0.4, true, &mut rng).unwrap();
        tape.values(d).to_vec()
    };
    assert_eq!(run(), run());
}

#[test]
fn detach_blocks_gradient_flow() {
    let x = rand_tensor(&[4], 131, -1.0, 1.0).with_grad();
    let mut tape = Tape::new();
    let xid = tape.leaf(&x);
    let d = tape.detach(xid);
    let prod = tape.mul(xid, d).unwrap();
    let s = tape.sum(prod);
    tape.backward(s).unwrap();
    // d(x * stop(x))/dx = stop(x), not 2x
    let g = tape.grad(xid).unwrap();
    for i in 0..4 {
        assert!((g[i] - x.values[i]).abs() < 1e-12);
    }
    assert!(tape.grad(d).is_none());
}

// ---- convolution against a brute-force oracle ---------------------------------

fn conv_oracle(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
) -> Tensor {
    let (n, c_in, h, w) = (input.shape[0], input.shape[1], input.shape[2], input.shape[3]);
    let (c_out, kh, kw) = (weight.shape[0], weight.shape[2], weight.shape[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * c_out * oh * ow];
    for ni in 0..n {
        for co in 0..c_out {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.values[co];
                    for ci in 0..c_in {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize || ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += input.values
                                    [((ni * c_in + ci) * h + iy as usize) * w + ix as usize]
                                    * weight.values[((co * c_in + ci) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[((ni * c_out + co) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, c_out, oh, ow], out).unwrap()
}

#[test]
fn conv_forward_matches_bruteforce() {
    for (stride, pad, k) in [(1usize, 1usize, 3usize), (1, 0, 1), (2, 1, 3)] {
        let input = rand_tensor(&[2, 3, 6, 5], 141 + stride as u64, -1.0, 1.0);
        let weight = rand_tensor(&[4, 3, k, k], 151 + pad as u64, -0.7, 0.7);
        let bias = rand_tensor(&[4], 161, -0.2, 0.2);
        let mut tape = Tape::new();
        let (i, wt, b) =
            (tape.leaf(&input), tape.leaf(&weight), tape.leaf(&bias));
        let out = tape.conv2d(i, wt, b, stride, pad).unwrap();
        let oracle = conv_oracle(&input, &weight, &bias, stride, pad);
        assert_eq!(tape.shape(out), oracle.shape.as_slice());
        for (a, b) in tape.values(out).iter().zip(&oracle.values) {
            assert!((a - b).abs() < 1e-12, "stride {stride} pad {pad} k {k}");
        }
    }
}

#[test]
fn argmax_breaks_ties_toward_lowest_class() {
    let values = vec![0.2, 0.7, 0.1, 0.5, 0.5, 0.0];
    let t = Tensor::new(vec![1, 3, 1, 2], vec![
        values[0], values[3], // class 0, pixels 0..2
        values[1], values[4], // class 1
        values[2], values[5], // class 2
    ])
    .unwrap();
    let classes = argmax_classes(&t.values, &t.shape);
    assert_eq!(classes, vec![1, 0]);
}
