//! Randomized finite-difference battery over every differentiable operation,
//! shared by the CLI and the acceptance tests. Stop-gradient branches
//! (detached teachers, rectification weights) are held fixed where the
//! objective itself defines them as constants, so the checked function is
//! exactly the function the optimizer sees.

use crate::augment::AugmentConfig;
use crate::autograd::{grad_check, Tensor};
use crate::data::{make_benchmark, DataConfig};
use crate::error::Result;
use crate::model::{EncoderConfig, Head, Mode, ModelBundle, Owner};
use crate::rng::stream;
use crate::selftrain::{consistency_loss, kd_loss, one_hot_labels, KdTarget, RectificationWeights};
use crate::style::{apply_style, cross_stylize, extract_style, StyleVector};
use crate::trainer::{total_objective, total_objective_on, IterationBatch, TrainConfig};
use crate::Real;
use rand::Rng;
use std::sync::Arc;

fn rand_tensor(shape: &[usize], seed: u64, lo: Real, hi: Real) -> Tensor {
    let mut rng = stream(seed, "battery");
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

fn rand_one_hot(n: usize, k: usize, h: usize, w: usize, seed: u64) -> Tensor {
    let mut rng = stream(seed, "battery-target");
    let classes: Vec<u8> = (0..n * h * w).map(|_| rng.gen_range(0..k) as u8).collect();
    one_hot_labels(&classes, n, k, h, w).unwrap()
}

const STEP: Real = 1e-5;

/// Run the whole battery; returns `(operation name, max relative error)` per
/// entry. Every shape stays at or below `2x4x8x8`.
pub fn grad_check_battery(seed: u64) -> Result<Vec<(String, f64)>> {
    let mut out: Vec<(String, f64)> = Vec::new();
    let mut push = |name: &str, err: Real| {
        out.push((name.to_string(), err as f64));
    };

    let x = rand_tensor(&[2, 4, 6, 6], seed, -1.0, 1.0);

    // elementwise arithmetic chain
    let err = grad_check(
        |t, x| {
            let a = t.mul_scalar(x, 1.3);
            let b = t.add_scalar(x, 2.5);
            let c = t.add(a, x)?;
            let d = t.div(c, b)?;
            let e = t.mul(d, x)?;
            let f = t.sub(e, x)?;
            let g = t.neg(f);
            t.mean(g)
        },
        &x,
        STEP,
    )?;
    push("elementwise_arithmetic", err);

    let err = grad_check(
        |t, x| {
            let e = t.exp(x);
            let l = t.ln(e);
            let m = t.mul(l, e)?;
            t.mean(m)
        },
        &x,
        STEP,
    )?;
    push("exp_ln", err);

    let err = grad_check(
        |t, x| {
            let y = t.add_scalar(x, 0.03);
            let r = t.relu(y);
            t.mean(r)
        },
        &x,
        STEP,
    )?;
    push("relu", err);

    let err = grad_check(
        |t, x| {
            let y = t.add_scalar(x, 0.03);
            let r = t.leaky_relu(y, 0.2);
            t.mean(r)
        },
        &x,
        STEP,
    )?;
    push("leaky_relu", err);

    let err = grad_check(
        |t, x| {
            let mut rng = stream(7, "battery-dropout");
            let d = t.dropout(x, 0.3, true, &mut rng)?;
            let m = t.mul(d, d)?;
            t.mean(m)
        },
        &x,
        STEP,
    )?;
    push("dropout", err);

    // convolution
    let img = rand_tensor(&[2, 3, 6, 6], seed + 1, -1.0, 1.0);
    let weight = rand_tensor(&[4, 3, 3, 3], seed + 2, -0.5, 0.5);
    let bias = rand_tensor(&[4], seed + 3, -0.2, 0.2);
    let (w2, b2) = (weight.clone(), bias.clone());
    let err = grad_check(
        move |t, x| {
            let w = t.leaf(&w2);
            let b = t.leaf(&b2);
            let y = t.conv2d(x, w, b, 1, 1)?;
            let m = t.mul(y, y)?;
            t.mean(m)
        },
        &img,
        STEP,
    )?;
    push("conv3x3_input", err);
    let (i2, b2) = (img.clone(), bias.clone());
    let err = grad_check(
        move |t, w| {
            let x = t.leaf(&i2);
            let b = t.leaf(&b2);
            let y = t.conv2d(x, w, b, 2, 1)?;
            let m = t.mul(y, y)?;
            t.mean(m)
        },
        &weight,
        STEP,
    )?;
    push("conv3x3_stride2_weight", err);
    let (i2, w1) = (img.clone(), rand_tensor(&[4, 3, 1, 1], seed + 4, -0.5, 0.5));
    let err = grad_check(
        move |t, b| {
            let x = t.leaf(&i2);
            let w = t.leaf(&w1);
            let y = t.conv2d(x, w, b, 1, 0)?;
            let m = t.mul(y, y)?;
            t.mean(m)
        },
        &bias,
        STEP,
    )?;
    push("conv1x1_bias", err);

    // channel affine
    let scale = rand_tensor(&[4], seed + 5, 0.5, 1.5);
    let shift = rand_tensor(&[4], seed + 6, -0.3, 0.3);
    let (s2, sh2) = (scale.clone(), shift.clone());
    let err = grad_check(
        move |t, x| {
            let s = t.leaf(&s2);
            let b = t.leaf(&sh2);
            let y = t.channel_affine(x, s, b)?;
            let m = t.mul(y, y)?;
            t.mean(m)
        },
        &x,
        STEP,
    )?;
    push("channel_affine_input", err);
    let (x2, sh2) = (x.clone(), shift.clone());
    let err = grad_check(
        move |t, s| {
            let x = t.leaf(&x2);
            let b = t.leaf(&sh2);
            let y = t.channel_affine(x, s, b)?;
            let m = t.mul(y, y)?;
            t.mean(m)
        },
        &scale,
        STEP,
    )?;
    push("channel_affine_scale", err);

    // resampling
    let err = grad_check(
        |t, x| {
            let u = t.upsample_nearest(x, 2)?;
            let m = t.mul(u, u)?;
            t.mean(m)
        },
        &x,
        STEP,
    )?;
    push("upsample_nearest", err);
    let err = grad_check(
        |t, x| {
            let d = t.downsample_nearest(x, 2)?;
            let m = t.mul(d, d)?;
            t.mean(m)
        },
        &x,
        STEP,
    )?;
    push("downsample_nearest", err);

    // softmax family and reductions
    let err = grad_check(
        |t, x| {
            let s = t.softmax(x)?;
            let m = t.mul(s, s)?;
            Ok(t.sum(m))
        },
        &x,
        STEP,
    )?;
    push("softmax", err);
    let err = grad_check(
        |t, x| {
            let s = t.log_softmax(x)?;
            let c = t.add_scalar(s, 1.5);
            let m = t.mul(c, c)?;
            t.mean(m)
        },
        &x,
        STEP,
    )?;
    push("log_softmax", err);
    let err = grad_check(|t, x| Ok(t.sum(x)), &x, STEP)?;
    push("sum", err);
    let err = grad_check(|t, x| t.mean(x), &x, STEP)?;
    push("mean", err);

    // channel statistics
    let err = grad_check(
        |t, x| {
            let m = t.channel_mean(x)?;
            let q = t.mul(m, m)?;
            Ok(t.sum(q))
        },
        &x,
        STEP,
    )?;
    push("channel_mean", err);
    let err = grad_check(
        |t, x| {
            let s = t.channel_std(x)?;
            let q = t.mul(s, s)?;
            Ok(t.sum(q))
        },
        &x,
        STEP,
    )?;
    push("channel_std", err);

    // statistics broadcasting
    let stats = rand_tensor(&[2, 4], seed + 7, 0.5, 2.0);
    for (name, which) in [("add_nc", 0usize), ("sub_nc", 1), ("mul_nc", 2), ("div_nc", 3)] {
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
            STEP,
        )?;
        push(name, err);
    }

    // losses
    let logits = rand_tensor(&[2, 4, 8, 8], seed + 8, -2.0, 2.0);
    let target = Arc::new(rand_one_hot(2, 4, 8, 8, seed + 9));
    let weights = Arc::new(rand_tensor(&[2, 8, 8], seed + 10, 0.1, 1.0));
    let (tg, wg) = (Arc::clone(&target), Arc::clone(&weights));
    let err = grad_check(
        move |t, x| t.softmax_cross_entropy(x, Arc::clone(&tg), Some(Arc::clone(&wg))),
        &logits,
        STEP,
    )?;
    push("softmax_cross_entropy", err);
    let (tg, wg) = (Arc::clone(&target), Arc::clone(&weights));
    let err = grad_check(
        move |t, x| {
            let p = t.softmax(x)?;
            t.cross_entropy_probs(p, Arc::clone(&tg), Some(Arc::clone(&wg)))
        },
        &logits,
        STEP,
    )?;
    push("cross_entropy_probs", err);

    let other_logits = rand_tensor(&[2, 4, 8, 8], seed + 11, -2.0, 2.0);
    let o2 = other_logits.clone();
    let err = grad_check(
        move |t, x| {
            let q_logits = t.leaf(&o2);
            let p = t.softmax(x)?;
            let q = t.softmax(q_logits)?;
            t.kl_divergence(p, q)
        },
        &logits,
        STEP,
    )?;
    push("kl_divergence_p", err);
    let o2 = other_logits.clone();
    let err = grad_check(
        move |t, x| {
            let p_logits = t.leaf(&o2);
            let p = t.softmax(p_logits)?;
            let q = t.softmax(x)?;
            t.kl_divergence(p, q)
        },
        &logits,
        STEP,
    )?;
    push("kl_divergence_q", err);

    let err = grad_check(move |t, x| t.bce_with_logits(x, 1.0), &x, STEP)?;
    push("bce_with_logits", err);

    // style exchange
    let feat_b = rand_tensor(&[2, 4, 6, 6], seed + 12, -2.0, 2.0);
    let fb = feat_b.clone();
    let err = grad_check(
        move |t, x| {
            let other = t.leaf(&fb);
            let (ab, ba) = cross_stylize(t, x, other, false)?;
            let m = t.mul(ab, ba)?;
            t.mean(m)
        },
        &x,
        STEP,
    )?;
    push("cross_stylize_content", err);
    let x2 = x.clone();
    let err = grad_check(
        move |t, other| {
            let content = t.leaf(&x2);
            let (ab, _) = cross_stylize(t, content, other, false)?;
            let m = t.mul(ab, ab)?;
            t.mean(m)
        },
        &feat_b,
        STEP,
    )?;
    push("cross_stylize_style_source", err);

    // apply_style wrt an explicit style vector
    let mu = rand_tensor(&[2, 4], seed + 13, -1.0, 1.0);
    let sigma = rand_tensor(&[2, 4], seed + 14, 0.5, 2.0);
    let (x2, s2) = (x.clone(), sigma.clone());
    let err = grad_check(
        move |t, mu_in| {
            let z = t.leaf(&x2);
            let own = extract_style(t, z, None)?;
            let sg = t.leaf(&s2);
            let other = StyleVector { mu: mu_in, sigma: sg, source_domain: None };
            let y = apply_style(t, z, &own, &other)?;
            let m = t.mul(y, y)?;
            t.mean(m)
        },
        &mu,
        STEP,
    )?;
    push("apply_style_mu", err);

    // rectified losses: weights are stop-gradient constants of the objective
    let probs_w = RectificationWeights {
        w: rand_tensor(&[2, 8, 8], seed + 15, 0.2, 1.0),
        gamma: 1.0,
    };
    let (tg, pw) = (Arc::clone(&target), probs_w.w.clone());
    let err = grad_check(
        move |t, x| {
            let p = t.softmax(x)?;
            let w = RectificationWeights { w: pw.clone(), gamma: 1.0 };
            crate::selftrain::rectified_pl_loss(t, p, Arc::clone(&tg), &w)
        },
        &logits,
        STEP,
    )?;
    push("rectified_pl_loss", err);
    let (tg, pw) = (Arc::clone(&target), probs_w.w.clone());
    let err = grad_check(
        move |t, x| {
            let p = t.softmax(x)?;
            let w = RectificationWeights { w: pw.clone(), gamma: 1.0 };
            crate::selftrain::rectified_cross_pl_loss(t, p, Arc::clone(&tg), &w)
        },
        &logits,
        STEP,
    )?;
    push("rectified_cross_pl_loss", err);

    // consistency: gradient flows through the stylized branch; the teacher is
    // a fixed tensor by the loss's own stop-gradient contract
    let o2 = other_logits.clone();
    let err = grad_check(
        move |t, x| {
            let teacher_logits = t.leaf(&o2);
            let teacher = t.softmax(teacher_logits)?;
            let p = t.softmax(x)?;
            consistency_loss(t, p, teacher)
        },
        &logits,
        STEP,
    )?;
    push("consistency_loss", err);

    // distillation, both teacher modes
    let o2 = other_logits.clone();
    let err = grad_check(
        move |t, x| {
            let teacher_logits = t.leaf(&o2);
            let teacher = t.softmax(teacher_logits)?;
            let p = t.softmax(x)?;
            kd_loss(t, p, KdTarget::Soft(teacher))
        },
        &logits,
        STEP,
    )?;
    push("kd_loss_soft", err);
    let tg = Arc::clone(&target);
    let err = grad_check(
        move |t, x| {
            let p = t.softmax(x)?;
            kd_loss(t, p, KdTarget::Hard(Arc::clone(&tg)))
        },
        &logits,
        STEP,
    )?;
    push("kd_loss_hard", err);

    // through the model: discriminator + bce, and a full classification pass
    let cfg = EncoderConfig {
        widths: vec![4, 6],
        dropout_rate: 0.0,
        dropout_after: vec![false, false],
        downsample_after: vec![true, false],
        style_taps: vec![0],
        detach_style: false,
    };
    let bundle = ModelBundle::new(cfg.clone(), 3, 2, seed)?;
    let image = rand_tensor(&[2, 3, 8, 8], seed + 16, 0.0, 1.0);
    let b2 = bundle.clone();
    let err = grad_check(
        move |t, x| {
            let staged = b2.stage(t);
            let p = t.softmax(x)?;
            let d = b2.discriminate(t, &staged, p, 0)?;
            t.bce_with_logits(d, 1.0)
        },
        &rand_tensor(&[2, 3, 8, 8], seed + 17, -1.0, 1.0),
        STEP,
    )?;
    push("discriminate_bce", err);
    let b2 = bundle.clone();
    let seg_target = Arc::new(rand_one_hot(2, 3, 8, 8, seed + 18));
    let err = grad_check(
        move |t, x| {
            let staged = b2.stage(t);
            let out = b2.forward(t, &staged, x, Head::Domain(0), None, &mut Mode::Eval)?;
            t.softmax_cross_entropy(out.logits, Arc::clone(&seg_target), None)
        },
        &image,
        STEP,
    )?;
    push("encoder_head_cross_entropy", err);
    let b2 = bundle.clone();
    let style_img = rand_tensor(&[2, 3, 8, 8], seed + 19, 0.0, 1.0);
    let seg_target = Arc::new(rand_one_hot(2, 3, 8, 8, seed + 20));
    let err = grad_check(
        move |t, x| {
            let staged = b2.stage(t);
            let s = t.leaf(&style_img);
            let out = b2.forward(t, &staged, x, Head::Domain(1), Some(s), &mut Mode::Eval)?;
            t.softmax_cross_entropy(out.logits, Arc::clone(&seg_target), None)
        },
        &image,
        STEP,
    )?;
    push("stylized_forward_cross_entropy", err);

    // the full stage-2 objective, checked along its live branches
    let (obj_src_err, obj_head_err) = objective_checks(&bundle, seed)?;
    push("total_objective_source_input", obj_src_err);
    push("total_objective_agnostic_head", obj_head_err);

    Ok(out)
}

/// Finite differences through `total_objective` with respect to (a) the
/// source image batch and (b) the agnostic head weights. Both paths are fully
/// live: the rectification weights and detached teachers depend only on
/// target-side predictions, which neither input influences, so the tape
/// gradient and the finite difference agree exactly.
fn objective_checks(bundle: &ModelBundle, seed: u64) -> Result<(Real, Real)> {
    let bench = make_benchmark(&DataConfig {
        h: 8,
        w: 8,
        num_classes: 3,
        num_targets: 2,
        source_size: 4,
        target_size: 4,
        unseen_size: 2,
        eval_size: 2,
        seed,
        ..DataConfig::default()
    })?;
    let cfg = TrainConfig {
        batch_size: 2,
        lambda: 0.7,
        gamma: 1.1,
        augment: AugmentConfig::disabled(),
        ..TrainConfig::default()
    };
    let mut bank = crate::selftrain::PseudoLabelBank::default();
    crate::selftrain::refresh_pseudo_labels(bundle, &bench.targets, &mut bank, 0)?;
    let k = bench.source.num_classes;
    let idx = [0usize, 1];
    let (source_images, labels) = bench.source.stack(&idx)?;
    let source_labels = Arc::new(one_hot_labels(&labels.unwrap(), 2, k, 8, 8)?);
    let mut target_images = Vec::new();
    let mut target_pl = Vec::new();
    for (di, ds) in bench.targets.iter().enumerate() {
        let (imgs, _) = ds.stack(&idx)?;
        let mut pl = Vec::new();
        for &i in &idx {
            pl.extend_from_slice(bank.get(di, i).unwrap());
        }
        target_images.push(imgs);
        target_pl.push(Arc::new(one_hot_labels(&pl, 2, k, 8, 8)?));
    }

    let batch = IterationBatch {
        h: 8,
        w: 8,
        source_images: source_images.clone(),
        source_labels: Arc::clone(&source_labels),
        target_images: target_images.clone(),
        target_pl: target_pl.clone(),
    };

    // (a) with respect to the source image batch: the probe node is spliced
    // in as the source input, target batches come from fixed tensors
    let b2 = bundle.clone();
    let cfg2 = cfg.clone();
    let tgt = target_images.clone();
    let batch2 = IterationBatch {
        h: batch.h,
        w: batch.w,
        source_images: source_images.clone(),
        source_labels: Arc::clone(&batch.source_labels),
        target_images: batch.target_images.clone(),
        target_pl: batch.target_pl.clone(),
    };
    let src_err = grad_check(
        move |t, x| {
            let staged = b2.stage(t);
            let xt: Vec<_> = tgt.iter().map(|img| t.leaf(img)).collect();
            let (total, _) = total_objective_on(t, &b2, &staged, x, &xt, &batch2, &cfg2, &mut Mode::Eval)?;
            Ok(total)
        },
        &source_images,
        STEP,
    )?;

    // (b) with respect to the agnostic head weights: the probe node replaces
    // that parameter during staging
    let agn_weight = {
        let mut found = None;
        bundle.visit_params(&mut |owner, name, t| {
            if owner == Owner::Agnostic && name == "weight" {
                found = Some(t.clone());
            }
        });
        found.expect("agnostic head weight")
    };
    let b2 = bundle.clone();
    let cfg2 = cfg.clone();
    let head_err = grad_check(
        move |t, wid| {
            let staged = b2.stage_with(t, |owner, name| {
                (owner == Owner::Agnostic && name == "weight").then_some(wid)
            });
            let (total, _) = total_objective(t, &b2, &staged, &batch, &cfg2, &mut Mode::Eval)?;
            Ok(total)
        },
        &agn_weight,
        STEP,
    )?;
    Ok((src_err, head_err))
}
