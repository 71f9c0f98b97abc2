//! Model bundle: forward/stylization semantics, discriminator shapes,
//! parameter partitioning, and the checkpoint round trip.

use coast_core::model::{EncoderConfig, Head, Mode, ModelBundle, Owner};
use coast_core::rng::stream;
use coast_core::style::cross_stylize;
use coast_core::{grad_check, CoastError, Real, Tape, Tensor};
use rand::Rng;

fn small_cfg() -> EncoderConfig {
    EncoderConfig { widths: vec![8, 12, 12], ..EncoderConfig::default() }
}

fn rand_image(n: usize, h: usize, w: usize, seed: u64) -> Tensor {
    let mut rng = stream(seed, "model-test");
    let values = (0..n * 3 * h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
    Tensor::new(vec![n, 3, h, w], values).unwrap()
}

#[test]
fn forward_with_own_style_matches_plain_forward() {
    let bundle = ModelBundle::new(small_cfg(), 4, 2, 1).unwrap();
    let x = rand_image(2, 16, 16, 2);
    let mut tape = Tape::new();
    let staged = bundle.stage(&mut tape);
    let xid = tape.leaf(&x);
    let plain = bundle
        .forward(&mut tape, &staged, xid, Head::Domain(0), None, &mut Mode::Eval)
        .unwrap();
    let styled = bundle
        .forward(&mut tape, &staged, xid, Head::Domain(0), Some(xid), &mut Mode::Eval)
        .unwrap();
    for (a, b) in tape.values(plain.probs).iter().zip(tape.values(styled.probs)) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn forward_probabilities_are_normalized() {
    let bundle = ModelBundle::new(small_cfg(), 5, 2, 3).unwrap();
    let x = rand_image(2, 16, 16, 4);
    let mut tape = Tape::new();
    let staged = bundle.stage(&mut tape);
    let xid = tape.leaf(&x);
    let out =
        bundle.forward(&mut tape, &staged, xid, Head::Agnostic, None, &mut Mode::Eval).unwrap();
    let probs = tape.values(out.probs);
    let hw = 16 * 16;
    for ni in 0..2 {
        for p in 0..hw {
            let sum: Real = (0..5).map(|k| probs[(ni * 5 + k) * hw + p]).sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn forward_tap_matches_manual_pipeline() {
    let bundle = ModelBundle::new(small_cfg(), 4, 2, 5).unwrap();
    let x = rand_image(1, 16, 16, 6);
    let style = rand_image(1, 16, 16, 7);

    let mut tape = Tape::new();
    let staged = bundle.stage(&mut tape);
    let (xid, sid) = (tape.leaf(&x), tape.leaf(&style));
    let auto = bundle
        .forward(&mut tape, &staged, xid, Head::Domain(1), Some(sid), &mut Mode::Eval)
        .unwrap();

    // manual: block 0 on both inputs, exchange statistics, remaining blocks, head
    let f_x = bundle.encode_range(&mut tape, &staged, xid, 0, 1, &mut Mode::Eval).unwrap()[0];
    let f_s = bundle.encode_range(&mut tape, &staged, sid, 0, 1, &mut Mode::Eval).unwrap()[0];
    let (stylized, _) = cross_stylize(&mut tape, f_x, f_s, false).unwrap();
    let feats = bundle
        .encode_range(&mut tape, &staged, stylized, 1, bundle.num_blocks(), &mut Mode::Eval)
        .unwrap();
    let (_, probs) = bundle
        .classify(&mut tape, &staged, *feats.last().unwrap(), Head::Domain(1), (16, 16))
        .unwrap();

    for (a, b) in tape.values(auto.probs).iter().zip(tape.values(probs)) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn forward_rejects_unknown_head_and_bad_shapes() {
    let bundle = ModelBundle::new(small_cfg(), 4, 2, 8).unwrap();
    let x = rand_image(1, 16, 16, 9);
    let mut tape = Tape::new();
    let staged = bundle.stage(&mut tape);
    let xid = tape.leaf(&x);
    assert!(matches!(
        bundle.forward(&mut tape, &staged, xid, Head::Domain(5), None, &mut Mode::Eval),
        Err(CoastError::UnknownHead(_))
    ));
    let bad = tape.leaf(&rand_image(1, 8, 8, 10));
    assert!(matches!(
        bundle.forward(&mut tape, &staged, xid, Head::Domain(0), Some(bad), &mut Mode::Eval),
        Err(CoastError::ShapeMismatch(_))
    ));
}

#[test]
fn all_heads_share_output_shape() {
    let bundle = ModelBundle::new(small_cfg(), 4, 3, 11).unwrap();
    let x = rand_image(2, 16, 16, 12);
    let mut tape = Tape::new();
    let staged = bundle.stage(&mut tape);
    let xid = tape.leaf(&x);
    let mut shapes = Vec::new();
    for head in [Head::Domain(0), Head::Domain(1), Head::Domain(2), Head::Agnostic] {
        let out = bundle.forward(&mut tape, &staged, xid, head, None, &mut Mode::Eval).unwrap();
        shapes.push(tape.shape(out.probs).to_vec());
    }
    assert!(shapes.windows(2).all(|w| w[0] == w[1]));
    assert_eq!(shapes[0], vec![2, 4, 16, 16]);
}

#[test]
fn discriminator_halves_resolution_per_layer() {
    let bundle = ModelBundle::new(small_cfg(), 4, 2, 13).unwrap();
    let x = rand_image(2, 32, 32, 14);
    let mut tape = Tape::new();
    let staged = bundle.stage(&mut tape);
    let xid = tape.leaf(&x);
    let out =
        bundle.forward(&mut tape, &staged, xid, Head::Domain(0), None, &mut Mode::Eval).unwrap();
    let d = bundle.discriminate(&mut tape, &staged, out.probs, 0).unwrap();
    let expect = 32 / (1 << bundle.num_disc_layers());
    assert_eq!(tape.shape(d), &[2, 1, expect, expect]);
    assert!(matches!(
        bundle.discriminate(&mut tape, &staged, out.probs, 9),
        Err(CoastError::InvalidDomain(9))
    ));
}

#[test]
fn discriminators_have_disjoint_gradients() {
    let bundle = ModelBundle::new(small_cfg(), 4, 2, 15).unwrap();
    let x = rand_image(1, 16, 16, 16);
    let mut tape = Tape::new();
    let staged = bundle.stage(&mut tape);
    let xid = tape.leaf(&x);
    let out =
        bundle.forward(&mut tape, &staged, xid, Head::Domain(0), None, &mut Mode::Eval).unwrap();
    let probs = tape.detach(out.probs);
    let d0 = bundle.discriminate(&mut tape, &staged, probs, 0).unwrap();
    let loss = tape.bce_with_logits(d0, 1.0).unwrap();
    tape.backward(loss).unwrap();
    for (owner, _, id) in &staged.flat {
        match owner {
            Owner::Disc(0) => assert!(tape.grad(*id).is_some()),
            Owner::Disc(_) => assert!(tape.grad(*id).is_none()),
            _ => {}
        }
    }
}

#[test]
fn grad_check_through_discriminator_bce() {
    let bundle = ModelBundle::new(
        EncoderConfig { widths: vec![6, 8], dropout_after: vec![false, false], downsample_after: vec![true, false], style_taps: vec![0], ..EncoderConfig::default() },
        3,
        1,
        17,
    )
    .unwrap();
    let x = Tensor::new(
        vec![1, 3, 8, 8],
        {
            let mut rng = stream(18, "gc");
            (0..192).map(|_| rng.gen_range(-1.0..1.0)).collect()
        },
    )
    .unwrap();
    let err = grad_check(
        move |tape, xid| {
            let staged = bundle.stage(tape);
            let probs = tape.softmax(xid)?;
            let d = bundle.discriminate(tape, &staged, probs, 0)?;
            tape.bce_with_logits(d, 1.0)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "discriminator bce: {err}");
}

#[test]
fn dropout_is_reproducible_and_off_in_eval() {
    let cfg = EncoderConfig { dropout_rate: 0.3, ..small_cfg() };
    let bundle = ModelBundle::new(cfg, 4, 2, 19).unwrap();
    let x = rand_image(1, 16, 16, 20);

    let run_train = |seed: u64| {
        let mut tape = Tape::new();
        let staged = bundle.stage(&mut tape);
        let xid = tape.leaf(&x);
        let mut rng = stream(seed, "dropout");
        let out = bundle
            .forward(&mut tape, &staged, xid, Head::Domain(0), None, &mut Mode::Train(&mut rng))
            .unwrap();
        tape.values(out.probs).to_vec()
    };
    assert_eq!(run_train(5), run_train(5));
    assert_ne!(run_train(5), run_train(6));

    let run_eval = || {
        let mut tape = Tape::new();
        let staged = bundle.stage(&mut tape);
        let xid = tape.leaf(&x);
        let out = bundle
            .forward(&mut tape, &staged, xid, Head::Domain(0), None, &mut Mode::Eval)
            .unwrap();
        tape.values(out.probs).to_vec()
    };
    assert_eq!(run_eval(), run_eval());
}

#[test]
fn parameter_registry_is_disjoint_and_complete() {
    let bundle = ModelBundle::new(small_cfg(), 4, 2, 21).unwrap();
    let mut names = Vec::new();
    bundle.visit_params(&mut |owner, name, _| names.push((owner.label(), name)));
    let total = names.len();
    names.sort();
    names.dedup();
    assert_eq!(names.len(), total);
    // encoder(3 blocks) + 2 heads + agnostic + 2 discs x 3 convs, times (w, b)
    assert_eq!(total, (3 + 2 + 1 + 6) * 2);
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let bundle = ModelBundle::new(small_cfg(), 4, 2, 23).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    bundle.save_checkpoint(&path).unwrap();
    let loaded = ModelBundle::load_checkpoint(&path, small_cfg()).unwrap();
    assert_eq!(loaded.num_targets, 2);
    assert_eq!(loaded.num_classes, 4);

    let x = rand_image(2, 16, 16, 24);
    let forward_bits = |b: &ModelBundle| {
        let mut tape = Tape::new();
        let staged = b.stage(&mut tape);
        let xid = tape.leaf(&x);
        let out = b.forward(&mut tape, &staged, xid, Head::Agnostic, None, &mut Mode::Eval).unwrap();
        tape.values(out.probs).iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(forward_bits(&bundle), forward_bits(&loaded));

    // a second save must be byte-identical
    let path2 = dir.path().join("model2.ckpt");
    loaded.save_checkpoint(&path2).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
}

#[test]
fn checkpoint_rejects_unknown_version_and_magic() {
    let bundle = ModelBundle::new(small_cfg(), 4, 2, 25).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    bundle.save_checkpoint(&path).unwrap();

    let mut bytes = std::fs::read(&path).unwrap();
    bytes[5] = 99; // version field
    let vpath = dir.path().join("badver.ckpt");
    std::fs::write(&vpath, &bytes).unwrap();
    assert!(matches!(
        ModelBundle::load_checkpoint(&vpath, small_cfg()),
        Err(CoastError::Checkpoint(_))
    ));

    let mut bytes = std::fs::read(&path).unwrap();
    bytes[0] = b'X';
    let mpath = dir.path().join("badmagic.ckpt");
    std::fs::write(&mpath, &bytes).unwrap();
    assert!(matches!(
        ModelBundle::load_checkpoint(&mpath, small_cfg()),
        Err(CoastError::Checkpoint(_))
    ));
}
