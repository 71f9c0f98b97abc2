//! Transient profiling probe (not an assertion test).
use coast_core::data::{make_benchmark, DataConfig};
use coast_core::model::{EncoderConfig, Head, Mode, ModelBundle};
use coast_core::rng::stream;
use coast_core::selftrain::one_hot_labels;
use coast_core::{Tape, Tensor};
use std::sync::Arc;
use std::time::Instant;

#[test]
#[ignore]
fn profile_pieces() {
    let bench = make_benchmark(&DataConfig { source_size: 16, target_size: 8, unseen_size: 4, eval_size: 4, ..DataConfig::default() }).unwrap();
    let bundle = ModelBundle::new(EncoderConfig::default(), 4, 2, 1).unwrap();
    let (x, labels) = bench.source.stack(&[0,1,2,3]).unwrap();
    let y = Arc::new(one_hot_labels(&labels.unwrap(), 4, 4, 32, 32).unwrap());

    // forward only
    let t0 = Instant::now();
    let reps = 50;
    for _ in 0..reps {
        let mut tape = Tape::new();
        let staged = bundle.stage(&mut tape);
        let xid = tape.leaf(&x);
        let _ = bundle.forward(&mut tape, &staged, xid, Head::Domain(0), None, &mut Mode::Eval).unwrap();
    }
    println!("forward (batch4 enc+head): {:.2} ms", t0.elapsed().as_secs_f64()*1000.0/reps as f64);

    // forward + CE + backward
    let t0 = Instant::now();
    for _ in 0..reps {
        let mut tape = Tape::new();
        let staged = bundle.stage(&mut tape);
        let xid = tape.leaf(&x);
        let out = bundle.forward(&mut tape, &staged, xid, Head::Domain(0), None, &mut Mode::Eval).unwrap();
        let loss = tape.softmax_cross_entropy(out.logits, Arc::clone(&y), None).unwrap();
        tape.backward(loss).unwrap();
    }
    println!("forward+bwd: {:.2} ms", t0.elapsed().as_secs_f64()*1000.0/reps as f64);

    // raw conv fwd 16->32 at 16x16 batch4
    let mk = |shape: &[usize], seed| {
        let mut rng = stream(seed, "p");
        let n: usize = shape.iter().product();
        use rand::Rng;
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    };
    let input = mk(&[4,16,16,16], 1);
    let weight = mk(&[32,16,3,3], 2);
    let bias = mk(&[32], 3);
    let t0 = Instant::now();
    let reps2 = 2000;
    for _ in 0..reps2 {
        let mut tape = Tape::new();
        let (i, w, b) = (tape.leaf(&input), tape.leaf(&weight), tape.leaf(&bias));
        let _ = tape.conv2d(i, w, b, 1, 1).unwrap();
    }
    let per = t0.elapsed().as_secs_f64()*1000.0/reps2 as f64;
    let flops = 2.0*4.0*32.0*16.0*256.0*9.0;
    println!("conv 16->32@16x16 fwd: {:.3} ms  ({:.2} GFLOP/s)", per, flops/per/1e6);
}

#[test]
#[ignore]
fn profile_warmup_iteration() {
    use coast_core::model::Owner;
    use coast_core::opt::{Adam, SgdMomentum};
    use coast_core::warmup::discriminator_loss;
    let bench = make_benchmark(&DataConfig { source_size: 16, target_size: 8, unseen_size: 4, eval_size: 4, ..DataConfig::default() }).unwrap();
    let mut bundle = ModelBundle::new(EncoderConfig::default(), 4, 2, 1).unwrap();
    let (x_src, labels) = bench.source.stack(&[0,1,2,3]).unwrap();
    let y = Arc::new(one_hot_labels(&labels.unwrap(), 4, 4, 32, 32).unwrap());
    let (x_tgt, _) = bench.targets[0].stack(&[0,1,2,3]).unwrap();
    let mut sgd = SgdMomentum::new(5e-3, 0.9, 0.9, 100);
    let mut adam = Adam::new(1e-4);
    let mut rng = stream(1, "d");

    let reps = 30;
    let mut t_fwd = 0.0; let mut t_bwd = 0.0; let mut t_sgd = 0.0; let mut t_disc = 0.0;
    let t_all = Instant::now();
    for it in 0..reps {
        let t0 = Instant::now();
        let mut tape = Tape::new();
        let staged = bundle.stage(&mut tape);
        let xs = tape.leaf(&x_src);
        let mut mode = coast_core::model::Mode::Train(&mut rng);
        let feats = bundle.encode_from(&mut tape, &staged, xs, 0, &mut mode).unwrap();
        let ff = *feats.last().unwrap();
        let (logits, _) = bundle.classify(&mut tape, &staged, ff, Head::Domain(0), (32,32)).unwrap();
        let seg = tape.softmax_cross_entropy(logits, Arc::clone(&y), None).unwrap();
        let (logits_a, _) = bundle.classify(&mut tape, &staged, ff, Head::Agnostic, (32,32)).unwrap();
        let seg_a = tape.softmax_cross_entropy(logits_a, Arc::clone(&y), None).unwrap();
        let mut total = tape.add(seg, seg_a).unwrap();
        let xt = tape.leaf(&x_tgt);
        let tf = bundle.encode_from(&mut tape, &staged, xt, 0, &mut mode).unwrap();
        let (_, tp) = bundle.classify(&mut tape, &staged, *tf.last().unwrap(), Head::Domain(0), (32,32)).unwrap();
        let d = bundle.discriminate(&mut tape, &staged, tp, 0).unwrap();
        let adv = tape.bce_with_logits(d, 1.0).unwrap();
        let w = tape.mul_scalar(adv, 0.001);
        total = tape.add(total, w).unwrap();
        let sprobs = tape.softmax(logits).unwrap();
        let held = (tape.tensor(sprobs), tape.tensor(tp));
        t_fwd += t0.elapsed().as_secs_f64();

        let t0 = Instant::now();
        tape.backward(total).unwrap();
        t_bwd += t0.elapsed().as_secs_f64();

        let t0 = Instant::now();
        sgd.step(&mut bundle, &staged, &tape, Owner::is_segmentation, it);
        t_sgd += t0.elapsed().as_secs_f64();

        let t0 = Instant::now();
        let mut tape = Tape::new();
        let staged = bundle.stage(&mut tape);
        let ps = tape.leaf(&held.0);
        let pt = tape.leaf(&held.1);
        let dl = discriminator_loss(&mut tape, &bundle, &staged, ps, pt, 0).unwrap();
        tape.backward(dl).unwrap();
        adam.step(&mut bundle, &staged, &tape, |o| o == Owner::Disc(0));
        t_disc += t0.elapsed().as_secs_f64();
    }
    let r = reps as f64;
    println!("per-target gen fwd {:.1} ms, bwd {:.1} ms, sgd {:.1} ms, disc-step {:.1} ms, total/iter(x2 targets) {:.1} ms",
        t_fwd/r*1e3, t_bwd/r*1e3, t_sgd/r*1e3, t_disc/r*1e3, t_all.elapsed().as_secs_f64()/r*1e3*2.0);
}

#[test]
#[ignore]
fn profile_disc_step() {
    use coast_core::model::Owner;
    use coast_core::opt::Adam;
    use coast_core::warmup::discriminator_loss;
    let bench = make_benchmark(&DataConfig { source_size: 8, target_size: 8, unseen_size: 4, eval_size: 4, ..DataConfig::default() }).unwrap();
    let mut bundle = ModelBundle::new(EncoderConfig::default(), 4, 2, 1).unwrap();
    let (x, _) = bench.source.stack(&[0,1,2,3]).unwrap();
    let probs = {
        let mut tape = Tape::new();
        let staged = bundle.stage(&mut tape);
        let xid = tape.leaf(&x);
        let out = bundle.forward(&mut tape, &staged, xid, Head::Domain(0), None, &mut coast_core::model::Mode::Eval).unwrap();
        tape.tensor(out.probs)
    };
    let mut adam = Adam::new(1e-4);
    let reps = 100;
    let (mut t_stage, mut t_fwd, mut t_bwd, mut t_adam) = (0.0, 0.0, 0.0, 0.0);
    for _ in 0..reps {
        let t0 = Instant::now();
        let mut tape = Tape::new();
        let staged = bundle.stage(&mut tape);
        let ps = tape.leaf(&probs);
        let pt = tape.leaf(&probs);
        t_stage += t0.elapsed().as_secs_f64();
        let t0 = Instant::now();
        let dl = discriminator_loss(&mut tape, &bundle, &staged, ps, pt, 0).unwrap();
        t_fwd += t0.elapsed().as_secs_f64();
        let t0 = Instant::now();
        tape.backward(dl).unwrap();
        t_bwd += t0.elapsed().as_secs_f64();
        let t0 = Instant::now();
        adam.step(&mut bundle, &staged, &tape, |o| o == Owner::Disc(0));
        t_adam += t0.elapsed().as_secs_f64();
    }
    let r = reps as f64 / 1000.0;
    println!("disc pieces: stage {:.2} ms, fwd {:.2} ms, bwd {:.2} ms, adam {:.2} ms",
        t_stage/r, t_fwd/r, t_bwd/r, t_adam/r);
}
