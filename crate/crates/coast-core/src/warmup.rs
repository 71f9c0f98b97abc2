//! Stage 1: per-target adversarial alignment on classifier outputs with
//! source supervision. Each iteration alternates, for every target, one
//! generator step (source cross entropy plus a fooling term) and one
//! discriminator step; the domain-agnostic head is trained on source cross
//! entropy alongside so distillation starts from something sensible.
//!
//! With `lambda_adv == 0` the adversarial machinery is skipped entirely and
//! the run degenerates to supervised source-only training, which doubles as
//! the source-only baseline.

use crate::autograd::{Tape, Tensor, TensorId};
use crate::data::DomainDataset;
use crate::error::{CoastError, Result};
use crate::model::{Head, Mode, ModelBundle, Owner, Staged};
use crate::opt::{Adam, SgdMomentum};
use crate::rng::stream;
use crate::selftrain::one_hot_labels;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::sync::Arc;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct WarmupConfig {
    /// Weight of the fooling term in the generator objective.
    pub lambda_adv: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub seg_lr: f64,
    pub disc_lr: f64,
    pub momentum: f64,
    pub poly_power: f64,
    pub seed: u64,
}

impl Default for WarmupConfig {
    fn default() -> Self {
        WarmupConfig {
            lambda_adv: 0.001,
            iterations: 2000,
            batch_size: 4,
            seg_lr: 5e-3,
            disc_lr: 1e-4,
            momentum: 0.9,
            poly_power: 0.9,
            seed: 42,
        }
    }
}

impl WarmupConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_adv < 0.0 {
            return Err(CoastError::Config("lambda_adv must be nonnegative".into()));
        }
        if self.batch_size == 0 {
            return Err(CoastError::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Discriminator objective for one source/target pair:
/// `BCE(D(p_src), 1) + BCE(D(p_tgt), 0)`, averaged over patches. Callers
/// detach the probability maps so only the discriminator trains.
pub fn discriminator_loss(
    tape: &mut Tape,
    bundle: &ModelBundle,
    staged: &Staged,
    p_src: TensorId,
    p_tgt: TensorId,
    domain_index: usize,
) -> Result<TensorId> {
    let d_src = bundle.discriminate(tape, staged, p_src, domain_index)?;
    let d_tgt = bundle.discriminate(tape, staged, p_tgt, domain_index)?;
    let real = tape.bce_with_logits(d_src, 1.0)?;
    let fake = tape.bce_with_logits(d_tgt, 0.0)?;
    tape.add(real, fake)
}

/// Generator objective for one source/target pair: source cross entropy plus
/// `lambda_adv` times the fooling term. Gradients flow through the
/// discriminator but its parameters are not updated in this step.
/// Returns `(loss, seg_value, adv_value)`.
pub fn generator_loss(
    tape: &mut Tape,
    bundle: &ModelBundle,
    staged: &Staged,
    x_src: TensorId,
    y_src: Arc<Tensor>,
    x_tgt: TensorId,
    domain_index: usize,
    lambda_adv: f64,
    mode: &mut Mode,
) -> Result<(TensorId, f64, f64)> {
    let hw = {
        let s = tape.shape(x_src);
        (s[2], s[3])
    };
    let feats = bundle.encode_from(tape, staged, x_src, 0, mode)?;
    let (logits, _) = bundle.classify(tape, staged, *feats.last().unwrap(), Head::Domain(domain_index), hw)?;
    let seg = tape.softmax_cross_entropy(logits, y_src, None)?;
    let seg_value = tape.scalar_value(seg) as f64;
    if lambda_adv == 0.0 {
        return Ok((seg, seg_value, 0.0));
    }
    let thw = {
        let s = tape.shape(x_tgt);
        (s[2], s[3])
    };
    let tfeats = bundle.encode_from(tape, staged, x_tgt, 0, mode)?;
    let (_, tprobs) =
        bundle.classify(tape, staged, *tfeats.last().unwrap(), Head::Domain(domain_index), thw)?;
    let d = bundle.discriminate(tape, staged, tprobs, domain_index)?;
    let adv = tape.bce_with_logits(d, 1.0)?;
    let adv_value = tape.scalar_value(adv) as f64;
    let weighted = tape.mul_scalar(adv, lambda_adv as crate::Real);
    let total = tape.add(seg, weighted)?;
    Ok((total, seg_value, adv_value))
}

/// Warm-up training loop. Mutates the bundle in place and returns the
/// per-iteration CSV log
/// (`iteration,domain_id,seg_loss,adv_loss,disc_loss,learning_rate`).
pub fn warmup_run(
    bundle: &mut ModelBundle,
    source: &DomainDataset,
    targets: &[DomainDataset],
    cfg: &WarmupConfig,
) -> Result<String> {
    cfg.validate()?;
    if targets.len() != bundle.num_targets {
        return Err(CoastError::Config(format!(
            "bundle has {} target heads, got {} target datasets",
            bundle.num_targets,
            targets.len()
        )));
    }
    let adversarial = cfg.lambda_adv > 0.0;
    let k = bundle.num_classes;
    let b = cfg.batch_size;
    let mut rng_batch = stream(cfg.seed, "warmup-batch");
    let mut rng_dropout = stream(cfg.seed, "warmup-dropout");
    let mut sgd = SgdMomentum::new(cfg.seg_lr, cfg.momentum, cfg.poly_power, cfg.iterations);
    let mut adam = Adam::new(cfg.disc_lr);
    let mut csv = String::from("iteration,domain_id,seg_loss,adv_loss,disc_loss,learning_rate\n");

    for t in 0..cfg.iterations {
        let lr = sgd.lr_at(t);
        for i in 0..targets.len() {
            let src_idx: Vec<usize> =
                (0..b).map(|_| rng_batch.gen_range(0..source.samples.len())).collect();
            let (x_src, labels) = source.stack(&src_idx)?;
            let labels = labels.ok_or_else(|| {
                CoastError::Dataset("source dataset must be fully labeled".into())
            })?;
            let y_src = Arc::new(one_hot_labels(&labels, b, k, source.h, source.w)?);
            let x_tgt = if adversarial {
                let tgt_idx: Vec<usize> =
                    (0..b).map(|_| rng_batch.gen_range(0..targets[i].samples.len())).collect();
                Some(targets[i].stack(&tgt_idx)?.0)
            } else {
                None
            };

            // generator step: source CE + fooling term; for the first target
            // also the agnostic head's source CE so it is initialized here
            let mut tape = Tape::new();
            let staged = bundle.stage(&mut tape);
            let xs = tape.leaf(&x_src);
            let mut mode = Mode::Train(&mut rng_dropout);
            let feats = bundle.encode_from(&mut tape, &staged, xs, 0, &mut mode)?;
            let final_feat = *feats.last().unwrap();
            let (logits, _) = bundle.classify(
                &mut tape,
                &staged,
                final_feat,
                Head::Domain(i),
                (source.h, source.w),
            )?;
            let seg = tape.softmax_cross_entropy(logits, Arc::clone(&y_src), None)?;
            let seg_value = tape.scalar_value(seg) as f64;
            let mut total = seg;
            if i == 0 {
                let (logits_a, _) = bundle.classify(
                    &mut tape,
                    &staged,
                    final_feat,
                    Head::Agnostic,
                    (source.h, source.w),
                )?;
                let seg_a = tape.softmax_cross_entropy(logits_a, Arc::clone(&y_src), None)?;
                total = tape.add(total, seg_a)?;
            }
            let mut adv_value = 0.0;
            let mut held_predictions = None;
            if let Some(x_tgt) = &x_tgt {
                let xt = tape.leaf(x_tgt);
                let tfeats = bundle.encode_from(&mut tape, &staged, xt, 0, &mut mode)?;
                let (_, tprobs) = bundle.classify(
                    &mut tape,
                    &staged,
                    *tfeats.last().unwrap(),
                    Head::Domain(i),
                    (targets[i].h, targets[i].w),
                )?;
                let d = bundle.discriminate(&mut tape, &staged, tprobs, i)?;
                let adv = tape.bce_with_logits(d, 1.0)?;
                adv_value = tape.scalar_value(adv) as f64;
                let weighted = tape.mul_scalar(adv, cfg.lambda_adv as crate::Real);
                total = tape.add(total, weighted)?;
                // the discriminator step reuses these predictions, detached
                let sprobs = tape.softmax(logits)?;
                let mut held_s = tape.tensor(sprobs);
                let mut held_t = tape.tensor(tprobs);
                held_s.requires_grad = false;
                held_t.requires_grad = false;
                held_predictions = Some((held_s, held_t));
            }
            let total_value = tape.scalar_value(total) as f64;
            if !total_value.is_finite() {
                return Err(CoastError::NonFinite(format!(
                    "warm-up generator loss at iteration {t}, domain {} (seg {seg_value}, adv {adv_value})",
                    targets[i].domain_id
                )));
            }
            tape.backward(total)?;
            sgd.step(bundle, &staged, &tape, Owner::is_segmentation, t);

            // discriminator step on the held (pre-update) predictions
            let mut disc_value = 0.0;
            if let Some((p_src, p_tgt)) = held_predictions {
                let mut tape = Tape::new();
                let staged = bundle.stage(&mut tape);
                let ps = tape.leaf(&p_src);
                let pt = tape.leaf(&p_tgt);
                let d_loss = discriminator_loss(&mut tape, bundle, &staged, ps, pt, i)?;
                disc_value = tape.scalar_value(d_loss) as f64;
                if !disc_value.is_finite() {
                    return Err(CoastError::NonFinite(format!(
                        "warm-up discriminator loss at iteration {t}, domain {}",
                        targets[i].domain_id
                    )));
                }
                tape.backward(d_loss)?;
                adam.step(bundle, &staged, &tape, |o| o == Owner::Disc(i));
            }

            let _ = writeln!(
                csv,
                "{},{},{},{},{},{}",
                t, targets[i].domain_id, seg_value, adv_value, disc_value, lr
            );
        }
    }
    Ok(csv)
}
