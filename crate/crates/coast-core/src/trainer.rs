//! Stage-2 orchestration: composes the full training objective from source
//! supervision, distillation, rectified in-domain and cross-domain
//! pseudo-label losses, and stylized-view consistency; schedules pseudo-label
//! refreshes and augmentation; and drives the ablation variants.

use crate::augment::{augment_sample, AugmentConfig};
use crate::autograd::{Tape, Tensor, TensorId};
use crate::data::Benchmark;
use crate::error::{CoastError, Result};
use crate::metrics::evaluate_all;
use crate::model::{Head, Mode, ModelBundle, Owner, Staged};
use crate::opt::SgdMomentum;
use crate::rng::stream;
use crate::selftrain::{
    consistency_loss, kd_loss, one_hot_labels, rectification_weight, rectified_cross_pl_loss,
    rectified_pl_loss, refresh_pseudo_labels, KdMode, KdTarget, PseudoLabelBank,
    RectificationWeights,
};
use crate::style::{apply_style, extract_style};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    /// Batch size per domain.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Poly learning-rate decay power over the run; 0 keeps the rate fixed.
    pub poly_power: f64,
    /// Pseudo-label refresh interval in iterations.
    pub n_b: usize,
    /// Weight of the pairwise (cross-domain) losses.
    pub lambda: f64,
    /// Temperature of the rectification exponential.
    pub gamma: f64,
    pub self_train_only: bool,
    pub use_crossdonorm: bool,
    pub use_consistency: bool,
    pub use_rectification: bool,
    pub kd_mode: KdMode,
    pub seed: u64,
    pub augment: AugmentConfig,
    /// Checkpoint interval in iterations; 0 writes only the final state.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 2000,
            batch_size: 4,
            learning_rate: 1e-4,
            momentum: 0.0,
            poly_power: 0.0,
            n_b: 200,
            lambda: 1.0,
            gamma: 1.0,
            self_train_only: false,
            use_crossdonorm: true,
            use_consistency: true,
            use_rectification: true,
            kd_mode: KdMode::Soft,
            seed: 42,
            augment: AugmentConfig::default(),
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        // iterations == 0 is allowed: a zero-iteration run is a no-op
        if self.lambda < 0.0 || self.gamma < 0.0 {
            return Err(CoastError::Config("lambda and gamma must be nonnegative".into()));
        }
        if self.batch_size == 0 || self.n_b == 0 {
            return Err(CoastError::Config("batch_size and n_b must be positive".into()));
        }
        Ok(())
    }

    /// Effective term toggles: pairwise machinery needs style exchange, and
    /// the pure self-training variant strips everything cross-domain.
    pub fn effective_flags(&self, num_targets: usize) -> (bool, bool, bool) {
        let cross = self.use_crossdonorm && !self.self_train_only && num_targets >= 2;
        let consistency = cross && self.use_consistency && !self.self_train_only;
        let rectification = cross && self.use_rectification && !self.self_train_only;
        (cross, consistency, rectification)
    }
}

/// Named value of every objective term, for additivity checks and logging.
#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub seg_source: f64,
    /// Per target domain.
    pub kd: Vec<f64>,
    /// Per target domain, rectified.
    pub pl: Vec<f64>,
    /// Per ordered pair (content, style).
    pub pl_sty: Vec<((usize, usize), f64)>,
    /// Per ordered pair (content, style).
    pub cst: Vec<((usize, usize), f64)>,
    pub mean_rect_weight: Vec<f64>,
    pub lambda: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Recombine the named parts with the objective's coefficient structure:
    /// `seg + sum_i [kd_i / M + pl_i] + lambda/(M-1) * sum_pairs (sty + cst)`.
    pub fn expected_total(&self) -> f64 {
        let m = self.kd.len() as f64;
        let mut total = self.seg_source;
        for i in 0..self.kd.len() {
            total += self.kd[i] / m + self.pl[i];
        }
        if m > 1.0 {
            let pair_coef = self.lambda / (m - 1.0);
            for (_, v) in &self.pl_sty {
                total += pair_coef * v;
            }
            for (_, v) in &self.cst {
                total += pair_coef * v;
            }
        }
        total
    }

    fn pair_mean(pairs: &[((usize, usize), f64)], i: usize) -> f64 {
        let vals: Vec<f64> =
            pairs.iter().filter(|((a, _), _)| *a == i).map(|(_, v)| *v).collect();
        if vals.is_empty() {
            0.0
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    }
}

/// One iteration's sampled and augmented batches.
pub struct IterationBatch {
    pub h: usize,
    pub w: usize,
    pub source_images: Tensor,
    pub source_labels: Arc<Tensor>,
    pub target_images: Vec<Tensor>,
    pub target_pl: Vec<Arc<Tensor>>,
}

/// Draw one batch per domain, pairing each target image with its bank entry
/// and applying augmentation (geometric transforms shared between image and
/// label grid, photometric jitter on the image only).
pub fn sample_iteration_batch(
    bench: &Benchmark,
    bank: &PseudoLabelBank,
    cfg: &TrainConfig,
    rng_batch: &mut rand_chacha::ChaCha8Rng,
    rng_augment: &mut rand_chacha::ChaCha8Rng,
) -> Result<IterationBatch> {
    let k = bench.source.num_classes;
    let b = cfg.batch_size;
    let (oh, ow) = cfg.augment.out_size(bench.source.h, bench.source.w);

    let mut src_values = Vec::with_capacity(b * 3 * oh * ow);
    let mut src_labels = Vec::with_capacity(b * oh * ow);
    for _ in 0..b {
        let i = rng_batch.gen_range(0..bench.source.samples.len());
        let s = &bench.source.samples[i];
        let label = s.label.as_deref().ok_or_else(|| {
            CoastError::Dataset("source dataset must be fully labeled".into())
        })?;
        let (img, lbl) = augment_sample(&s.image, Some(label), &cfg.augment, rng_augment);
        src_values.extend_from_slice(&img.values);
        src_labels.extend_from_slice(&lbl.expect("label passed in"));
    }
    let source_images = Tensor::new(vec![b, 3, oh, ow], src_values)?;
    let source_labels = Arc::new(one_hot_labels(&src_labels, b, k, oh, ow)?);

    let mut target_images = Vec::new();
    let mut target_pl = Vec::new();
    for (di, ds) in bench.targets.iter().enumerate() {
        let mut values = Vec::with_capacity(b * 3 * oh * ow);
        let mut labels = Vec::with_capacity(b * oh * ow);
        for _ in 0..b {
            let i = rng_batch.gen_range(0..ds.samples.len());
            let pl = bank.get(di, i).ok_or_else(|| {
                CoastError::Dataset(format!(
                    "pseudo-label bank has no entry for domain {di} sample {i}; refresh first"
                ))
            })?;
            let (img, lbl) =
                augment_sample(&ds.samples[i].image, Some(pl), &cfg.augment, rng_augment);
            values.extend_from_slice(&img.values);
            labels.extend_from_slice(&lbl.expect("pseudo-label passed in"));
        }
        target_images.push(Tensor::new(vec![b, 3, oh, ow], values)?);
        target_pl.push(Arc::new(one_hot_labels(&labels, b, k, oh, ow)?));
    }
    Ok(IterationBatch { h: oh, w: ow, source_images, source_labels, target_images, target_pl })
}

/// Run the stylized branch for content features toward a style branch's
/// statistics at every tap, then through the remaining blocks.
fn stylized_final_feature(
    bundle: &ModelBundle,
    tape: &mut Tape,
    staged: &Staged,
    content_feats: &[TensorId],
    style_feats: &[TensorId],
    mode: &mut Mode,
) -> Result<TensorId> {
    let mut taps: Vec<usize> = bundle.cfg.style_taps.clone();
    taps.sort_unstable();
    taps.dedup();
    debug_assert!(!taps.is_empty());
    let mut cur = content_feats[taps[0]];
    let mut block = taps[0];
    for &tap in &taps {
        if tap > block {
            let feats = bundle.encode_range(tape, staged, cur, block + 1, tap + 1, mode)?;
            cur = *feats.last().unwrap();
            block = tap;
        }
        let mut own = extract_style(tape, cur, None)?;
        let mut other = extract_style(tape, style_feats[tap], None)?;
        if bundle.cfg.detach_style {
            own.mu = tape.detach(own.mu);
            own.sigma = tape.detach(own.sigma);
            other.mu = tape.detach(other.mu);
            other.sigma = tape.detach(other.sigma);
        }
        cur = apply_style(tape, cur, &own, &other)?;
    }
    let feats = bundle.encode_range(tape, staged, cur, block + 1, bundle.num_blocks(), mode)?;
    Ok(*feats.last().unwrap_or(&cur))
}

/// Build the full stage-2 objective on the tape. Stylized predictions are
/// computed once per ordered pair and shared between the rectification
/// weights, the cross pseudo-label loss, and the consistency loss. The
/// rectification weights are computed from prediction values and enter the
/// losses as stop-gradient pixel weights.
pub fn total_objective(
    tape: &mut Tape,
    bundle: &ModelBundle,
    staged: &Staged,
    batch: &IterationBatch,
    cfg: &TrainConfig,
    mode: &mut Mode,
) -> Result<(TensorId, LossBreakdown)> {
    let xs = tape.leaf(&batch.source_images);
    let xt: Vec<TensorId> = batch.target_images.iter().map(|t| tape.leaf(t)).collect();
    total_objective_on(tape, bundle, staged, xs, &xt, batch, cfg, mode)
}

/// [`total_objective`] with the image batches already on the tape, so callers
/// can wire gradients back to their own nodes (finite-difference probes).
#[allow(clippy::too_many_arguments)]
pub fn total_objective_on(
    tape: &mut Tape,
    bundle: &ModelBundle,
    staged: &Staged,
    source_images: TensorId,
    target_images: &[TensorId],
    batch: &IterationBatch,
    cfg: &TrainConfig,
    mode: &mut Mode,
) -> Result<(TensorId, LossBreakdown)> {
    let m = bundle.num_targets;
    if target_images.len() != m || batch.target_pl.len() != m {
        return Err(CoastError::Config(format!(
            "expected a batch for each of {m} target domains, got {}",
            target_images.len()
        )));
    }
    let (use_cross, use_cst, use_rect) = cfg.effective_flags(m);
    let hw = (batch.h, batch.w);

    // source supervision through every head
    let xs = source_images;
    let sfeats = bundle.encode_from(tape, staged, xs, 0, mode)?;
    let sfinal = *sfeats.last().unwrap();
    let mut seg_total: Option<TensorId> = None;
    for i in 0..m {
        let (logits, _) = bundle.classify(tape, staged, sfinal, Head::Domain(i), hw)?;
        let seg = tape.softmax_cross_entropy(logits, Arc::clone(&batch.source_labels), None)?;
        seg_total = Some(match seg_total {
            Some(acc) => tape.add(acc, seg)?,
            None => seg,
        });
    }
    let (logits_a, _) = bundle.classify(tape, staged, sfinal, Head::Agnostic, hw)?;
    let seg_a = tape.softmax_cross_entropy(logits_a, Arc::clone(&batch.source_labels), None)?;
    let seg_total = tape.add(seg_total.expect("at least one target head"), seg_a)?;
    let seg_value = tape.scalar_value(seg_total) as f64;

    // plain target forwards, keeping every block output for the tap exchange
    let mut t_feats = Vec::with_capacity(m);
    let mut t_probs = Vec::with_capacity(m);
    for i in 0..m {
        let xt = target_images[i];
        let feats = bundle.encode_from(tape, staged, xt, 0, mode)?;
        let (_, probs) =
            bundle.classify(tape, staged, *feats.last().unwrap(), Head::Domain(i), hw)?;
        t_feats.push(feats);
        t_probs.push(probs);
    }

    // distillation into the agnostic head: encoder features detached so only
    // the agnostic head's parameters receive gradient
    let mut kd_terms = Vec::with_capacity(m);
    let mut kd_values = Vec::with_capacity(m);
    for i in 0..m {
        let feat_det = tape.detach(*t_feats[i].last().unwrap());
        let (_, p_a) = bundle.classify(tape, staged, feat_det, Head::Agnostic, hw)?;
        let target = match cfg.kd_mode {
            KdMode::Soft => KdTarget::Soft(t_probs[i]),
            KdMode::Hard => KdTarget::Hard(Arc::clone(&batch.target_pl[i])),
        };
        let kd = kd_loss(tape, p_a, target)?;
        kd_values.push(tape.scalar_value(kd) as f64);
        kd_terms.push(kd);
    }

    // stylized predictions, once per ordered pair
    let mut sty_probs: Vec<Vec<Option<TensorId>>> = vec![vec![None; m]; m];
    if use_cross {
        for i in 0..m {
            for j in 0..m {
                if i == j {
                    continue;
                }
                let final_feat = stylized_final_feature(
                    bundle, tape, staged, &t_feats[i], &t_feats[j], mode,
                )?;
                let (_, probs) = bundle.classify(tape, staged, final_feat, Head::Domain(j), hw)?;
                sty_probs[i][j] = Some(probs);
            }
        }
    }

    // rectification weights from cross-classifier agreement, off-tape
    let mut weights = Vec::with_capacity(m);
    for i in 0..m {
        if use_rect {
            let p_i = tape.tensor(t_probs[i]);
            let cross: Vec<Tensor> = (0..m)
                .filter(|&j| j != i)
                .map(|j| tape.tensor(sty_probs[i][j].expect("cross predictions exist")))
                .collect();
            let cross_refs: Vec<&Tensor> = cross.iter().collect();
            weights.push(rectification_weight(&p_i, &cross_refs, cfg.gamma)?);
        } else {
            let n = batch.target_images[i].shape[0];
            weights.push(RectificationWeights::ones(n, batch.h, batch.w));
        }
    }

    // rectified in-domain pseudo-label losses
    let mut pl_terms = Vec::with_capacity(m);
    let mut pl_values = Vec::with_capacity(m);
    for i in 0..m {
        let pl = rectified_pl_loss(tape, t_probs[i], Arc::clone(&batch.target_pl[i]), &weights[i])?;
        pl_values.push(tape.scalar_value(pl) as f64);
        pl_terms.push(pl);
    }

    // pairwise losses
    let mut sty_terms: Vec<((usize, usize), TensorId)> = Vec::new();
    let mut cst_terms: Vec<((usize, usize), TensorId)> = Vec::new();
    let mut sty_values = Vec::new();
    let mut cst_values = Vec::new();
    if use_cross {
        for i in 0..m {
            for j in 0..m {
                if i == j {
                    continue;
                }
                let probs_ij = sty_probs[i][j].expect("cross predictions exist");
                let sty = rectified_cross_pl_loss(
                    tape,
                    probs_ij,
                    Arc::clone(&batch.target_pl[i]),
                    &weights[i],
                )?;
                sty_values.push(((i, j), tape.scalar_value(sty) as f64));
                sty_terms.push(((i, j), sty));
                if use_cst {
                    let cst = consistency_loss(tape, probs_ij, t_probs[i])?;
                    cst_values.push(((i, j), tape.scalar_value(cst) as f64));
                    cst_terms.push(((i, j), cst));
                }
            }
        }
    }

    // combine with the objective's coefficient structure
    let mut total = seg_total;
    let kd_coef = 1.0 / m as f64;
    for kd in kd_terms {
        let scaled = tape.mul_scalar(kd, kd_coef as crate::Real);
        total = tape.add(total, scaled)?;
    }
    for pl in pl_terms {
        total = tape.add(total, pl)?;
    }
    if m > 1 {
        let pair_coef = (cfg.lambda / (m as f64 - 1.0)) as crate::Real;
        for (_, term) in sty_terms.iter().chain(cst_terms.iter()) {
            let scaled = tape.mul_scalar(*term, pair_coef);
            total = tape.add(total, scaled)?;
        }
    }

    let breakdown = LossBreakdown {
        seg_source: seg_value,
        kd: kd_values,
        pl: pl_values,
        pl_sty: sty_values,
        cst: cst_values,
        mean_rect_weight: weights.iter().map(|w| w.mean()).collect(),
        lambda: cfg.lambda,
        total: tape.scalar_value(total) as f64,
    };
    Ok((total, breakdown))
}

/// Output of a stage-2 run.
pub struct SelfTrainOutput {
    /// `iteration,domain,loss_total,loss_seg,loss_kd,loss_pl,loss_pl_sty,loss_cst,mean_rect_weight`
    pub metrics_csv: String,
    pub bank: PseudoLabelBank,
}

/// Stage-2 training loop. Refreshes the pseudo-label bank every `n_b`
/// iterations (including iteration 0), takes one SGD step on the full
/// objective per iteration, and optionally writes periodic checkpoints.
pub fn selftrain_run(
    bundle: &mut ModelBundle,
    bench: &Benchmark,
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<SelfTrainOutput> {
    cfg.validate()?;
    if bench.targets.len() != bundle.num_targets {
        return Err(CoastError::Config(format!(
            "bundle has {} target heads, got {} target datasets",
            bundle.num_targets,
            bench.targets.len()
        )));
    }
    let mut bank = PseudoLabelBank::default();
    let mut rng_batch = stream(cfg.seed, "selftrain-batch");
    let mut rng_dropout = stream(cfg.seed, "selftrain-dropout");
    let mut rng_augment = stream(cfg.seed, "selftrain-augment");
    let mut sgd = SgdMomentum::new(
        cfg.learning_rate,
        cfg.momentum,
        cfg.poly_power,
        if cfg.poly_power > 0.0 { cfg.iterations } else { 0 },
    );
    let mut csv = String::from(
        "iteration,domain,loss_total,loss_seg,loss_kd,loss_pl,loss_pl_sty,loss_cst,mean_rect_weight\n",
    );

    for t in 0..cfg.iterations {
        if t % cfg.n_b == 0 {
            refresh_pseudo_labels(bundle, &bench.targets, &mut bank, t)?;
        }
        let batch = sample_iteration_batch(bench, &bank, cfg, &mut rng_batch, &mut rng_augment)?;
        let mut tape = Tape::new();
        let staged = bundle.stage(&mut tape);
        let mut mode = Mode::Train(&mut rng_dropout);
        let (total, breakdown) = total_objective(&mut tape, bundle, &staged, &batch, cfg, &mut mode)?;
        if !breakdown.total.is_finite() {
            return Err(CoastError::NonFinite(format!(
                "stage-2 objective at iteration {t}: {breakdown:?}"
            )));
        }
        tape.backward(total)?;
        sgd.step(bundle, &staged, &tape, Owner::is_segmentation, t);

        for (i, target) in bench.targets.iter().enumerate() {
            let _ = writeln!(
                csv,
                "{},{},{},{},{},{},{},{},{}",
                t,
                target.domain_id,
                breakdown.total,
                breakdown.seg_source,
                breakdown.kd[i],
                breakdown.pl[i],
                LossBreakdown::pair_mean(&breakdown.pl_sty, i),
                LossBreakdown::pair_mean(&breakdown.cst, i),
                breakdown.mean_rect_weight[i],
            );
        }
        if let Some(dir) = checkpoint_dir {
            if cfg.checkpoint_every > 0 && (t + 1) % cfg.checkpoint_every == 0 {
                std::fs::create_dir_all(dir)?;
                bundle.save_checkpoint(&dir.join(format!("checkpoint_{:06}.ckpt", t + 1)))?;
            }
        }
    }
    if let Some(dir) = checkpoint_dir {
        std::fs::create_dir_all(dir)?;
        bundle.save_checkpoint(&dir.join("checkpoint_final.ckpt"))?;
    }
    Ok(SelfTrainOutput { metrics_csv: csv, bank })
}

/// The ablation variants: flag assignments for
/// (self_train_only, use_crossdonorm, use_consistency, use_rectification).
pub const ABLATION_VARIANTS: [(&str, (bool, bool, bool, bool)); 5] = [
    ("i", (true, false, false, false)),
    ("ii", (false, true, false, false)),
    ("iii", (false, true, true, false)),
    ("iv", (false, true, false, true)),
    ("v", (false, true, true, true)),
];

pub fn variant_config(base: &TrainConfig, variant: &str) -> Result<TrainConfig> {
    let (_, flags) = ABLATION_VARIANTS
        .iter()
        .find(|(name, _)| *name == variant)
        .ok_or_else(|| CoastError::Config(format!("unknown ablation variant `{variant}`")))?;
    let mut cfg = base.clone();
    cfg.self_train_only = flags.0;
    cfg.use_crossdonorm = flags.1;
    cfg.use_consistency = flags.2;
    cfg.use_rectification = flags.3;
    Ok(cfg)
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub avg_miou: f64,
}

pub struct AblationOutput {
    pub rows: Vec<AblationRow>,
    /// `variant,seed,avg_miou`
    pub csv: String,
}

/// Run every ablation variant from each seed's shared warm-up checkpoint and
/// score the target evaluation sets with the agnostic head.
pub fn run_ablation_suite(
    warmups: &[(u64, ModelBundle)],
    bench: &Benchmark,
    base: &TrainConfig,
) -> Result<AblationOutput> {
    let mut rows = Vec::new();
    for (seed, warm) in warmups {
        for (variant, _) in ABLATION_VARIANTS.iter() {
            let mut cfg = variant_config(base, variant)?;
            cfg.seed = *seed;
            let mut bundle = warm.clone();
            selftrain_run(&mut bundle, bench, &cfg, None)?;
            let eval_refs: Vec<&crate::data::DomainDataset> = bench.target_eval.iter().collect();
            let report = evaluate_all(&bundle, &eval_refs, Head::Agnostic)?;
            rows.push(AblationRow {
                variant: (*variant).to_string(),
                seed: *seed,
                avg_miou: report.avg_miou,
            });
        }
    }
    let mut csv = String::from("variant,seed,avg_miou\n");
    for r in &rows {
        let _ = writeln!(csv, "{},{},{}", r.variant, r.seed, r.avg_miou);
    }
    Ok(AblationOutput { rows, csv })
}
