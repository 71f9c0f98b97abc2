//! Stage-2 building blocks: the pseudo-label bank, cooperative rectification
//! weights computed from cross-classifier disagreement, the rectified
//! pseudo-label losses, the stylized-view consistency loss, and distillation
//! into the domain-agnostic head.

use crate::autograd::{argmax_classes, kl_per_pixel, Tape, Tensor, TensorId};
use crate::data::DomainDataset;
use crate::error::{CoastError, Result};
use crate::model::{Head, Mode, ModelBundle};
use crate::Real;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;
use std::sync::Arc;

/// Batch size used for bank refreshes and other full-dataset sweeps.
pub const SWEEP_BATCH: usize = 16;

/// One-hot encode a label grid. Every class id must be `< k`.
pub fn one_hot_labels(labels: &[u8], n: usize, k: usize, h: usize, w: usize) -> Result<Tensor> {
    if labels.len() != n * h * w {
        return Err(CoastError::ShapeMismatch(format!(
            "{} labels for {}x{}x{} grid",
            labels.len(),
            n,
            h,
            w
        )));
    }
    let hw = h * w;
    let mut values = vec![0.0 as Real; n * k * hw];
    for (i, &c) in labels.iter().enumerate() {
        if c as usize >= k {
            return Err(CoastError::ClassOutOfRange { class: c as usize, k });
        }
        let (ni, p) = (i / hw, i % hw);
        values[(ni * k + c as usize) * hw + p] = 1.0;
    }
    Tensor::new(vec![n, k, h, w], values)
}

/// Hard labels for every sample of one target domain.
#[derive(Debug, Clone, PartialEq)]
pub struct BankDomain {
    pub domain_id: String,
    pub h: usize,
    pub w: usize,
    /// One grid per dataset sample, indexed like the dataset.
    pub labels: Vec<Vec<u8>>,
    pub last_refresh_iteration: Option<usize>,
}

/// Per-target store of hard pseudo-labels with refresh bookkeeping.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PseudoLabelBank {
    pub domains: Vec<BankDomain>,
}

impl PseudoLabelBank {
    pub fn get(&self, domain: usize, sample: usize) -> Option<&[u8]> {
        self.domains.get(domain).and_then(|d| d.labels.get(sample)).map(|v| v.as_slice())
    }

    /// Export as 8-bit label files plus a JSON manifest.
    pub fn export(&self, dir: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct BankManifest<'a> {
            format_version: u32,
            domains: Vec<BankManifestDomain<'a>>,
        }
        #[derive(Serialize)]
        struct BankManifestDomain<'a> {
            domain_id: &'a str,
            h: usize,
            w: usize,
            last_refresh_iteration: Option<usize>,
            labels: Vec<String>,
        }
        fs::create_dir_all(dir)?;
        let mut domains = Vec::new();
        for d in &self.domains {
            let mut names = Vec::new();
            for (i, grid) in d.labels.iter().enumerate() {
                let name = format!("pl_{}_{:05}.bin", d.domain_id, i);
                fs::write(dir.join(&name), grid)?;
                names.push(name);
            }
            domains.push(BankManifestDomain {
                domain_id: &d.domain_id,
                h: d.h,
                w: d.w,
                last_refresh_iteration: d.last_refresh_iteration,
                labels: names,
            });
        }
        let manifest = BankManifest { format_version: 1, domains };
        fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
        Ok(())
    }
}

/// Recompute the bank from the current model: per target sample, the argmax of
/// that domain's classifier in eval mode (dropout off), ties broken toward the
/// lowest class index.
pub fn refresh_pseudo_labels(
    bundle: &ModelBundle,
    targets: &[DomainDataset],
    bank: &mut PseudoLabelBank,
    iteration: usize,
) -> Result<()> {
    if bank.domains.len() != targets.len() {
        bank.domains = targets
            .iter()
            .map(|t| BankDomain {
                domain_id: t.domain_id.clone(),
                h: t.h,
                w: t.w,
                labels: vec![Vec::new(); t.samples.len()],
                last_refresh_iteration: None,
            })
            .collect();
    }
    for (di, ds) in targets.iter().enumerate() {
        let hw = ds.h * ds.w;
        for chunk_start in (0..ds.samples.len()).step_by(SWEEP_BATCH) {
            let chunk = &ds.samples[chunk_start..(chunk_start + SWEEP_BATCH).min(ds.samples.len())];
            let n = chunk.len();
            let mut values = Vec::with_capacity(n * 3 * hw);
            for s in chunk {
                values.extend_from_slice(&s.image.values);
            }
            let batch = Tensor::new(vec![n, 3, ds.h, ds.w], values)?;
            let mut tape = Tape::new();
            let staged = bundle.stage(&mut tape);
            let xid = tape.leaf(&batch);
            let out = bundle.forward(&mut tape, &staged, xid, Head::Domain(di), None, &mut Mode::Eval)?;
            let classes = argmax_classes(tape.values(out.probs), tape.shape(out.probs));
            for (si, grid) in classes.chunks(hw).enumerate() {
                bank.domains[di].labels[chunk_start + si] = grid.to_vec();
            }
        }
        bank.domains[di].last_refresh_iteration = Some(iteration);
    }
    Ok(())
}

/// Per-pixel confidence in `(0, 1]` derived from cross-classifier agreement.
#[derive(Debug, Clone)]
pub struct RectificationWeights {
    /// `[N, H, W]`, every entry in `(0, 1]`.
    pub w: Tensor,
    pub gamma: f64,
}

impl RectificationWeights {
    /// Unit weights: rectification disabled.
    pub fn ones(n: usize, h: usize, w: usize) -> Self {
        RectificationWeights {
            w: Tensor::new(vec![n, h, w], vec![1.0; n * h * w]).expect("shape/product"),
            gamma: 0.0,
        }
    }

    pub fn mean(&self) -> f64 {
        self.w.values.iter().map(|&v| v as f64).sum::<f64>() / self.w.values.len() as f64
    }
}

/// Average over the cross predictions of `exp(-gamma * KL(p_i || p_{i->j}))`,
/// computed per pixel and excluded from the gradient flow.
pub fn rectification_weight(
    p_i: &Tensor,
    cross_preds: &[&Tensor],
    gamma: f64,
) -> Result<RectificationWeights> {
    if cross_preds.is_empty() {
        return Err(CoastError::Empty("rectification needs at least one cross prediction".into()));
    }
    let (n, h, w) = (p_i.shape[0], p_i.shape[2], p_i.shape[3]);
    let mut acc = vec![0.0 as Real; n * h * w];
    for cp in cross_preds {
        let kl = kl_per_pixel(p_i, cp)?;
        for (a, &k) in acc.iter_mut().zip(&kl.values) {
            // distributions make the per-pixel KL nonnegative; clamp rounding
            // noise so the weights stay within (0, 1]
            *a += (-(gamma as Real) * k.max(0.0)).exp();
        }
    }
    let m = cross_preds.len() as Real;
    for a in &mut acc {
        *a /= m;
    }
    Ok(RectificationWeights { w: Tensor::new(vec![n, h, w], acc)?, gamma })
}

/// Pixel-weighted cross entropy of a prediction against its own bank entry.
/// The weights are a stop-gradient input.
pub fn rectified_pl_loss(
    tape: &mut Tape,
    probs: TensorId,
    pseudo_labels: Arc<Tensor>,
    weights: &RectificationWeights,
) -> Result<TensorId> {
    tape.cross_entropy_probs(probs, pseudo_labels, Some(Arc::new(weights.w.clone())))
}

/// The cross-domain variant: the stylized prediction supervised by the
/// content domain's bank entry, weighted by the content domain's confidence.
pub fn rectified_cross_pl_loss(
    tape: &mut Tape,
    stylized_probs: TensorId,
    pseudo_labels: Arc<Tensor>,
    weights: &RectificationWeights,
) -> Result<TensorId> {
    rectified_pl_loss(tape, stylized_probs, pseudo_labels, weights)
}

/// Soft consistency between the stylized view and the original view. The
/// original-view prediction is the teacher and is detached.
pub fn consistency_loss(
    tape: &mut Tape,
    stylized_probs: TensorId,
    original_probs: TensorId,
) -> Result<TensorId> {
    let teacher = tape.detach(original_probs);
    tape.kl_divergence(stylized_probs, teacher)
}

/// Distillation target for the domain-agnostic head.
pub enum KdTarget {
    /// The domain-specific soft prediction (detached internally).
    Soft(TensorId),
    /// The hard bank entry, one-hot.
    Hard(Arc<Tensor>),
}

/// How the distillation teacher is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KdMode {
    #[default]
    Soft,
    Hard,
}

/// Distillation loss for the agnostic head: KL against the detached
/// domain-specific prediction (soft) or cross entropy against the bank entry
/// (hard). Callers must feed `p_agnostic` computed from detached encoder
/// features so only the agnostic head's parameters receive gradient.
pub fn kd_loss(tape: &mut Tape, p_agnostic: TensorId, target: KdTarget) -> Result<TensorId> {
    match target {
        KdTarget::Soft(teacher) => {
            let teacher = tape.detach(teacher);
            tape.kl_divergence(p_agnostic, teacher)
        }
        KdTarget::Hard(pl) => tape.cross_entropy_probs(p_agnostic, pl, None),
    }
}
