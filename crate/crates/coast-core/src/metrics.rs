//! Per-class IoU from confusion counts, per-domain and averaged mIoU, CSV
//! reporting, and uncertainty-map export.

use crate::autograd::{argmax_classes, Tape, Tensor};
use crate::data::DomainDataset;
use crate::error::{CoastError, Result};
use crate::model::{Head, Mode, ModelBundle};
use crate::selftrain::{rectification_weight, SWEEP_BATCH};
use std::fmt::Write as _;
use std::path::Path;

/// K x K counts indexed `[true class][predicted class]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        ConfusionMatrix { k, counts: vec![0; k * k] }
    }

    pub fn count(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Add one pixel grid pair. Both grids must hold classes `< k`.
    pub fn accumulate(&mut self, pred: &[u8], truth: &[u8]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(CoastError::ShapeMismatch(format!(
                "pred {} pixels vs truth {}",
                pred.len(),
                truth.len()
            )));
        }
        for (&p, &t) in pred.iter().zip(truth) {
            if p as usize >= self.k {
                return Err(CoastError::ClassOutOfRange { class: p as usize, k: self.k });
            }
            if t as usize >= self.k {
                return Err(CoastError::ClassOutOfRange { class: t as usize, k: self.k });
            }
            self.counts[t as usize * self.k + p as usize] += 1;
        }
        Ok(())
    }

    /// Elementwise merge; confusion matrices accumulated in any order agree.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if self.k != other.k {
            return Err(CoastError::ShapeMismatch(format!("{} vs {} classes", self.k, other.k)));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Per-class IoU (`None` when the class appears in neither truth nor
    /// prediction) and their mean over present classes.
    pub fn miou(&self) -> Result<(Vec<Option<f64>>, f64)> {
        if self.total() == 0 {
            return Err(CoastError::Empty("confusion matrix has no counts".into()));
        }
        let mut per_class = Vec::with_capacity(self.k);
        let mut sum = 0.0;
        let mut present = 0usize;
        for c in 0..self.k {
            let tp = self.count(c, c);
            let fp: u64 = (0..self.k).filter(|&t| t != c).map(|t| self.count(t, c)).sum();
            let fn_: u64 = (0..self.k).filter(|&p| p != c).map(|p| self.count(c, p)).sum();
            let denom = tp + fp + fn_;
            if denom == 0 {
                per_class.push(None);
            } else {
                let iou = tp as f64 / denom as f64;
                per_class.push(Some(iou));
                sum += iou;
                present += 1;
            }
        }
        if present == 0 {
            return Err(CoastError::Empty("no class present in truth or prediction".into()));
        }
        Ok((per_class, sum / present as f64))
    }
}

/// Evaluation result for one labeled dataset.
#[derive(Debug, Clone)]
pub struct DomainEval {
    pub domain_id: String,
    pub head: String,
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
}

/// Per-domain results plus the cross-domain average.
#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub domains: Vec<DomainEval>,
    pub avg_miou: f64,
}

impl MetricsReport {
    pub fn from_domains(domains: Vec<DomainEval>) -> Result<Self> {
        if domains.is_empty() {
            return Err(CoastError::Empty("no domains evaluated".into()));
        }
        let avg = domains.iter().map(|d| d.miou).sum::<f64>() / domains.len() as f64;
        Ok(MetricsReport { domains, avg_miou: avg })
    }

    /// CSV rows `(domain, class, iou)`, one `mIoU` summary row per domain,
    /// and a final `("ALL", "avg_mIoU", value)` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("domain,class,iou\n");
        for d in &self.domains {
            for (c, iou) in d.per_class_iou.iter().enumerate() {
                match iou {
                    Some(v) => {
                        let _ = writeln!(out, "{},{},{}", d.domain_id, c, v);
                    }
                    None => {
                        let _ = writeln!(out, "{},{},absent", d.domain_id, c);
                    }
                }
            }
            let _ = writeln!(out, "{},mIoU,{}", d.domain_id, d.miou);
        }
        let _ = writeln!(out, "ALL,avg_mIoU,{}", self.avg_miou);
        out
    }
}

fn head_label(head: Head) -> String {
    match head {
        Head::Domain(i) => format!("t{i}"),
        Head::Agnostic => "agnostic".into(),
    }
}

/// Eval-mode sweep over a labeled dataset with the selected head (the
/// domain-agnostic head by default at inference, since the domain id of a
/// test image is unknown).
pub fn evaluate(bundle: &ModelBundle, dataset: &DomainDataset, head: Head) -> Result<DomainEval> {
    let mut cm = ConfusionMatrix::new(dataset.num_classes);
    let hw = dataset.h * dataset.w;
    for chunk_start in (0..dataset.samples.len()).step_by(SWEEP_BATCH) {
        let chunk =
            &dataset.samples[chunk_start..(chunk_start + SWEEP_BATCH).min(dataset.samples.len())];
        let n = chunk.len();
        let mut values = Vec::with_capacity(n * 3 * hw);
        for s in chunk {
            values.extend_from_slice(&s.image.values);
        }
        let batch = Tensor::new(vec![n, 3, dataset.h, dataset.w], values)?;
        let mut tape = Tape::new();
        let staged = bundle.stage(&mut tape);
        let xid = tape.leaf(&batch);
        let out = bundle.forward(&mut tape, &staged, xid, head, None, &mut Mode::Eval)?;
        let classes = argmax_classes(tape.values(out.probs), tape.shape(out.probs));
        for (si, grid) in classes.chunks(hw).enumerate() {
            let truth = chunk[si].label.as_deref().ok_or_else(|| {
                CoastError::Dataset(format!(
                    "dataset {} sample {} has no labels; evaluation needs ground truth",
                    dataset.domain_id,
                    chunk_start + si
                ))
            })?;
            cm.accumulate(grid, truth)?;
        }
    }
    let (per_class_iou, miou) = cm.miou()?;
    Ok(DomainEval { domain_id: dataset.domain_id.clone(), head: head_label(head), per_class_iou, miou })
}

/// Evaluate several labeled datasets and average their mIoU.
pub fn evaluate_all(
    bundle: &ModelBundle,
    datasets: &[&DomainDataset],
    head: Head,
) -> Result<MetricsReport> {
    let mut domains = Vec::with_capacity(datasets.len());
    for ds in datasets {
        domains.push(evaluate(bundle, ds, head)?);
    }
    MetricsReport::from_domains(domains)
}

/// Binary PGM (P5) writer.
pub fn write_pgm(path: &Path, w: usize, h: usize, bytes: &[u8]) -> Result<()> {
    if bytes.len() != w * h {
        return Err(CoastError::ShapeMismatch(format!(
            "{} bytes for {w}x{h} image",
            bytes.len()
        )));
    }
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(bytes);
    std::fs::write(path, out)?;
    Ok(())
}

/// Render the per-pixel uncertainty `1 - w` of one image as a grayscale PGM,
/// where `w` is the rectification weight computed against the given style
/// sources `(domain index, image)` from other domains.
pub fn export_uncertainty_map(
    bundle: &ModelBundle,
    image: &Tensor,
    domain: usize,
    style_sources: &[(usize, &Tensor)],
    gamma: f64,
    path: &Path,
) -> Result<()> {
    if style_sources.is_empty() {
        return Err(CoastError::Empty(
            "uncertainty needs at least one other target domain".into(),
        ));
    }
    let (h, w) = (image.shape[1], image.shape[2]);
    let batch = Tensor::new(vec![1, 3, h, w], image.values.clone())?;
    let mut tape = Tape::new();
    let staged = bundle.stage(&mut tape);
    let xid = tape.leaf(&batch);
    let own = bundle.forward(&mut tape, &staged, xid, Head::Domain(domain), None, &mut Mode::Eval)?;
    let p_own = tape.tensor(own.probs);
    let mut cross = Vec::new();
    for (j, style_img) in style_sources {
        let sb = Tensor::new(vec![1, 3, h, w], style_img.values.clone())?;
        let sid = tape.leaf(&sb);
        let out =
            bundle.forward(&mut tape, &staged, xid, Head::Domain(*j), Some(sid), &mut Mode::Eval)?;
        cross.push(tape.tensor(out.probs));
    }
    let cross_refs: Vec<&Tensor> = cross.iter().collect();
    let weights = rectification_weight(&p_own, &cross_refs, gamma)?;
    let bytes: Vec<u8> = weights
        .w
        .values
        .iter()
        .map(|&wv| (255.0 * (1.0 - wv as f64)).round().clamp(0.0, 255.0) as u8)
        .collect();
    write_pgm(path, w, h, &bytes)
}
