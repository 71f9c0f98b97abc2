//! The model zoo: a shared convolutional encoder with stylization tap points,
//! one classifier head per target domain, a domain-agnostic head used at
//! inference, and one patch discriminator per target domain. Parameters are
//! partitioned by owner so training steps can prove they touched nothing else.

use crate::autograd::{Tape, Tensor, TensorId};
use crate::error::{CoastError, Result};
use crate::rng::{normal, stream};
use crate::style::{apply_style, extract_style};
use crate::Real;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Read;
use std::path::Path;

const CHECKPOINT_MAGIC: &[u8; 5] = b"COAST";
const CHECKPOINT_VERSION: u32 = 1;
/// Hidden widths of the patch discriminators.
const DISC_WIDTHS: [usize; 2] = [16, 32];
const DISC_LEAKY_SLOPE: Real = 0.2;

/// Encoder architecture. Blocks are 3x3 conv + ReLU, optionally followed by a
/// nearest-neighbor halving and dropout.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub widths: Vec<usize>,
    pub dropout_rate: Real,
    pub dropout_after: Vec<bool>,
    pub downsample_after: Vec<bool>,
    /// Block indices after which feature stylization may be applied.
    pub style_taps: Vec<usize>,
    /// Cut style vectors from the gradient flow (ablation switch).
    pub detach_style: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            widths: vec![16, 32, 32],
            dropout_rate: 0.1,
            dropout_after: vec![false, true, false],
            downsample_after: vec![true, true, false],
            style_taps: vec![0],
            detach_style: false,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let blocks = self.widths.len();
        if blocks == 0 {
            return Err(CoastError::Config("encoder needs at least one block".into()));
        }
        if self.dropout_after.len() != blocks || self.downsample_after.len() != blocks {
            return Err(CoastError::Config(
                "dropout_after/downsample_after must match the number of blocks".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(CoastError::Config(format!(
                "dropout rate {} outside [0,1)",
                self.dropout_rate
            )));
        }
        if let Some(&bad) = self.style_taps.iter().find(|&&t| t >= blocks) {
            return Err(CoastError::Config(format!(
                "style tap {bad} out of range for {blocks} blocks"
            )));
        }
        Ok(())
    }

    /// Total spatial reduction applied by the encoder.
    pub fn total_downsample(&self) -> usize {
        self.downsample_after.iter().map(|&d| if d { 2 } else { 1 }).product()
    }
}

/// Classifier selector: a domain-specific head or the domain-agnostic one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Domain(usize),
    Agnostic,
}

/// Parameter owner, the unit of update isolation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Owner {
    Encoder,
    Head(usize),
    Agnostic,
    Disc(usize),
}

impl Owner {
    pub fn label(&self) -> String {
        match self {
            Owner::Encoder => "encoder".into(),
            Owner::Head(i) => format!("head_t{i}"),
            Owner::Agnostic => "head_agnostic".into(),
            Owner::Disc(i) => format!("disc_t{i}"),
        }
    }

    fn parse(s: &str) -> Option<Owner> {
        match s {
            "encoder" => Some(Owner::Encoder),
            "head_agnostic" => Some(Owner::Agnostic),
            _ => {
                if let Some(i) = s.strip_prefix("head_t") {
                    i.parse().ok().map(Owner::Head)
                } else if let Some(i) = s.strip_prefix("disc_t") {
                    i.parse().ok().map(Owner::Disc)
                } else {
                    None
                }
            }
        }
    }

    pub fn is_segmentation(self) -> bool {
        !matches!(self, Owner::Disc(_))
    }
}

#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub pad: usize,
}

impl ConvLayer {
    fn new(c_in: usize, c_out: usize, k: usize, stride: usize, pad: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = (c_in * k * k) as f64;
        let std = (2.0 / fan_in).sqrt();
        let weight = Tensor {
            shape: vec![c_out, c_in, k, k],
            values: (0..c_out * c_in * k * k).map(|_| (normal(rng) * std) as Real).collect(),
            requires_grad: true,
            grad: None,
        };
        let bias = Tensor {
            shape: vec![c_out],
            values: vec![0.0; c_out],
            requires_grad: true,
            grad: None,
        };
        ConvLayer { weight, bias, stride, pad }
    }
}

/// Dropout behavior of a forward pass. Training mode draws masks from the
/// supplied stream; eval mode is deterministic.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

/// Encoder, classifier heads, and discriminators with a partitioned
/// parameter registry.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub cfg: EncoderConfig,
    pub num_classes: usize,
    pub num_targets: usize,
    enc_blocks: Vec<ConvLayer>,
    heads: Vec<ConvLayer>,
    agnostic: ConvLayer,
    discs: Vec<Vec<ConvLayer>>,
}

/// Tape handles for every parameter of a bundle, staged once per iteration.
pub struct Staged {
    enc: Vec<(TensorId, TensorId)>,
    heads: Vec<(TensorId, TensorId)>,
    agnostic: (TensorId, TensorId),
    discs: Vec<Vec<(TensorId, TensorId)>>,
    /// Canonical (owner, name, id) listing, aligned with `visit_params`.
    pub flat: Vec<(Owner, String, TensorId)>,
}

/// Everything a caller needs from one classification pass.
pub struct ForwardOutput {
    /// Output of every encoder block, in order.
    pub block_feats: Vec<TensorId>,
    /// Head logits upsampled to input resolution.
    pub logits: TensorId,
    /// Per-pixel softmax of `logits`.
    pub probs: TensorId,
}

impl ModelBundle {
    pub fn new(cfg: EncoderConfig, num_classes: usize, num_targets: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if num_classes < 2 {
            return Err(CoastError::Config(format!("need at least 2 classes, got {num_classes}")));
        }
        if num_targets < 1 {
            return Err(CoastError::Config("need at least one target domain".into()));
        }
        let mut rng = stream(seed, "init");
        let mut enc_blocks = Vec::new();
        let mut c_in = 3;
        for &width in &cfg.widths {
            enc_blocks.push(ConvLayer::new(c_in, width, 3, 1, 1, &mut rng));
            c_in = width;
        }
        let feat = *cfg.widths.last().unwrap();
        let heads: Vec<ConvLayer> =
            (0..num_targets).map(|_| ConvLayer::new(feat, num_classes, 1, 1, 0, &mut rng)).collect();
        let agnostic = ConvLayer::new(feat, num_classes, 1, 1, 0, &mut rng);
        let discs = (0..num_targets)
            .map(|_| {
                let mut layers = Vec::new();
                let mut ci = num_classes;
                for &width in &DISC_WIDTHS {
                    layers.push(ConvLayer::new(ci, width, 3, 2, 1, &mut rng));
                    ci = width;
                }
                layers.push(ConvLayer::new(ci, 1, 3, 2, 1, &mut rng));
                layers
            })
            .collect();
        Ok(ModelBundle { cfg, num_classes, num_targets, enc_blocks, heads, agnostic, discs })
    }

    // ---- parameter registry -------------------------------------------------

    pub fn visit_params(&self, f: &mut impl FnMut(Owner, String, &Tensor)) {
        for (i, l) in self.enc_blocks.iter().enumerate() {
            f(Owner::Encoder, format!("block{i}.weight"), &l.weight);
            f(Owner::Encoder, format!("block{i}.bias"), &l.bias);
        }
        for (i, l) in self.heads.iter().enumerate() {
            f(Owner::Head(i), "weight".into(), &l.weight);
            f(Owner::Head(i), "bias".into(), &l.bias);
        }
        f(Owner::Agnostic, "weight".into(), &self.agnostic.weight);
        f(Owner::Agnostic, "bias".into(), &self.agnostic.bias);
        for (i, layers) in self.discs.iter().enumerate() {
            for (j, l) in layers.iter().enumerate() {
                f(Owner::Disc(i), format!("conv{j}.weight"), &l.weight);
                f(Owner::Disc(i), format!("conv{j}.bias"), &l.bias);
            }
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut impl FnMut(Owner, String, &mut Tensor)) {
        for (i, l) in self.enc_blocks.iter_mut().enumerate() {
            f(Owner::Encoder, format!("block{i}.weight"), &mut l.weight);
            f(Owner::Encoder, format!("block{i}.bias"), &mut l.bias);
        }
        for (i, l) in self.heads.iter_mut().enumerate() {
            f(Owner::Head(i), "weight".into(), &mut l.weight);
            f(Owner::Head(i), "bias".into(), &mut l.bias);
        }
        f(Owner::Agnostic, "weight".into(), &mut self.agnostic.weight);
        f(Owner::Agnostic, "bias".into(), &mut self.agnostic.bias);
        for (i, layers) in self.discs.iter_mut().enumerate() {
            for (j, l) in layers.iter_mut().enumerate() {
                f(Owner::Disc(i), format!("conv{j}.weight"), &mut l.weight);
                f(Owner::Disc(i), format!("conv{j}.bias"), &mut l.bias);
            }
        }
    }

    /// FNV-1a over the bit patterns of every parameter matching the filter.
    pub fn hash_params(&self, filter: impl Fn(Owner) -> bool) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        self.visit_params(&mut |owner, _, t| {
            if filter(owner) {
                for v in &t.values {
                    for b in (*v as f64).to_le_bytes() {
                        h ^= b as u64;
                        h = h.wrapping_mul(0x100000001b3);
                    }
                }
            }
        });
        h
    }

    /// Insert every parameter into the tape as a differentiable leaf.
    pub fn stage(&self, tape: &mut Tape) -> Staged {
        self.stage_with(tape, |_, _| None)
    }

    /// Stage parameters, substituting an existing tape node for any parameter
    /// the override maps to one. Used by the finite-difference batteries to
    /// probe the objective with respect to a single parameter tensor.
    pub fn stage_with(
        &self,
        tape: &mut Tape,
        mut replace: impl FnMut(Owner, &str) -> Option<TensorId>,
    ) -> Staged {
        let mut flat = Vec::new();
        let insert = |tape: &mut Tape,
                          flat: &mut Vec<(Owner, String, TensorId)>,
                          owner: Owner,
                          name: String,
                          t: &Tensor,
                          replace: &mut dyn FnMut(Owner, &str) -> Option<TensorId>|
         -> TensorId {
            let id = match replace(owner, &name) {
                Some(existing) => existing,
                None => tape.leaf(t),
            };
            flat.push((owner, name, id));
            id
        };
        let enc: Vec<(TensorId, TensorId)> = self
            .enc_blocks
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let w = insert(tape, &mut flat, Owner::Encoder, format!("block{i}.weight"), &l.weight, &mut replace);
                let b = insert(tape, &mut flat, Owner::Encoder, format!("block{i}.bias"), &l.bias, &mut replace);
                (w, b)
            })
            .collect();
        let heads: Vec<(TensorId, TensorId)> = self
            .heads
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let w = insert(tape, &mut flat, Owner::Head(i), "weight".into(), &l.weight, &mut replace);
                let b = insert(tape, &mut flat, Owner::Head(i), "bias".into(), &l.bias, &mut replace);
                (w, b)
            })
            .collect();
        let agnostic = {
            let w = insert(tape, &mut flat, Owner::Agnostic, "weight".into(), &self.agnostic.weight, &mut replace);
            let b = insert(tape, &mut flat, Owner::Agnostic, "bias".into(), &self.agnostic.bias, &mut replace);
            (w, b)
        };
        let discs: Vec<Vec<(TensorId, TensorId)>> = self
            .discs
            .iter()
            .enumerate()
            .map(|(i, layers)| {
                layers
                    .iter()
                    .enumerate()
                    .map(|(j, l)| {
                        let w = insert(tape, &mut flat, Owner::Disc(i), format!("conv{j}.weight"), &l.weight, &mut replace);
                        let b = insert(tape, &mut flat, Owner::Disc(i), format!("conv{j}.bias"), &l.bias, &mut replace);
                        (w, b)
                    })
                    .collect()
            })
            .collect();
        Staged { enc, heads, agnostic, discs, flat }
    }

    // ---- forward ------------------------------------------------------------

    fn run_block(
        &self,
        tape: &mut Tape,
        staged: &Staged,
        x: TensorId,
        block: usize,
        mode: &mut Mode,
    ) -> Result<TensorId> {
        let (w, b) = staged.enc[block];
        let conv = tape.conv2d(x, w, b, 1, 1)?;
        let mut out = tape.relu(conv);
        if self.cfg.downsample_after[block] {
            out = tape.downsample_nearest(out, 2)?;
        }
        if self.cfg.dropout_after[block] && self.cfg.dropout_rate > 0.0 {
            if let Mode::Train(rng) = mode {
                out = tape.dropout(out, self.cfg.dropout_rate, true, rng)?;
            }
        }
        Ok(out)
    }

    /// Run encoder blocks `from..to` on `x`, returning the output of each
    /// block in order. `to` is exclusive and clamped to the block count.
    pub fn encode_range(
        &self,
        tape: &mut Tape,
        staged: &Staged,
        x: TensorId,
        from: usize,
        to: usize,
        mode: &mut Mode,
    ) -> Result<Vec<TensorId>> {
        let to = to.min(self.enc_blocks.len());
        let mut feats = Vec::with_capacity(to.saturating_sub(from));
        let mut cur = x;
        for block in from..to {
            cur = self.run_block(tape, staged, cur, block, mode)?;
            feats.push(cur);
        }
        Ok(feats)
    }

    /// Run encoder blocks `from..` on `x`, returning the output of each block.
    pub fn encode_from(
        &self,
        tape: &mut Tape,
        staged: &Staged,
        x: TensorId,
        from: usize,
        mode: &mut Mode,
    ) -> Result<Vec<TensorId>> {
        self.encode_range(tape, staged, x, from, self.enc_blocks.len(), mode)
    }

    pub fn num_blocks(&self) -> usize {
        self.enc_blocks.len()
    }

    /// Classifier logits at input resolution plus the softmax map.
    pub fn classify(
        &self,
        tape: &mut Tape,
        staged: &Staged,
        feat: TensorId,
        head: Head,
        input_hw: (usize, usize),
    ) -> Result<(TensorId, TensorId)> {
        let (w, b) = match head {
            Head::Domain(i) => {
                *staged.heads.get(i).ok_or_else(|| CoastError::UnknownHead(format!("t{i}")))?
            }
            Head::Agnostic => staged.agnostic,
        };
        let logits_low = tape.conv2d(feat, w, b, 1, 0)?;
        let factor = self.cfg.total_downsample();
        let logits =
            if factor > 1 { tape.upsample_nearest(logits_low, factor)? } else { logits_low };
        let ls = tape.shape(logits);
        if (ls[2], ls[3]) != input_hw {
            return Err(CoastError::InvalidShape(format!(
                "logits {}x{} do not match input {}x{}; input size must be divisible by {}",
                ls[2], ls[3], input_hw.0, input_hw.1, factor
            )));
        }
        let probs = tape.softmax(logits)?;
        Ok((logits, probs))
    }

    /// Full classification pass. When `style_source` is given, the features at
    /// every configured tap are re-normalized to the style source's channel
    /// statistics before the remaining blocks run.
    pub fn forward(
        &self,
        tape: &mut Tape,
        staged: &Staged,
        x: TensorId,
        head: Head,
        style_source: Option<TensorId>,
        mode: &mut Mode,
    ) -> Result<ForwardOutput> {
        let xs = tape.shape(x);
        if xs.len() != 4 || xs[1] != 3 {
            return Err(CoastError::InvalidShape(format!("expected [N,3,H,W] image, got {xs:?}")));
        }
        if let Some(s) = style_source {
            if tape.shape(s) != tape.shape(x) {
                return Err(CoastError::ShapeMismatch(format!(
                    "style source {:?} vs input {:?}",
                    tape.shape(s),
                    tape.shape(x)
                )));
            }
        }
        let input_hw = (xs[2], xs[3]);
        let mut feats = Vec::with_capacity(self.enc_blocks.len());
        let mut cur = x;
        let mut style_cur = style_source;
        for block in 0..self.enc_blocks.len() {
            cur = self.run_block(tape, staged, cur, block, mode)?;
            if let Some(s) = style_cur {
                let s_out = self.run_block(tape, staged, s, block, mode)?;
                style_cur = Some(s_out);
                if self.cfg.style_taps.contains(&block) {
                    let mut own = extract_style(tape, cur, None)?;
                    let mut other = extract_style(tape, s_out, None)?;
                    if self.cfg.detach_style {
                        own.mu = tape.detach(own.mu);
                        own.sigma = tape.detach(own.sigma);
                        other.mu = tape.detach(other.mu);
                        other.sigma = tape.detach(other.sigma);
                    }
                    cur = apply_style(tape, cur, &own, &other)?;
                }
            }
            feats.push(cur);
        }
        let (logits, probs) = self.classify(tape, staged, cur, head, input_hw)?;
        Ok(ForwardOutput { block_feats: feats, logits, probs })
    }

    /// Patch discriminator for one target domain on a probability map.
    pub fn discriminate(
        &self,
        tape: &mut Tape,
        staged: &Staged,
        probs: TensorId,
        domain_index: usize,
    ) -> Result<TensorId> {
        let layers =
            staged.discs.get(domain_index).ok_or(CoastError::InvalidDomain(domain_index))?;
        let mut cur = probs;
        for (j, &(w, b)) in layers.iter().enumerate() {
            cur = tape.conv2d(cur, w, b, 2, 1)?;
            if j + 1 < layers.len() {
                cur = tape.leaky_relu(cur, DISC_LEAKY_SLOPE);
            }
        }
        Ok(cur)
    }

    pub fn num_disc_layers(&self) -> usize {
        DISC_WIDTHS.len() + 1
    }

    // ---- checkpoint -----------------------------------------------------------

    /// Write every parameter as a length-prefixed list of
    /// `(owner, name, shape, little-endian f64 buffer)` records.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut entries: Vec<(String, String, Vec<usize>, Vec<f64>)> = Vec::new();
        self.visit_params(&mut |owner, name, t| {
            entries.push((
                owner.label(),
                name,
                t.shape.clone(),
                t.values.iter().map(|&v| v as f64).collect(),
            ));
        });
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(entries.len() as u64).to_le_bytes());
        for (owner, name, shape, values) in entries {
            out.extend_from_slice(&(owner.len() as u32).to_le_bytes());
            out.extend_from_slice(owner.as_bytes());
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for d in &shape {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            out.extend_from_slice(&(values.len() as u64).to_le_bytes());
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    /// Load a checkpoint written by [`ModelBundle::save_checkpoint`]. The
    /// architecture config is supplied by the caller; head and target counts
    /// are recovered from the parameter list. Unknown versions are rejected.
    pub fn load_checkpoint(path: &Path, cfg: EncoderConfig) -> Result<ModelBundle> {
        let data = std::fs::read(path)?;
        let mut r = std::io::Cursor::new(&data);
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(CoastError::Checkpoint("bad magic bytes".into()));
        }
        let mut u32buf = [0u8; 4];
        let mut u64buf = [0u8; 8];
        r.read_exact(&mut u32buf)?;
        let version = u32::from_le_bytes(u32buf);
        if version != CHECKPOINT_VERSION {
            return Err(CoastError::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        r.read_exact(&mut u64buf)?;
        let count = u64::from_le_bytes(u64buf) as usize;
        let mut entries: Vec<(Owner, String, Tensor)> = Vec::with_capacity(count);
        for _ in 0..count {
            let read_str = |r: &mut std::io::Cursor<&Vec<u8>>| -> Result<String> {
                let mut b4 = [0u8; 4];
                r.read_exact(&mut b4)?;
                let len = u32::from_le_bytes(b4) as usize;
                let mut buf = vec![0u8; len];
                r.read_exact(&mut buf)?;
                String::from_utf8(buf)
                    .map_err(|_| CoastError::Checkpoint("non-utf8 name".into()))
            };
            let owner_s = read_str(&mut r)?;
            let name = read_str(&mut r)?;
            let owner = Owner::parse(&owner_s)
                .ok_or_else(|| CoastError::Checkpoint(format!("unknown owner `{owner_s}`")))?;
            r.read_exact(&mut u32buf)?;
            let ndim = u32::from_le_bytes(u32buf) as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                r.read_exact(&mut u64buf)?;
                shape.push(u64::from_le_bytes(u64buf) as usize);
            }
            r.read_exact(&mut u64buf)?;
            let numel = u64::from_le_bytes(u64buf) as usize;
            if numel != shape.iter().product::<usize>() {
                return Err(CoastError::Checkpoint(format!(
                    "{owner_s}/{name}: buffer length {numel} does not match shape {shape:?}"
                )));
            }
            let mut values = Vec::with_capacity(numel);
            for _ in 0..numel {
                r.read_exact(&mut u64buf)?;
                values.push(f64::from_le_bytes(u64buf) as Real);
            }
            entries.push((owner, name, Tensor::new(shape, values)?.with_grad()));
        }

        let num_targets = entries
            .iter()
            .filter_map(|(o, _, _)| match o {
                Owner::Head(i) => Some(i + 1),
                _ => None,
            })
            .max()
            .ok_or_else(|| CoastError::Checkpoint("no domain heads in checkpoint".into()))?;
        let num_classes = entries
            .iter()
            .find_map(|(o, n, t)| {
                (matches!(o, Owner::Agnostic) && n == "weight").then(|| t.shape[0])
            })
            .ok_or_else(|| CoastError::Checkpoint("missing agnostic head".into()))?;

        let mut bundle = ModelBundle::new(cfg, num_classes, num_targets, 0)?;
        let mut missing = Vec::new();
        bundle.visit_params_mut(&mut |owner, name, t| {
            match entries.iter().find(|(o, n, _)| *o == owner && *n == name) {
                Some((_, _, loaded)) => {
                    *t = loaded.clone();
                }
                None => missing.push(format!("{}/{}", owner.label(), name)),
            }
        });
        if !missing.is_empty() {
            return Err(CoastError::Checkpoint(format!("missing parameters: {missing:?}")));
        }
        // validate against the supplied architecture
        let mut shape_err = None;
        bundle.visit_params(&mut |owner, name, t| {
            if shape_err.is_none() {
                if let Some((_, _, loaded)) =
                    entries.iter().find(|(o, n, _)| *o == owner && *n == name)
                {
                    if loaded.shape != t.shape {
                        shape_err = Some(format!("{}/{}", owner.label(), name));
                    }
                }
            }
        });
        if let Some(e) = shape_err {
            return Err(CoastError::Checkpoint(format!("shape mismatch at {e}")));
        }
        Ok(bundle)
    }
}
