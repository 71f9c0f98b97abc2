//! Cross-domain feature stylization: per-sample channel statistics are
//! treated as the carrier of appearance, and exchanged between two feature
//! maps by re-normalization. Content structure survives because the transform
//! is a monotone affine map per channel.

use crate::autograd::{Tape, TensorId};
use crate::error::{CoastError, Result};

/// Per-sample, per-channel `(mean, std)` of a feature map, on-tape so that
/// gradients can flow through the style path.
#[derive(Debug, Clone)]
pub struct StyleVector {
    /// `[N, C]` channel means.
    pub mu: TensorId,
    /// `[N, C]` channel standard deviations, floored by the stats epsilon.
    pub sigma: TensorId,
    /// Domain the statistics were extracted from, when known.
    pub source_domain: Option<usize>,
}

/// Extract the style vector of a `[N,C,H,W]` feature map.
pub fn extract_style(
    tape: &mut Tape,
    z: TensorId,
    source_domain: Option<usize>,
) -> Result<StyleVector> {
    let (mu, sigma) = tape.channel_stats(z)?;
    Ok(StyleVector { mu, sigma, source_domain })
}

/// Re-normalize `z` from its own statistics to another style:
/// `other.sigma * (z - own.mu) / own.sigma + other.mu`, broadcast per channel.
/// Differentiable with respect to `z` and both style vectors.
pub fn apply_style(
    tape: &mut Tape,
    z: TensorId,
    own: &StyleVector,
    other: &StyleVector,
) -> Result<TensorId> {
    let zc = tape.shape(z)[1];
    for sv in [own, other] {
        let s = tape.shape(sv.mu);
        if s.len() != 2 || s[1] != zc {
            return Err(CoastError::ShapeMismatch(format!(
                "style vector channels {:?} vs feature channels {zc}",
                s
            )));
        }
    }
    let centered = tape.sub_nc(z, own.mu)?;
    let normed = tape.div_nc(centered, own.sigma)?;
    let scaled = tape.mul_nc(normed, other.sigma)?;
    tape.add_nc(scaled, other.mu)
}

/// Symmetric style exchange between two same-shaped feature maps. Returns
/// `(z_a restyled to b, z_b restyled to a)`. With `detach_style` the style
/// vectors are cut from the gradient flow and only the content path trains.
pub fn cross_stylize(
    tape: &mut Tape,
    z_a: TensorId,
    z_b: TensorId,
    detach_style: bool,
) -> Result<(TensorId, TensorId)> {
    if tape.shape(z_a) != tape.shape(z_b) {
        return Err(CoastError::ShapeMismatch(format!(
            "{:?} vs {:?}",
            tape.shape(z_a),
            tape.shape(z_b)
        )));
    }
    let mut style_a = extract_style(tape, z_a, None)?;
    let mut style_b = extract_style(tape, z_b, None)?;
    if detach_style {
        for sv in [&mut style_a, &mut style_b] {
            sv.mu = tape.detach(sv.mu);
            sv.sigma = tape.detach(sv.sigma);
        }
    }
    let a_to_b = apply_style(tape, z_a, &style_a, &style_b)?;
    let b_to_a = apply_style(tape, z_b, &style_b, &style_a)?;
    Ok((a_to_b, b_to_a))
}
