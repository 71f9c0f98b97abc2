//! Training-time augmentation. Geometric transforms (flip, crop) apply
//! identically to the image and its label grid; photometric jitter touches
//! the image only.

use crate::{Real, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub hflip: bool,
    /// Crop size; 0 disables cropping.
    pub crop_h: usize,
    pub crop_w: usize,
    pub jitter: bool,
    pub jitter_gain: f64,
    pub jitter_bias: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            hflip: true,
            crop_h: 24,
            crop_w: 24,
            jitter: true,
            jitter_gain: 0.15,
            jitter_bias: 0.05,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        AugmentConfig {
            hflip: false,
            crop_h: 0,
            crop_w: 0,
            jitter: false,
            jitter_gain: 0.0,
            jitter_bias: 0.0,
        }
    }

    /// Spatial size of augmented samples given the dataset size.
    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        if self.crop_h > 0 && self.crop_w > 0 && self.crop_h <= h && self.crop_w <= w {
            (self.crop_h, self.crop_w)
        } else {
            (h, w)
        }
    }
}

/// Apply flip, crop, then jitter. The label grid, when present, goes through
/// the same geometric transforms.
pub fn augment_sample(
    image: &Tensor,
    label: Option<&[u8]>,
    cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> (Tensor, Option<Vec<u8>>) {
    let (h, w) = (image.shape[1], image.shape[2]);
    let hw = h * w;
    let mut img = image.values.clone();
    let mut lbl = label.map(|l| l.to_vec());

    if cfg.hflip && rng.gen_bool(0.5) {
        for c in 0..3 {
            for y in 0..h {
                img[c * hw + y * w..c * hw + (y + 1) * w].reverse();
            }
        }
        if let Some(l) = &mut lbl {
            for y in 0..h {
                l[y * w..(y + 1) * w].reverse();
            }
        }
    }

    let (ch, cw) = cfg.out_size(h, w);
    let (mut out_img, out_lbl, oh, ow) = if (ch, cw) != (h, w) {
        let oy = rng.gen_range(0..=h - ch);
        let ox = rng.gen_range(0..=w - cw);
        let mut cropped = vec![0.0 as Real; 3 * ch * cw];
        for c in 0..3 {
            for y in 0..ch {
                for x in 0..cw {
                    cropped[(c * ch + y) * cw + x] = img[c * hw + (oy + y) * w + (ox + x)];
                }
            }
        }
        let cropped_lbl = lbl.map(|l| {
            let mut out = vec![0u8; ch * cw];
            for y in 0..ch {
                for x in 0..cw {
                    out[y * cw + x] = l[(oy + y) * w + (ox + x)];
                }
            }
            out
        });
        (cropped, cropped_lbl, ch, cw)
    } else {
        (img, lbl, h, w)
    };

    if cfg.jitter {
        for c in 0..3 {
            let gain = 1.0 + rng.gen_range(-cfg.jitter_gain..=cfg.jitter_gain);
            let bias = rng.gen_range(-cfg.jitter_bias..=cfg.jitter_bias);
            for p in 0..oh * ow {
                let v = out_img[c * oh * ow + p] as f64 * gain + bias;
                out_img[c * oh * ow + p] = v.clamp(0.0, 1.0) as Real;
            }
        }
    }
    (
        Tensor::new(vec![3, oh, ow], out_img).expect("augment preserves element count"),
        out_lbl,
    )
}
