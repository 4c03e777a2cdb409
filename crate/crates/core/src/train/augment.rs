//! Random rescale, horizontal flip and crop.

use rand::Rng;

use super::config::TrainConfig;
use super::data::SegSample;
use crate::error::Result;
use crate::ops;
use crate::tensor::Tensor;

/// Every random decision for one sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentPlan {
    pub scale: f64,
    pub flip: bool,
    /// Crop origin in the rescaled sample. Zero along an axis shorter than the crop.
    pub top: usize,
    pub left: usize,
}

/// Side length after rescaling by `scale`.
pub fn scaled_extent(n: usize, scale: f64) -> usize {
    ((n as f64 * scale).round() as usize).max(1)
}

/// Draws scale, flip and crop origin, in that order.
pub fn draw_plan(height: usize, width: usize, cfg: &TrainConfig, rng: &mut impl Rng) -> AugmentPlan {
    let (lo, hi) = cfg.scale_range;
    let scale = if lo < hi { rng.random_range(lo..=hi) } else { lo };
    let flip = rng.random_bool(cfg.flip_prob);
    let (sh, sw) = (scaled_extent(height, scale), scaled_extent(width, scale));
    let top = rng.random_range(0..=sh.saturating_sub(cfg.crop.0));
    let left = rng.random_range(0..=sw.saturating_sub(cfg.crop.1));
    AugmentPlan { scale, flip, top, left }
}

/// Bilinear for the image, nearest for labels.
pub fn rescale(sample: &SegSample, scale: f64) -> Result<SegSample> {
    let (h, w) = (sample.height(), sample.width());
    let (sh, sw) = (scaled_extent(h, scale), scaled_extent(w, scale));
    if (sh, sw) == (h, w) {
        return Ok(sample.clone());
    }
    let batched = sample.image.reshape(vec![1, 3, h, w])?;
    let image = ops::bilinear_upsample(&batched, sh, sw, false)?.reshape(vec![3, sh, sw])?;
    let nearest = |dst: usize, src_n: usize, dst_n: usize| {
        (((dst as f64 + 0.5) * src_n as f64 / dst_n as f64) as usize).min(src_n - 1)
    };
    let mut label = Vec::with_capacity(sh * sw);
    for y in 0..sh {
        let sy = nearest(y, h, sh);
        for x in 0..sw {
            label.push(sample.label[sy * w + nearest(x, w, sw)]);
        }
    }
    Ok(SegSample { image, label })
}

pub fn flip_horizontal(sample: &SegSample) -> SegSample {
    let (h, w) = (sample.height(), sample.width());
    let src = sample.image.data();
    let image = Tensor::from_fn(vec![3, h, w], |i| {
        let (row, x) = (i / w, i % w);
        src[row * w + (w - 1 - x)]
    });
    let label = (0..h * w)
        .map(|i| sample.label[(i / w) * w + (w - 1 - i % w)])
        .collect();
    SegSample { image, label }
}

/// `crop.0 × crop.1` window at `(top, left)`; outside the sample the image
/// is zero and the label is `ignore_index`.
pub fn crop(sample: &SegSample, top: usize, left: usize, crop: (usize, usize), ignore_index: u8) -> SegSample {
    let (h, w) = (sample.height(), sample.width());
    let (ch, cw) = crop;
    let src = sample.image.data();
    let inside = |y: usize, x: usize| {
        let (sy, sx) = (top + y, left + x);
        (sy < h && sx < w).then_some(sy * w + sx)
    };
    let image = Tensor::from_fn(vec![3, ch, cw], |i| {
        let (c, y, x) = (i / (ch * cw), (i / cw) % ch, i % cw);
        inside(y, x).map_or(0.0, |p| src[c * h * w + p])
    });
    let label = (0..ch * cw)
        .map(|i| inside(i / cw, i % cw).map_or(ignore_index, |p| sample.label[p]))
        .collect();
    SegSample { image, label }
}

pub fn apply_plan(sample: &SegSample, plan: &AugmentPlan, cfg: &TrainConfig) -> Result<SegSample> {
    let mut out = rescale(sample, plan.scale)?;
    if plan.flip {
        out = flip_horizontal(&out);
    }
    Ok(crop(&out, plan.top, plan.left, cfg.crop, cfg.ignore_index))
}

/// Output is always exactly `cfg.crop`.
pub fn augment(sample: &SegSample, cfg: &TrainConfig, rng: &mut impl Rng) -> Result<SegSample> {
    let plan = draw_plan(sample.height(), sample.width(), cfg, rng);
    apply_plan(sample, &plan, cfg)
}
