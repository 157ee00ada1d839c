//! Masked photometric/geometric rendering losses, the depth-quality adaptive
//! weighting between them, and their upstream gradients for the renderer.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::image::{depth_is_valid, Image};
use crate::render::{OutputGradients, RenderedFrame};
use crate::scene::{FrameObservation, FramePartition};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub lambda_lo: f64,
    pub lambda_up: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_lo: 0.88,
            lambda_up: 0.95,
        }
    }
}

/// Mean over `pixels` of the channel-averaged L1 color error.
pub fn masked_photometric(
    rendered: &RenderedFrame,
    frame: &FrameObservation,
    pixels: &[usize],
) -> Result<f64> {
    if pixels.is_empty() {
        return Err(Error::EmptyPixelSet(u32::MAX));
    }
    let r = rendered.color.as_slice();
    let g = frame.rgb.as_slice();
    let sum: f64 = pixels
        .iter()
        .map(|&p| {
            let (a, b) = (r[p], g[p]);
            ((a[0] - b[0]).abs() + (a[1] - b[1]).abs() + (a[2] - b[2]).abs()) / 3.0
        })
        .sum();
    Ok(sum / pixels.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeometricLoss {
    pub value: f64,
    pub valid_pixels: usize,
    /// No pixel in the set had valid ground-truth depth; `value` is 0.
    pub degenerate: bool,
}

/// Mean absolute depth error over the pixels of `pixels` with valid ground-truth depth.
pub fn masked_geometric(
    rendered: &RenderedFrame,
    frame: &FrameObservation,
    pixels: &[usize],
) -> Result<GeometricLoss> {
    if pixels.is_empty() {
        return Err(Error::EmptyPixelSet(u32::MAX));
    }
    let r = rendered.depth.as_slice();
    let g = frame.depth.as_slice();
    let mut sum = 0.0;
    let mut n = 0usize;
    for &p in pixels {
        if depth_is_valid(g[p]) {
            sum += (r[p] - g[p]).abs();
            n += 1;
        }
    }
    Ok(if n == 0 {
        GeometricLoss {
            value: 0.0,
            valid_pixels: 0,
            degenerate: true,
        }
    } else {
        GeometricLoss {
            value: sum / n as f64,
            valid_pixels: n,
            degenerate: false,
        }
    })
}

/// Photometric weight, rising linearly from `lambda_lo` to `lambda_up` with the invalid-depth fraction.
pub fn adaptive_lambda(frame: &FrameObservation, cfg: &LossConfig) -> f64 {
    lambda_for_fraction(frame.invalid_depth_fraction(), cfg)
}

/// `adaptive_lambda` with the invalid-depth fraction taken over pixels outside the `excluded`
/// masks, so nothing under an excluded mask can influence the weight.
pub fn adaptive_lambda_excluding(frame: &FrameObservation, cfg: &LossConfig, excluded: &BTreeSet<u32>) -> f64 {
    let mut kept = 0usize;
    let mut invalid = 0usize;
    for (d, id) in frame.depth.as_slice().iter().zip(frame.mask.as_slice()) {
        if !excluded.contains(id) {
            kept += 1;
            invalid += usize::from(!depth_is_valid(*d));
        }
    }
    let fraction = if kept == 0 { 0.0 } else { invalid as f64 / kept as f64 };
    lambda_for_fraction(fraction, cfg)
}

pub fn lambda_for_fraction(invalid_fraction: f64, cfg: &LossConfig) -> f64 {
    let f = invalid_fraction.clamp(0.0, 1.0);
    cfg.lambda_lo + (cfg.lambda_up - cfg.lambda_lo) * f
}

#[inline]
pub fn combine(pho: f64, geo: f64, lambda_a: f64) -> f64 {
    lambda_a * pho + (1.0 - lambda_a) * geo
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EntityLoss {
    pub photometric: f64,
    pub geometric: f64,
    pub combined: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectLossBreakdown {
    pub per_object: BTreeMap<u32, EntityLoss>,
    pub background: Option<EntityLoss>,
    pub lambda_a: f64,
    pub invalid_depth_fraction: f64,
}

impl ObjectLossBreakdown {
    /// Background loss plus the losses of the listed objects (missing ids are skipped).
    pub fn joint(&self, objects: impl IntoIterator<Item = u32>) -> f64 {
        let bg = self.background.map_or(0.0, |b| b.combined);
        bg + objects
            .into_iter()
            .filter_map(|id| self.per_object.get(&id))
            .map(|l| l.combined)
            .sum::<f64>()
    }
}

fn entity_loss(
    rendered: &RenderedFrame,
    frame: &FrameObservation,
    pixels: &[usize],
    lambda_a: f64,
) -> Result<EntityLoss> {
    let pho = masked_photometric(rendered, frame, pixels)?;
    let geo = masked_geometric(rendered, frame, pixels)?.value;
    Ok(EntityLoss {
        photometric: pho,
        geometric: geo,
        combined: combine(pho, geo, lambda_a),
    })
}

/// Losses for the background and every object with a non-empty mask.
pub fn breakdown(
    rendered: &RenderedFrame,
    frame: &FrameObservation,
    partition: &FramePartition,
    lambda_a: f64,
) -> Result<ObjectLossBreakdown> {
    let background = if partition.background.is_empty() {
        None
    } else {
        Some(entity_loss(rendered, frame, &partition.background, lambda_a)?)
    };
    let mut per_object = BTreeMap::new();
    for (&id, pixels) in &partition.objects {
        if pixels.is_empty() {
            continue;
        }
        per_object.insert(id, entity_loss(rendered, frame, pixels, lambda_a)?);
    }
    Ok(ObjectLossBreakdown {
        per_object,
        background,
        lambda_a,
        invalid_depth_fraction: frame.invalid_depth_fraction(),
    })
}

/// Adds `weight · ∂L/∂output` of one entity's combined loss into `grads`.
pub fn accumulate_entity_gradient(
    rendered: &RenderedFrame,
    frame: &FrameObservation,
    pixels: &[usize],
    lambda_a: f64,
    weight: f64,
    grads: &mut OutputGradients,
) {
    if pixels.is_empty() || weight == 0.0 {
        return;
    }
    let rc = rendered.color.as_slice();
    let gc = frame.rgb.as_slice();
    let rd = rendered.depth.as_slice();
    let gd = frame.depth.as_slice();
    let color_scale = weight * lambda_a / (3.0 * pixels.len() as f64);
    let valid = pixels.iter().filter(|&&p| depth_is_valid(gd[p])).count();
    let depth_scale = if valid > 0 {
        weight * (1.0 - lambda_a) / valid as f64
    } else {
        0.0
    };
    let out_c = grads.color.as_mut_slice();
    let out_d = grads.depth.as_mut_slice();
    for &p in pixels {
        for ch in 0..3 {
            out_c[p][ch] += color_scale * sign(rc[p][ch] - gc[p][ch]);
        }
        if depth_scale != 0.0 && depth_is_valid(gd[p]) {
            out_d[p] += depth_scale * sign(rd[p] - gd[p]);
        }
    }
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MappingLoss {
    pub value: f64,
    /// 1 on kept pixels, 0 on pixels whose mask id is dynamic.
    pub weights: Image<f64>,
    pub gradients: OutputGradients,
}

/// Adaptive photometric-geometric loss over every pixel not covered by a dynamic mask.
pub fn mapping_loss(
    rendered: &RenderedFrame,
    frame: &FrameObservation,
    dynamic_ids: &BTreeSet<u32>,
    lambda_a: f64,
) -> Result<MappingLoss> {
    let weights = frame
        .mask
        .map(|id| if dynamic_ids.contains(id) { 0.0 } else { 1.0 });
    let kept: Vec<usize> = weights
        .as_slice()
        .iter()
        .enumerate()
        .filter(|(_, w)| **w > 0.0)
        .map(|(i, _)| i)
        .collect();
    if kept.is_empty() {
        return Err(Error::AllPixelsDynamic);
    }
    let pho = masked_photometric(rendered, frame, &kept)?;
    let geo = masked_geometric(rendered, frame, &kept)?.value;
    let mut gradients = OutputGradients::zeros(frame.width(), frame.height());
    accumulate_entity_gradient(rendered, frame, &kept, lambda_a, 1.0, &mut gradients);
    Ok(MappingLoss {
        value: combine(pho, geo, lambda_a),
        weights,
        gradients,
    })
}
