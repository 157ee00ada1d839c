//! Keyframe selection, the keyframe window, and map optimization: initial mapping on
//! the first frame and per-keyframe updates under the dynamic-masked loss.

use std::collections::{BTreeSet, VecDeque};

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamic::registry::{prune_set, DynamicObjectRegistry};
use crate::error::{Error, Result};
use crate::loss::{adaptive_lambda_excluding, mapping_loss, LossConfig};
use crate::render::{backward, project, rasterize, RenderGradients, RenderSettings};
use crate::scene::{
    back_project_where, init_primitives, CameraIntrinsics, CameraPose, FrameObservation,
    GaussianInit, GaussianMap, GaussianPrimitive,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeyframeDecision {
    pub is_keyframe: bool,
    pub iou: f64,
    pub overlap: f64,
    /// One of the visibility sets was empty; the frame is forced to be a keyframe.
    pub degenerate: bool,
}

/// IoU and overlap coefficient `|A∩B| / min(|A|,|B|)` of two visibility sets.
pub fn covisibility(a: &BTreeSet<usize>, b: &BTreeSet<usize>) -> (f64, f64) {
    let inter = a.intersection(b).count() as f64;
    let union = (a.len() + b.len()) as f64 - inter;
    let min = a.len().min(b.len()) as f64;
    let iou = if union > 0.0 { inter / union } else { 0.0 };
    let oc = if min > 0.0 { inter / min } else { 0.0 };
    (iou, oc)
}

/// A frame is a keyframe when it overlaps the last keyframe enough (OC above `oc_min`)
/// but is not a near-duplicate of it (IoU below `iou_max`).
pub fn keyframe_decision(
    current: &BTreeSet<usize>,
    last_keyframe: &BTreeSet<usize>,
    iou_max: f64,
    oc_min: f64,
) -> KeyframeDecision {
    let (iou, overlap) = covisibility(current, last_keyframe);
    if current.is_empty() || last_keyframe.is_empty() {
        return KeyframeDecision {
            is_keyframe: true,
            iou,
            overlap,
            degenerate: true,
        };
    }
    keyframe_from_scores(iou, overlap, iou_max, oc_min)
}

pub fn keyframe_from_scores(iou: f64, overlap: f64, iou_max: f64, oc_min: f64) -> KeyframeDecision {
    KeyframeDecision {
        is_keyframe: iou < iou_max && overlap > oc_min,
        iou,
        overlap,
        degenerate: false,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Keyframe {
    pub index: usize,
    pub pose: CameraPose,
    /// Dynamic-set snapshot taken when the keyframe was inserted.
    pub dynamic_ids: BTreeSet<u32>,
    pub frame: FrameObservation,
}

/// Bounded, index-ordered window of recent keyframes; the oldest entry is evicted first.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyframeWindow {
    entries: VecDeque<Keyframe>,
    capacity: usize,
}

impl KeyframeWindow {
    pub fn new(capacity: usize) -> Self {
        Self {
            entries: VecDeque::new(),
            capacity: capacity.max(1),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &Keyframe> {
        self.entries.iter()
    }

    pub fn newest(&self) -> Option<&Keyframe> {
        self.entries.back()
    }

    /// Inserts in index order. Returns the evicted keyframe, if any.
    pub fn push(&mut self, kf: Keyframe) -> Option<Keyframe> {
        let at = self.entries.partition_point(|e| e.index <= kf.index);
        self.entries.insert(at, kf);
        if self.entries.len() > self.capacity {
            self.entries.pop_front()
        } else {
            None
        }
    }
}

/// Adam learning rates per parameter group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearningRates {
    pub mean: f64,
    pub log_scale: f64,
    pub orientation: f64,
    pub logit_opacity: f64,
    pub color: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            mean: 1e-3,
            log_scale: 1e-2,
            orientation: 5e-3,
            logit_opacity: 5e-2,
            color: 1e-2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapperConfig {
    pub window_capacity: usize,
    pub iterations: usize,
    pub initial_iterations: usize,
    /// Random window frames per iteration, in addition to the newest keyframe.
    pub sampled_frames: usize,
    pub densify_alpha: f64,
    pub densify_stride: usize,
    pub prune_opacity: f64,
    pub visibility_alpha: f64,
    pub iou_max: f64,
    pub oc_min: f64,
    /// Consecutive loss increases that stop initial mapping.
    pub divergence_patience: usize,
    pub learning_rates: LearningRates,
    pub scale_coefficient: f64,
    pub initial_opacity: f64,
    pub seed: u64,
}

impl Default for MapperConfig {
    fn default() -> Self {
        let init = GaussianInit::default();
        Self {
            window_capacity: 8,
            iterations: 60,
            initial_iterations: 300,
            sampled_frames: 2,
            densify_alpha: 0.5,
            densify_stride: 32,
            prune_opacity: 0.05,
            visibility_alpha: 1e-3,
            iou_max: 0.8,
            oc_min: 0.2,
            divergence_patience: 10,
            learning_rates: LearningRates::default(),
            scale_coefficient: init.scale_coefficient,
            initial_opacity: init.opacity,
            seed: 11,
        }
    }
}

impl MapperConfig {
    pub fn gaussian_init(&self) -> GaussianInit {
        GaussianInit {
            scale_coefficient: self.scale_coefficient,
            opacity: self.initial_opacity,
            ..GaussianInit::default()
        }
    }
}

const PARAMS: usize = 14;
const OPACITY_EPS: f64 = 1e-6;

fn logit(p: f64) -> f64 {
    let p = p.clamp(OPACITY_EPS, 1.0 - OPACITY_EPS);
    (p / (1.0 - p)).ln()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Adam over the unconstrained parameterization of every primitive:
/// mean, log-scale, raw quaternion, logit-opacity, color.
struct Adam {
    m: Vec<[f64; PARAMS]>,
    v: Vec<[f64; PARAMS]>,
    t: i32,
    lr: [f64; PARAMS],
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-15;

    fn new(n: usize, r: &LearningRates) -> Self {
        let mut lr = [0.0; PARAMS];
        lr[0..3].fill(r.mean);
        lr[3..6].fill(r.log_scale);
        lr[6..10].fill(r.orientation);
        lr[10] = r.logit_opacity;
        lr[11..14].fill(r.color);
        Self {
            m: vec![[0.0; PARAMS]; n],
            v: vec![[0.0; PARAMS]; n],
            t: 0,
            lr,
        }
    }

    fn step(&mut self, map: &mut GaussianMap, grads: &RenderGradients) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for (i, p) in map.primitives_mut().iter_mut().enumerate() {
            let g = &grads.primitives[i];
            let q = p.orientation.into_inner();
            let mut theta = [
                p.mean.x,
                p.mean.y,
                p.mean.z,
                p.scale.x.ln(),
                p.scale.y.ln(),
                p.scale.z.ln(),
                q.w,
                q.i,
                q.j,
                q.k,
                logit(p.opacity),
                p.color.x,
                p.color.y,
                p.color.z,
            ];
            let o = p.opacity;
            let grad = [
                g.mean.x,
                g.mean.y,
                g.mean.z,
                g.scale.x * p.scale.x,
                g.scale.y * p.scale.y,
                g.scale.z * p.scale.z,
                g.orientation[0],
                g.orientation[1],
                g.orientation[2],
                g.orientation[3],
                g.opacity * o * (1.0 - o),
                g.color.x,
                g.color.y,
                g.color.z,
            ];
            if grad.iter().all(|x| *x == 0.0) && self.m[i].iter().all(|x| *x == 0.0) {
                continue;
            }
            for k in 0..PARAMS {
                let m = &mut self.m[i][k];
                let v = &mut self.v[i][k];
                *m = Self::B1 * *m + (1.0 - Self::B1) * grad[k];
                *v = Self::B2 * *v + (1.0 - Self::B2) * grad[k] * grad[k];
                theta[k] -= self.lr[k] * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
            }
            p.mean = Vector3::new(theta[0], theta[1], theta[2]);
            p.scale = Vector3::new(theta[3].exp(), theta[4].exp(), theta[5].exp());
            let raw = Quaternion::new(theta[6], theta[7], theta[8], theta[9]);
            if raw.norm() > 1e-12 {
                p.orientation = UnitQuaternion::from_quaternion(raw);
            }
            p.opacity = sigmoid(theta[10]);
            p.color = Vector3::new(
                theta[11].clamp(0.0, 1.0),
                theta[12].clamp(0.0, 1.0),
                theta[13].clamp(0.0, 1.0),
            );
        }
    }
}

/// Static-parameter view the optimizer needs for one view.
pub struct View<'a> {
    pub frame: &'a FrameObservation,
    pub pose: &'a CameraPose,
    pub dynamic_ids: &'a BTreeSet<u32>,
}

/// Mapping loss over `views` and its primitive gradients, summed.
fn mapping_objective(
    map: &GaussianMap,
    views: &[View<'_>],
    intrinsics: &CameraIntrinsics,
    render: &RenderSettings,
    loss: &LossConfig,
) -> Result<(f64, Option<RenderGradients>)> {
    let mut total = 0.0;
    let mut acc: Option<RenderGradients> = None;
    for view in views {
        let projected = project(map, view.pose, intrinsics, render)?;
        let rendered = rasterize(&projected, map, intrinsics, render)?;
        let lambda_a = adaptive_lambda_excluding(view.frame, loss, view.dynamic_ids);
        let ml = match mapping_loss(&rendered, view.frame, view.dynamic_ids, lambda_a) {
            Ok(ml) => ml,
            Err(Error::AllPixelsDynamic) => continue,
            Err(e) => return Err(e),
        };
        total += ml.value;
        let g = backward(&projected, map, view.pose, intrinsics, &rendered, &ml.gradients)?;
        match &mut acc {
            None => acc = Some(g),
            Some(a) => {
                for (x, y) in a.primitives.iter_mut().zip(&g.primitives) {
                    x.mean += y.mean;
                    x.scale += y.scale;
                    x.opacity += y.opacity;
                    x.color += y.color;
                    for k in 0..4 {
                        x.orientation[k] += y.orientation[k];
                    }
                }
            }
        }
    }
    Ok((total, acc))
}

/// Renders-independent loss evaluation at fixed parameters.
pub fn evaluate_mapping_loss(
    map: &GaussianMap,
    views: &[View<'_>],
    intrinsics: &CameraIntrinsics,
    render: &RenderSettings,
    loss: &LossConfig,
) -> Result<f64> {
    let mut total = 0.0;
    for view in views {
        let rendered = crate::render::render(map, view.pose, intrinsics, render)?;
        let lambda_a = adaptive_lambda_excluding(view.frame, loss, view.dynamic_ids);
        match mapping_loss(&rendered, view.frame, view.dynamic_ids, lambda_a) {
            Ok(ml) => total += ml.value,
            Err(Error::AllPixelsDynamic) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq)]
pub struct InitialMappingReport {
    pub iterations_run: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub diverged: bool,
    /// PSNR of the final render against the frame.
    pub psnr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapUpdateReport {
    pub pruned_dynamic: usize,
    pub pruned_transparent: usize,
    pub densified: usize,
    pub iterations_run: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Shared state of the mapping stage.
#[derive(Debug, Clone)]
pub struct Mapper {
    pub config: MapperConfig,
    pub window: KeyframeWindow,
    rng: ChaCha8Rng,
}

impl Mapper {
    pub fn new(config: MapperConfig) -> Self {
        Self {
            window: KeyframeWindow::new(config.window_capacity),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
        }
    }

    /// Optimizes every primitive against the first frame with no dynamic exclusion.
    pub fn initial_mapping(
        &self,
        map: &mut GaussianMap,
        frame: &FrameObservation,
        pose: &CameraPose,
        intrinsics: &CameraIntrinsics,
        render: &RenderSettings,
        loss: &LossConfig,
    ) -> Result<InitialMappingReport> {
        let none = BTreeSet::new();
        let views = [View {
            frame,
            pose,
            dynamic_ids: &none,
        }];
        let mut adam = Adam::new(map.len(), &self.config.learning_rates);
        let mut initial_loss = f64::NAN;
        let mut last = f64::INFINITY;
        let mut rising = 0;
        let mut run = 0;
        let mut diverged = false;
        for _ in 0..self.config.initial_iterations {
            let (value, grads) = mapping_objective(map, &views, intrinsics, render, loss)?;
            if run == 0 {
                initial_loss = value;
            }
            if value > last {
                rising += 1;
                if rising >= self.config.divergence_patience {
                    diverged = true;
                    break;
                }
            } else {
                rising = 0;
            }
            last = value;
            let Some(g) = grads else { break };
            adam.step(map, &g);
            run += 1;
        }
        let final_loss = evaluate_mapping_loss(map, &views, intrinsics, render, loss)?;
        if run == 0 {
            initial_loss = final_loss;
        }
        let rendered = crate::render::render(map, pose, intrinsics, render)?;
        let psnr = crate::eval::psnr(&rendered.color, &frame.rgb, None)?;
        Ok(InitialMappingReport {
            iterations_run: run,
            initial_loss,
            final_loss,
            diverged,
            psnr,
        })
    }

    /// Adds a keyframe to the window.
    pub fn insert_keyframe(&mut self, kf: Keyframe) {
        self.window.push(kf);
    }

    /// Prunes dynamic primitives, optimizes over the window, densifies under-covered
    /// static pixels of the newest keyframe, and drops near-transparent primitives.
    pub fn map_update(
        &mut self,
        map: &mut GaussianMap,
        registry: &DynamicObjectRegistry,
        intrinsics: &CameraIntrinsics,
        render: &RenderSettings,
        loss: &LossConfig,
    ) -> Result<MapUpdateReport> {
        if self.window.is_empty() {
            return Err(Error::EmptyWindow);
        }
        let doomed = prune_set(registry, map);
        let pruned_dynamic = map.retain(|i, _| !doomed.contains(&i));
        let current = registry.dynamic_set();

        let entries: Vec<&Keyframe> = self.window.entries().collect();
        let excluded: Vec<BTreeSet<u32>> = entries
            .iter()
            .map(|k| k.dynamic_ids.union(&current).copied().collect())
            .collect();
        let newest = entries.len() - 1;
        let all_views: Vec<View<'_>> = entries
            .iter()
            .zip(&excluded)
            .map(|(k, ex)| View {
                frame: &k.frame,
                pose: &k.pose,
                dynamic_ids: ex,
            })
            .collect();

        let mut adam = Adam::new(map.len(), &self.config.learning_rates);
        let initial_loss =
            evaluate_mapping_loss(map, &all_views[newest..], intrinsics, render, loss)?;
        let mut run = 0;
        if !map.is_empty() {
            for _ in 0..self.config.iterations {
                let mut picks: Vec<usize> = if newest > 0 {
                    let n = self.config.sampled_frames.min(newest);
                    sample(&mut self.rng, newest, n).into_vec()
                } else {
                    Vec::new()
                };
                picks.sort_unstable();
                picks.push(newest);
                let views: Vec<View<'_>> = picks
                    .iter()
                    .map(|&i| View {
                        frame: all_views[i].frame,
                        pose: all_views[i].pose,
                        dynamic_ids: all_views[i].dynamic_ids,
                    })
                    .collect();
                let (_, grads) = mapping_objective(map, &views, intrinsics, render, loss)?;
                let Some(g) = grads else { break };
                adam.step(map, &g);
                run += 1;
            }
        }

        let kf = entries[newest];
        let densified = self.densify(map, kf, &excluded[newest], intrinsics, render)?;
        let threshold = self.config.prune_opacity;
        let pruned_transparent = map.retain(|_, p| p.opacity >= threshold);
        let final_loss =
            evaluate_mapping_loss(map, &all_views[newest..], intrinsics, render, loss)?;
        Ok(MapUpdateReport {
            pruned_dynamic,
            pruned_transparent,
            densified,
            iterations_run: run,
            initial_loss,
            final_loss,
        })
    }

    /// Back-projects pixels of `kf` with rendered alpha below the densification threshold
    /// whose mask is not dynamic.
    pub fn densify(
        &self,
        map: &mut GaussianMap,
        kf: &Keyframe,
        dynamic_ids: &BTreeSet<u32>,
        intrinsics: &CameraIntrinsics,
        render: &RenderSettings,
    ) -> Result<usize> {
        let rendered = crate::render::render(map, &kf.pose, intrinsics, render)?;
        let threshold = self.config.densify_alpha;
        let filter = |u: usize, v: usize| {
            *rendered.alpha.get(u, v) < threshold && !dynamic_ids.contains(kf.frame.mask.get(u, v))
        };
        let cloud = match back_project_where(
            &kf.frame,
            intrinsics,
            &kf.pose,
            self.config.densify_stride,
            &filter,
        ) {
            Ok(c) => c,
            Err(Error::EmptyCloud) => return Ok(0),
            Err(e) => return Err(e),
        };
        let prims: Vec<GaussianPrimitive> = init_primitives(&cloud, &self.config.gaussian_init())?;
        Ok(map.extend(prims))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamic::gmm::Motion;
    use crate::image::Image;
    use std::collections::BTreeMap;

    fn set(r: std::ops::Range<usize>) -> BTreeSet<usize> {
        r.collect()
    }

    #[test]
    fn keyframe_threshold_examples() {
        assert!(keyframe_from_scores(0.75, 0.25, 0.8, 0.2).is_keyframe);
        assert!(!keyframe_from_scores(0.85, 0.25, 0.8, 0.2).is_keyframe);
        assert!(!keyframe_from_scores(0.75, 0.15, 0.8, 0.2).is_keyframe);
    }

    #[test]
    fn covisibility_of_sets() {
        // |A∩B| = 60, |A∪B| = 120, min = 80
        let (iou, oc) = covisibility(&set(0..80), &set(20..120));
        assert!((iou - 0.5).abs() < 1e-12);
        assert!((oc - 0.75).abs() < 1e-12);
        let d = keyframe_decision(&set(0..80), &set(20..120), 0.8, 0.2);
        assert!(d.is_keyframe && !d.degenerate);
        assert!(!keyframe_decision(&set(0..100), &set(0..100), 0.8, 0.2).is_keyframe);
    }

    #[test]
    fn empty_visibility_forces_keyframe() {
        let d = keyframe_decision(&BTreeSet::new(), &set(0..5), 0.8, 0.2);
        assert!(d.is_keyframe && d.degenerate);
    }

    fn frame(index: usize) -> FrameObservation {
        FrameObservation::new(
            index,
            index as f64,
            Image::filled(4, 4, [0.5; 3]),
            Image::filled(4, 4, 1.0),
            Image::filled(4, 4, 0),
        )
        .unwrap()
    }

    fn kf(index: usize) -> Keyframe {
        Keyframe {
            index,
            pose: CameraPose::identity(),
            dynamic_ids: BTreeSet::new(),
            frame: frame(index),
        }
    }

    #[test]
    fn window_is_ordered_and_bounded() {
        let mut w = KeyframeWindow::new(3);
        for i in [4, 1, 3, 2] {
            w.push(kf(i));
        }
        let idx: Vec<usize> = w.entries().map(|k| k.index).collect();
        assert_eq!(idx, vec![2, 3, 4]);
        assert_eq!(w.push(kf(9)).map(|k| k.index), Some(2));
        assert_eq!(w.len(), 3);
    }

    fn k32() -> CameraIntrinsics {
        CameraIntrinsics::new(32.0, 32.0, 15.5, 15.5, 32, 32, 5000.0).unwrap()
    }

    fn prim(x: f64, y: f64, id: u32, color: f64) -> GaussianPrimitive {
        GaussianPrimitive {
            mean: Vector3::new(x, y, 1.0),
            scale: Vector3::repeat(0.05),
            orientation: UnitQuaternion::identity(),
            opacity: 0.5,
            color: Vector3::repeat(color),
            object_id: id,
        }
    }

    #[test]
    fn zero_initial_iterations_leave_map_unchanged() {
        let mut map = GaussianMap::new();
        map.extend(vec![prim(0.0, 0.0, 0, 0.2)]);
        let before = map.clone();
        let mapper = Mapper::new(MapperConfig {
            initial_iterations: 0,
            ..MapperConfig::default()
        });
        let f = FrameObservation::new(
            0,
            0.0,
            Image::filled(32, 32, [0.7; 3]),
            Image::filled(32, 32, 1.0),
            Image::filled(32, 32, 0),
        )
        .unwrap();
        let r = mapper
            .initial_mapping(&mut map, &f, &CameraPose::identity(), &k32(), &RenderSettings::default(), &LossConfig::default())
            .unwrap();
        assert_eq!(r.iterations_run, 0);
        assert_eq!(map, before);
    }

    #[test]
    fn initial_mapping_fits_constant_patch_and_keeps_ids() {
        let mut map = GaussianMap::new();
        map.extend(vec![prim(0.0, 0.0, 7, 0.2)]);
        let mapper = Mapper::new(MapperConfig {
            initial_iterations: 100,
            ..MapperConfig::default()
        });
        let f = FrameObservation::new(
            0,
            0.0,
            Image::filled(32, 32, [0.7; 3]),
            Image::filled(32, 32, 1.0),
            Image::filled(32, 32, 0),
        )
        .unwrap();
        let r = mapper
            .initial_mapping(&mut map, &f, &CameraPose::identity(), &k32(), &RenderSettings::default(), &LossConfig::default())
            .unwrap();
        assert!(r.final_loss < r.initial_loss, "{r:?}");
        assert_eq!(map.primitives()[0].object_id, 7);
    }

    fn covered_scene() -> (GaussianMap, FrameObservation) {
        let mut prims = Vec::new();
        for i in 0..12 {
            for j in 0..12 {
                let x = -0.6 + i as f64 * 0.11;
                let y = -0.6 + j as f64 * 0.11;
                let id = if (4..7).contains(&i) && (4..7).contains(&j) { 2 } else { 0 };
                let mut p = prim(x, y, id, 0.3 + 0.04 * ((i + j) % 5) as f64);
                p.scale = Vector3::repeat(0.08);
                p.opacity = 0.95;
                prims.push(p);
            }
        }
        let mut map = GaussianMap::new();
        map.extend(prims);
        let r = crate::render::render(&map, &CameraPose::identity(), &k32(), &RenderSettings::default()).unwrap();
        let mut mask = Image::filled(32, 32, 0u32);
        for v in 12..20 {
            for u in 12..20 {
                *mask.get_mut(u, v) = 2;
            }
        }
        let f = FrameObservation::new(0, 0.0, r.color, r.depth, mask).unwrap();
        (map, f)
    }

    #[test]
    fn map_update_prunes_dynamic_ids_and_skips_covered_frames() {
        let (mut map, f) = covered_scene();
        let mut mapper = Mapper::new(MapperConfig {
            iterations: 5,
            densify_stride: 1,
            ..MapperConfig::default()
        });
        let mut reg = DynamicObjectRegistry::default();
        reg.update(&BTreeMap::from([(2, Motion::Dynamic)]));
        mapper.insert_keyframe(Keyframe {
            index: 0,
            pose: CameraPose::identity(),
            dynamic_ids: reg.dynamic_set(),
            frame: f,
        });
        let rep = mapper
            .map_update(&mut map, &reg, &k32(), &RenderSettings::default(), &LossConfig::default())
            .unwrap();
        assert_eq!(rep.pruned_dynamic, 9);
        assert_eq!(map.count_with_id(2), 0);
        assert!(map.primitives().iter().all(|p| p.opacity >= 0.05));
        // the image is fully covered outside the dynamic patch, which is excluded from densification
        assert_eq!(rep.densified, 0);
    }

    #[test]
    fn map_update_requires_a_keyframe() {
        let (mut map, _) = covered_scene();
        let mut mapper = Mapper::new(MapperConfig::default());
        let reg = DynamicObjectRegistry::default();
        assert!(matches!(
            mapper.map_update(&mut map, &reg, &k32(), &RenderSettings::default(), &LossConfig::default()),
            Err(Error::EmptyWindow)
        ));
    }

    #[test]
    fn vacated_region_is_densified_as_background() {
        let (mut map, f) = covered_scene();
        let mut reg = DynamicObjectRegistry::default();
        reg.update(&BTreeMap::from([(2, Motion::Dynamic)]));
        let doomed = prune_set(&reg, &map);
        map.retain(|i, _| !doomed.contains(&i));
        // a later keyframe sees plain background where the object used to be
        let mut later = f.clone();
        later.index = 1;
        later.mask = Image::filled(32, 32, 0);
        let mapper = Mapper::new(MapperConfig {
            densify_stride: 2,
            ..MapperConfig::default()
        });
        let kf = Keyframe {
            index: 1,
            pose: CameraPose::identity(),
            dynamic_ids: reg.dynamic_set(),
            frame: later,
        };
        let before = map.len();
        let n = mapper
            .densify(&mut map, &kf, &reg.dynamic_set(), &k32(), &RenderSettings::default())
            .unwrap();
        assert!(n > 0);
        assert_eq!(map.len(), before + n);
        assert!(map.primitives()[before..].iter().all(|p| p.object_id == 0));
    }
}
