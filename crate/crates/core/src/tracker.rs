//! Per-frame pose estimation: a background-only coarse stage that records the
//! per-object loss flows, followed by a fine stage on the joint loss of the
//! background and the objects currently considered static.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{Matrix6, Vector6};
use serde::{Deserialize, Serialize};

use crate::dynamic::classifier::{FrameClassification, MotionClassifier};
use crate::dynamic::flow::LossFlowRecord;
use crate::dynamic::gmm::Motion;
use crate::dynamic::registry::DynamicObjectRegistry;
use crate::error::{Error, Result};
use crate::loss::{accumulate_entity_gradient, adaptive_lambda, breakdown, LossConfig, ObjectLossBreakdown};
use crate::render::{backward, project, rasterize, OutputGradients, RenderSettings};
use crate::scene::{
    split_frame, CameraIntrinsics, CameraPose, FrameObservation, FramePartition, GaussianMap,
    BACKGROUND_ID,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackerConfig {
    pub optimizer: Optimizer,
    pub coarse_iterations: usize,
    /// Initial rotation step (radians) of the normalized-gradient update.
    pub rotation_step: f64,
    /// Initial translation step (meters).
    pub translation_step: f64,
    pub fine_max_iterations: usize,
    /// Relative decrease below which a fine iteration counts as stalled.
    pub fine_relative_tolerance: f64,
    /// Consecutive stalled iterations that end the fine stage.
    pub fine_patience: usize,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            optimizer: Optimizer::QuasiNewton,
            coarse_iterations: 40,
            rotation_step: 0.003,
            translation_step: 0.01,
            fine_max_iterations: 100,
            fine_relative_tolerance: 1e-5,
            fine_patience: 3,
        }
    }
}

/// Pose update rule shared by both tracking stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Optimizer {
    /// Normalized gradient steps of the configured sizes, halved whenever the loss fails
    /// to decrease; the reduced step carries over to later iterations.
    Gradient,
    /// BFGS on the same scaled tangent, with the same halving line search.
    QuasiNewton,
}

impl Optimizer {
    pub fn name(self) -> &'static str {
        match self {
            Optimizer::Gradient => "gradient",
            Optimizer::QuasiNewton => "bfgs",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gradient" => Ok(Optimizer::Gradient),
            "bfgs" => Ok(Optimizer::QuasiNewton),
            _ => Err(Error::Config(format!("optimizer: expected gradient or bfgs, got `{s}`"))),
        }
    }
}

/// Everything the tracker needs besides the map and the frame.
#[derive(Debug, Clone, Copy)]
pub struct TrackingContext<'a> {
    pub intrinsics: &'a CameraIntrinsics,
    pub render: &'a RenderSettings,
    pub loss: &'a LossConfig,
    pub config: &'a TrackerConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoarseResult {
    pub pose: CameraPose,
    /// One record per entity visible in the frame, background (id 0) included.
    pub loss_flows: Vec<LossFlowRecord>,
    pub iterations_run: usize,
    /// Set when a non-finite loss stopped the stage early.
    pub aborted: bool,
}

impl CoarseResult {
    pub fn background_flow(&self) -> Option<&LossFlowRecord> {
        self.loss_flows.iter().find(|r| r.object_id == BACKGROUND_ID)
    }

    pub fn object_flows(&self) -> impl Iterator<Item = &LossFlowRecord> {
        self.loss_flows.iter().filter(|r| r.object_id != BACKGROUND_ID)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackingResult {
    pub pose: CameraPose,
    pub loss_flows: Vec<LossFlowRecord>,
    pub classifications: BTreeMap<u32, Motion>,
    pub coarse_iterations_run: usize,
    pub fine_iterations_run: usize,
    pub final_loss: f64,
    /// Objects whose losses entered the fine objective.
    pub static_objects: BTreeSet<u32>,
    pub aborted: bool,
}

struct Evaluation {
    losses: ObjectLossBreakdown,
    objective: f64,
    pose_gradient: [f64; 6],
}

/// Renders at `pose`, evaluates every entity loss and differentiates the sum of the
/// background loss and the losses of `objective_objects` with respect to the pose.
fn evaluate(
    map: &GaussianMap,
    frame: &FrameObservation,
    partition: &FramePartition,
    pose: &CameraPose,
    objective_objects: &BTreeSet<u32>,
    lambda_a: f64,
    ctx: &TrackingContext,
) -> Result<Evaluation> {
    let projected = project(map, pose, ctx.intrinsics, ctx.render)?;
    let rendered = rasterize(&projected, map, ctx.intrinsics, ctx.render)?;
    let losses = breakdown(&rendered, frame, partition, lambda_a)?;
    let mut upstream = OutputGradients::zeros(frame.width(), frame.height());
    accumulate_entity_gradient(&rendered, frame, &partition.background, lambda_a, 1.0, &mut upstream);
    for id in objective_objects {
        if let Some(px) = partition.object(*id) {
            accumulate_entity_gradient(&rendered, frame, px, lambda_a, 1.0, &mut upstream);
        }
    }
    let grads = backward(&projected, map, pose, ctx.intrinsics, &rendered, &upstream)?;
    let objective = losses.joint(objective_objects.iter().copied());
    Ok(Evaluation {
        losses,
        objective,
        pose_gradient: grads.pose,
    })
}

fn require_background(partition: &FramePartition) -> Result<()> {
    if partition.background.is_empty() {
        Err(Error::EmptyPixelSet(BACKGROUND_ID))
    } else {
        Ok(())
    }
}

/// Background-only pose refinement for exactly `coarse_iterations` iterations, recording
/// every entity's combined loss at the current iterate after each iteration.
pub fn coarse_track(
    map: &GaussianMap,
    frame: &FrameObservation,
    init_pose: &CameraPose,
    ctx: &TrackingContext,
) -> Result<CoarseResult> {
    let iterations = ctx.config.coarse_iterations;
    if iterations < 2 {
        return Err(Error::Input(format!(
            "coarse tracking needs at least 2 iterations, got {iterations}"
        )));
    }
    let partition = split_frame(frame);
    require_background(&partition)?;
    let lambda_a = adaptive_lambda(frame, ctx.loss);
    let none = BTreeSet::new();

    let mut flows: BTreeMap<u32, LossFlowRecord> = BTreeMap::new();
    let mut record = |losses: &ObjectLossBreakdown| {
        if let Some(bg) = losses.background {
            flows
                .entry(BACKGROUND_ID)
                .or_insert_with(|| LossFlowRecord::new(BACKGROUND_ID))
                .values
                .push(bg.combined);
        }
        for (&id, l) in &losses.per_object {
            flows
                .entry(id)
                .or_insert_with(|| LossFlowRecord::new(id))
                .values
                .push(l.combined);
        }
    };

    let mut search = Descent::new(ctx.config);
    let mut best_pose = *init_pose;
    let mut best = evaluate(map, frame, &partition, &best_pose, &none, lambda_a, ctx)?;
    if !best.objective.is_finite() {
        return Err(Error::Numerics(format!(
            "frame {}: non-finite initial tracking loss",
            frame.index
        )));
    }
    record(&best.losses);
    let mut run = 1;
    let mut aborted = false;
    while run < iterations {
        run += 1;
        match search.iterate(&best_pose, &best, |p| {
            evaluate(map, frame, &partition, p, &none, lambda_a, ctx)
        })? {
            Step::Accepted(p, e) => {
                best_pose = p;
                best = e;
            }
            Step::Stalled => {}
            Step::Aborted => {
                aborted = true;
                break;
            }
        }
        record(&best.losses);
    }
    Ok(CoarseResult {
        pose: best_pose,
        loss_flows: flows.into_values().collect(),
        iterations_run: run,
        aborted,
    })
}

enum Step {
    Accepted(CameraPose, Evaluation),
    /// No decrease within the backtracking budget.
    Stalled,
    Aborted,
}

/// Descent in a tangent space scaled by the configured rotation and translation steps,
/// with halving backtracking. The first direction is the normalized gradient, so the first
/// trial moves by exactly the configured steps.
struct Descent {
    scales: Vector6<f64>,
    quasi_newton: bool,
    inverse_hessian: Option<Matrix6<f64>>,
    /// Current step multiplier of the gradient rule.
    step: f64,
}

const MAX_HALVINGS: usize = 10;
/// Largest trial step, in units of the configured steps.
const MAX_STEP: f64 = 8.0;

impl Descent {
    fn new(cfg: &TrackerConfig) -> Self {
        let (r, t) = (cfg.rotation_step, cfg.translation_step);
        Self {
            scales: Vector6::new(r, r, r, t, t, t),
            quasi_newton: cfg.optimizer == Optimizer::QuasiNewton,
            inverse_hessian: None,
            step: 1.0,
        }
    }

    fn scaled_gradient(&self, e: &Evaluation) -> Vector6<f64> {
        Vector6::from_column_slice(&e.pose_gradient).component_mul(&self.scales)
    }

    fn iterate(
        &mut self,
        pose: &CameraPose,
        current: &Evaluation,
        mut eval: impl FnMut(&CameraPose) -> Result<Evaluation>,
    ) -> Result<Step> {
        let g = self.scaled_gradient(current);
        let gn = g.norm();
        if gn <= 1e-300 {
            return Ok(Step::Stalled);
        }
        let mut dir = match &self.inverse_hessian {
            Some(h) => -(h * g),
            None => -g / gn,
        };
        if dir.dot(&g) >= 0.0 {
            // lost positive definiteness: restart from steepest descent
            self.inverse_hessian = None;
            dir = -g / gn;
        }
        if dir.norm() > MAX_STEP {
            dir *= MAX_STEP / dir.norm();
        }
        let mut alpha = if self.quasi_newton { 1.0 } else { self.step };
        for _ in 0..=MAX_HALVINGS {
            let step = alpha * dir;
            let xi_v = step.component_mul(&self.scales);
            let xi = [xi_v[0], xi_v[1], xi_v[2], xi_v[3], xi_v[4], xi_v[5]];
            let candidate = pose.retract(&xi);
            let e = match eval(&candidate) {
                Ok(e) if e.objective.is_finite() => e,
                Ok(_) | Err(Error::Numerics(_)) => return Ok(Step::Aborted),
                Err(err) => return Err(err),
            };
            if e.objective < current.objective {
                if !self.quasi_newton {
                    self.step = alpha;
                    return Ok(Step::Accepted(candidate, e));
                }
                let y = self.scaled_gradient(&e) - g;
                let sy = step.dot(&y);
                if sy > 1e-12 * step.norm() * y.norm() {
                    let h = self
                        .inverse_hessian
                        .unwrap_or_else(|| Matrix6::identity() * (sy / y.norm_squared()));
                    let rho = 1.0 / sy;
                    let a = Matrix6::identity() - rho * step * y.transpose();
                    self.inverse_hessian =
                        Some(a * h * a.transpose() + rho * step * step.transpose());
                }
                return Ok(Step::Accepted(candidate, e));
            }
            alpha *= 0.5;
        }
        self.inverse_hessian = None;
        self.step = alpha;
        Ok(Step::Stalled)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FineResult {
    pub pose: CameraPose,
    pub iterations_run: usize,
    pub final_loss: f64,
    pub static_objects: BTreeSet<u32>,
    pub aborted: bool,
}

/// Objects visible in `frame` that are not in the registry's dynamic set.
pub fn static_objects(frame: &FrameObservation, registry: &DynamicObjectRegistry) -> BTreeSet<u32> {
    let dynamic = registry.dynamic_set();
    split_frame(frame)
        .object_ids()
        .filter(|id| !dynamic.contains(id))
        .collect()
}

/// Pose refinement on the background loss plus the losses of the static objects.
/// Stops after `fine_patience` consecutive iterations with relative decrease below
/// `fine_relative_tolerance`, or after `fine_max_iterations`.
pub fn fine_track(
    map: &GaussianMap,
    frame: &FrameObservation,
    pose: &CameraPose,
    registry: &DynamicObjectRegistry,
    ctx: &TrackingContext,
) -> Result<FineResult> {
    let partition = split_frame(frame);
    require_background(&partition)?;
    let lambda_a = adaptive_lambda(frame, ctx.loss);
    let objects = static_objects(frame, registry);

    let mut search = Descent::new(ctx.config);
    let mut best_pose = *pose;
    let mut best = evaluate(map, frame, &partition, &best_pose, &objects, lambda_a, ctx)?;
    if !best.objective.is_finite() {
        return Err(Error::Numerics(format!(
            "frame {}: non-finite fine tracking loss",
            frame.index
        )));
    }
    let mut stalled = 0;
    let mut run = 0;
    let mut aborted = false;
    while run < ctx.config.fine_max_iterations && stalled < ctx.config.fine_patience {
        run += 1;
        let step = search.iterate(&best_pose, &best, |p| {
            evaluate(map, frame, &partition, p, &objects, lambda_a, ctx)
        })?;
        let rel = match step {
            Step::Accepted(p, e) => {
                let rel = if best.objective > 0.0 {
                    (best.objective - e.objective) / best.objective
                } else {
                    0.0
                };
                best_pose = p;
                best = e;
                rel
            }
            Step::Stalled => 0.0,
            Step::Aborted => {
                aborted = true;
                break;
            }
        };
        if rel < ctx.config.fine_relative_tolerance {
            stalled += 1;
        } else {
            stalled = 0;
        }
    }
    Ok(FineResult {
        pose: best_pose,
        iterations_run: run,
        final_loss: best.objective,
        static_objects: objects,
        aborted,
    })
}

/// One complete tracking step: coarse stage, motion classification of this frame's
/// objects, registry update, then the fine stage from the coarse pose.
pub fn track_frame(
    map: &GaussianMap,
    frame: &FrameObservation,
    init_pose: &CameraPose,
    registry: &mut DynamicObjectRegistry,
    classifier: &mut MotionClassifier,
    filtering: bool,
    ctx: &TrackingContext,
) -> Result<(TrackingResult, FrameClassification)> {
    let coarse = coarse_track(map, frame, init_pose, ctx)?;
    let classification = classifier.classify_frame(&coarse.loss_flows)?;
    if filtering {
        registry.update(&classification.labels);
    }
    let fine = fine_track(map, frame, &coarse.pose, registry, ctx)?;
    Ok((
        TrackingResult {
            pose: fine.pose,
            loss_flows: coarse.loss_flows,
            classifications: classification.labels.clone(),
            coarse_iterations_run: coarse.iterations_run,
            fine_iterations_run: fine.iterations_run,
            final_loss: fine.final_loss,
            static_objects: fine.static_objects,
            aborted: coarse.aborted || fine.aborted,
        },
        classification,
    ))
}
