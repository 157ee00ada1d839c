//! End-to-end run: initialize from the first frame, then alternate tracking and
//! keyframe mapping frame by frame.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use log::{debug, info};
use serde_json::json;

use crate::checkpoint::write_checkpoint;
use crate::config::PipelineConfig;
use crate::dataset::synthetic::{generate_synthetic, SyntheticSceneSpec};
use crate::dataset::trajectory::write_trajectory;
use crate::dataset::tum::{depth_to_png, load_manifest, rgb_to_png, LoadOptions};
use crate::dynamic::{write_flow_rows, DynamicObjectRegistry, LossFlowRecord, Motion, MotionClassifier, FLOW_CSV_HEADER};
use crate::error::{Error, Result};
use crate::eval::{align_and_ate, metric_schedule, psnr, ssim, ssim_masked, write_ate_report, write_metrics_csv, AteReport, MetricsRow, TimedPose};
use crate::image::{DepthImage, Image, RgbImage};
use crate::mapper::{keyframe_decision, Keyframe, KeyframeDecision, Mapper};
use crate::render::render;
use crate::scene::{back_project, init_gaussians, CameraIntrinsics, CameraPose, FrameObservation, GaussianMap};
use crate::tracker::{track_frame, TrackingContext};

/// Frames and ground truth of one input sequence.
pub struct SequenceInput {
    pub intrinsics: CameraIntrinsics,
    pub frames: Box<dyn Iterator<Item = Result<FrameObservation>>>,
    pub ground_truth: Vec<TimedPose>,
}

/// Opens the dataset directory, or generates the synthetic scene when no dataset is set.
pub fn open_input(cfg: &PipelineConfig) -> Result<SequenceInput> {
    if let Some(root) = &cfg.dataset {
        let opts = LoadOptions {
            tolerance: cfg.association_tolerance,
            frame_step: cfg.frame_step,
            downscale: cfg.downscale,
            max_frames: cfg.max_frames,
            intrinsics: cfg.camera.intrinsics(),
        };
        let manifest = load_manifest(root, &opts)?;
        if manifest.is_empty() {
            return Err(Error::Input(format!("{}: no associated frames", root.display())));
        }
        let n = manifest.len();
        let intrinsics = manifest.intrinsics;
        let ground_truth = manifest.ground_truth.clone();
        let frames = (0..n).map(move |i| manifest.load_frame(i));
        return Ok(SequenceInput {
            intrinsics,
            frames: Box::new(frames),
            ground_truth,
        });
    }
    let Some(spec_path) = &cfg.synthetic_spec else {
        return Err(Error::Config("dataset: neither dataset nor synthetic_spec is set".into()));
    };
    let spec = read_scene_spec(spec_path)?;
    let seq = generate_synthetic(&spec, cfg.synthetic_seed)?;
    let step = cfg.frame_step;
    let limit = cfg.max_frames.unwrap_or(usize::MAX);
    let frames: Vec<FrameObservation> = seq.frames.into_iter().step_by(step).take(limit).collect();
    Ok(SequenceInput {
        intrinsics: seq.intrinsics,
        frames: Box::new(frames.into_iter().map(Ok)),
        ground_truth: seq.ground_truth,
    })
}

pub fn read_scene_spec(path: &Path) -> Result<SyntheticSceneSpec> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset not found"),
        ));
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let spec: SyntheticSceneSpec = serde_json::from_str(&text).map_err(|e| {
        Error::parse(path, e.line(), e.to_string())
    })?;
    spec.validate()?;
    Ok(spec)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub index: usize,
    pub timestamp: f64,
    pub pose: CameraPose,
    pub keyframe: Option<KeyframeDecision>,
    /// O_d after this frame's registry update.
    pub dynamic_set: BTreeSet<u32>,
    pub labels: BTreeMap<u32, Motion>,
    pub posteriors: BTreeMap<u32, f64>,
    /// Loss-flow features of every entity, background included.
    pub features: BTreeMap<u32, [f64; 2]>,
    pub gmm_components: usize,
    pub coarse_iterations: usize,
    pub fine_iterations: usize,
    pub final_loss: f64,
    pub aborted: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeyframeRender {
    pub index: usize,
    pub color: RgbImage,
    pub depth: DepthImage,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StageTimings {
    pub initialization: f64,
    pub tracking: f64,
    pub keyframe_selection: f64,
    pub mapping: f64,
    pub metrics: f64,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub frames: Vec<FrameRecord>,
    pub flows: Vec<(usize, Vec<LossFlowRecord>)>,
    pub metrics: Vec<MetricsRow>,
    pub keyframe_renders: Vec<KeyframeRender>,
    pub map: GaussianMap,
    pub initial_psnr: f64,
    pub ate: Option<AteReport>,
    pub timings: StageTimings,
}

impl RunReport {
    pub fn trajectory(&self) -> Vec<TimedPose> {
        self.frames
            .iter()
            .map(|f| TimedPose {
                timestamp: f.timestamp,
                pose: f.pose,
            })
            .collect()
    }

    /// Ids that were in O_d at any point of the run.
    pub fn ever_dynamic(&self) -> BTreeSet<u32> {
        self.frames.iter().flat_map(|f| f.dynamic_set.iter().copied()).collect()
    }
}

fn elapsed(t: Instant) -> f64 {
    t.elapsed().as_secs_f64()
}

fn metrics_row(
    map: &GaussianMap,
    frame: &FrameObservation,
    pose: &CameraPose,
    dynamic: &BTreeSet<u32>,
    cfg: &PipelineConfig,
    k: &CameraIntrinsics,
) -> Result<MetricsRow> {
    let rendered = render(map, pose, k, &cfg.render)?;
    let region: Image<bool> = frame.mask.map(|id| !dynamic.contains(id));
    Ok(MetricsRow {
        frame: frame.index,
        psnr: psnr(&rendered.color, &frame.rgb, None)?,
        ssim: ssim(&rendered.color, &frame.rgb)?,
        psnr_static_region: psnr(&rendered.color, &frame.rgb, Some(&region)).unwrap_or(f64::NAN),
        ssim_static_region: ssim_masked(&rendered.color, &frame.rgb, Some(&region)).unwrap_or(f64::NAN),
    })
}

/// Runs the full pipeline over `input`; nothing is written to disk.
pub fn run_pipeline(input: SequenceInput, cfg: &PipelineConfig) -> Result<RunReport> {
    cfg.validate()?;
    let k = input.intrinsics;
    let (coarse_stride, _) = cfg.effective_strides();
    let mut mapper_cfg = cfg.mapper;
    mapper_cfg.densify_stride = cfg.effective_strides().1;
    let mut mapper = Mapper::new(mapper_cfg);
    let mut registry = DynamicObjectRegistry::new(cfg.static_streak);
    let mut classifier = MotionClassifier::new(cfg.classifier);
    let ctx = TrackingContext {
        intrinsics: &k,
        render: &cfg.render,
        loss: &cfg.loss,
        config: &cfg.tracker,
    };
    let mut timings = StageTimings::default();
    let mut frames_out = Vec::new();
    let mut flows = Vec::new();
    let mut metrics = Vec::new();
    let mut renders = Vec::new();

    let mut frames = input.frames;
    let first = frames
        .next()
        .ok_or_else(|| Error::Input("sequence has no frames".into()))?
        .map_err(Error::at(0, "loading"))?;

    let t = Instant::now();
    let pose0 = CameraPose::identity();
    let cloud = back_project(&first, &k, &pose0, coarse_stride).map_err(Error::at(first.index, "initialization"))?;
    let mut map = init_gaussians(&cloud, &mapper.config.gaussian_init()).map_err(Error::at(first.index, "initialization"))?;
    let init = mapper
        .initial_mapping(&mut map, &first, &pose0, &k, &cfg.render, &cfg.loss)
        .map_err(Error::at(first.index, "initial mapping"))?;
    info!(
        "frame {}: initial map of {} primitives, psnr {:.2} dB after {} iterations",
        first.index,
        map.len(),
        init.psnr,
        init.iterations_run
    );
    let r = render(&map, &pose0, &k, &cfg.render).map_err(Error::at(first.index, "rendering"))?;
    renders.push(KeyframeRender {
        index: first.index,
        color: r.color,
        depth: r.depth,
    });
    timings.initialization = elapsed(t);
    if metric_schedule(first.index) {
        let t = Instant::now();
        metrics.push(metrics_row(&map, &first, &pose0, &BTreeSet::new(), cfg, &k).map_err(Error::at(first.index, "metrics"))?);
        timings.metrics += elapsed(t);
    }
    frames_out.push(FrameRecord {
        index: first.index,
        timestamp: first.timestamp,
        pose: pose0,
        keyframe: None,
        dynamic_set: BTreeSet::new(),
        labels: BTreeMap::new(),
        posteriors: BTreeMap::new(),
        features: BTreeMap::new(),
        gmm_components: 0,
        coarse_iterations: 0,
        fine_iterations: 0,
        final_loss: init.final_loss,
        aborted: false,
    });
    mapper.insert_keyframe(Keyframe {
        index: first.index,
        pose: pose0,
        dynamic_ids: BTreeSet::new(),
        frame: first,
    });
    let mut last_kf_pose = pose0;
    let mut pose = pose0;

    for frame in frames {
        let frame = frame.map_err(Error::at(frames_out.len(), "loading"))?;
        let i = frame.index;

        let t = Instant::now();
        let (result, cls) = track_frame(&map, &frame, &pose, &mut registry, &mut classifier, cfg.filtering, &ctx)
            .map_err(Error::at(i, "tracking"))?;
        timings.tracking += elapsed(t);
        pose = result.pose;
        let dynamic_set = registry.dynamic_set();
        debug!(
            "frame {i}: loss {:.5}, {} coarse + {} fine iterations, O_d {:?}",
            result.final_loss, result.coarse_iterations_run, result.fine_iterations_run, dynamic_set
        );

        let t = Instant::now();
        let vis_threshold = mapper.config.visibility_alpha;
        let current = render(&map, &pose, &k, &cfg.render).map_err(Error::at(i, "keyframe selection"))?;
        let last = render(&map, &last_kf_pose, &k, &cfg.render).map_err(Error::at(i, "keyframe selection"))?;
        let decision = keyframe_decision(
            &current.visibility(map.len(), vis_threshold),
            &last.visibility(map.len(), vis_threshold),
            mapper.config.iou_max,
            mapper.config.oc_min,
        );
        timings.keyframe_selection += elapsed(t);

        let mut record = FrameRecord {
            index: i,
            timestamp: frame.timestamp,
            pose,
            keyframe: Some(decision),
            dynamic_set: dynamic_set.clone(),
            labels: cls.labels.clone(),
            posteriors: cls.posteriors.clone(),
            features: cls.features.clone(),
            gmm_components: cls.model.as_ref().map_or(0, |m| m.component_count()),
            coarse_iterations: result.coarse_iterations_run,
            fine_iterations: result.fine_iterations_run,
            final_loss: result.final_loss,
            aborted: result.aborted,
        };
        flows.push((i, result.loss_flows));

        let scheduled = metric_schedule(i);
        if decision.is_keyframe {
            let t = Instant::now();
            mapper.insert_keyframe(Keyframe {
                index: i,
                pose,
                dynamic_ids: dynamic_set.clone(),
                frame: frame.clone(),
            });
            let report = mapper
                .map_update(&mut map, &registry, &k, &cfg.render, &cfg.loss)
                .map_err(Error::at(i, "mapping"))?;
            debug!(
                "frame {i}: keyframe (iou {:.3}, oc {:.3}); pruned {} dynamic + {} transparent, densified {}, {} primitives",
                decision.iou,
                decision.overlap,
                report.pruned_dynamic,
                report.pruned_transparent,
                report.densified,
                map.len()
            );
            last_kf_pose = pose;
            let r = render(&map, &pose, &k, &cfg.render).map_err(Error::at(i, "rendering"))?;
            renders.push(KeyframeRender {
                index: i,
                color: r.color,
                depth: r.depth,
            });
            timings.mapping += elapsed(t);
        }
        if scheduled {
            let t = Instant::now();
            metrics.push(metrics_row(&map, &frame, &pose, &dynamic_set, cfg, &k).map_err(Error::at(i, "metrics"))?);
            timings.metrics += elapsed(t);
        }
        record.pose = pose;
        frames_out.push(record);
    }

    let trajectory: Vec<TimedPose> = frames_out
        .iter()
        .map(|f| TimedPose {
            timestamp: f.timestamp,
            pose: f.pose,
        })
        .collect();
    let ate = if input.ground_truth.is_empty() {
        None
    } else {
        Some(align_and_ate(&trajectory, &input.ground_truth, cfg.association_tolerance).map_err(Error::at(frames_out.len(), "evaluation"))?)
    };
    Ok(RunReport {
        frames: frames_out,
        flows,
        metrics,
        keyframe_renders: renders,
        map,
        initial_psnr: init.psnr,
        ate,
        timings,
    })
}

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    std::fs::File::create(path).map(std::io::BufWriter::new).map_err(|e| Error::io(path, e))
}

pub fn write_flow_csv(path: &Path, flows: &[(usize, Vec<LossFlowRecord>)]) -> Result<()> {
    let mut out = create(path)?;
    (|| {
        writeln!(out, "{FLOW_CSV_HEADER}")?;
        for (frame, records) in flows {
            write_flow_rows(&mut out, *frame, records)?;
        }
        out.flush()
    })()
    .map_err(|e| Error::io(path, e))
}

/// Machine-readable run summary.
pub fn summary_json(report: &RunReport, cfg: &PipelineConfig) -> serde_json::Value {
    let thresholds: serde_json::Map<String, serde_json::Value> =
        cfg.to_pairs().into_iter().map(|(k, v)| (k.to_string(), json!(v))).collect();
    let mut dynamic_frames: BTreeMap<u32, usize> = BTreeMap::new();
    for f in &report.frames {
        for id in &f.dynamic_set {
            *dynamic_frames.entry(*id).or_default() += 1;
        }
    }
    let t = &report.timings;
    json!({
        "version": env!("CARGO_PKG_VERSION"),
        "config_hash": cfg.hash(),
        "config": thresholds,
        "frames": report.frames.len(),
        "keyframes": report.keyframe_renders.iter().map(|r| r.index).collect::<Vec<_>>(),
        "primitives": report.map.len(),
        "map_generation": report.map.generation(),
        "initial_psnr": report.initial_psnr,
        "aborted_frames": report.frames.iter().filter(|f| f.aborted).map(|f| f.index).collect::<Vec<_>>(),
        "frames_in_dynamic_set": dynamic_frames.iter().map(|(k, v)| (k.to_string(), json!(v))).collect::<serde_json::Map<_, _>>(),
        "ate": report.ate.as_ref().map(|a| json!({"rmse": a.rmse, "std": a.std, "mean": a.mean, "matched": a.errors.len()})),
        "timings_s": {
            "initialization": t.initialization,
            "tracking": t.tracking,
            "keyframe_selection": t.keyframe_selection,
            "mapping": t.mapping,
            "metrics": t.metrics,
        },
    })
}

/// Writes trajectory, metrics, loss flows, keyframe renders, map checkpoint, ATE report
/// and summary into `dir`.
pub fn write_outputs(report: &RunReport, cfg: &PipelineConfig, depth_scale: f64, dir: &Path) -> Result<()> {
    let renders = dir.join("renders");
    std::fs::create_dir_all(&renders).map_err(|e| Error::io(&renders, e))?;
    write_trajectory(&report.trajectory(), &dir.join("trajectory.txt"))?;
    write_metrics_csv(&dir.join("metrics.csv"), &report.metrics)?;
    write_flow_csv(&dir.join("loss_flows.csv"), &report.flows)?;
    for r in &report.keyframe_renders {
        rgb_to_png(&r.color, &renders.join(format!("kf_{:05}_rgb.png", r.index)))?;
        depth_to_png(&r.depth, depth_scale, &renders.join(format!("kf_{:05}_depth.png", r.index)))?;
    }
    write_checkpoint(&report.map, &dir.join("map.ckpt"))?;
    if let Some(ate) = &report.ate {
        write_ate_report(&dir.join("ate.txt"), &dir.join("ate_errors.csv"), ate)?;
    }
    let summary = dir.join("summary.json");
    let text = serde_json::to_string_pretty(&summary_json(report, cfg)).expect("summary is valid JSON");
    std::fs::write(&summary, text + "\n").map_err(|e| Error::io(&summary, e))
}
