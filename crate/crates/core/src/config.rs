//! Run configuration: a line-based `key = value` file with presets and overrides.

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::dynamic::ClassifierConfig;
use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::mapper::MapperConfig;
use crate::render::RenderSettings;
use crate::scene::CameraIntrinsics;
use crate::tracker::{Optimizer, TrackerConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Tum,
    Bonn,
    Synthetic,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Tum => "tum",
            Preset::Bonn => "bonn",
            Preset::Synthetic => "synthetic",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "tum" => Ok(Preset::Tum),
            "bonn" => Ok(Preset::Bonn),
            "synthetic" => Ok(Preset::Synthetic),
            other => Err(Error::Config(format!("preset: unknown preset `{other}`"))),
        }
    }
}

/// Named full-resolution camera models of the public RGB-D benchmarks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CameraModel {
    Fr1,
    Fr2,
    Fr3,
    Bonn,
}

impl CameraModel {
    pub fn name(self) -> &'static str {
        match self {
            CameraModel::Fr1 => "fr1",
            CameraModel::Fr2 => "fr2",
            CameraModel::Fr3 => "fr3",
            CameraModel::Bonn => "bonn",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fr1" => Ok(CameraModel::Fr1),
            "fr2" => Ok(CameraModel::Fr2),
            "fr3" => Ok(CameraModel::Fr3),
            "bonn" => Ok(CameraModel::Bonn),
            other => Err(Error::Config(format!("camera: unknown camera model `{other}`"))),
        }
    }

    /// 640×480 intrinsics with the 5000 units-per-meter depth encoding.
    pub fn intrinsics(self) -> CameraIntrinsics {
        let (fx, fy, cx, cy) = match self {
            CameraModel::Fr1 => (517.3, 516.5, 318.6, 255.3),
            CameraModel::Fr2 => (520.9, 521.0, 325.1, 249.7),
            CameraModel::Fr3 => (535.4, 539.2, 320.1, 247.6),
            CameraModel::Bonn => (542.822841, 542.576870, 315.593520, 237.756098),
        };
        CameraIntrinsics::new(fx, fy, cx, cy, 640, 480, 5000.0).expect("preset intrinsics are valid")
    }
}

/// Grid step whose sample density is one pixel in `factor`.
pub fn stride_for_factor(factor: usize) -> usize {
    ((factor as f64).sqrt().round() as usize).max(1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub dataset: Option<PathBuf>,
    /// JSON scene description; used when no dataset is given.
    pub synthetic_spec: Option<PathBuf>,
    pub output: PathBuf,
    pub preset: Preset,
    pub camera: CameraModel,
    /// Dynamic-object filtering; when off every object stays in the objectives.
    pub filtering: bool,
    pub loss: LossConfig,
    pub classifier: ClassifierConfig,
    pub static_streak: u32,
    pub tracker: TrackerConfig,
    /// Includes keyframe thresholds, the fine (densification) stride and the mapper seed.
    pub mapper: MapperConfig,
    /// Pixel step of the cloud that seeds the map from the first frame.
    pub coarse_stride: usize,
    pub render: RenderSettings,
    pub association_tolerance: f64,
    pub frame_step: usize,
    pub downscale: usize,
    pub max_frames: Option<usize>,
    pub synthetic_seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self::preset(Preset::Tum)
    }
}

const KEYS: &[&str] = &[
    "dataset",
    "synthetic_spec",
    "output",
    "preset",
    "camera",
    "filtering",
    "lambda_lo",
    "lambda_up",
    "theta",
    "gmm_history_frames",
    "gmm_min_samples",
    "gmm_seed",
    "static_streak",
    "optimizer",
    "coarse_iterations",
    "rotation_step",
    "translation_step",
    "fine_max_iterations",
    "fine_relative_tolerance",
    "fine_patience",
    "iou_max",
    "oc_min",
    "window_capacity",
    "mapping_iterations",
    "initial_iterations",
    "sampled_frames",
    "densify_alpha",
    "prune_opacity",
    "visibility_alpha",
    "coarse_stride",
    "fine_stride",
    "scale_coefficient",
    "initial_opacity",
    "lr_mean",
    "lr_log_scale",
    "lr_orientation",
    "lr_logit_opacity",
    "lr_color",
    "mapper_seed",
    "association_tolerance",
    "frame_step",
    "downscale",
    "max_frames",
    "synthetic_seed",
];

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got `{value}`"))),
    }
}

fn opt_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl PipelineConfig {
    pub fn preset(preset: Preset) -> Self {
        let (camera, coarse, fine, scale) = match preset {
            Preset::Tum => (CameraModel::Fr3, 128, 32, 0.01),
            Preset::Bonn => (CameraModel::Bonn, 256, 64, 0.01),
            Preset::Synthetic => (CameraModel::Fr3, 4, 4, 0.02),
        };
        let mapper = MapperConfig {
            densify_stride: stride_for_factor(fine),
            scale_coefficient: scale,
            ..MapperConfig::default()
        };
        Self {
            dataset: None,
            synthetic_spec: None,
            output: PathBuf::from("out"),
            preset,
            camera,
            filtering: true,
            loss: LossConfig::default(),
            classifier: ClassifierConfig::default(),
            static_streak: crate::dynamic::DEFAULT_STATIC_STREAK,
            tracker: TrackerConfig::default(),
            mapper,
            coarse_stride: stride_for_factor(coarse),
            render: RenderSettings::default(),
            association_tolerance: crate::dataset::tum::DEFAULT_ASSOCIATION_TOLERANCE,
            frame_step: 1,
            downscale: 1,
            max_frames: None,
            synthetic_seed: 1,
        }
    }

    /// Sets one key; `preset` is only accepted through [`PipelineConfig::from_pairs`].
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.mapper;
        match key {
            "dataset" => self.dataset = (!value.is_empty()).then(|| PathBuf::from(value)),
            "synthetic_spec" => self.synthetic_spec = (!value.is_empty()).then(|| PathBuf::from(value)),
            "output" => self.output = PathBuf::from(value),
            "preset" => {
                if Preset::parse(value)? != self.preset {
                    return Err(Error::Config("preset: must be applied before other keys".into()));
                }
            }
            "camera" => self.camera = CameraModel::parse(value)?,
            "filtering" => self.filtering = parse_bool(key, value)?,
            "lambda_lo" => self.loss.lambda_lo = parse_num(key, value)?,
            "lambda_up" => self.loss.lambda_up = parse_num(key, value)?,
            "theta" => self.classifier.theta = parse_num(key, value)?,
            "gmm_history_frames" => self.classifier.history_frames = parse_num(key, value)?,
            "gmm_min_samples" => self.classifier.min_samples = parse_num(key, value)?,
            "gmm_seed" => self.classifier.seed = parse_num(key, value)?,
            "static_streak" => self.static_streak = parse_num(key, value)?,
            "optimizer" => self.tracker.optimizer = Optimizer::parse(value)?,
            "coarse_iterations" => self.tracker.coarse_iterations = parse_num(key, value)?,
            "rotation_step" => self.tracker.rotation_step = parse_num(key, value)?,
            "translation_step" => self.tracker.translation_step = parse_num(key, value)?,
            "fine_max_iterations" => self.tracker.fine_max_iterations = parse_num(key, value)?,
            "fine_relative_tolerance" => self.tracker.fine_relative_tolerance = parse_num(key, value)?,
            "fine_patience" => self.tracker.fine_patience = parse_num(key, value)?,
            "iou_max" => m.iou_max = parse_num(key, value)?,
            "oc_min" => m.oc_min = parse_num(key, value)?,
            "window_capacity" => m.window_capacity = parse_num(key, value)?,
            "mapping_iterations" => m.iterations = parse_num(key, value)?,
            "initial_iterations" => m.initial_iterations = parse_num(key, value)?,
            "sampled_frames" => m.sampled_frames = parse_num(key, value)?,
            "densify_alpha" => m.densify_alpha = parse_num(key, value)?,
            "prune_opacity" => m.prune_opacity = parse_num(key, value)?,
            "visibility_alpha" => m.visibility_alpha = parse_num(key, value)?,
            "coarse_stride" => self.coarse_stride = parse_num(key, value)?,
            "fine_stride" => m.densify_stride = parse_num(key, value)?,
            "scale_coefficient" => m.scale_coefficient = parse_num(key, value)?,
            "initial_opacity" => m.initial_opacity = parse_num(key, value)?,
            "lr_mean" => m.learning_rates.mean = parse_num(key, value)?,
            "lr_log_scale" => m.learning_rates.log_scale = parse_num(key, value)?,
            "lr_orientation" => m.learning_rates.orientation = parse_num(key, value)?,
            "lr_logit_opacity" => m.learning_rates.logit_opacity = parse_num(key, value)?,
            "lr_color" => m.learning_rates.color = parse_num(key, value)?,
            "mapper_seed" => m.seed = parse_num(key, value)?,
            "association_tolerance" => self.association_tolerance = parse_num(key, value)?,
            "frame_step" => self.frame_step = parse_num(key, value)?,
            "downscale" => self.downscale = parse_num(key, value)?,
            "max_frames" => {
                self.max_frames = match value {
                    "" | "all" => None,
                    v => Some(parse_num(key, v)?),
                }
            }
            "synthetic_seed" => self.synthetic_seed = parse_num(key, value)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Starts from the last `preset` pair (default TUM), then applies every other pair in order.
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)> + Clone) -> Result<Self> {
        let preset = pairs
            .clone()
            .into_iter()
            .filter(|(k, _)| *k == "preset")
            .last()
            .map(|(_, v)| Preset::parse(v))
            .transpose()?
            .unwrap_or(Preset::Tum);
        let mut cfg = Self::preset(preset);
        for (k, v) in pairs {
            if k != "preset" {
                cfg.set(k, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses `key = value` lines (`#` starts a comment) followed by `overrides` in
    /// `key=value` form.
    pub fn parse(text: &str, path: &Path, overrides: &[String]) -> Result<Self> {
        let mut pairs = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::parse(path, n + 1, "expected `key = value`"));
            };
            let k = k.trim();
            if !KEYS.contains(&k) {
                return Err(Error::parse(path, n + 1, format!("unknown key `{k}`")));
            }
            pairs.push((k, v.trim()));
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            pairs.push((k.trim(), v.trim()));
        }
        Self::from_pairs(pairs)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |key: &str, msg: &str| Err(Error::Config(format!("{key}: {msg}")));
        let l = &self.loss;
        if !(0.0 <= l.lambda_lo && l.lambda_lo <= l.lambda_up && l.lambda_up <= 1.0) {
            return fail("lambda_lo", "need 0 <= lambda_lo <= lambda_up <= 1");
        }
        if !(self.classifier.theta > 0.0 && self.classifier.theta < 1.0) {
            return fail("theta", "must lie in (0, 1)");
        }
        if self.classifier.history_frames == 0 {
            return fail("gmm_history_frames", "must be at least 1");
        }
        if self.classifier.min_samples < 2 {
            return fail("gmm_min_samples", "must be at least 2");
        }
        if self.tracker.coarse_iterations < 2 {
            return fail("coarse_iterations", "must be at least 2");
        }
        if !(self.tracker.rotation_step > 0.0 && self.tracker.translation_step > 0.0) {
            return fail("rotation_step", "step sizes must be positive");
        }
        if self.tracker.fine_patience == 0 {
            return fail("fine_patience", "must be at least 1");
        }
        let m = &self.mapper;
        if !(m.iou_max > 0.0 && m.iou_max <= 1.0) {
            return fail("iou_max", "must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&m.oc_min) {
            return fail("oc_min", "must lie in [0, 1]");
        }
        if m.window_capacity == 0 {
            return fail("window_capacity", "must be at least 1");
        }
        if self.coarse_stride == 0 {
            return fail("coarse_stride", "must be at least 1");
        }
        if m.densify_stride == 0 {
            return fail("fine_stride", "must be at least 1");
        }
        if !(m.scale_coefficient > 0.0) {
            return fail("scale_coefficient", "must be positive");
        }
        if !(m.initial_opacity > 0.0 && m.initial_opacity < 1.0) {
            return fail("initial_opacity", "must lie in (0, 1)");
        }
        if self.frame_step == 0 {
            return fail("frame_step", "must be at least 1");
        }
        if self.downscale == 0 {
            return fail("downscale", "must be at least 1");
        }
        if self.max_frames == Some(0) {
            return fail("max_frames", "must be at least 1");
        }
        if self.association_tolerance < 0.0 {
            return fail("association_tolerance", "must be non-negative");
        }
        Ok(())
    }

    /// Every key with its effective value, in a fixed order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let m = &self.mapper;
        let lr = &m.learning_rates;
        let values = [
            opt_path(&self.dataset),
            opt_path(&self.synthetic_spec),
            self.output.display().to_string(),
            self.preset.name().to_string(),
            self.camera.name().to_string(),
            self.filtering.to_string(),
            self.loss.lambda_lo.to_string(),
            self.loss.lambda_up.to_string(),
            self.classifier.theta.to_string(),
            self.classifier.history_frames.to_string(),
            self.classifier.min_samples.to_string(),
            self.classifier.seed.to_string(),
            self.static_streak.to_string(),
            self.tracker.optimizer.name().to_string(),
            self.tracker.coarse_iterations.to_string(),
            self.tracker.rotation_step.to_string(),
            self.tracker.translation_step.to_string(),
            self.tracker.fine_max_iterations.to_string(),
            self.tracker.fine_relative_tolerance.to_string(),
            self.tracker.fine_patience.to_string(),
            m.iou_max.to_string(),
            m.oc_min.to_string(),
            m.window_capacity.to_string(),
            m.iterations.to_string(),
            m.initial_iterations.to_string(),
            m.sampled_frames.to_string(),
            m.densify_alpha.to_string(),
            m.prune_opacity.to_string(),
            m.visibility_alpha.to_string(),
            self.coarse_stride.to_string(),
            m.densify_stride.to_string(),
            m.scale_coefficient.to_string(),
            m.initial_opacity.to_string(),
            lr.mean.to_string(),
            lr.log_scale.to_string(),
            lr.orientation.to_string(),
            lr.logit_opacity.to_string(),
            lr.color.to_string(),
            m.seed.to_string(),
            self.association_tolerance.to_string(),
            self.frame_step.to_string(),
            self.downscale.to_string(),
            self.max_frames.map(|n| n.to_string()).unwrap_or_else(|| "all".into()),
            self.synthetic_seed.to_string(),
        ];
        KEYS.iter().copied().zip(values).collect()
    }

    /// The configuration as a file that [`PipelineConfig::parse`] reads back unchanged.
    pub fn to_text(&self) -> String {
        self.to_pairs()
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// SHA-256 of [`PipelineConfig::to_text`], hex encoded.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Pixel steps after accounting for image downscaling.
    pub fn effective_strides(&self) -> (usize, usize) {
        let f = |s: usize| ((s as f64 / self.downscale as f64).round() as usize).max(1);
        (f(self.coarse_stride), f(self.mapper.densify_stride))
    }
}
