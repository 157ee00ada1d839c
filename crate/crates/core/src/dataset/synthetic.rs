//! Analytic ray-cast RGB-D sequences: textured planes plus moving spheres and boxes,
//! with exact instance masks and a scripted camera.

use std::collections::BTreeSet;
use std::f64::consts::PI;

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::TimedPose;
use crate::image::Image;
use crate::scene::{CameraIntrinsics, CameraPose, FrameObservation, BACKGROUND_ID};

/// Sum of two sinusoids per channel over in-plane coordinates (meters).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Texture {
    pub base: [f64; 3],
    pub amplitude: [f64; 3],
    /// Spatial frequency in cycles per meter.
    pub frequency: f64,
    pub phase: f64,
}

impl Texture {
    fn sample(&self, s: f64, t: f64) -> [f64; 3] {
        let w = 2.0 * PI * self.frequency;
        let mut c = [0.0; 3];
        for (k, out) in c.iter_mut().enumerate() {
            let shift = self.phase + k as f64 * 2.1;
            let v = (w * s + shift).sin() * 0.6 + (w * 1.7 * t - 0.8 * shift).cos() * 0.4
                + 0.3 * (w * 0.6 * (s + t) + shift).sin();
            *out = (self.base[k] + self.amplitude[k] * v / 1.3).clamp(0.0, 1.0);
        }
        c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlaneSpec {
    pub point: [f64; 3],
    pub normal: [f64; 3],
    pub texture: Texture,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Sphere { radius: f64 },
    /// Axis-aligned box.
    Cuboid { half_extents: [f64; 3] },
}

/// Position at a frame index; positions between keys are linearly interpolated and
/// held constant outside the scripted range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PositionKey {
    pub frame: f64,
    pub position: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub id: u32,
    pub shape: Shape,
    pub texture: Texture,
    pub motion: Vec<PositionKey>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraKey {
    pub frame: f64,
    pub position: [f64; 3],
    pub look_at: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub photometric_sigma: f64,
    pub depth_sigma: f64,
    pub depth_dropout: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSceneSpec {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub frame_count: usize,
    pub frame_rate: f64,
    pub planes: Vec<PlaneSpec>,
    pub objects: Vec<ObjectSpec>,
    pub camera: Vec<CameraKey>,
    #[serde(default)]
    pub noise: NoiseSpec,
    /// Color samples per pixel side; color is averaged over the pixel area while depth and
    /// mask come from the pixel center.
    #[serde(default = "default_supersample")]
    pub supersample: usize,
}

fn default_supersample() -> usize {
    1
}

fn interpolate<T, F: Fn(&T) -> f64>(keys: &[T], frame: f64, key_frame: F) -> (usize, usize, f64) {
    if keys.len() == 1 || frame <= key_frame(&keys[0]) {
        return (0, 0, 0.0);
    }
    for i in 0..keys.len() - 1 {
        let (a, b) = (key_frame(&keys[i]), key_frame(&keys[i + 1]));
        if frame <= b {
            let t = if b > a { (frame - a) / (b - a) } else { 1.0 };
            return (i, i + 1, t);
        }
    }
    let last = keys.len() - 1;
    (last, last, 0.0)
}

fn lerp3(a: [f64; 3], b: [f64; 3], t: f64) -> Vector3<f64> {
    Vector3::from(a) * (1.0 - t) + Vector3::from(b) * t
}

impl ObjectSpec {
    pub fn position_at(&self, frame: f64) -> Vector3<f64> {
        let (i, j, t) = interpolate(&self.motion, frame, |k| k.frame);
        lerp3(self.motion[i].position, self.motion[j].position, t)
    }
}

/// Camera looking from `position` to `target` with image y pointing along world +y
/// as closely as possible.
pub fn look_at(position: Vector3<f64>, target: Vector3<f64>) -> CameraPose {
    let z = (target - position).normalize();
    let down = Vector3::y();
    let x = down.cross(&z);
    let x = if x.norm() < 1e-9 { Vector3::x() } else { x.normalize() };
    let y = z.cross(&x);
    let r_cw = Matrix3::from_columns(&[x, y, z]);
    let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(r_cw));
    CameraPose::from_camera_to_world(position, q)
}

impl SyntheticSceneSpec {
    pub fn intrinsics(&self) -> Result<CameraIntrinsics> {
        CameraIntrinsics::new(self.fx, self.fy, self.cx, self.cy, self.width, self.height, 5000.0)
    }

    pub fn camera_at(&self, frame: f64) -> CameraPose {
        let (i, j, t) = interpolate(&self.camera, frame, |k| k.frame);
        let (a, b) = (&self.camera[i], &self.camera[j]);
        look_at(lerp3(a.position, b.position, t), lerp3(a.look_at, b.look_at, t))
    }

    pub fn timestamp(&self, frame: usize) -> f64 {
        frame as f64 / self.frame_rate
    }

    /// Checks the scene description, naming the offending field on failure.
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(Error::Config(format!("{field}: {why}")));
        if self.width == 0 || self.height == 0 {
            return bad("width/height", "must be positive");
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return bad("fx/fy", "must be positive");
        }
        self.intrinsics()?;
        if self.frame_count < 2 {
            return bad("frame_count", "must be at least 2");
        }
        if !(self.frame_rate > 0.0) {
            return bad("frame_rate", "must be positive");
        }
        if self.camera.is_empty() {
            return bad("camera", "needs at least one key");
        }
        let mut ids = BTreeSet::new();
        for o in &self.objects {
            if o.id == BACKGROUND_ID {
                return bad("objects.id", "object ids must be at least 1");
            }
            if !ids.insert(o.id) {
                return bad("objects.id", &format!("duplicate object id {}", o.id));
            }
            if o.motion.is_empty() {
                return bad("objects.motion", &format!("object {} has no position key", o.id));
            }
            let ok = match o.shape {
                Shape::Sphere { radius } => radius > 0.0,
                Shape::Cuboid { half_extents } => half_extents.iter().all(|h| *h > 0.0),
            };
            if !ok {
                return bad("objects.shape", &format!("object {} has a non-positive size", o.id));
            }
        }
        for p in &self.planes {
            if Vector3::from(p.normal).norm() < 1e-12 {
                return bad("planes.normal", "must be non-zero");
            }
        }
        let n = &self.noise;
        if n.photometric_sigma < 0.0 || n.depth_sigma < 0.0 || !(0.0..=1.0).contains(&n.depth_dropout) {
            return bad("noise", "sigmas must be non-negative and dropout in [0, 1]");
        }
        Ok(())
    }
}

struct Hit {
    t: f64,
    color: [f64; 3],
    id: u32,
}

fn in_plane_axes(n: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let helper = if n.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let a = n.cross(&helper).normalize();
    let b = n.cross(&a);
    (a, b)
}

fn intersect_plane(p: &PlaneSpec, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<Hit> {
    let n = Vector3::from(p.normal).normalize();
    let denom = n.dot(d);
    if denom.abs() < 1e-12 {
        return None;
    }
    let t = n.dot(&(Vector3::from(p.point) - o)) / denom;
    if t <= 1e-9 {
        return None;
    }
    let x = o + d * t - Vector3::from(p.point);
    let (a, b) = in_plane_axes(&n);
    Some(Hit {
        t,
        color: p.texture.sample(x.dot(&a), x.dot(&b)),
        id: BACKGROUND_ID,
    })
}

fn intersect_object(obj: &ObjectSpec, center: &Vector3<f64>, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<Hit> {
    let oc = o - center;
    let (t, local) = match obj.shape {
        Shape::Sphere { radius } => {
            let a = d.norm_squared();
            let b = 2.0 * oc.dot(d);
            let c = oc.norm_squared() - radius * radius;
            let disc = b * b - 4.0 * a * c;
            if disc < 0.0 {
                return None;
            }
            let t = (-b - disc.sqrt()) / (2.0 * a);
            if t <= 1e-9 {
                return None;
            }
            (t, oc + d * t)
        }
        Shape::Cuboid { half_extents } => {
            let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
            for k in 0..3 {
                if d[k].abs() < 1e-15 {
                    if oc[k].abs() > half_extents[k] {
                        return None;
                    }
                    continue;
                }
                let mut a = (-half_extents[k] - oc[k]) / d[k];
                let mut b = (half_extents[k] - oc[k]) / d[k];
                if a > b {
                    std::mem::swap(&mut a, &mut b);
                }
                t0 = t0.max(a);
                t1 = t1.min(b);
            }
            if t0 > t1 || t0 <= 1e-9 {
                return None;
            }
            (t0, oc + d * t0)
        }
    };
    // object texture lives in object coordinates so it moves rigidly with the object
    let s = local.x + 0.5 * local.z;
    let u = local.y - 0.5 * local.z;
    Some(Hit {
        t,
        color: obj.texture.sample(s, u),
        id: obj.id,
    })
}

/// Ground-truth frame before noise.
fn render_clean(spec: &SyntheticSceneSpec, frame: usize) -> Result<(FrameObservation, CameraPose)> {
    let k = spec.intrinsics()?;
    let pose = spec.camera_at(frame as f64);
    let r_cw = pose.rotation.inverse();
    let origin = pose.center();
    let centers: Vec<Vector3<f64>> = spec.objects.iter().map(|o| o.position_at(frame as f64)).collect();
    let (w, h) = (spec.width, spec.height);
    let mut rgb = Image::filled(w, h, [0.0; 3]);
    let mut depth = Image::filled(w, h, 0.0);
    let mut mask = Image::filled(w, h, BACKGROUND_ID);
    let cast = |u: f64, v: f64| -> Option<Hit> {
        // camera ray with unit z, so the hit parameter equals z-depth
        let dc = Vector3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0);
        let d = r_cw * dc;
        spec.planes
            .iter()
            .filter_map(|p| intersect_plane(p, &origin, &d))
            .chain(
                spec.objects
                    .iter()
                    .zip(&centers)
                    .filter_map(|(o, c)| intersect_object(o, c, &origin, &d)),
            )
            .min_by(|a, b| a.t.total_cmp(&b.t))
    };
    let s = spec.supersample.max(1);
    for v in 0..h {
        for u in 0..w {
            if let Some(hit) = cast(u as f64, v as f64) {
                *depth.get_mut(u, v) = hit.t;
                *mask.get_mut(u, v) = hit.id;
                if s == 1 {
                    *rgb.get_mut(u, v) = hit.color;
                }
            }
            if s == 1 {
                continue;
            }
            let mut acc = [0.0; 3];
            for a in 0..s {
                for b in 0..s {
                    let du = (b as f64 + 0.5) / s as f64 - 0.5;
                    let dv = (a as f64 + 0.5) / s as f64 - 0.5;
                    if let Some(hit) = cast(u as f64 + du, v as f64 + dv) {
                        for (c, x) in acc.iter_mut().zip(hit.color) {
                            *c += x;
                        }
                    }
                }
            }
            let n = (s * s) as f64;
            *rgb.get_mut(u, v) = acc.map(|c| c / n);
        }
    }
    let obs = FrameObservation::new(frame, spec.timestamp(frame), rgb, depth, mask)?;
    Ok((obs, pose))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSequence {
    pub intrinsics: CameraIntrinsics,
    pub frames: Vec<FrameObservation>,
    pub ground_truth: Vec<TimedPose>,
}

/// Renders every frame of `spec` and applies the configured noise with `seed`.
pub fn generate_synthetic(spec: &SyntheticSceneSpec, seed: u64) -> Result<SyntheticSequence> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = &spec.noise;
    let normal = Normal::new(0.0, 1.0).map_err(|e| Error::Input(e.to_string()))?;
    let mut frames = Vec::with_capacity(spec.frame_count);
    let mut ground_truth = Vec::with_capacity(spec.frame_count);
    for i in 0..spec.frame_count {
        let (mut f, pose) = render_clean(spec, i)?;
        if n.photometric_sigma > 0.0 {
            for px in f.rgb.as_mut_slice() {
                for c in px.iter_mut() {
                    *c = (*c + n.photometric_sigma * normal.sample(&mut rng)).clamp(0.0, 1.0);
                }
            }
        }
        if n.depth_sigma > 0.0 || n.depth_dropout > 0.0 {
            for d in f.depth.as_mut_slice() {
                if *d <= 0.0 {
                    continue;
                }
                if n.depth_dropout > 0.0 && rng.random::<f64>() < n.depth_dropout {
                    *d = 0.0;
                } else if n.depth_sigma > 0.0 {
                    *d = (*d + n.depth_sigma * normal.sample(&mut rng)).max(1e-3);
                }
            }
        }
        ground_truth.push(TimedPose {
            timestamp: f.timestamp,
            pose,
        });
        frames.push(f);
    }
    Ok(SyntheticSequence {
        intrinsics: spec.intrinsics()?,
        frames,
        ground_truth,
    })
}

/// Parameters of the built-in desk scene.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeskScene {
    pub width: usize,
    pub height: usize,
    pub frame_count: usize,
    /// Peak-to-peak lateral travel of the moving box; 0 keeps it still.
    pub mover_travel: f64,
    /// Frames per one-way leg of the mover's back-and-forth motion.
    pub mover_leg_frames: f64,
    /// Horizontal arc angle swept by the camera over the sequence (radians).
    pub camera_arc: f64,
    /// Distance from the camera to the point it orbits and looks at.
    pub orbit_radius: f64,
    /// Depth of the orbited point.
    pub orbit_depth: f64,
    /// Texture frequency of the room walls (cycles per meter).
    pub wall_frequency: f64,
    pub supersample: usize,
    pub noise: NoiseSpec,
    /// Varies textures, the mover's direction and the arc direction.
    pub variant: u64,
}

impl Default for DeskScene {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            frame_count: 60,
            mover_travel: 0.5,
            mover_leg_frames: 8.0,
            camera_arc: 0.35,
            orbit_radius: 1.05,
            orbit_depth: 1.25,
            wall_frequency: 3.6,
            supersample: 3,
            noise: NoiseSpec::default(),
            variant: 0,
        }
    }
}

impl DeskScene {
    /// A closed room, one large box carried back and forth above the floor (id 1) and
    /// two static objects standing on the floor below its sweep (ids 2 and 3).
    pub fn build(&self) -> SyntheticSceneSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(0xD35C ^ self.variant);
        let wf = self.wall_frequency;
        let mut tex = |base: [f64; 3], freq: f64| Texture {
            base,
            amplitude: [0.3, 0.3, 0.3],
            frequency: freq * rng.random_range(0.85..1.15),
            phase: rng.random_range(0.0..2.0 * PI),
        };
        let planes = vec![
            PlaneSpec { point: [0.0, 0.0, 2.2], normal: [0.0, 0.0, -1.0], texture: tex([0.55, 0.5, 0.45], 1.6 / 1.8 * wf) },
            PlaneSpec { point: [0.0, 0.55, 0.0], normal: [0.0, -1.0, 0.0], texture: tex([0.45, 0.4, 0.35], 2.0 / 1.8 * wf) },
            PlaneSpec { point: [-1.3, 0.0, 0.0], normal: [1.0, 0.0, 0.0], texture: tex([0.4, 0.5, 0.55], 1.8 / 1.8 * wf) },
            PlaneSpec { point: [1.3, 0.0, 0.0], normal: [-1.0, 0.0, 0.0], texture: tex([0.5, 0.55, 0.4], 1.8 / 1.8 * wf) },
            PlaneSpec { point: [0.0, -1.2, 0.0], normal: [0.0, 1.0, 0.0], texture: tex([0.6, 0.6, 0.6], 1.5 / 1.8 * wf) },
        ];
        let dir = if self.variant % 2 == 0 { 1.0 } else { -1.0 };
        let half = 0.5 * self.mover_travel;
        let center = [0.0, -0.12, 1.25];
        let mut motion = Vec::new();
        let mut f = 0.0;
        let mut sign = dir;
        motion.push(PositionKey { frame: 0.0, position: [center[0] - sign * half, center[1], center[2]] });
        while f < self.frame_count as f64 {
            f += self.mover_leg_frames.max(1.0);
            motion.push(PositionKey { frame: f, position: [center[0] + sign * half, center[1], center[2]] });
            sign = -sign;
        }
        let objects = vec![
            ObjectSpec {
                id: 1,
                shape: Shape::Cuboid { half_extents: [0.24, 0.22, 0.12] },
                texture: tex([0.75, 0.3, 0.25], 5.0),
                motion,
            },
            ObjectSpec {
                id: 2,
                shape: Shape::Sphere { radius: 0.13 },
                texture: tex([0.25, 0.55, 0.8], 4.0),
                motion: vec![PositionKey { frame: 0.0, position: [-0.5, 0.42, 1.7] }],
            },
            ObjectSpec {
                id: 3,
                shape: Shape::Cuboid { half_extents: [0.12, 0.15, 0.12] },
                texture: tex([0.3, 0.75, 0.35], 4.5),
                motion: vec![PositionKey { frame: 0.0, position: [0.55, 0.4, 1.75] }],
            },
        ];
        let radius = self.orbit_radius;
        let target = [0.0, 0.15, self.orbit_depth];
        let a_dir = if self.variant % 3 == 1 { -1.0 } else { 1.0 };
        let last = (self.frame_count.max(2) - 1) as f64;
        let steps = 6;
        let camera = (0..=steps)
            .map(|i| {
                let s = i as f64 / steps as f64;
                // ease in and out so the arc starts and ends smoothly
                let a = a_dir * self.camera_arc * (0.5 - 0.5 * (PI * s).cos() - 0.5);
                CameraKey {
                    frame: s * last,
                    position: [
                        target[0] + radius * a.sin(),
                        -0.05 - 0.05 * (PI * s).sin(),
                        target[2] - radius * a.cos(),
                    ],
                    look_at: target,
                }
            })
            .collect();
        let fx = 0.9 * self.width as f64;
        SyntheticSceneSpec {
            width: self.width,
            height: self.height,
            fx,
            fy: fx,
            cx: (self.width as f64 - 1.0) / 2.0,
            cy: (self.height as f64 - 1.0) / 2.0,
            frame_count: self.frame_count,
            frame_rate: 30.0,
            planes,
            objects,
            camera,
            noise: self.noise,
            supersample: self.supersample,
        }
    }
}
