//! Scene representation: camera geometry, RGB-D frames with instance masks,
//! labeled point clouds and the Gaussian map built from them.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{depth_is_valid, DepthImage, LabelImage, Rgb, RgbImage};

/// Object id reserved for the background.
pub const BACKGROUND_ID: u32 = 0;

/// Pinhole intrinsics. Pixel `(u, v)` has its center at integer coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// Raw depth units per meter (5000 for TUM 16-bit PNGs).
    pub depth_scale: f64,
}

impl CameraIntrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        depth_scale: f64,
    ) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            depth_scale,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx >= 0.0
            && self.cx < self.width as f64
            && self.cy >= 0.0
            && self.cy < self.height as f64
            && self.depth_scale > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Input(format!("invalid camera intrinsics {self:?}")))
        }
    }

    /// Projects a camera-frame point to pixel coordinates.
    #[inline]
    pub fn project(&self, p: &Vector3<f64>) -> [f64; 2] {
        [
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        ]
    }

    /// Camera-frame point at pixel `(u, v)` with z-depth `z`.
    #[inline]
    pub fn unproject(&self, u: f64, v: f64, z: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) * z / self.fx, (v - self.cy) * z / self.fy, z)
    }

    /// Returns intrinsics for an image downscaled by an integer factor.
    pub fn downscaled(&self, factor: usize) -> Self {
        let f = factor as f64;
        Self {
            fx: self.fx / f,
            fy: self.fy / f,
            cx: (self.cx + 0.5) / f - 0.5,
            cy: (self.cy + 0.5) / f - 0.5,
            width: self.width / factor,
            height: self.height / factor,
            depth_scale: self.depth_scale,
        }
    }
}

/// Rigid world→camera transform: `p_cam = rotation * p_world + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    pub rotation: Rotation3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for CameraPose {
    fn default() -> Self {
        Self::identity()
    }
}

impl CameraPose {
    pub fn identity() -> Self {
        Self {
            rotation: Rotation3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Rotation3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    /// Builds a pose from a raw matrix, rejecting anything that is not a proper rotation.
    pub fn from_matrix(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let orth = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        let det = rotation.determinant();
        if orth > 1e-6 || (det - 1.0).abs() > 1e-6 || !translation.iter().all(|x| x.is_finite()) {
            return Err(Error::Input(format!(
                "not a rigid transform (orthogonality error {orth:.3e}, det {det})"
            )));
        }
        Ok(Self {
            rotation: Rotation3::from_matrix_unchecked(rotation),
            translation,
        })
    }

    /// Pose from a camera-to-world position and orientation (TUM trajectory convention).
    pub fn from_camera_to_world(position: Vector3<f64>, orientation: UnitQuaternion<f64>) -> Self {
        let rotation = orientation.to_rotation_matrix().inverse();
        Self {
            rotation,
            translation: -(rotation * position),
        }
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.inverse() * self.translation)
    }

    /// Camera-to-world orientation.
    pub fn orientation_camera_to_world(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_rotation_matrix(&self.rotation.inverse())
    }

    #[inline]
    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    #[inline]
    pub fn inverse_transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.inverse() * (p - self.translation)
    }

    pub fn inverse(&self) -> Self {
        let r = self.rotation.inverse();
        Self {
            rotation: r,
            translation: -(r * self.translation),
        }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &CameraPose) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// Left-multiplied tangent update `(ω, v)`: rotation part first, then translation.
    ///
    /// The first-order change of a camera-frame point is `ω × p + v`, which is the
    /// convention the renderer's pose gradient uses.
    pub fn retract(&self, xi: &[f64; 6]) -> Self {
        let dr = Rotation3::new(Vector3::new(xi[0], xi[1], xi[2]));
        let dt = Vector3::new(xi[3], xi[4], xi[5]);
        Self {
            rotation: dr * self.rotation,
            translation: dr * self.translation + dt,
        }
    }

    pub fn validate(&self) -> Result<()> {
        Self::from_matrix(*self.rotation.matrix(), self.translation).map(|_| ())
    }

    /// Re-orthonormalizes the rotation after long chains of updates.
    pub fn renormalized(&self) -> Self {
        let q = UnitQuaternion::from_rotation_matrix(&self.rotation);
        Self {
            rotation: q.to_rotation_matrix(),
            translation: self.translation,
        }
    }

    /// Translation distance and rotation angle (radians) between camera centers/orientations.
    pub fn distance_to(&self, other: &CameraPose) -> (f64, f64) {
        let dt = (self.center() - other.center()).norm();
        let dr = (self.rotation.inverse() * other.rotation).angle();
        (dt, dr)
    }
}

/// One 3D Gaussian. Covariance is `R(q) diag(scale²) R(q)ᵀ` in world space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianPrimitive {
    pub mean: Vector3<f64>,
    /// Per-axis standard deviations in meters.
    pub scale: Vector3<f64>,
    pub orientation: UnitQuaternion<f64>,
    pub opacity: f64,
    pub color: Vector3<f64>,
    pub object_id: u32,
}

impl GaussianPrimitive {
    pub fn covariance(&self) -> Matrix3<f64> {
        let r = self.orientation.to_rotation_matrix();
        let s2 = Matrix3::from_diagonal(&self.scale.component_mul(&self.scale));
        r.matrix() * s2 * r.matrix().transpose()
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.scale.iter().all(|s| *s > 0.0 && s.is_finite())
            && (self.orientation.norm() - 1.0).abs() < 1e-6
            && (0.0..=1.0).contains(&self.opacity)
            && self.color.iter().all(|c| (0.0..=1.0).contains(c))
            && self.mean.iter().all(|m| m.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::Input(format!("invalid Gaussian primitive {self:?}")))
        }
    }
}

/// Ordered Gaussian collection. `generation` increases on every insertion or removal.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GaussianMap {
    primitives: Vec<GaussianPrimitive>,
    generation: u64,
}

impl GaussianMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_parts(primitives: Vec<GaussianPrimitive>, generation: u64) -> Self {
        Self {
            primitives,
            generation,
        }
    }

    pub fn len(&self) -> usize {
        self.primitives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.primitives.is_empty()
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn primitives(&self) -> &[GaussianPrimitive] {
        &self.primitives
    }

    /// Parameter access for optimizers. Does not count as a structural change.
    pub fn primitives_mut(&mut self) -> &mut [GaussianPrimitive] {
        &mut self.primitives
    }

    pub fn extend(&mut self, new: impl IntoIterator<Item = GaussianPrimitive>) -> usize {
        let before = self.primitives.len();
        self.primitives.extend(new);
        let added = self.primitives.len() - before;
        if added > 0 {
            self.generation += 1;
        }
        added
    }

    /// Keeps primitives for which `keep(index, primitive)` holds; returns the number removed.
    pub fn retain(&mut self, mut keep: impl FnMut(usize, &GaussianPrimitive) -> bool) -> usize {
        let before = self.primitives.len();
        let mut idx = 0;
        self.primitives.retain(|p| {
            let k = keep(idx, p);
            idx += 1;
            k
        });
        let removed = before - self.primitives.len();
        if removed > 0 {
            self.generation += 1;
        }
        removed
    }

    pub fn count_with_id(&self, id: u32) -> usize {
        self.primitives.iter().filter(|p| p.object_id == id).count()
    }
}

/// One RGB-D frame with its instance label image.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameObservation {
    pub index: usize,
    pub timestamp: f64,
    /// Colors in `[0, 1]`.
    pub rgb: RgbImage,
    /// Meters; `0` or NaN marks an invalid measurement.
    pub depth: DepthImage,
    /// Object ids, `0` = background.
    pub mask: LabelImage,
}

impl FrameObservation {
    pub fn new(
        index: usize,
        timestamp: f64,
        rgb: RgbImage,
        depth: DepthImage,
        mask: LabelImage,
    ) -> Result<Self> {
        if rgb.dims() != depth.dims() || rgb.dims() != mask.dims() {
            return Err(Error::Input(format!(
                "frame {index}: rgb {:?}, depth {:?} and mask {:?} dimensions differ",
                rgb.dims(),
                depth.dims(),
                mask.dims()
            )));
        }
        if depth.as_slice().iter().any(|d| *d < 0.0 || d.is_infinite()) {
            return Err(Error::Input(format!("frame {index}: negative depth value")));
        }
        Ok(Self {
            index,
            timestamp,
            rgb,
            depth,
            mask,
        })
    }

    pub fn width(&self) -> usize {
        self.rgb.width()
    }

    pub fn height(&self) -> usize {
        self.rgb.height()
    }

    pub fn pixel_count(&self) -> usize {
        self.rgb.len()
    }

    /// Fraction of depth pixels that are zero or NaN.
    pub fn invalid_depth_fraction(&self) -> f64 {
        let n = self.depth.len();
        if n == 0 {
            return 0.0;
        }
        let invalid = self
            .depth
            .as_slice()
            .iter()
            .filter(|d| !depth_is_valid(**d))
            .count();
        invalid as f64 / n as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabeledPoint {
    pub color: Rgb,
    /// World coordinates.
    pub position: Vector3<f64>,
    pub object_id: u32,
    /// Camera-frame depth of the source pixel.
    pub source_depth: f64,
}

impl LabeledPoint {
    /// The 7-channel record: RGB, XYZ, object id.
    pub fn as_row(&self) -> [f64; 7] {
        [
            self.color[0],
            self.color[1],
            self.color[2],
            self.position.x,
            self.position.y,
            self.position.z,
            self.object_id as f64,
        ]
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabeledPointCloud {
    pub points: Vec<LabeledPoint>,
}

impl LabeledPointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn count_with_id(&self, id: u32) -> usize {
        self.points.iter().filter(|p| p.object_id == id).count()
    }
}

/// Pixel-membership predicate used by [`back_project_where`].
pub type PixelFilter<'a> = &'a dyn Fn(usize, usize) -> bool;

/// Back-projects every `stride`-th row and column with valid depth into a world-frame cloud.
pub fn back_project(
    frame: &FrameObservation,
    intrinsics: &CameraIntrinsics,
    pose: &CameraPose,
    stride: usize,
) -> Result<LabeledPointCloud> {
    back_project_where(frame, intrinsics, pose, stride, &|_, _| true)
}

/// [`back_project`] restricted to pixels accepted by `filter(u, v)`.
pub fn back_project_where(
    frame: &FrameObservation,
    intrinsics: &CameraIntrinsics,
    pose: &CameraPose,
    stride: usize,
    filter: PixelFilter<'_>,
) -> Result<LabeledPointCloud> {
    if stride == 0 {
        return Err(Error::Input("stride must be at least 1".into()));
    }
    if frame.width() != intrinsics.width || frame.height() != intrinsics.height {
        return Err(Error::Input(format!(
            "frame is {}x{} but intrinsics expect {}x{}",
            frame.width(),
            frame.height(),
            intrinsics.width,
            intrinsics.height
        )));
    }
    let mut points = Vec::new();
    for v in (0..frame.height()).step_by(stride) {
        for u in (0..frame.width()).step_by(stride) {
            let z = *frame.depth.get(u, v);
            if !depth_is_valid(z) || !filter(u, v) {
                continue;
            }
            let pc = intrinsics.unproject(u as f64, v as f64, z);
            points.push(LabeledPoint {
                color: *frame.rgb.get(u, v),
                position: pose.inverse_transform_point(&pc),
                object_id: *frame.mask.get(u, v),
                source_depth: z,
            });
        }
    }
    if points.is_empty() {
        return Err(Error::EmptyCloud);
    }
    Ok(LabeledPointCloud { points })
}

/// Initialization constants for new primitives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianInit {
    /// Isotropic scale = mean depth × this coefficient.
    pub scale_coefficient: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub opacity: f64,
}

impl Default for GaussianInit {
    fn default() -> Self {
        Self {
            scale_coefficient: 0.01,
            scale_min: 1e-4,
            scale_max: 0.5,
            opacity: 0.5,
        }
    }
}

impl GaussianInit {
    pub fn isotropic_scale(&self, mean_depth: f64) -> f64 {
        (mean_depth * self.scale_coefficient).clamp(self.scale_min, self.scale_max)
    }
}

/// One isotropic, identity-oriented primitive per cloud point, sized from the cloud's mean depth.
pub fn init_gaussians(cloud: &LabeledPointCloud, init: &GaussianInit) -> Result<GaussianMap> {
    let prims = init_primitives(cloud, init)?;
    let mut map = GaussianMap::new();
    map.extend(prims);
    Ok(map)
}

pub(crate) fn init_primitives(
    cloud: &LabeledPointCloud,
    init: &GaussianInit,
) -> Result<Vec<GaussianPrimitive>> {
    if cloud.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let mean_depth =
        cloud.points.iter().map(|p| p.source_depth).sum::<f64>() / cloud.len() as f64;
    let s = init.isotropic_scale(mean_depth);
    Ok(cloud
        .points
        .iter()
        .map(|p| GaussianPrimitive {
            mean: p.position,
            scale: Vector3::repeat(s),
            orientation: UnitQuaternion::identity(),
            opacity: init.opacity,
            color: Vector3::new(p.color[0], p.color[1], p.color[2]),
            object_id: p.object_id,
        })
        .collect())
}

/// Pixel-index partition of a frame into per-object sets and the background.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FramePartition {
    pub objects: BTreeMap<u32, Vec<usize>>,
    pub background: Vec<usize>,
}

impl FramePartition {
    pub fn object_ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.objects.keys().copied()
    }

    pub fn object(&self, id: u32) -> Option<&[usize]> {
        self.objects.get(&id).map(Vec::as_slice)
    }
}

pub fn split_frame(frame: &FrameObservation) -> FramePartition {
    let mut part = FramePartition::default();
    for (idx, &id) in frame.mask.as_slice().iter().enumerate() {
        if id == BACKGROUND_ID {
            part.background.push(idx);
        } else {
            part.objects.entry(id).or_default().push(idx);
        }
    }
    part
}
