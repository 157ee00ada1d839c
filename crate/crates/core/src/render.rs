//! CPU splat renderer: EWA projection of 3D Gaussians, tile-binned front-to-back
//! alpha compositing, and the analytic backward pass for pose and primitive gradients.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::{DepthImage, Image, RgbImage};
use crate::scene::{CameraIntrinsics, CameraPose, GaussianMap, GaussianPrimitive};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderSettings {
    /// Primitives at or in front of this camera depth are culled.
    pub near: f64,
    /// Added to the 2D covariance (pixel²) before inversion.
    pub cov2d_regularization: f64,
    pub alpha_max: f64,
    /// Per-pixel contributions below this alpha are skipped.
    pub alpha_min: f64,
    /// Compositing stops once transmittance falls below this.
    pub transmittance_min: f64,
    pub tile_size: usize,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            near: 0.01,
            cov2d_regularization: 0.3,
            alpha_max: 0.99,
            alpha_min: 1.0 / 255.0,
            transmittance_min: 1e-4,
            tile_size: 16,
        }
    }
}

/// A primitive after projection into the image plane.
#[derive(Debug, Clone, PartialEq)]
pub struct Projected2DGaussian {
    pub mean2d: Vector2<f64>,
    pub cov2d: Matrix2<f64>,
    pub camera_depth: f64,
    pub source_index: usize,
    pub object_id: u32,
    /// Inverse of `cov2d`.
    pub conic: Matrix2<f64>,
    /// Pixel radius outside which the primitive cannot reach `alpha_min`.
    pub radius: f64,
    p_cam: Vector3<f64>,
    cov_cam: Matrix3<f64>,
    jacobian: Matrix2x3<f64>,
}

/// Projects every primitive in front of the near plane; results are sorted by
/// camera depth, ties broken by source index.
pub fn project(
    map: &GaussianMap,
    pose: &CameraPose,
    intrinsics: &CameraIntrinsics,
    settings: &RenderSettings,
) -> Result<Vec<Projected2DGaussian>> {
    let rot = pose.rotation.matrix();
    let (w, h) = (intrinsics.width as f64, intrinsics.height as f64);
    let mut out = Vec::with_capacity(map.len());
    for (idx, prim) in map.primitives().iter().enumerate() {
        let p = pose.transform_point(&prim.mean);
        if p.z <= settings.near {
            continue;
        }
        let support = 2.0 * (255.0 * prim.opacity.min(settings.alpha_max)).ln();
        if support <= 0.0 {
            continue;
        }
        let cov_cam = rot * prim.covariance() * rot.transpose();
        let jacobian = projection_jacobian(intrinsics, &p);
        let cov2d = jacobian * cov_cam * jacobian.transpose()
            + Matrix2::identity() * settings.cov2d_regularization;
        let conic = cov2d.try_inverse().ok_or_else(|| {
            Error::Numerics(format!("singular 2D covariance for primitive {idx}"))
        })?;
        let [u, v] = intrinsics.project(&p);
        let mean2d = Vector2::new(u, v);
        let (a, b, c) = (cov2d[(0, 0)], cov2d[(0, 1)], cov2d[(1, 1)]);
        let mid = 0.5 * (a + c);
        let lambda_max = mid + (mid * mid - (a * c - b * b)).max(0.0).sqrt();
        let radius = support.sqrt() * lambda_max.sqrt();
        if !(mean2d.iter().all(|x| x.is_finite()) && radius.is_finite()) {
            return Err(Error::Numerics(format!(
                "non-finite projection for primitive {idx}"
            )));
        }
        if u + radius < -0.5 || v + radius < -0.5 || u - radius > w - 0.5 || v - radius > h - 0.5
        {
            continue;
        }
        out.push(Projected2DGaussian {
            mean2d,
            cov2d,
            camera_depth: p.z,
            source_index: idx,
            object_id: prim.object_id,
            conic,
            radius,
            p_cam: p,
            cov_cam,
            jacobian,
        });
    }
    out.sort_by(|x, y| {
        x.camera_depth
            .total_cmp(&y.camera_depth)
            .then(x.source_index.cmp(&y.source_index))
    });
    Ok(out)
}

fn projection_jacobian(k: &CameraIntrinsics, p: &Vector3<f64>) -> Matrix2x3<f64> {
    let iz = 1.0 / p.z;
    let iz2 = iz * iz;
    Matrix2x3::new(
        k.fx * iz,
        0.0,
        -k.fx * p.x * iz2,
        0.0,
        k.fy * iz,
        -k.fy * p.y * iz2,
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Contribution {
    /// Position inside the tile's depth-sorted list.
    slot: u32,
    alpha: f64,
    /// Whether the alpha clamp was active (zero gradient through alpha).
    clamped: bool,
}

/// Per-pixel compositing record kept for the backward pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Contributors {
    tiles_x: usize,
    tile_size: usize,
    /// For each tile, the projected-list indices it touches, front to back.
    tile_lists: Vec<Vec<u32>>,
    /// For each tile, the contributions of its pixels, pixel-major.
    tile_entries: Vec<Vec<Contribution>>,
    /// For each pixel, `(start, len)` inside its tile's entries.
    spans: Vec<(u32, u32)>,
    /// Projected-list index → map index.
    source_of: Vec<usize>,
}

impl Contributors {
    fn tile_of(&self, u: usize, v: usize) -> usize {
        (v / self.tile_size) * self.tiles_x + u / self.tile_size
    }

    /// Calls `f(map_index, weight)` for every contribution at pixel `(u, v)`, front to back.
    pub fn for_each_at(&self, u: usize, v: usize, width: usize, mut f: impl FnMut(usize, f64)) {
        let tile = self.tile_of(u, v);
        let (start, len) = self.spans[v * width + u];
        let list = &self.tile_lists[tile];
        let mut t = 1.0;
        for c in &self.tile_entries[tile][start as usize..(start + len) as usize] {
            f(self.source_of[list[c.slot as usize] as usize], c.alpha * t);
            t *= 1.0 - c.alpha;
        }
    }

    /// Number of composited contributions at each pixel.
    pub fn count_at(&self, pixel: usize) -> usize {
        self.spans[pixel].1 as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedFrame {
    pub color: RgbImage,
    /// Alpha-normalized blended depth; 0 where nothing was composited.
    pub depth: DepthImage,
    pub alpha: DepthImage,
    pub contributors: Contributors,
}

impl RenderedFrame {
    pub fn width(&self) -> usize {
        self.color.width()
    }

    pub fn height(&self) -> usize {
        self.color.height()
    }

    /// Map indices whose total compositing weight over the image exceeds `threshold`.
    pub fn visibility(&self, map_len: usize, threshold: f64) -> std::collections::BTreeSet<usize> {
        let mut acc = vec![0.0; map_len];
        let w = self.width();
        for v in 0..self.height() {
            for u in 0..w {
                self.contributors.for_each_at(u, v, w, |i, wt| acc[i] += wt);
            }
        }
        acc.iter()
            .enumerate()
            .filter(|(_, a)| **a > threshold)
            .map(|(i, _)| i)
            .collect()
    }
}

struct TileGrid {
    tiles_x: usize,
    tiles_y: usize,
    size: usize,
}

impl TileGrid {
    fn new(k: &CameraIntrinsics, size: usize) -> Self {
        Self {
            tiles_x: k.width.div_ceil(size),
            tiles_y: k.height.div_ceil(size),
            size,
        }
    }

    fn count(&self) -> usize {
        self.tiles_x * self.tiles_y
    }

    /// Depth-ordered per-tile primitive lists from conservative bounding boxes.
    fn bin(&self, projected: &[Projected2DGaussian], k: &CameraIntrinsics) -> Vec<Vec<u32>> {
        let mut lists = vec![Vec::new(); self.count()];
        let s = self.size as f64;
        for (i, g) in projected.iter().enumerate() {
            let x0 = (g.mean2d.x - g.radius).max(0.0);
            let y0 = (g.mean2d.y - g.radius).max(0.0);
            let x1 = (g.mean2d.x + g.radius).min(k.width as f64 - 1.0);
            let y1 = (g.mean2d.y + g.radius).min(k.height as f64 - 1.0);
            if x1 < x0 || y1 < y0 {
                continue;
            }
            let tx0 = (x0.floor() / s) as usize;
            let ty0 = (y0.floor() / s) as usize;
            let tx1 = ((x1.ceil() / s) as usize).min(self.tiles_x - 1);
            let ty1 = ((y1.ceil() / s) as usize).min(self.tiles_y - 1);
            for ty in ty0..=ty1 {
                for tx in tx0..=tx1 {
                    lists[ty * self.tiles_x + tx].push(i as u32);
                }
            }
        }
        lists
    }

    fn pixels(&self, tile: usize, k: &CameraIntrinsics) -> impl Iterator<Item = (usize, usize)> {
        let tx = tile % self.tiles_x;
        let ty = tile / self.tiles_x;
        let u0 = tx * self.size;
        let v0 = ty * self.size;
        let u1 = (u0 + self.size).min(k.width);
        let v1 = (v0 + self.size).min(k.height);
        (v0..v1).flat_map(move |v| (u0..u1).map(move |u| (u, v)))
    }
}

#[inline]
fn gaussian_alpha(g: &Projected2DGaussian, opacity: f64, u: f64, v: f64) -> (f64, f64, f64) {
    let dx = u - g.mean2d.x;
    let dy = v - g.mean2d.y;
    let power =
        -0.5 * (g.conic[(0, 0)] * dx * dx + 2.0 * g.conic[(0, 1)] * dx * dy + g.conic[(1, 1)] * dy * dy);
    (opacity * power.exp(), dx, dy)
}

struct TileOutput {
    entries: Vec<Contribution>,
    /// `(pixel, color, depth numerator, alpha, start, len)`
    pixels: Vec<(usize, [f64; 3], f64, f64, u32, u32)>,
}

/// Front-to-back alpha compositing of depth-sorted projections.
pub fn rasterize(
    projected: &[Projected2DGaussian],
    map: &GaussianMap,
    intrinsics: &CameraIntrinsics,
    settings: &RenderSettings,
) -> Result<RenderedFrame> {
    let (w, h) = (intrinsics.width, intrinsics.height);
    if settings.tile_size == 0 {
        return Err(Error::Input("tile size must be positive".into()));
    }
    let mut order: Vec<usize> = (0..projected.len()).collect();
    let sorted = projected.windows(2).all(|p| {
        (p[0].camera_depth, p[0].source_index) <= (p[1].camera_depth, p[1].source_index)
    });
    if !sorted {
        order.sort_by(|&a, &b| {
            projected[a]
                .camera_depth
                .total_cmp(&projected[b].camera_depth)
                .then(projected[a].source_index.cmp(&projected[b].source_index))
        });
    }
    let projected: Vec<Projected2DGaussian> = if sorted {
        projected.to_vec()
    } else {
        order.iter().map(|&i| projected[i].clone()).collect()
    };
    let grid = TileGrid::new(intrinsics, settings.tile_size);
    let lists = grid.bin(&projected, intrinsics);
    let prims = map.primitives();

    let outputs: Vec<TileOutput> = (0..grid.count())
        .into_par_iter()
        .map(|tile| {
            let list = &lists[tile];
            let mut entries = Vec::new();
            let mut pixels = Vec::new();
            for (u, v) in grid.pixels(tile, intrinsics) {
                let start = entries.len() as u32;
                let mut t = 1.0;
                let mut color = [0.0; 3];
                let mut num = 0.0;
                for (slot, &pi) in list.iter().enumerate() {
                    let g = &projected[pi as usize];
                    let prim = &prims[g.source_index];
                    let (raw, _, _) = gaussian_alpha(g, prim.opacity, u as f64, v as f64);
                    if raw < settings.alpha_min {
                        continue;
                    }
                    let clamped = raw > settings.alpha_max;
                    let alpha = raw.min(settings.alpha_max);
                    let wt = alpha * t;
                    for (ch, acc) in color.iter_mut().enumerate() {
                        *acc += wt * prim.color[ch];
                    }
                    num += wt * g.camera_depth;
                    entries.push(Contribution {
                        slot: slot as u32,
                        alpha,
                        clamped,
                    });
                    t *= 1.0 - alpha;
                    if t < settings.transmittance_min {
                        break;
                    }
                }
                let len = entries.len() as u32 - start;
                pixels.push((v * w + u, color, num, 1.0 - t, start, len));
            }
            TileOutput { entries, pixels }
        })
        .collect();

    let mut color = Image::filled(w, h, [0.0; 3]);
    let mut depth = Image::filled(w, h, 0.0);
    let mut alpha = Image::filled(w, h, 0.0);
    let mut spans = vec![(0u32, 0u32); w * h];
    let mut tile_entries = Vec::with_capacity(outputs.len());
    for out in outputs {
        for (pix, c, num, a, start, len) in out.pixels {
            color.as_mut_slice()[pix] = c;
            alpha.as_mut_slice()[pix] = a;
            depth.as_mut_slice()[pix] = if len > 0 && a > 0.0 { num / a } else { 0.0 };
            spans[pix] = (start, len);
        }
        tile_entries.push(out.entries);
    }
    Ok(RenderedFrame {
        color,
        depth,
        alpha,
        contributors: Contributors {
            tiles_x: grid.tiles_x,
            tile_size: grid.size,
            tile_lists: lists,
            tile_entries,
            spans,
            source_of: projected.iter().map(|g| g.source_index).collect(),
        },
    })
}

/// Forward render: project then rasterize.
pub fn render(
    map: &GaussianMap,
    pose: &CameraPose,
    intrinsics: &CameraIntrinsics,
    settings: &RenderSettings,
) -> Result<RenderedFrame> {
    let projected = project(map, pose, intrinsics, settings)?;
    rasterize(&projected, map, intrinsics, settings)
}

/// Upstream gradients `∂L/∂(rendered output)` per pixel.
///
/// Any loss built on a rendered frame is linearized through these; a pixel with all
/// weights zero contributes nothing to the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputGradients {
    pub color: Image<[f64; 3]>,
    pub depth: Image<f64>,
    pub alpha: Image<f64>,
}

impl OutputGradients {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            color: Image::filled(width, height, [0.0; 3]),
            depth: Image::filled(width, height, 0.0),
            alpha: Image::filled(width, height, 0.0),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.color.as_slice().iter().flatten().all(|x| x.is_finite())
            && self.depth.as_slice().iter().all(|x| x.is_finite())
            && self.alpha.as_slice().iter().all(|x| x.is_finite())
    }

    /// `Σ_p weights_p · output_p`, the linear functional whose gradient the backward pass computes.
    pub fn dot(&self, frame: &RenderedFrame) -> f64 {
        let mut s = 0.0;
        for i in 0..frame.color.len() {
            let c = frame.color.as_slice()[i];
            let g = self.color.as_slice()[i];
            s += g[0] * c[0] + g[1] * c[1] + g[2] * c[2];
            s += self.depth.as_slice()[i] * frame.depth.as_slice()[i];
            s += self.alpha.as_slice()[i] * frame.alpha.as_slice()[i];
        }
        s
    }
}

/// Partial derivatives with respect to one primitive's parameters.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PrimitiveGradient {
    pub mean: Vector3<f64>,
    pub scale: Vector3<f64>,
    /// `(w, x, y, z)`, projected onto the tangent of the unit sphere.
    pub orientation: [f64; 4],
    pub opacity: f64,
    pub color: Vector3<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderGradients {
    /// `(ω, v)`, matching [`CameraPose::retract`].
    pub pose: [f64; 6],
    /// Indexed like the map.
    pub primitives: Vec<PrimitiveGradient>,
}

#[derive(Debug, Clone, Copy, Default)]
struct ImageSpaceGrad {
    mean2d: Vector2<f64>,
    conic: Matrix2<f64>,
    opacity: f64,
    color: Vector3<f64>,
    depth: f64,
}

impl ImageSpaceGrad {
    fn add(&mut self, o: &ImageSpaceGrad) {
        self.mean2d += o.mean2d;
        self.conic += o.conic;
        self.opacity += o.opacity;
        self.color += o.color;
        self.depth += o.depth;
    }
}

/// Forward render plus analytic gradients of `upstream · output`.
pub fn render_with_gradients(
    map: &GaussianMap,
    pose: &CameraPose,
    intrinsics: &CameraIntrinsics,
    upstream: &OutputGradients,
    settings: &RenderSettings,
) -> Result<(RenderedFrame, RenderGradients)> {
    let projected = project(map, pose, intrinsics, settings)?;
    let frame = rasterize(&projected, map, intrinsics, settings)?;
    let grads = backward(&projected, map, pose, intrinsics, &frame, upstream)?;
    Ok((frame, grads))
}

/// Backward pass for a frame produced by [`rasterize`] from `projected`.
pub fn backward(
    projected: &[Projected2DGaussian],
    map: &GaussianMap,
    pose: &CameraPose,
    intrinsics: &CameraIntrinsics,
    frame: &RenderedFrame,
    upstream: &OutputGradients,
) -> Result<RenderGradients> {
    if !upstream.is_finite() {
        return Err(Error::Numerics("non-finite upstream gradients".into()));
    }
    if upstream.color.dims() != frame.color.dims() {
        return Err(Error::Input("upstream gradient size mismatch".into()));
    }
    let c = &frame.contributors;
    if c.source_of.len() != projected.len() {
        return Err(Error::Input("projection list does not match frame".into()));
    }
    let w = intrinsics.width;
    let prims = map.primitives();
    let grid = TileGrid {
        tiles_x: c.tiles_x,
        tiles_y: intrinsics.height.div_ceil(c.tile_size),
        size: c.tile_size,
    };
    // projected is depth-sorted by construction, so position = projected index
    let sorted: Vec<&Projected2DGaussian> = {
        let mut v: Vec<&Projected2DGaussian> = projected.iter().collect();
        v.sort_by(|x, y| {
            x.camera_depth
                .total_cmp(&y.camera_depth)
                .then(x.source_index.cmp(&y.source_index))
        });
        v
    };

    let tile_grads: Vec<Vec<ImageSpaceGrad>> = (0..grid.count())
        .into_par_iter()
        .map(|tile| {
            let list = &c.tile_lists[tile];
            let entries = &c.tile_entries[tile];
            let mut acc = vec![ImageSpaceGrad::default(); list.len()];
            let mut trans = Vec::new();
            for (u, v) in grid.pixels(tile, intrinsics) {
                let pix = v * w + u;
                let (start, len) = c.spans[pix];
                if len == 0 {
                    continue;
                }
                let g_color = upstream.color.as_slice()[pix];
                let g_depth = upstream.depth.as_slice()[pix];
                let g_alpha_out = upstream.alpha.as_slice()[pix];
                if g_color == [0.0; 3] && g_depth == 0.0 && g_alpha_out == 0.0 {
                    continue;
                }
                let ents = &entries[start as usize..(start + len) as usize];
                trans.clear();
                let mut t = 1.0;
                for e in ents {
                    trans.push(t);
                    t *= 1.0 - e.alpha;
                }
                let a_total = frame.alpha.as_slice()[pix];
                let d_hat = frame.depth.as_slice()[pix];
                let (g_num, g_acc) = if a_total > 0.0 {
                    (g_depth / a_total, g_alpha_out - g_depth * d_hat / a_total)
                } else {
                    (0.0, g_alpha_out)
                };
                // suffix sums Σ_{m>k} f_m α_m T_m for each channel
                let mut suffix = [0.0; 5];
                for (k, e) in ents.iter().enumerate().rev() {
                    let g = sorted[list[e.slot as usize] as usize];
                    let prim = &prims[g.source_index];
                    let wt = e.alpha * trans[k];
                    let values = [prim.color[0], prim.color[1], prim.color[2], g.camera_depth, 1.0];
                    let ups = [g_color[0], g_color[1], g_color[2], g_num, g_acc];
                    let mut g_a = 0.0;
                    for ch in 0..5 {
                        g_a += ups[ch] * (trans[k] * values[ch] - suffix[ch] / (1.0 - e.alpha));
                    }
                    for ch in 0..5 {
                        suffix[ch] += values[ch] * wt;
                    }
                    let slot = &mut acc[e.slot as usize];
                    slot.color += Vector3::new(g_color[0], g_color[1], g_color[2]) * wt;
                    slot.depth += g_num * wt;
                    if e.clamped {
                        continue;
                    }
                    let (_, dx, dy) = gaussian_alpha(g, prim.opacity, u as f64, v as f64);
                    let gauss = e.alpha / prim.opacity;
                    slot.opacity += g_a * gauss;
                    let g_power = g_a * e.alpha;
                    let q = &g.conic;
                    slot.mean2d += Vector2::new(
                        q[(0, 0)] * dx + q[(0, 1)] * dy,
                        q[(1, 0)] * dx + q[(1, 1)] * dy,
                    ) * g_power;
                    slot.conic += Matrix2::new(dx * dx, dx * dy, dx * dy, dy * dy) * (-0.5 * g_power);
                }
            }
            acc
        })
        .collect();

    let mut image_grads = vec![ImageSpaceGrad::default(); projected.len()];
    for (tile, acc) in tile_grads.iter().enumerate() {
        for (slot, g) in acc.iter().enumerate() {
            image_grads[c.tile_lists[tile][slot] as usize].add(g);
        }
    }

    let rot = *pose.rotation.matrix();
    let mut primitives = vec![PrimitiveGradient::default(); map.len()];
    let mut g_omega = Vector3::zeros();
    let mut g_v = Vector3::zeros();
    for (g, ig) in sorted.iter().zip(image_grads.iter()) {
        let prim = &prims[g.source_index];
        let pg = chain_to_world(g, ig, prim, &rot, intrinsics);
        g_omega += pg.omega;
        g_v += pg.g_p;
        primitives[g.source_index] = pg.prim;
    }
    let pose_grad = [g_omega.x, g_omega.y, g_omega.z, g_v.x, g_v.y, g_v.z];
    if !pose_grad.iter().all(|x| x.is_finite()) {
        return Err(Error::Numerics("non-finite pose gradient".into()));
    }
    if let Some(i) = primitives.iter().position(|p| !gradient_is_finite(p)) {
        return Err(Error::Numerics(format!(
            "non-finite gradient for primitive {i}"
        )));
    }
    Ok(RenderGradients {
        pose: pose_grad,
        primitives,
    })
}

fn gradient_is_finite(p: &PrimitiveGradient) -> bool {
    p.mean.iter().all(|x| x.is_finite())
        && p.scale.iter().all(|x| x.is_finite())
        && p.orientation.iter().all(|x| x.is_finite())
        && p.opacity.is_finite()
        && p.color.iter().all(|x| x.is_finite())
}

struct WorldGrad {
    prim: PrimitiveGradient,
    /// ∂L/∂p_cam, equal to the translation part of the pose gradient.
    g_p: Vector3<f64>,
    omega: Vector3<f64>,
}

fn chain_to_world(
    g: &Projected2DGaussian,
    ig: &ImageSpaceGrad,
    prim: &GaussianPrimitive,
    rot: &Matrix3<f64>,
    k: &CameraIntrinsics,
) -> WorldGrad {
    let q = &g.conic;
    let g_cov2d = -(q * ig.conic * q);
    let j = &g.jacobian;
    let g_cov_cam = j.transpose() * g_cov2d * j;
    let g_jac = 2.0 * g_cov2d * j * g.cov_cam;

    let p = &g.p_cam;
    let iz = 1.0 / p.z;
    let iz2 = iz * iz;
    let iz3 = iz2 * iz;
    let mut g_p = j.transpose() * ig.mean2d;
    g_p.x += g_jac[(0, 2)] * (-k.fx * iz2);
    g_p.y += g_jac[(1, 2)] * (-k.fy * iz2);
    g_p.z += g_jac[(0, 0)] * (-k.fx * iz2)
        + g_jac[(0, 2)] * (2.0 * k.fx * p.x * iz3)
        + g_jac[(1, 1)] * (-k.fy * iz2)
        + g_jac[(1, 2)] * (2.0 * k.fy * p.y * iz3);
    g_p.z += ig.depth;

    // rotation part from Σ_cam = R Σ_w Rᵀ under a left perturbation
    let m = g.cov_cam * g_cov_cam - g_cov_cam * g.cov_cam;
    let omega = p.cross(&g_p) - 2.0 * Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)]);

    let g_mean = rot.transpose() * g_p;
    let g_cov_world = rot.transpose() * g_cov_cam * rot;

    let uq = prim.orientation;
    let (qw, qx, qy, qz) = (uq.w, uq.i, uq.j, uq.k);
    let r = *uq.to_rotation_matrix().matrix();
    let s = prim.scale;
    let mmat = r * Matrix3::from_diagonal(&s);
    let g_m = 2.0 * g_cov_world * mmat;
    let rt_gm = r.transpose() * g_m;
    let g_scale = Vector3::new(rt_gm[(0, 0)], rt_gm[(1, 1)], rt_gm[(2, 2)]);
    let g_r = g_m * Matrix3::from_diagonal(&s);
    let dr_dw = Matrix3::new(0.0, -2.0 * qz, 2.0 * qy, 2.0 * qz, 0.0, -2.0 * qx, -2.0 * qy, 2.0 * qx, 0.0);
    let dr_dx = Matrix3::new(
        0.0, 2.0 * qy, 2.0 * qz, 2.0 * qy, -4.0 * qx, -2.0 * qw, 2.0 * qz, 2.0 * qw, -4.0 * qx,
    );
    let dr_dy = Matrix3::new(
        -4.0 * qy, 2.0 * qx, 2.0 * qw, 2.0 * qx, 0.0, 2.0 * qz, -2.0 * qw, 2.0 * qz, -4.0 * qy,
    );
    let dr_dz = Matrix3::new(
        -4.0 * qz, -2.0 * qw, 2.0 * qx, 2.0 * qw, -4.0 * qz, 2.0 * qy, 2.0 * qx, 2.0 * qy, 0.0,
    );
    let gq = [
        g_r.component_mul(&dr_dw).sum(),
        g_r.component_mul(&dr_dx).sum(),
        g_r.component_mul(&dr_dy).sum(),
        g_r.component_mul(&dr_dz).sum(),
    ];
    let qv = [qw, qx, qy, qz];
    let radial: f64 = gq.iter().zip(qv.iter()).map(|(a, b)| a * b).sum();
    let g_orientation = [
        gq[0] - radial * qv[0],
        gq[1] - radial * qv[1],
        gq[2] - radial * qv[2],
        gq[3] - radial * qv[3],
    ];

    WorldGrad {
        prim: PrimitiveGradient {
            mean: g_mean,
            scale: g_scale,
            orientation: g_orientation,
            opacity: ig.opacity,
            color: ig.color,
        },
        g_p,
        omega,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Rotation3, UnitQuaternion};

    fn intr() -> CameraIntrinsics {
        CameraIntrinsics::new(100.0, 100.0, 50.0, 50.0, 100, 100, 5000.0).unwrap()
    }

    fn prim(mean: [f64; 3], s: f64, opacity: f64, color: [f64; 3]) -> GaussianPrimitive {
        GaussianPrimitive {
            mean: Vector3::from(mean),
            scale: Vector3::repeat(s),
            orientation: UnitQuaternion::identity(),
            opacity,
            color: Vector3::from(color),
            object_id: 0,
        }
    }

    fn map_of(prims: Vec<GaussianPrimitive>) -> GaussianMap {
        let mut m = GaussianMap::new();
        m.extend(prims);
        m
    }

    #[test]
    fn optical_axis_mean_projects_to_principal_point() {
        let m = map_of(vec![prim([0.0, 0.0, 2.0], 0.01, 0.5, [1.0; 3])]);
        let p = project(&m, &CameraPose::identity(), &intr(), &RenderSettings::default()).unwrap();
        assert_eq!(p.len(), 1);
        assert!((p[0].mean2d - Vector2::new(50.0, 50.0)).norm() < 1e-12);
        assert_eq!(p[0].camera_depth, 2.0);
    }

    #[test]
    fn behind_camera_is_culled() {
        let m = map_of(vec![prim([0.0, 0.0, -1.0], 0.01, 0.5, [1.0; 3])]);
        let p = project(&m, &CameraPose::identity(), &intr(), &RenderSettings::default()).unwrap();
        assert!(p.is_empty());
    }

    #[test]
    fn isotropic_covariance_matches_finite_difference_of_projection() {
        let s = 0.02;
        let z = 1.5;
        let k = intr();
        let m = map_of(vec![prim([0.0, 0.0, z], s, 0.5, [1.0; 3])]);
        let settings = RenderSettings::default();
        let p = project(&m, &CameraPose::identity(), &k, &settings).unwrap();
        // oracle: numerically differentiate the pinhole map at the mean and push Σ through it
        let h = 1e-6;
        let center = Vector3::new(0.0, 0.0, z);
        let mut jac = Matrix2x3::zeros();
        for axis in 0..3 {
            let mut e = Vector3::zeros();
            e[axis] = h;
            let a = k.project(&(center + e));
            let b = k.project(&(center - e));
            jac[(0, axis)] = (a[0] - b[0]) / (2.0 * h);
            jac[(1, axis)] = (a[1] - b[1]) / (2.0 * h);
        }
        let oracle = jac * (Matrix3::identity() * s * s) * jac.transpose()
            + Matrix2::identity() * settings.cov2d_regularization;
        let got = p[0].cov2d;
        for i in 0..2 {
            for jj in 0..2 {
                let denom = oracle[(i, jj)].abs().max(1e-12);
                if oracle[(i, jj)].abs() > 1e-9 {
                    assert!(((got[(i, jj)] - oracle[(i, jj)]) / denom).abs() < 1e-3);
                } else {
                    assert!(got[(i, jj)].abs() < 1e-9);
                }
            }
        }
        let expected_diag = (k.fx * s / z).powi(2) + settings.cov2d_regularization;
        assert!((got[(0, 0)] - expected_diag).abs() < 1e-9);
    }

    #[test]
    fn single_opaque_gaussian_at_its_center() {
        let m = map_of(vec![prim([0.0, 0.0, 2.0], 0.05, 1.0, [0.2, 0.5, 0.9])]);
        let f = render(&m, &CameraPose::identity(), &intr(), &RenderSettings::default()).unwrap();
        let c = f.color.get(50, 50);
        assert!((c[0] - 0.99 * 0.2).abs() < 1e-12);
        assert!((c[2] - 0.99 * 0.9).abs() < 1e-12);
        assert!((f.depth.get(50, 50) - 2.0).abs() < 1e-12);
        assert!((f.alpha.get(50, 50) - 0.99).abs() < 1e-12);
    }

    #[test]
    fn empty_map_renders_black() {
        let f = render(&GaussianMap::new(), &CameraPose::identity(), &intr(), &RenderSettings::default()).unwrap();
        assert!(f.color.as_slice().iter().all(|c| *c == [0.0; 3]));
        assert!(f.alpha.as_slice().iter().all(|a| *a == 0.0));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let m = map_of(vec![
            prim([0.0, 0.0, 2.0], 0.05, 0.7, [0.2, 0.5, 0.9]),
            prim([0.1, 0.0, 2.5], 0.05, 0.4, [0.9, 0.5, 0.1]),
        ]);
        let k = intr();
        let (_, g) = render_with_gradients(
            &m,
            &CameraPose::identity(),
            &k,
            &OutputGradients::zeros(k.width, k.height),
            &RenderSettings::default(),
        )
        .unwrap();
        assert_eq!(g.pose, [0.0; 6]);
        assert!(g.primitives.iter().all(|p| *p == PrimitiveGradient::default()));
    }

    #[test]
    fn masked_region_yields_zero_gradient_for_primitives_only_seen_there() {
        let k = intr();
        let m = map_of(vec![
            prim([-0.2, 0.0, 1.0], 0.01, 0.7, [0.2, 0.5, 0.9]),
            prim([0.2, 0.0, 1.0], 0.01, 0.7, [0.9, 0.5, 0.1]),
        ]);
        // weights only on the right half, where the second primitive lives
        let mut up = OutputGradients::zeros(k.width, k.height);
        for v in 0..k.height {
            for u in 50..k.width {
                *up.color.get_mut(u, v) = [1.0, 1.0, 1.0];
                *up.depth.get_mut(u, v) = 1.0;
            }
        }
        let (_, g) =
            render_with_gradients(&m, &CameraPose::identity(), &k, &up, &RenderSettings::default())
                .unwrap();
        assert_eq!(g.primitives[0], PrimitiveGradient::default());
        assert!(g.primitives[1].opacity != 0.0);
    }

    #[test]
    fn rendering_is_independent_of_tile_size() {
        let k = CameraIntrinsics::new(40.0, 40.0, 20.0, 15.0, 45, 31, 5000.0).unwrap();
        let m = map_of(
            (0..12)
                .map(|i| {
                    let t = i as f64;
                    prim(
                        [0.3 * (t * 0.7).sin(), 0.2 * (t * 1.3).cos(), 1.0 + 0.1 * t],
                        0.03 + 0.01 * (t * 0.5).sin().abs(),
                        0.3 + 0.05 * t,
                        [0.1 * t / 1.2, 0.5, 1.0 - 0.07 * t],
                    )
                })
                .collect(),
        );
        let pose = CameraPose::identity();
        let base = render(&m, &pose, &k, &RenderSettings { tile_size: 16, ..Default::default() }).unwrap();
        for ts in [1usize, 7, 64] {
            let other = render(&m, &pose, &k, &RenderSettings { tile_size: ts, ..Default::default() }).unwrap();
            assert_eq!(base.color, other.color);
            assert_eq!(base.depth, other.depth);
            assert_eq!(base.alpha, other.alpha);
        }
    }

    #[test]
    fn equivariance_under_rigid_map_transform() {
        let k = CameraIntrinsics::new(40.0, 40.0, 16.0, 16.0, 32, 32, 5000.0).unwrap();
        let mut m = map_of(
            (0..6)
                .map(|i| {
                    let t = i as f64;
                    let mut p = prim([0.1 * t - 0.25, 0.05 * t - 0.1, 1.2 + 0.1 * t], 0.05, 0.6, [0.3, 0.1 * t, 0.8]);
                    p.scale = Vector3::new(0.03, 0.06, 0.04);
                    p.orientation = UnitQuaternion::from_euler_angles(0.3 * t, -0.2, 0.1 * t);
                    p
                })
                .collect(),
        );
        let pose = CameraPose::new(Rotation3::from_euler_angles(0.02, -0.03, 0.01), Vector3::new(0.01, 0.02, -0.03));
        let a = render(&m, &pose, &k, &RenderSettings::default()).unwrap();
        let g = CameraPose::new(Rotation3::from_euler_angles(0.4, 0.2, -0.3), Vector3::new(0.5, -0.2, 1.0));
        let gq = UnitQuaternion::from_rotation_matrix(&g.rotation);
        for p in m.primitives_mut() {
            p.mean = g.transform_point(&p.mean);
            p.orientation = gq * p.orientation;
        }
        let b = render(&m, &pose.compose(&g.inverse()), &k, &RenderSettings::default()).unwrap();
        for i in 0..a.color.len() {
            for ch in 0..3 {
                assert!((a.color.as_slice()[i][ch] - b.color.as_slice()[i][ch]).abs() < 1e-5);
            }
            assert!((a.depth.as_slice()[i] - b.depth.as_slice()[i]).abs() < 1e-5);
        }
    }

    #[test]
    fn visibility_reports_contributing_primitives() {
        let k = intr();
        let m = map_of(vec![
            prim([0.0, 0.0, 1.0], 0.02, 0.8, [1.0; 3]),
            prim([0.0, 0.0, -1.0], 0.02, 0.8, [1.0; 3]),
        ]);
        let f = render(&m, &CameraPose::identity(), &k, &RenderSettings::default()).unwrap();
        let vis = f.visibility(m.len(), 1e-3);
        assert!(vis.contains(&0) && !vis.contains(&1));
    }
}
