//! Trajectory error after rigid alignment and image-quality metrics.

use std::io::Write;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, RgbImage};
use crate::scene::CameraPose;

/// A pose with its timestamp in seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimedPose {
    pub timestamp: f64,
    pub pose: CameraPose,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl RigidTransform {
    fn from_parts(r: &Matrix3<f64>, t: &Vector3<f64>) -> Self {
        let mut rotation = [[0.0; 3]; 3];
        for (i, row) in rotation.iter_mut().enumerate() {
            for (j, x) in row.iter_mut().enumerate() {
                *x = r[(i, j)];
            }
        }
        Self {
            rotation,
            translation: [t.x, t.y, t.z],
        }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let r = Matrix3::from_fn(|i, j| self.rotation[i][j]);
        r * p + Vector3::from(self.translation)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AteReport {
    pub rmse: f64,
    pub std: f64,
    pub mean: f64,
    /// `(timestamp, error)` per matched pair, in estimated-trajectory order.
    pub errors: Vec<(f64, f64)>,
    /// Maps estimated camera centers onto the ground truth.
    pub alignment: RigidTransform,
}

/// Nearest-timestamp matching within `tolerance` seconds.
pub fn associate(est: &[TimedPose], gt: &[TimedPose], tolerance: f64) -> Vec<(usize, usize)> {
    let mut sorted: Vec<usize> = (0..gt.len()).collect();
    sorted.sort_by(|&a, &b| gt[a].timestamp.total_cmp(&gt[b].timestamp));
    est.iter()
        .enumerate()
        .filter_map(|(i, e)| {
            let pos = sorted.partition_point(|&j| gt[j].timestamp < e.timestamp);
            let candidates = [pos.checked_sub(1), Some(pos)];
            candidates
                .iter()
                .flatten()
                .filter(|&&k| k < sorted.len())
                .map(|&k| sorted[k])
                .min_by(|&a, &b| {
                    (gt[a].timestamp - e.timestamp)
                        .abs()
                        .total_cmp(&(gt[b].timestamp - e.timestamp).abs())
                })
                .filter(|&j| (gt[j].timestamp - e.timestamp).abs() <= tolerance)
                .map(|j| (i, j))
        })
        .collect()
}

/// Closed-form least-squares rotation and translation taking `src` onto `dst`.
pub fn rigid_alignment(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> (Matrix3<f64>, Vector3<f64>) {
    let n = src.len() as f64;
    let cs = src.iter().sum::<Vector3<f64>>() / n;
    let cd = dst.iter().sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        h += (s - cs) * (d - cd).transpose();
    }
    let svd = h.svd(true, true);
    let (u, vt) = match (svd.u, svd.v_t) {
        (Some(u), Some(vt)) => (u, vt),
        _ => return (Matrix3::identity(), cd - cs),
    };
    let v = vt.transpose();
    let mut fix = Matrix3::identity();
    if (v * u.transpose()).determinant() < 0.0 {
        fix[(2, 2)] = -1.0;
    }
    let r = v * fix * u.transpose();
    let t = cd - r * cs;
    (r, t)
}

/// Rigidly aligns estimated camera centers to ground truth and reports the residuals.
pub fn align_and_ate(est: &[TimedPose], gt: &[TimedPose], tolerance: f64) -> Result<AteReport> {
    let pairs = associate(est, gt, tolerance);
    if pairs.len() < 2 {
        return Err(Error::Input(format!(
            "ATE needs at least 2 matched poses, found {}",
            pairs.len()
        )));
    }
    let src: Vec<Vector3<f64>> = pairs.iter().map(|&(i, _)| est[i].pose.center()).collect();
    let dst: Vec<Vector3<f64>> = pairs.iter().map(|&(_, j)| gt[j].pose.center()).collect();
    let (r, t) = rigid_alignment(&src, &dst);
    let errors: Vec<(f64, f64)> = pairs
        .iter()
        .zip(src.iter().zip(&dst))
        .map(|(&(i, _), (s, d))| (est[i].timestamp, (d - (r * s + t)).norm()))
        .collect();
    let values: Vec<f64> = errors.iter().map(|e| e.1).collect();
    let (mean, rmse, std) = error_statistics(&values);
    if !(rmse.is_finite() && std.is_finite()) {
        return Err(Error::Numerics("non-finite trajectory error".into()));
    }
    Ok(AteReport {
        rmse,
        std,
        mean,
        errors,
        alignment: RigidTransform::from_parts(&r, &t),
    })
}

/// Mean, root mean square and population standard deviation.
pub fn error_statistics(errors: &[f64]) -> (f64, f64, f64) {
    let n = errors.len() as f64;
    let mean = errors.iter().sum::<f64>() / n;
    let rmse = (errors.iter().map(|e| e * e).sum::<f64>() / n).sqrt();
    let std = (errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n).sqrt();
    (mean, rmse, std)
}

pub const PSNR_CAP: f64 = 100.0;

/// `10·log10(1/MSE)` over the pixels where `mask` is true (all pixels when `None`).
pub fn psnr(rendered: &RgbImage, reference: &RgbImage, mask: Option<&Image<bool>>) -> Result<f64> {
    if rendered.dims() != reference.dims() || mask.is_some_and(|m| m.dims() != rendered.dims()) {
        return Err(Error::Input("PSNR inputs differ in size".into()));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (i, (a, b)) in rendered.as_slice().iter().zip(reference.as_slice()).enumerate() {
        if mask.is_some_and(|m| !m.as_slice()[i]) {
            continue;
        }
        for c in 0..3 {
            sum += (a[c] - b[c]).powi(2);
        }
        count += 3;
    }
    if count == 0 {
        return Err(Error::Input("PSNR mask selects no pixels".into()));
    }
    let mse = sum / count as f64;
    if mse <= 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

fn gray(img: &RgbImage) -> Image<f64> {
    img.map(|p| (p[0] + p[1] + p[2]) / 3.0)
}

/// SSIM value of every full window, keyed by its center pixel.
fn ssim_map(a: &RgbImage, b: &RgbImage) -> Result<Image<Option<f64>>> {
    if a.dims() != b.dims() {
        return Err(Error::Input("SSIM inputs differ in size".into()));
    }
    let (w, h) = a.dims();
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::Input(format!(
            "image {w}x{h} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    let (x, y) = (gray(a), gray(b));
    let g = gaussian_window();
    let r = SSIM_WINDOW / 2;
    Ok(Image::from_fn(w, h, |u, v| {
        if u < r || v < r || u + r >= w || v + r >= h {
            return None;
        }
        let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (j, gj) in g.iter().enumerate() {
            for (i, gi) in g.iter().enumerate() {
                let k = gi * gj;
                let (p, q) = (*x.get(u + i - r, v + j - r), *y.get(u + i - r, v + j - r));
                mx += k * p;
                my += k * q;
                sxx += k * p * p;
                syy += k * q * q;
                sxy += k * p * q;
            }
        }
        let vx = sxx - mx * mx;
        let vy = syy - my * my;
        let cxy = sxy - mx * my;
        Some(
            ((2.0 * mx * my + C1) * (2.0 * cxy + C2))
                / ((mx * mx + my * my + C1) * (vx + vy + C2)),
        )
    }))
}

/// Mean windowed SSIM of the channel-mean grayscale images.
pub fn ssim(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    ssim_masked(a, b, None)
}

/// Mean SSIM over windows whose center lies in `mask`.
pub fn ssim_masked(a: &RgbImage, b: &RgbImage, mask: Option<&Image<bool>>) -> Result<f64> {
    let m = ssim_map(a, b)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, s) in m.as_slice().iter().enumerate() {
        if let Some(s) = s {
            if mask.is_none_or(|mk| mk.as_slice()[i]) {
                sum += s;
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::Input("SSIM mask selects no full window".into()));
    }
    Ok(sum / n as f64)
}

/// Metrics are recorded on every fifth frame.
pub fn metric_schedule(index: usize) -> bool {
    index % 5 == 0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub frame: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub psnr_static_region: f64,
    pub ssim_static_region: f64,
}

pub const METRICS_CSV_HEADER: &str = "frame,psnr,ssim,psnr_static_region,ssim_static_region";

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut out = String::from(METRICS_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6}\n",
            r.frame, r.psnr, r.ssim, r.psnr_static_region, r.ssim_static_region
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Human-readable summary plus a per-frame error CSV next to it.
pub fn write_ate_report(text_path: &Path, csv_path: &Path, report: &AteReport) -> Result<()> {
    let text = format!(
        "matched_poses {}\nrmse {:.9}\nstd {:.9}\nmean {:.9}\n",
        report.errors.len(),
        report.rmse,
        report.std,
        report.mean
    );
    std::fs::write(text_path, text).map_err(|e| Error::io(text_path, e))?;
    let mut f = std::fs::File::create(csv_path).map_err(|e| Error::io(csv_path, e))?;
    writeln!(f, "timestamp,error").map_err(|e| Error::io(csv_path, e))?;
    for (t, e) in &report.errors {
        writeln!(f, "{t:.6},{e:.9}").map_err(|e| Error::io(csv_path, e))?;
    }
    Ok(())
}
