use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};

use crate::error::{Error, Result};
use crate::eval::TimedPose;
use crate::scene::CameraPose;

fn fmt(x: f64) -> String {
    // shortest round-trip representation, without a negative zero
    format!("{}", x + 0.0)
}

/// One `timestamp tx ty tz qx qy qz qw` line per pose, camera-to-world, with the
/// quaternion normalized and its scalar part non-negative.
pub fn format_trajectory(poses: &[TimedPose]) -> Result<String> {
    let mut out = String::new();
    for p in poses {
        p.pose.validate()?;
        let c = p.pose.center();
        let mut q = p.pose.orientation_camera_to_world().into_inner();
        if q.w < 0.0 {
            q = -q;
        }
        let q = q.normalize();
        let fields = [p.timestamp, c.x, c.y, c.z, q.i, q.j, q.k, q.w];
        if fields.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numerics(format!("non-finite pose at t={}", p.timestamp)));
        }
        let line: Vec<String> = fields.iter().map(|x| fmt(*x)).collect();
        writeln!(out, "{}", line.join(" ")).expect("writing to a String");
    }
    Ok(out)
}

pub fn write_trajectory(poses: &[TimedPose], path: &Path) -> Result<()> {
    let text = format_trajectory(poses)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn parse_trajectory(text: &str, path: &Path) -> Result<Vec<TimedPose>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::parse(path, n + 1, e.to_string()))?;
        if vals.len() != 8 {
            return Err(Error::parse(
                path,
                n + 1,
                format!("expected 8 fields, found {}", vals.len()),
            ));
        }
        let q = Quaternion::new(vals[7], vals[4], vals[5], vals[6]);
        if !(q.norm() > 1e-12) {
            return Err(Error::parse(path, n + 1, "zero quaternion"));
        }
        out.push(TimedPose {
            timestamp: vals[0],
            pose: CameraPose::from_camera_to_world(
                Vector3::new(vals[1], vals[2], vals[3]),
                UnitQuaternion::from_quaternion(q),
            ),
        });
    }
    Ok(out)
}

pub fn read_trajectory(path: &Path) -> Result<Vec<TimedPose>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_trajectory(&text, path)
}
