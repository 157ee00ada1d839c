use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Combined loss of one entity at each coarse-tracking iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct LossFlowRecord {
    pub object_id: u32,
    pub values: Vec<f64>,
}

impl LossFlowRecord {
    pub fn new(object_id: u32) -> Self {
        Self {
            object_id,
            values: Vec::new(),
        }
    }

    /// `deltas[k] = values[k + 1] - values[k]`
    pub fn deltas(&self) -> Vec<f64> {
        self.values.windows(2).map(|w| w[1] - w[0]).collect()
    }
}

/// `(mean ΔL, population std ΔL)` of a flow.
pub fn extract_features(record: &LossFlowRecord) -> Result<[f64; 2]> {
    if record.values.len() < 2 {
        return Err(Error::Input(format!(
            "loss flow for object {} has {} values, need at least 2",
            record.object_id,
            record.values.len()
        )));
    }
    if record.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerics(format!(
            "non-finite loss in flow for object {}",
            record.object_id
        )));
    }
    let d = record.deltas();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    Ok([mean, var.sqrt()])
}

pub const FLOW_CSV_HEADER: &str = "frame,object_id,iteration,loss";

/// Appends flows as `frame,object_id,iteration,loss` rows.
pub fn write_flow_rows<W: Write>(out: &mut W, frame: usize, flows: &[LossFlowRecord]) -> std::io::Result<()> {
    for f in flows {
        for (k, v) in f.values.iter().enumerate() {
            writeln!(out, "{frame},{},{k},{v:.17e}", f.object_id)?;
        }
    }
    Ok(())
}

/// Reads a flow CSV back into `(frame, record)` pairs, in file order.
pub fn read_flow_csv(path: &Path) -> Result<Vec<(usize, LossFlowRecord)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out: Vec<(usize, LossFlowRecord)> = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if ln == 0 && line.trim() == FLOW_CSV_HEADER {
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 4 {
            return Err(Error::parse(path, ln + 1, "expected 4 columns"));
        }
        let bad = |what: &str| Error::parse(path, ln + 1, format!("bad {what}"));
        let frame: usize = cols[0].trim().parse().map_err(|_| bad("frame"))?;
        let id: u32 = cols[1].trim().parse().map_err(|_| bad("object_id"))?;
        let iter: usize = cols[2].trim().parse().map_err(|_| bad("iteration"))?;
        let loss: f64 = cols[3].trim().parse().map_err(|_| bad("loss"))?;
        match out.last_mut() {
            Some((f, rec)) if *f == frame && rec.object_id == id && rec.values.len() == iter => {
                rec.values.push(loss)
            }
            _ if iter == 0 => out.push((frame, LossFlowRecord { object_id: id, values: vec![loss] })),
            _ => return Err(Error::parse(path, ln + 1, "iterations out of order")),
        }
    }
    Ok(out)
}
