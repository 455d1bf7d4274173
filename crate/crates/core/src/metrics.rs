//! Evaluation metrics and machine-readable reports.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::fit::{ransac_sphere, RansacParams};
use crate::geom::{rng_stream, Vec3};
use crate::sim::Trajectory;
use crate::{Error, Result};

/// Post frame sitting 0.1 s after impact at the default frame step.
pub const EVAL_FRAME: usize = 9;

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Some((mean, var.sqrt()))
}

/// Ball center in frame `index`: the simulator annotation when present,
/// otherwise a RANSAC fit of the frame's points.
pub fn frame_center(traj: &Trajectory, index: usize, radius: f64, ransac: &RansacParams) -> Result<Vec3> {
    let f = traj
        .frames
        .get(index)
        .ok_or_else(|| Error::Metric(format!("trajectory has no frame {index}")))?;
    match f.true_center {
        Some(c) => Ok(c),
        None => ransac_sphere(&f.points, radius, ransac, &mut rng_stream(ransac.seed, index as u64)),
    }
}

/// Per-sample center distances (m) at [`EVAL_FRAME`]. Predicted centers are
/// always re-fitted from points, so decoded trajectories are scored the same
/// way whatever annotations they carry.
pub fn forward_distances(pred: &[Trajectory], truth: &[Trajectory], radius: f64, ransac: &RansacParams) -> Result<Vec<f64>> {
    if pred.len() != truth.len() {
        return Err(Error::Metric(format!("{} predictions for {} truths", pred.len(), truth.len())));
    }
    pred.par_iter()
        .zip(truth)
        .map(|(p, t)| {
            let f = p
                .frames
                .get(EVAL_FRAME)
                .ok_or_else(|| Error::Metric(format!("prediction has no frame {EVAL_FRAME}")))?;
            let pc = ransac_sphere(&f.points, radius, ransac, &mut rng_stream(ransac.seed, EVAL_FRAME as u64))?;
            Ok(pc.distance(frame_center(t, EVAL_FRAME, radius, ransac)?))
        })
        .collect()
}

/// Median forward distance in centimetres.
pub fn eval_forward(pred: &[Trajectory], truth: &[Trajectory], radius: f64, ransac: &RansacParams) -> Result<f64> {
    let d = forward_distances(pred, truth, radius, ransac)?;
    median(&d).map(|m| m * 100.0).ok_or(Error::Empty("evaluation set"))
}

/// Percentage of pairs whose angle is at most `threshold_deg`.
pub fn eval_normals(pred: &[Vec3], reference: &[Vec3], threshold_deg: f64) -> Result<f64> {
    if pred.len() != reference.len() {
        return Err(Error::Metric("normal sets differ in length".into()));
    }
    if pred.is_empty() {
        return Err(Error::Empty("normal set"));
    }
    let cos_t = threshold_deg.to_radians().cos();
    let mut hits = 0usize;
    for (a, b) in pred.iter().zip(reference) {
        for v in [a, b] {
            if (v.norm() - 1.0).abs() > 1e-6 {
                return Err(Error::Metric(format!("non-unit normal {v:?}")));
            }
        }
        // Inclusive threshold, with slack for rounding in the cosine.
        if a.dot(*b) >= cos_t - 1e-12 {
            hits += 1;
        }
    }
    Ok(100.0 * hits as f64 / pred.len() as f64)
}

/// Median absolute COR error.
pub fn eval_cor(pred: &[f64], reference: &[f64]) -> Result<f64> {
    if pred.len() != reference.len() {
        return Err(Error::Metric("COR sets differ in length".into()));
    }
    let err: Vec<f64> = pred.iter().zip(reference).map(|(p, r)| (p - r).abs()).collect();
    median(&err).ok_or(Error::Empty("COR set"))
}

/// Median of `errors` within each COR bin. `edges` partition `[0, 1]`; bins
/// are half-open except the last, which includes 1. Empty bins are `None`.
pub fn eval_by_cor_bin(errors: &[f64], cors: &[f64], edges: &[f64]) -> Result<Vec<Option<f64>>> {
    if errors.len() != cors.len() {
        return Err(Error::Metric("errors and CORs differ in length".into()));
    }
    if edges.len() < 2 || edges[0] != 0.0 || edges[edges.len() - 1] != 1.0 || edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Metric("bin edges must increase from 0 to 1".into()));
    }
    let nb = edges.len() - 1;
    let mut groups = vec![Vec::new(); nb];
    for (&e, &c) in errors.iter().zip(cors) {
        if !(0.0..=1.0).contains(&c) {
            return Err(Error::Metric(format!("COR {c} outside [0, 1]")));
        }
        let b = edges[1..].iter().position(|&hi| c < hi).unwrap_or(nb - 1);
        groups[b].push(e);
    }
    Ok(groups.iter().map(|g| median(g)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinReport {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub median_cm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub count: usize,
    pub median_cm: f64,
    /// Median over samples of each condition, e.g. estimated normal or COR.
    pub conditions: BTreeMap<String, f64>,
    pub normals_within_30: Option<f64>,
    pub cor_mae: Option<f64>,
    pub by_cor_bin: Vec<BinReport>,
    pub runtime_s: f64,
    pub config: BTreeMap<String, String>,
}

/// Per-bin counts and medians of distances (m, reported in cm).
pub fn bin_report(distances: &[f64], cors: &[f64], edges: &[f64]) -> Result<Vec<BinReport>> {
    let medians = eval_by_cor_bin(distances, cors, edges)?;
    Ok(medians
        .into_iter()
        .enumerate()
        .map(|(i, m)| {
            let (lo, hi) = (edges[i], edges[i + 1]);
            let last = i + 2 == edges.len();
            let count = cors.iter().filter(|&&c| c >= lo && (c < hi || (last && c <= hi))).count();
            BinReport { lo, hi, count, median_cm: m.map(|v| v * 100.0) }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cor_error_examples() {
        let r = [0.1, 0.4, 0.7, 0.9];
        assert_eq!(eval_cor(&r, &r).unwrap(), 0.0);
        let p: Vec<f64> = r.iter().map(|c| c + 0.1).collect();
        assert!((eval_cor(&p, &r).unwrap() - 0.1).abs() < 1e-12);
        let p = [0.3, 0.2, 0.9, 0.7];
        assert!((eval_cor(&p, &r).unwrap() - 0.2).abs() < 1e-12);
    }

    #[test]
    fn normal_threshold_is_inclusive() {
        let z = Vec3::Z;
        let a = 29.9f64.to_radians();
        let tilted = Vec3::new(a.sin(), 0.0, a.cos());
        assert_eq!(eval_normals(&[z, z], &[z, z], 30.0).unwrap(), 100.0);
        assert_eq!(eval_normals(&[tilted], &[z], 30.0).unwrap(), 100.0);
        assert_eq!(eval_normals(&[Vec3::X], &[z], 30.0).unwrap(), 0.0);
        assert!(eval_normals(&[Vec3::new(0.0, 0.0, 2.0)], &[z], 30.0).is_err());
    }

    #[test]
    fn bins() {
        let err = [1.0, 2.0, 3.0, 4.0];
        let cor = [0.1, 0.2, 0.8, 1.0];
        assert_eq!(eval_by_cor_bin(&err, &cor, &[0.0, 1.0]).unwrap(), vec![median(&err)]);
        assert_eq!(eval_by_cor_bin(&err, &cor, &[0.0, 0.25, 0.5, 1.0]).unwrap(), vec![Some(1.5), None, Some(3.5)]);
        assert!(eval_by_cor_bin(&err, &cor, &[0.0, 0.5]).is_err());
    }

    #[test]
    fn spread() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
        assert_eq!(median(&[]), None);
    }
}
