//! Hand-crafted trajectory estimators: sphere centers, parabola fits, sensor
//! COR and the Newtonian forward-prediction baseline.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geom::{cor_from_velocities, restitution_law, rng_stream, RngStream, SurfaceParams, UnitVec3, Vec3};
use crate::sim::{post_motion, quadratic_roots, BounceSample, PlanePatch, SimConfig, Trajectory};
use crate::{Error, Result};

/// Ordered `(time, center)` samples.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CenterPath {
    pub samples: Vec<(f64, Vec3)>,
}

impl CenterPath {
    pub fn new(samples: Vec<(f64, Vec3)>) -> Result<Self> {
        if samples.windows(2).any(|w| !(w[1].0 > w[0].0)) {
            return Err(Error::Format("center path times must increase strictly".into()));
        }
        Ok(Self { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn center(&self, i: usize) -> Option<Vec3> {
        self.samples.get(i).map(|s| s.1)
    }
}

pub fn center_mean(points: &[Vec3]) -> Result<Vec3> {
    if points.is_empty() {
        return Err(Error::EmptyFrame);
    }
    let sum = points.iter().fold(Vec3::ZERO, |acc, &p| acc + p);
    Ok(sum / points.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RansacParams {
    pub iterations: usize,
    pub inlier_tol: f64,
    /// Fraction of the frame a hypothesis must explain to be accepted.
    pub min_inlier_fraction: f64,
    /// Seed for the per-frame streams used by [`extract_centers`].
    pub seed: u64,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self { iterations: 64, inlier_tol: 0.01, min_inlier_fraction: 0.25, seed: 0x5eed }
    }
}

/// Solves a 3x3 system by Gaussian elimination with partial pivoting.
pub(crate) fn solve3(mut m: [[f64; 3]; 3], mut rhs: [f64; 3]) -> Option<[f64; 3]> {
    let scale = m.iter().flatten().fold(0.0f64, |a, v| a.max(v.abs()));
    if !(scale > 0.0) {
        return None;
    }
    for col in 0..3 {
        let piv = (col..3).max_by(|&a, &b| m[a][col].abs().total_cmp(&m[b][col].abs()))?;
        if m[piv][col].abs() <= 1e-13 * scale {
            return None;
        }
        m.swap(col, piv);
        rhs.swap(col, piv);
        for r in col + 1..3 {
            let f = m[r][col] / m[col][col];
            for c in col..3 {
                m[r][c] -= f * m[col][c];
            }
            rhs[r] -= f * rhs[col];
        }
    }
    let mut x = [0.0; 3];
    for r in (0..3).rev() {
        let s: f64 = (r + 1..3).map(|c| m[r][c] * x[c]).sum();
        x[r] = (rhs[r] - s) / m[r][r];
    }
    Some(x)
}

/// The two known-radius spheres through three points, if any.
fn sphere_candidates(p0: Vec3, p1: Vec3, p2: Vec3, radius: f64) -> Option<[Vec3; 2]> {
    let a = p1 - p0;
    let b = p2 - p0;
    let axb = a.cross(b);
    let den = 2.0 * axb.norm_squared();
    if den < 1e-24 {
        return None;
    }
    let cc = p0 + (b * a.norm_squared() - a * b.norm_squared()).cross(axb) / den;
    let rho2 = (cc - p0).norm_squared();
    let h2 = radius * radius - rho2;
    if h2 < 0.0 {
        return None;
    }
    let m = axb / axb.norm() * h2.sqrt();
    Some([cc + m, cc - m])
}

fn truncated_cost(points: &[Vec3], c: Vec3, radius: f64, tol: f64) -> (usize, f64) {
    let mut count = 0;
    let mut cost = 0.0;
    let t2 = tol * tol;
    for &p in points {
        let r = (p - c).norm() - radius;
        let r2 = r * r;
        if r2 <= t2 {
            count += 1;
            cost += r2;
        } else {
            cost += t2;
        }
    }
    (count, cost)
}

/// Gauss-Newton on `sum (|p - c| - radius)^2`.
fn refine_center(points: &[Vec3], mut c: Vec3, radius: f64) -> Vec3 {
    for _ in 0..100 {
        let mut jtj = [[0.0; 3]; 3];
        let mut jtr = [0.0; 3];
        for &p in points {
            let d = p - c;
            let dist = d.norm();
            if dist < 1e-15 {
                continue;
            }
            let j = (-d / dist).to_array();
            let r = dist - radius;
            for a in 0..3 {
                jtr[a] += j[a] * r;
                for b in 0..3 {
                    jtj[a][b] += j[a] * j[b];
                }
            }
        }
        let Some(step) = solve3(jtj, jtr.map(|v| -v)) else { break };
        let step = Vec3::from_array(step);
        c += step;
        if step.norm() <= 1e-15 * (1.0 + c.norm()) {
            break;
        }
    }
    c
}

/// Center of a sphere of known radius fitted robustly to `points`.
pub fn ransac_sphere(points: &[Vec3], radius: f64, params: &RansacParams, rng: &mut RngStream) -> Result<Vec3> {
    let n = points.len();
    if n < 4 {
        return Err(Error::Degenerate(format!("{n} points cannot fix a sphere")));
    }
    let min_inliers = ((params.min_inlier_fraction * n as f64).ceil() as usize).max(4);
    let mut best: Option<(Vec3, usize, f64)> = None;
    for _ in 0..params.iterations {
        let i = rng.random_range(0..n);
        let j = rng.random_range(0..n);
        let k = rng.random_range(0..n);
        if i == j || j == k || i == k {
            continue;
        }
        let Some(cands) = sphere_candidates(points[i], points[j], points[k], radius) else {
            continue;
        };
        for c in cands {
            let (count, cost) = truncated_cost(points, c, radius, params.inlier_tol);
            if best.is_none_or(|b| cost < b.2) {
                best = Some((c, count, cost));
            }
        }
    }
    let Some((mut c, _, _)) = best.filter(|b| b.1 >= min_inliers) else {
        return Err(Error::Degenerate("no hypothesis reached the inlier minimum".into()));
    };
    for _ in 0..3 {
        let inliers: Vec<Vec3> = points
            .iter()
            .copied()
            .filter(|&p| ((p - c).norm() - radius).abs() <= params.inlier_tol)
            .collect();
        if inliers.len() < 4 {
            break;
        }
        c = refine_center(&inliers, c, radius);
    }
    Ok(c)
}

/// RANSAC centers of every frame, each frame with its own deterministic stream.
pub fn extract_centers(traj: &Trajectory, radius: f64, params: &RansacParams) -> Result<CenterPath> {
    let samples = traj
        .frames
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let mut rng = rng_stream(params.seed, i as u64);
            Ok((f.time, ransac_sphere(&f.points, radius, params, &mut rng)?))
        })
        .collect::<Result<Vec<_>>>()?;
    CenterPath::new(samples)
}

/// Per-axis least-squares quadratic, stored in scaled time `s = (t - t0) / h`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParabolaFit {
    t0: f64,
    h: f64,
    /// Per axis `[a, b, c]` of `a s^2 + b s + c`.
    scaled: [[f64; 3]; 3],
    /// Root-mean-square residual over all axes (m).
    pub residual: f64,
}

impl ParabolaFit {
    pub fn position_at(&self, t: f64) -> Vec3 {
        let s = (t - self.t0) / self.h;
        let e = |k: [f64; 3]| (k[0] * s + k[1]) * s + k[2];
        Vec3::new(e(self.scaled[0]), e(self.scaled[1]), e(self.scaled[2]))
    }

    pub fn velocity_at(&self, t: f64) -> Vec3 {
        let s = (t - self.t0) / self.h;
        let e = |k: [f64; 3]| (2.0 * k[0] * s + k[1]) / self.h;
        Vec3::new(e(self.scaled[0]), e(self.scaled[1]), e(self.scaled[2]))
    }

    pub fn acceleration(&self) -> Vec3 {
        let e = |k: [f64; 3]| 2.0 * k[0] / (self.h * self.h);
        Vec3::new(e(self.scaled[0]), e(self.scaled[1]), e(self.scaled[2]))
    }

    /// Per-axis `(a, b, c)` of `p(t) = a t^2 + b t + c` in absolute time.
    pub fn coefficients(&self) -> [[f64; 3]; 3] {
        let (t0, h) = (self.t0, self.h);
        self.scaled.map(|[a, b, c]| {
            let a2 = a / (h * h);
            let b2 = b / h;
            [a2, b2 - 2.0 * a2 * t0, a2 * t0 * t0 - b2 * t0 + c]
        })
    }
}

pub fn fit_parabola(path: &CenterPath) -> Result<ParabolaFit> {
    let s = &path.samples;
    let mut times: Vec<f64> = s.iter().map(|x| x.0).collect();
    times.sort_by(f64::total_cmp);
    times.dedup();
    if times.len() < 3 {
        return Err(Error::InsufficientFrames(format!("{} distinct times, need 3", times.len())));
    }
    let t0 = s.iter().map(|x| x.0).sum::<f64>() / s.len() as f64;
    let h = s.iter().map(|x| (x.0 - t0).abs()).fold(0.0, f64::max);
    let mut m = [[0.0; 3]; 3];
    let mut rhs = [[0.0; 3]; 3];
    for &(t, p) in s {
        let u = (t - t0) / h;
        let basis = [u * u, u, 1.0];
        for a in 0..3 {
            for b in 0..3 {
                m[a][b] += basis[a] * basis[b];
            }
            for (axis, v) in p.to_array().into_iter().enumerate() {
                rhs[axis][a] += basis[a] * v;
            }
        }
    }
    let mut scaled = [[0.0; 3]; 3];
    for axis in 0..3 {
        scaled[axis] = solve3(m, rhs[axis]).ok_or_else(|| Error::Degenerate("rank-deficient time matrix".into()))?;
    }
    let mut fit = ParabolaFit { t0, h, scaled, residual: 0.0 };
    let sq: f64 = s.iter().map(|&(t, p)| (fit.position_at(t) - p).norm_squared()).sum();
    fit.residual = (sq / (3 * s.len()) as f64).sqrt();
    Ok(fit)
}

pub fn velocity_at(fit: &ParabolaFit, t: f64) -> Vec3 {
    fit.velocity_at(t)
}

/// Half-width of the velocity windows around impact (s).
pub const SENSOR_WINDOW: f64 = 0.05;

/// COR from quadratic fits over the frames within [`SENSOR_WINDOW`] on each
/// side of impact, evaluated at the impact time and clamped to [0, 1].
pub fn sensor_cor(sample: &BounceSample, n: UnitVec3, radius: f64, ransac: &RansacParams) -> Result<f64> {
    let (v_minus, v_plus) = sensor_velocities(sample, radius, ransac)?;
    Ok(cor_from_velocities(v_minus, v_plus, n)?.clamp(0.0, 1.0))
}

/// Velocities just before and after impact, fitted over the sensor windows.
pub fn sensor_velocities(sample: &BounceSample, radius: f64, ransac: &RansacParams) -> Result<(Vec3, Vec3)> {
    let t = sample.impact_time;
    let eps = 1e-9;
    let window = |traj: &Trajectory, keep: &dyn Fn(f64) -> bool| -> Result<ParabolaFit> {
        let frames: Vec<_> = traj.frames.iter().filter(|f| keep(f.time)).cloned().collect();
        if frames.len() < 3 {
            return Err(Error::InsufficientFrames(format!("{} frames in a velocity window", frames.len())));
        }
        fit_parabola(&extract_centers(&Trajectory { frames }, radius, ransac)?)
    };
    let pre = window(&sample.pre, &|ft| ft < t && ft >= t - SENSOR_WINDOW - eps)?;
    let post = window(&sample.post, &|ft| ft > t && ft <= t + SENSOR_WINDOW + eps)?;
    Ok((pre.velocity_at(t), post.velocity_at(t)))
}

/// Estimated impact `(time, center, velocity)`: first approaching crossing of
/// the fitted parabola with the plane at one radius, after `not_before`.
pub fn estimate_impact(fit: &ParabolaFit, plane: &PlanePatch, radius: f64, not_before: f64) -> Result<(f64, Vec3, Vec3)> {
    let n = plane.normal.get().to_array();
    let mut q = [0.0; 3];
    for axis in 0..3 {
        for (k, qk) in q.iter_mut().enumerate() {
            *qk += n[axis] * fit.scaled[axis][k];
        }
    }
    q[2] -= plane.normal.dot(plane.point) + radius;
    let s_min = (not_before - fit.t0) / fit.h;
    for s in quadratic_roots(q[0], q[1], q[2]) {
        if s < s_min || 2.0 * q[0] * s + q[1] >= 0.0 {
            continue;
        }
        let t = fit.t0 + s * fit.h;
        return Ok((t, fit.position_at(t), fit.velocity_at(t)));
    }
    Err(Error::NoPredictedImpact)
}

/// Rigid-body prediction of the post-impact centers from a pre-impact trajectory.
pub fn newtonian_predict(
    pre: &Trajectory,
    params: SurfaceParams,
    plane: &PlanePatch,
    cfg: &SimConfig,
    ransac: &RansacParams,
) -> Result<CenterPath> {
    if pre.len() < 3 {
        return Err(Error::InsufficientFrames(format!("{} pre frames", pre.len())));
    }
    let fit = fit_parabola(&extract_centers(pre, cfg.ball_radius, ransac)?)?;
    let first = pre.frames[0].time;
    let (t_hat, c_hat, v_minus) = estimate_impact(&fit, plane, cfg.ball_radius, first)?;
    let v_plus = restitution_law(v_minus, params).map_err(|_| Error::NoPredictedImpact)?;
    let taus: Vec<f64> = (1..=cfg.frames).map(|j| j as f64 * cfg.dt).collect();
    let centers = post_motion(c_hat, v_plus, params.normal, cfg.gravity, &taus);
    CenterPath::new(taus.iter().zip(centers).map(|(&tau, c)| (t_hat + tau, c)).collect())
}

/// The no-bounce baseline: the pre-impact parabola extrapolated to `times`.
pub fn ballistic_extrapolate(pre: &Trajectory, times: &[f64], radius: f64, ransac: &RansacParams) -> Result<CenterPath> {
    let fit = fit_parabola(&extract_centers(pre, radius, ransac)?)?;
    CenterPath::new(times.iter().map(|&t| (t, fit.position_at(t))).collect())
}
