//! Sphere-to-plane bounce simulation, point-cloud rendering and dataset generation.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geom::{restitution_law, rng_stream, RngStream, SurfaceParams, UnitVec3, Vec3, GRAVITY};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub dt: f64,
    pub ball_radius: f64,
    /// Frames before and after impact.
    pub frames: usize,
    /// Points per frame.
    pub points: usize,
    pub noise_sigma: f64,
    pub speed_min: f64,
    pub speed_max: f64,
    /// Half-width of the box impact centers are drawn from.
    pub position_box: f64,
    pub camera: Vec3,
    pub gravity: f64,
    pub patch_extent: f64,
    /// Longest flight searched for an impact, in seconds.
    pub horizon: f64,
    pub max_retries: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt: 0.01,
            ball_radius: 0.07,
            frames: 10,
            points: 500,
            noise_sigma: 0.005,
            speed_min: 1.0,
            speed_max: 5.0,
            position_box: 2.0,
            camera: Vec3::new(0.0, 0.0, 6.0),
            gravity: GRAVITY,
            patch_extent: 1.0,
            horizon: 2.0,
            max_retries: 1000,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.dt > 0.0) {
            return bad("dt must be positive");
        }
        if self.frames < 2 {
            return bad("frames must be at least 2");
        }
        if self.points < 4 {
            return bad("points must be at least 4");
        }
        if !(self.noise_sigma >= 0.0) {
            return bad("noise_sigma must be non-negative");
        }
        if !(self.ball_radius > 0.0) || !(self.patch_extent > 0.0) {
            return bad("radius and patch extent must be positive");
        }
        if !(self.speed_min > 0.0 && self.speed_max >= self.speed_min) {
            return bad("speed range must be positive and ordered");
        }
        Ok(())
    }

    /// Flight time from the initial state to the sampled impact.
    pub fn lead_time(&self) -> f64 {
        (self.frames + 2) as f64 * self.dt
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BallState {
    pub center: Vec3,
    pub velocity: Vec3,
    pub time: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanePatch {
    pub point: Vec3,
    pub normal: UnitVec3,
    pub extent: f64,
}

impl PlanePatch {
    pub fn signed_distance(&self, p: Vec3) -> f64 {
        self.normal.dot(p - self.point)
    }

    /// Whether `p` projects inside the square patch.
    pub fn contains_projection(&self, p: Vec3) -> bool {
        let (u, w) = self.normal.tangent_basis();
        let d = p - self.point;
        d.dot(u).abs() <= self.extent && d.dot(w).abs() <= self.extent
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub time: f64,
    pub points: Vec<Vec3>,
    pub true_center: Option<Vec3>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Trajectory {
    pub frames: Vec<Frame>,
}

impl Trajectory {
    pub fn new(frames: Vec<Frame>) -> Result<Self> {
        let t = Self { frames };
        t.validate()?;
        Ok(t)
    }

    /// Checks strictly increasing, uniformly spaced times and equal frame sizes.
    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.frames.first() else {
            return Ok(());
        };
        let n = first.points.len();
        if n == 0 {
            return Err(Error::EmptyFrame);
        }
        let spacing = self.frames.get(1).map(|f| f.time - first.time);
        for (i, pair) in self.frames.windows(2).enumerate() {
            let step = pair[1].time - pair[0].time;
            let expected = spacing.unwrap_or(step);
            if !(step > 0.0) || (step - expected).abs() > 1e-9 {
                return Err(Error::Format(format!("frame {} breaks uniform time spacing", i + 1)));
            }
        }
        if let Some(bad) = self.frames.iter().position(|f| f.points.len() != n) {
            return Err(Error::Format(format!(
                "frame {bad} has {} points, expected {n}",
                self.frames[bad].points.len()
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Shifts every point by `offset` and every time by `dt`.
    pub fn translated(&self, offset: Vec3, dt: f64) -> Trajectory {
        let frames = self
            .frames
            .iter()
            .map(|f| Frame {
                time: f.time + dt,
                points: f.points.iter().map(|&p| p + offset).collect(),
                true_center: f.true_center.map(|c| c + offset),
            })
            .collect();
        Trajectory { frames }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BounceSample {
    pub pre: Trajectory,
    pub post: Trajectory,
    pub params: SurfaceParams,
    pub impact_time: f64,
    /// Ball center at the instant of impact.
    pub impact_point: Vec3,
    pub scene_id: Option<u64>,
    pub cell: Option<(usize, usize)>,
}

impl BounceSample {
    /// The plane the ball struck, recovered from the impact record.
    pub fn plane(&self, radius: f64, extent: f64) -> PlanePatch {
        let n = self.params.normal;
        PlanePatch { point: self.impact_point - n.get() * radius, normal: n, extent }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImpactRecord {
    pub time: f64,
    pub point: Vec3,
    pub v_minus: Vec3,
    pub v_plus: Vec3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BouncePaths {
    pub pre: Vec<(f64, Vec3)>,
    pub post: Vec<(f64, Vec3)>,
    pub impact: ImpactRecord,
}

fn gravity_vec(g: f64) -> Vec3 {
    Vec3::new(0.0, 0.0, -g)
}

/// Closed-form projectile motion over `dt`.
pub fn step_ballistic(state: BallState, dt: f64, g: f64) -> BallState {
    let a = gravity_vec(g);
    BallState {
        center: state.center + state.velocity * dt + a * (0.5 * dt * dt),
        velocity: state.velocity + a * dt,
        time: state.time + dt,
    }
}

/// Roots of `a t^2 + b t + c = 0` in ascending order.
pub(crate) fn quadratic_roots(a: f64, b: f64, c: f64) -> Vec<f64> {
    let scale = a.abs().max(b.abs()).max(c.abs());
    if scale == 0.0 {
        return Vec::new();
    }
    if a.abs() <= 1e-14 * scale {
        if b == 0.0 {
            return Vec::new();
        }
        return vec![-c / b];
    }
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return Vec::new();
    }
    let q = -0.5 * (b + b.signum() * disc.sqrt());
    let mut r = if q == 0.0 { vec![0.0, 0.0] } else { vec![q / a, c / q] };
    r.sort_by(f64::total_cmp);
    r
}

/// Earliest time in `[0, dt]` at which the ball touches the patch while
/// approaching it.
pub fn detect_impact(
    state: BallState,
    plane: &PlanePatch,
    dt: f64,
    radius: f64,
    g: f64,
) -> Result<Option<f64>> {
    let s0 = plane.signed_distance(state.center);
    if s0 < radius - 1e-9 {
        return Err(Error::Interpenetrating(s0 - radius));
    }
    let n = plane.normal.get();
    let vn = n.dot(state.velocity);
    let an = n.dot(gravity_vec(g));
    for t in quadratic_roots(0.5 * an, vn, s0 - radius) {
        if t < 0.0 || t > dt {
            continue;
        }
        if vn + an * t >= 0.0 {
            continue;
        }
        let at = step_ballistic(state, t, g);
        return Ok(plane.contains_projection(at.center).then_some(t));
    }
    Ok(None)
}

/// Center positions after leaving the plane with velocity `v_plus`. When the
/// rebound has no normal speed and gravity presses into the plane the ball
/// slides along it.
pub(crate) fn post_motion(point: Vec3, v_plus: Vec3, normal: UnitVec3, g: f64, taus: &[f64]) -> Vec<Vec3> {
    let n = normal.get();
    let a = gravity_vec(g);
    let sliding = n.dot(v_plus) <= 1e-9 && n.dot(a) < 0.0;
    let (v, acc) = if sliding {
        (v_plus - n * n.dot(v_plus), a - n * n.dot(a))
    } else {
        (v_plus, a)
    };
    taus.iter().map(|&t| point + v * t + acc * (0.5 * t * t)).collect()
}

/// Time after impact at which a free-flying ball returns to the plane, if ever.
pub(crate) fn recontact_time(v_plus: Vec3, normal: UnitVec3, g: f64) -> Option<f64> {
    let vn = normal.dot(v_plus);
    let an = normal.dot(gravity_vec(g));
    if vn <= 1e-9 || an >= 0.0 {
        return None;
    }
    Some(-2.0 * vn / an)
}

pub fn simulate_bounce(
    init: BallState,
    plane: &PlanePatch,
    params: SurfaceParams,
    cfg: &SimConfig,
) -> Result<BouncePaths> {
    let g = cfg.gravity;
    let dt = cfg.dt;
    let steps = (cfg.horizon / dt).ceil() as usize;
    let mut state = init;
    let mut hit = None;
    for k in 0..steps {
        match detect_impact(state, plane, dt, cfg.ball_radius, g) {
            Ok(Some(tau)) => {
                hit = Some(tau + k as f64 * dt);
                break;
            }
            Ok(None) => state = step_ballistic(init, (k + 1) as f64 * dt, g),
            Err(e) if k == 0 => return Err(e),
            Err(_) => return Err(Error::NoImpact(cfg.horizon)),
        }
    }
    let Some(elapsed) = hit else {
        return Err(Error::NoImpact(cfg.horizon));
    };
    let frames = cfg.frames;
    let earliest = elapsed - frames as f64 * dt;
    if earliest < -1e-12 {
        return Err(Error::ShortFlight { available: elapsed, needed: frames as f64 * dt });
    }
    let at_impact = step_ballistic(init, elapsed, g);
    let v_minus = at_impact.velocity;
    let v_plus = restitution_law(v_minus, params)?;
    let t_star = init.time + elapsed;

    let pre = (0..frames)
        .map(|j| {
            let back = (frames - j) as f64 * dt;
            let s = step_ballistic(init, (elapsed - back).max(0.0), g);
            (t_star - back, s.center)
        })
        .collect();
    if let Some(tr) = recontact_time(v_plus, params.normal, g) {
        if tr <= frames as f64 * dt + 1e-12 {
            return Err(Error::Recontact(tr));
        }
    }
    let taus: Vec<f64> = (1..=frames).map(|j| j as f64 * dt).collect();
    let centers = post_motion(at_impact.center, v_plus, params.normal, g, &taus);
    let post = taus.iter().zip(centers).map(|(&tau, c)| (t_star + tau, c)).collect();
    Ok(BouncePaths {
        pre,
        post,
        impact: ImpactRecord { time: t_star, point: at_impact.center, v_minus, v_plus },
    })
}

fn unit_sphere(rng: &mut RngStream) -> Vec3 {
    loop {
        let v = Vec3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal));
        let n = v.norm();
        if n > 1e-12 {
            return v / n;
        }
    }
}

/// `n` points on the camera-facing hemisphere plus isotropic Gaussian noise.
pub fn render_point_cloud(
    center: Vec3,
    radius: f64,
    camera: Vec3,
    n: usize,
    noise_sigma: f64,
    rng: &mut RngStream,
) -> Vec<Vec3> {
    let view = camera - center;
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let mut d = unit_sphere(rng);
        let side = d.dot(view);
        if side == 0.0 {
            continue;
        }
        if side < 0.0 {
            d = -d;
        }
        let mut p = center + d * radius;
        if noise_sigma > 0.0 {
            let e = Vec3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal));
            p += e * noise_sigma;
        }
        out.push(p);
    }
    out
}

/// Initial state that reaches `impact_center` with velocity `v_minus` after `lead` seconds.
pub fn init_from_impact(impact_center: Vec3, v_minus: Vec3, lead: f64, g: f64) -> BallState {
    let v0 = v_minus - gravity_vec(g) * lead;
    let c0 = impact_center - v0 * lead - gravity_vec(g) * (0.5 * lead * lead);
    BallState { center: c0, velocity: v0, time: 0.0 }
}

/// Normal uniform on the hemisphere opposing `v`.
pub fn opposing_normal(v: Vec3, rng: &mut RngStream) -> UnitVec3 {
    loop {
        let u = unit_sphere(rng);
        let s = u.dot(v);
        if s != 0.0 {
            let n = if s > 0.0 { -u } else { u };
            if let Ok(n) = UnitVec3::new(n) {
                return n;
            }
        }
    }
}

fn sample_geometry(rng: &mut RngStream, cfg: &SimConfig, cor: f64) -> (BallState, PlanePatch, SurfaceParams) {
    let speed = rng.random_range(cfg.speed_min..=cfg.speed_max);
    let v_minus = unit_sphere(rng) * speed;
    let normal = opposing_normal(v_minus, rng);
    let b = cfg.position_box;
    let c = Vec3::new(rng.random_range(-b..=b), rng.random_range(-b..=b), rng.random_range(-b..=b));
    let init = init_from_impact(c, v_minus, cfg.lead_time(), cfg.gravity);
    let plane = PlanePatch { point: c - normal.get() * cfg.ball_radius, normal, extent: cfg.patch_extent };
    (init, plane, SurfaceParams { cor, normal })
}

/// Random initial state, plane and parameters; COR is uniform on [0, 1).
pub fn sample_bounce_config(rng: &mut RngStream, cfg: &SimConfig) -> (BallState, PlanePatch, SurfaceParams) {
    let cor = rng.random::<f64>();
    sample_geometry(rng, cfg, cor)
}

fn render_path(path: &[(f64, Vec3)], cfg: &SimConfig, rng: &mut RngStream) -> Trajectory {
    let frames = path
        .iter()
        .map(|&(time, c)| Frame {
            time,
            points: render_point_cloud(c, cfg.ball_radius, cfg.camera, cfg.points, cfg.noise_sigma, rng),
            true_center: Some(c),
        })
        .collect();
    Trajectory { frames }
}

/// Simulates and renders one bounce.
pub fn render_bounce(
    init: BallState,
    plane: &PlanePatch,
    params: SurfaceParams,
    cfg: &SimConfig,
    rng: &mut RngStream,
) -> Result<BounceSample> {
    let paths = simulate_bounce(init, plane, params, cfg)?;
    let pre = render_path(&paths.pre, cfg, rng);
    let post = render_path(&paths.post, cfg, rng);
    Ok(BounceSample {
        pre,
        post,
        params,
        impact_time: paths.impact.time,
        impact_point: paths.impact.point,
        scene_id: None,
        cell: None,
    })
}

/// Sample `index` of the dataset drawn from `seed`. Failed geometries are
/// redrawn with the COR kept, so rejection does not bias its distribution.
pub fn generate_sample(index: u64, cfg: &SimConfig, seed: u64) -> Result<BounceSample> {
    let mut rng = rng_stream(seed, index);
    let cor = rng.random::<f64>();
    for _ in 0..cfg.max_retries {
        let (init, plane, params) = sample_geometry(&mut rng, cfg, cor);
        match render_bounce(init, &plane, params, cfg, &mut rng) {
            Ok(s) => return Ok(s),
            Err(Error::Interpenetrating(_) | Error::NoImpact(_) | Error::ShortFlight { .. } | Error::Recontact(_)) => {}
            Err(e) => return Err(e),
        }
    }
    Err(Error::RetriesExhausted(cfg.max_retries))
}

/// `count` independent samples; identical for serial and parallel execution.
pub fn generate_dataset(count: usize, cfg: &SimConfig, seed: u64) -> Result<Vec<BounceSample>> {
    cfg.validate()?;
    if count == 0 {
        return Err(Error::Empty("dataset count"));
    }
    (0..count as u64).into_par_iter().map(|i| generate_sample(i, cfg, seed)).collect()
}
