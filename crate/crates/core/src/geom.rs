//! Vectors, the restitution collision law and seeded random streams.

use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Standard gravity in m/s^2, acting along -z.
pub const GRAVITY: f64 = 9.81;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3::new(0.0, 0.0, 0.0);
    pub const X: Vec3 = Vec3::new(1.0, 0.0, 0.0);
    pub const Y: Vec3 = Vec3::new(0.0, 1.0, 0.0);
    pub const Z: Vec3 = Vec3::new(0.0, 0.0, 1.0);

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm_squared(self) -> f64 {
        self.dot(self)
    }

    pub fn norm(self) -> f64 {
        self.norm_squared().sqrt()
    }

    pub fn distance(self, o: Vec3) -> f64 {
        (self - o).norm()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl AddAssign for Vec3 {
    fn add_assign(&mut self, o: Vec3) {
        *self = *self + o;
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Mul<Vec3> for f64 {
    type Output = Vec3;
    fn mul(self, v: Vec3) -> Vec3 {
        v * self
    }
}

impl Div<f64> for Vec3 {
    type Output = Vec3;
    fn div(self, s: f64) -> Vec3 {
        Vec3::new(self.x / s, self.y / s, self.z / s)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

/// A direction: Euclidean norm 1 within 1e-9.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec3", into = "Vec3")]
pub struct UnitVec3(Vec3);

impl UnitVec3 {
    pub const Z: UnitVec3 = UnitVec3(Vec3::Z);

    /// Normalizes `v`; fails on vectors shorter than 1e-12.
    pub fn new(v: Vec3) -> Result<Self> {
        let n = v.norm();
        if !(n > 1e-12) || !v.is_finite() {
            return Err(Error::ZeroVector);
        }
        Ok(Self(v / n))
    }

    pub fn get(self) -> Vec3 {
        self.0
    }

    pub fn dot(self, v: Vec3) -> f64 {
        self.0.dot(v)
    }

    /// Angle to `other` in radians.
    pub fn angle_to(self, other: UnitVec3) -> f64 {
        self.0.dot(other.0).clamp(-1.0, 1.0).acos()
    }

    /// Two unit vectors completing a right-handed orthonormal frame.
    pub fn tangent_basis(self) -> (Vec3, Vec3) {
        let n = self.0;
        let helper = if n.x.abs() < 0.9 { Vec3::X } else { Vec3::Y };
        let u = helper - n * n.dot(helper);
        let u = u / u.norm();
        (u, n.cross(u))
    }
}

impl TryFrom<Vec3> for UnitVec3 {
    type Error = Error;
    /// Accepts an already-unit vector without renormalizing it, so stored
    /// normals read back bit-for-bit.
    fn try_from(v: Vec3) -> Result<Self> {
        if !v.is_finite() || (v.norm() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParams(format!("normal has norm {}, expected 1", v.norm())));
        }
        Ok(Self(v))
    }
}

impl From<UnitVec3> for Vec3 {
    fn from(u: UnitVec3) -> Vec3 {
        u.0
    }
}

/// Effective surface parameters: coefficient of restitution and collision
/// normal (pointing away from the surface).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurfaceParams {
    pub cor: f64,
    pub normal: UnitVec3,
}

impl SurfaceParams {
    pub fn new(cor: f64, normal: UnitVec3) -> Result<Self> {
        if !(0.0..=1.0).contains(&cor) {
            return Err(Error::InvalidParams(format!("cor {cor} outside [0, 1]")));
        }
        Ok(Self { cor, normal })
    }

    /// `(cor, n_x, n_y, n_z)`.
    pub fn to_array(self) -> [f64; 4] {
        let n = self.normal.get();
        [self.cor, n.x, n.y, n.z]
    }

    /// Reads a raw 4-vector: COR clamped to [0, 1], normal block renormalized.
    pub fn from_raw(raw: [f64; 4]) -> Result<Self> {
        let normal = UnitVec3::new(Vec3::new(raw[1], raw[2], raw[3]))?;
        let cor = if raw[0].is_nan() { 0.5 } else { raw[0].clamp(0.0, 1.0) };
        Ok(Self { cor, normal })
    }
}

/// Post-impact velocity under the frictionless restitution law:
/// `v+ = v- - (1 + cor) (n.v-) n`.
pub fn restitution_law(v_minus: Vec3, params: SurfaceParams) -> Result<Vec3> {
    let n = params.normal.get();
    let vn = n.dot(v_minus);
    if vn >= 0.0 {
        return Err(Error::NotApproaching(vn));
    }
    Ok(v_minus - n * ((1.0 + params.cor) * vn))
}

/// `-(n.v+) / (n.v-)`, the inverse of [`restitution_law`].
pub fn cor_from_velocities(v_minus: Vec3, v_plus: Vec3, n: UnitVec3) -> Result<f64> {
    let vn = n.dot(v_minus);
    if vn.abs() < 1e-12 {
        return Err(Error::DegenerateNormalVelocity(vn));
    }
    Ok(-n.dot(v_plus) / vn)
}

/// `1 - <a, b>` for unit vectors, evaluated as `|a - b|^2 / 2` so that a
/// vector is at distance exactly zero from itself; lies in [0, 2].
pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()
}

/// Random stream type used throughout. ChaCha output is fixed by the
/// algorithm, so a `(seed, stream)` pair reproduces across platforms.
pub type RngStream = ChaCha8Rng;

pub fn rng_stream(seed: u64, stream: u64) -> RngStream {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn up(cor: f64) -> SurfaceParams {
        SurfaceParams::new(cor, UnitVec3::Z).unwrap()
    }

    #[test]
    fn restitution_examples() {
        let v = restitution_law(Vec3::new(0.0, 0.0, -2.0), up(0.5)).unwrap();
        assert_eq!(v, Vec3::new(0.0, 0.0, 1.0));
        let v = restitution_law(Vec3::new(1.0, 0.0, -2.0), up(0.0)).unwrap();
        assert_eq!(v, Vec3::new(1.0, 0.0, 0.0));
        let v = restitution_law(Vec3::new(1.0, 0.0, -3.0), up(1.0)).unwrap();
        assert_eq!(v, Vec3::new(1.0, 0.0, 3.0));
    }

    #[test]
    fn restitution_rejects_receding_and_grazing() {
        assert!(matches!(
            restitution_law(Vec3::new(1.0, 0.0, 0.0), up(0.5)),
            Err(Error::NotApproaching(_))
        ));
        assert!(restitution_law(Vec3::new(0.0, 0.0, 1.0), up(0.5)).is_err());
    }

    #[test]
    fn cor_examples() {
        let n = UnitVec3::Z;
        let c = |a: [f64; 3], b: [f64; 3]| {
            cor_from_velocities(Vec3::from_array(a), Vec3::from_array(b), n).unwrap()
        };
        assert_eq!(c([0.0, 0.0, -2.0], [0.0, 0.0, 1.0]), 0.5);
        assert_eq!(c([1.0, 0.0, -3.0], [1.0, 0.0, 3.0]), 1.0);
        assert_eq!(c([0.0, 1.0, -4.0], [0.0, 1.0, 0.0]), 0.0);
        assert!(cor_from_velocities(Vec3::X, Vec3::Z, n).is_err());
    }

    #[test]
    fn cosine_examples() {
        let a = [0.6, 0.8];
        assert!(cosine_distance(&a, &a).abs() < 1e-15);
        assert!((cosine_distance(&a, &[-0.6, -0.8]) - 2.0).abs() < 1e-15);
        assert!((cosine_distance(&[1.0, 0.0], &[0.0, 1.0]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn params_readout_clamps_and_normalizes() {
        let p = SurfaceParams::from_raw([1.3, 0.0, 0.0, 2.0]).unwrap();
        assert_eq!(p.cor, 1.0);
        assert_eq!(p.normal.get(), Vec3::Z);
        assert!(SurfaceParams::from_raw([0.5, 0.0, 0.0, 0.0]).is_err());
        assert!(SurfaceParams::new(-0.1, UnitVec3::Z).is_err());
    }

    #[test]
    fn unit_vector_serde_rejects_non_unit() {
        let ok: UnitVec3 = serde_json::from_str(r#"{"x":0.0,"y":0.6,"z":0.8}"#).unwrap();
        assert_eq!(ok.get(), Vec3::new(0.0, 0.6, 0.8));
        assert!(serde_json::from_str::<UnitVec3>(r#"{"x":0.0,"y":0.0,"z":2.0}"#).is_err());
    }

    #[test]
    fn rng_streams_are_reproducible_and_distinct() {
        let a: Vec<u64> = (0..4).map(|_| 0).scan(rng_stream(7, 3), |r, _| Some(r.random())).collect();
        let b: Vec<u64> = (0..4).map(|_| 0).scan(rng_stream(7, 3), |r, _| Some(r.random())).collect();
        let c: Vec<u64> = (0..4).map(|_| 0).scan(rng_stream(7, 4), |r, _| Some(r.random())).collect();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    fn arb_impact() -> impl Strategy<Value = (Vec3, SurfaceParams)> {
        (any::<u64>(), 0.0f64..=1.0).prop_map(|(seed, cor)| {
            let mut rng = rng_stream(seed, 0);
            let mut rv = || Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let n = UnitVec3::new(rv() + Vec3::new(0.0, 0.0, 1e-3)).unwrap();
            let mut v = rv() * 5.0;
            if n.dot(v) >= 0.0 {
                v = v - n.get() * (2.0 * n.dot(v) + 0.1);
            }
            (v, SurfaceParams::new(cor, n).unwrap())
        })
    }

    proptest! {
        #[test]
        fn round_trip_recovers_cor((v, p) in arb_impact()) {
            let vp = restitution_law(v, p).unwrap();
            let cor = cor_from_velocities(v, vp, p.normal).unwrap();
            prop_assert!((cor - p.cor).abs() <= 1e-12);
        }

        #[test]
        fn energy_and_tangential_invariance((v, p) in arb_impact()) {
            let n = p.normal.get();
            let vp = restitution_law(v, p).unwrap();
            prop_assert!(n.dot(vp).abs() <= n.dot(v).abs() * (1.0 + 1e-15));
            let t_in = v - n * n.dot(v);
            let t_out = vp - n * n.dot(vp);
            prop_assert!((t_in - t_out).norm() <= 1e-12 * v.norm().max(1.0));
        }
    }
}
