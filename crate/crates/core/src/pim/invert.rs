//! Grid-search inversion of the core engine for surface parameters.

use std::f64::consts::PI;

use crate::geom::{cosine_distance, SurfaceParams, UnitVec3, Vec3};
use crate::pim::model::PimModel;
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InversionGrid {
    pub cor_step: f64,
    pub normals: usize,
    /// Two extra local passes around the grid optimum with halved steps.
    pub refine: bool,
}

impl Default for InversionGrid {
    fn default() -> Self {
        Self { cor_step: 0.05, normals: 500, refine: false }
    }
}

impl InversionGrid {
    pub fn cor_values(&self) -> Vec<f64> {
        let n = (1.0 / self.cor_step).round() as usize;
        (0..=n).map(|i| (i as f64 * self.cor_step).min(1.0)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Inversion {
    pub params: SurfaceParams,
    pub distance: f64,
}

/// `count` near-uniform directions on the hemisphere around `axis`, or on the
/// whole sphere when `axis` is `None`.
pub fn fibonacci_directions(count: usize, axis: Option<UnitVec3>) -> Vec<UnitVec3> {
    let golden = PI * (3.0 - 5f64.sqrt());
    let (axis, span) = match axis {
        Some(a) => (a, 1.0),
        None => (UnitVec3::Z, 2.0),
    };
    let (u, w) = axis.tangent_basis();
    let n = axis.get();
    (0..count)
        .map(|k| {
            let z = 1.0 - span * (k as f64 + 0.5) / count as f64;
            let r = (1.0 - z * z).max(0.0).sqrt();
            let phi = k as f64 * golden;
            let d = u * (r * phi.cos()) + w * (r * phi.sin()) + n * z;
            UnitVec3::new(d).expect("unit by construction")
        })
        .collect()
}

/// Index of the smallest distance; the first one wins ties.
fn argmin(d: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in d.iter().enumerate() {
        if *v < d[best] {
            best = i;
        }
    }
    best
}

fn distances(model: &PimModel, t_i: &[f64], t_o: &[f64], cands: &[[f64; 4]]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(cands.len());
    for chunk in cands.chunks(4096) {
        out.extend(model.engine_forward_many(t_i, chunk)?.iter().map(|t_p| cosine_distance(t_p, t_o)));
    }
    Ok(out)
}

/// Parameters whose predicted post encoding is closest to `t_o`. Normals are
/// searched on the hemisphere around `axis` (typically the reversed incoming
/// direction) or the full sphere.
pub fn invert_params(
    model: &PimModel,
    t_i: &[f64],
    t_o: &[f64],
    grid: &InversionGrid,
    axis: Option<UnitVec3>,
) -> Result<Inversion> {
    let cors = grid.cor_values();
    let normals = fibonacci_directions(grid.normals, axis);
    let cands: Vec<[f64; 4]> = normals
        .iter()
        .flat_map(|n| {
            let v = n.get();
            cors.iter().map(move |&c| [c, v.x, v.y, v.z])
        })
        .collect();
    let d = distances(model, t_i, t_o, &cands)?;
    let i = argmin(&d);
    let mut cor = cands[i][0];
    let mut normal = normals[i / cors.len()];
    let mut best = d[i];
    if grid.refine {
        let mut dc = grid.cor_step;
        let area = if axis.is_some() { 2.0 * PI } else { 4.0 * PI };
        let mut da = (area / grid.normals.max(1) as f64).sqrt();
        for _ in 0..2 {
            dc *= 0.5;
            da *= 0.5;
            let (u, w) = normal.tangent_basis();
            let n = normal.get();
            let mut local = vec![(cor, n), ((cor - dc).max(0.0), n), ((cor + dc).min(1.0), n)];
            for t in [u, -u, w, -w] {
                local.push((cor, n * da.cos() + t * da.sin()));
            }
            let cands: Vec<[f64; 4]> = local.iter().map(|(c, v)| [*c, v.x, v.y, v.z]).collect();
            let d = distances(model, t_i, t_o, &cands)?;
            let j = argmin(&d);
            cor = local[j].0;
            normal = UnitVec3::new(local[j].1)?;
            best = d[j];
        }
    }
    Ok(Inversion { params: SurfaceParams { cor, normal }, distance: best })
}

/// Direction opposite to an incoming velocity, used as the search hemisphere axis.
pub fn incoming_axis(v_minus: Vec3) -> Option<UnitVec3> {
    UnitVec3::new(-v_minus).ok()
}
