//! Learnable per-cell surface parameter fields over synthetic scenes, trained
//! through the frozen or partially trained predictor.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use rebound_nn::{Adam, AdamConfig, Graph, NodeId, ParamId, Tensor};
use serde::{Deserialize, Serialize};

use crate::geom::{rng_stream, RngStream, SurfaceParams, UnitVec3, Vec3};
use crate::io::{read_u32, read_f64};
use crate::pim::{EncodeItem, PimModel, Which};
use crate::sim::{init_from_impact, opposing_normal, render_bounce, BounceSample, PlanePatch, SimConfig};
use crate::{Error, Result};

/// A flat scene (surface plane `z = origin.z`) divided into `height x width`
/// square cells, each with hidden effective parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub id: u64,
    pub height: usize,
    pub width: usize,
    pub cell_size: f64,
    /// Corner of cell (0, 0).
    pub origin: Vec3,
    /// Row-major: cell `(x, y)` at `y * width + x`.
    pub cells: Vec<SurfaceParams>,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height < 2 || self.width < 2 {
            return Err(Error::Config("scene grid must be at least 2 x 2".into()));
        }
        if self.cells.len() != self.height * self.width {
            return Err(Error::Config("scene cell count does not match grid".into()));
        }
        if !(self.cell_size > 0.0) {
            return Err(Error::Config("cell size must be positive".into()));
        }
        Ok(())
    }

    pub fn up(&self) -> UnitVec3 {
        UnitVec3::Z
    }

    pub fn index(&self, x: usize, y: usize) -> Result<usize> {
        if x >= self.width || y >= self.height {
            return Err(Error::CellOutOfRange { x, y, width: self.width, height: self.height });
        }
        Ok(y * self.width + x)
    }

    pub fn params(&self, x: usize, y: usize) -> Result<SurfaceParams> {
        Ok(self.cells[self.index(x, y)?])
    }

    pub fn cell_center(&self, x: usize, y: usize) -> Vec3 {
        self.origin + Vec3::new((x as f64 + 0.5) * self.cell_size, (y as f64 + 0.5) * self.cell_size, 0.0)
    }

    /// Cell under `p` after orthogonal projection onto the surface. Points on
    /// a boundary belong to the lower-index cell.
    pub fn cell_of_point(&self, p: Vec3) -> Result<(usize, usize)> {
        let u = (p.x - self.origin.x) / self.cell_size;
        let v = (p.y - self.origin.y) / self.cell_size;
        if !(u >= 0.0 && v >= 0.0 && u <= self.width as f64 && v <= self.height as f64) {
            return Err(Error::OutsideGrid);
        }
        let idx = |s: f64| (s.ceil() as usize).saturating_sub(1);
        Ok((idx(u), idx(v)))
    }

    /// Two halves split at `width / 2`, with CORs `cor_left` / `cor_right`
    /// and normals tilted from vertical by `tilt_deg` toward +x and +y.
    pub fn two_region(id: u64, height: usize, width: usize, cor_left: f64, cor_right: f64, tilt_deg: f64) -> Result<Self> {
        let t = tilt_deg.to_radians();
        let left = SurfaceParams::new(cor_left, UnitVec3::new(Vec3::new(t.sin(), 0.0, t.cos()))?)?;
        let right = SurfaceParams::new(cor_right, UnitVec3::new(Vec3::new(0.0, t.sin(), t.cos()))?)?;
        let cells = (0..height)
            .flat_map(|_| (0..width).map(move |x| if x < width / 2 { left } else { right }))
            .collect();
        let s = Self { id, height, width, cell_size: 0.25, origin: Vec3::ZERO, cells };
        s.validate()?;
        Ok(s)
    }
}

/// Cell of a frame's points: their mean projected onto the scene surface.
pub fn locate_impact_cell(points: &[Vec3], scene: &SceneSpec) -> Result<(usize, usize)> {
    let mean = crate::fit::center_mean(points)?;
    scene.cell_of_point(mean)
}

/// Cell of a bounce: its annotation if present, otherwise located from the
/// last pre-impact frame.
pub fn bounce_cell(sample: &BounceSample, scene: &SceneSpec) -> Result<(usize, usize)> {
    if let Some(c) = sample.cell {
        return Ok(c);
    }
    let last = sample.pre.frames.last().ok_or(Error::Empty("pre trajectory"))?;
    locate_impact_cell(&last.points, scene)
}

fn scene_bounce(scene: &SceneSpec, sim: &SimConfig, rng: &mut RngStream) -> Result<BounceSample> {
    let x = rng.random_range(0..scene.width);
    let y = rng.random_range(0..scene.height);
    let params = scene.params(x, y)?;
    let n = params.normal;
    for _ in 0..sim.max_retries {
        let q = scene.origin
            + Vec3::new(
                (x as f64 + rng.random::<f64>()) * scene.cell_size,
                (y as f64 + rng.random::<f64>()) * scene.cell_size,
                0.0,
            );
        let speed = rng.random_range(sim.speed_min..=sim.speed_max);
        let dir = opposing_normal(n.get(), rng).get();
        if dir.z >= 0.0 {
            continue;
        }
        let center = Vec3::new(q.x, q.y, scene.origin.z + sim.ball_radius * n.get().z);
        let plane = PlanePatch { point: center - n.get() * sim.ball_radius, normal: n, extent: sim.patch_extent };
        let init = init_from_impact(center, dir * speed, sim.lead_time(), sim.gravity);
        match render_bounce(init, &plane, params, sim, rng) {
            Ok(mut s) => {
                s.scene_id = Some(scene.id);
                s.cell = Some((x, y));
                return Ok(s);
            }
            Err(Error::Interpenetrating(_) | Error::NoImpact(_) | Error::ShortFlight { .. } | Error::Recontact(_)) => {}
            Err(e) => return Err(e),
        }
    }
    Err(Error::RetriesExhausted(sim.max_retries))
}

/// `count` bounces at uniformly chosen cells of `scene`, annotated with the
/// cell under the ball center at impact.
pub fn generate_scene_bounces(scene: &SceneSpec, count: usize, sim: &SimConfig, seed: u64) -> Result<Vec<BounceSample>> {
    scene.validate()?;
    sim.validate()?;
    use rayon::prelude::*;
    (0..count as u64)
        .into_par_iter()
        .map(|i| scene_bounce(scene, sim, &mut rng_stream(seed, i)))
        .collect()
}

pub const FIELD_MAGIC: &[u8; 4] = b"BFD1";
const FIELD_VERSION: u32 = 1;

/// Raw `(cor, n_x, n_y, n_z)` per cell, row-major like [`SceneSpec::cells`].
#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceField {
    pub height: usize,
    pub width: usize,
    pub raw: Tensor,
}

impl SurfaceField {
    /// Every cell set to `init`.
    pub fn uniform(height: usize, width: usize, init: SurfaceParams) -> Self {
        let data = (0..height * width).flat_map(|_| init.to_array()).collect();
        Self { height, width, raw: Tensor::matrix(height * width, 4, data).expect("sized above") }
    }

    /// COR 0.5, normal along the scene's up axis.
    pub fn for_scene(scene: &SceneSpec) -> Self {
        Self::uniform(scene.height, scene.width, SurfaceParams { cor: 0.5, normal: scene.up() })
    }

    fn index(&self, x: usize, y: usize) -> Result<usize> {
        if x >= self.width || y >= self.height {
            return Err(Error::CellOutOfRange { x, y, width: self.width, height: self.height });
        }
        Ok(y * self.width + x)
    }

    pub fn lookup(&self, x: usize, y: usize) -> Result<[f64; 4]> {
        let r = self.raw.row(self.index(x, y)?);
        Ok([r[0], r[1], r[2], r[3]])
    }

    pub fn set(&mut self, x: usize, y: usize, raw: [f64; 4]) -> Result<()> {
        let i = self.index(x, y)?;
        self.raw.row_mut(i).copy_from_slice(&raw);
        Ok(())
    }

    /// Served parameters: COR clamped, normal renormalized.
    pub fn readout(&self, x: usize, y: usize) -> Result<SurfaceParams> {
        SurfaceParams::from_raw(self.lookup(x, y)?)
    }

    /// Mean Euclidean distance between read-out 4-vectors of right, lower and
    /// lower-right neighbours.
    pub fn mean_neighbor_difference(&self) -> Result<f64> {
        let mut sum = 0.0;
        let mut n = 0usize;
        for y in 0..self.height {
            for x in 0..self.width {
                let a = self.readout(x, y)?.to_array();
                for (dx, dy) in [(1, 0), (0, 1), (1, 1)] {
                    if x + dx < self.width && y + dy < self.height {
                        let b = self.readout(x + dx, y + dy)?.to_array();
                        sum += a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
                        n += 1;
                    }
                }
            }
        }
        Ok(sum / n.max(1) as f64)
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(FIELD_MAGIC)?;
        w.write_all(&FIELD_VERSION.to_le_bytes())?;
        w.write_all(&(self.height as u32).to_le_bytes())?;
        w.write_all(&(self.width as u32).to_le_bytes())?;
        for v in self.raw.data() {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != FIELD_MAGIC {
            return Err(Error::Format("not a field snapshot (bad magic)".into()));
        }
        let version = read_u32(r)?;
        if version != FIELD_VERSION {
            return Err(Error::Format(format!("unsupported field version {version}")));
        }
        let height = read_u32(r)? as usize;
        let width = read_u32(r)? as usize;
        let data = (0..height * width * 4).map(|_| read_f64(r)).collect::<Result<Vec<_>>>()?;
        Ok(Self { height, width, raw: Tensor::matrix(height * width, 4, data)? })
    }
}

/// Which predictor parts train together with the field.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    /// Only the field learns.
    Frozen,
    /// Encoders and core engine learn with the field.
    All,
    /// Core engine learns with the field; encoders stay fixed.
    CoreOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointConfig {
    /// Learning rate of the predictor parameters.
    pub lr: f64,
    /// Learning rate of the field entries.
    pub field_lr: f64,
    pub batch: usize,
    pub weight_decay: f64,
    pub lr_step: usize,
    pub iterations: usize,
    pub lambda: f64,
    pub regime: Regime,
    pub seed: u64,
}

impl Default for JointConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            field_lr: 0.01,
            batch: 32,
            weight_decay: 0.0005,
            lr_step: 8000,
            iterations: 24000,
            lambda: 0.1,
            regime: Regime::CoreOnly,
            seed: 0,
        }
    }
}

impl JointConfig {
    fn decay(&self, iter: usize) -> f64 {
        0.1f64.powi((iter / self.lr_step.max(1)) as i32)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OnlineConfig {
    pub lr: f64,
    /// Converged once the loss moves less than this over `window` steps.
    pub tolerance: f64,
    pub window: usize,
    pub max_steps: usize,
}

impl Default for OnlineConfig {
    fn default() -> Self {
        Self { lr: 0.01, tolerance: 1e-6, window: 50, max_steps: 1000 }
    }
}

/// A bounce tied to a field cell, with its trajectories' encodings.
#[derive(Debug, Clone, PartialEq)]
pub struct LocatedBounce {
    pub cell: usize,
    pub t_i: Vec<f64>,
    pub t_o: Vec<f64>,
}

/// Resolves cells and encodes every bounce with the current encoders.
pub fn locate_and_encode(model: &PimModel, bounces: &[BounceSample], scene: &SceneSpec) -> Result<Vec<LocatedBounce>> {
    let cells = bounces
        .iter()
        .map(|b| {
            let (x, y) = bounce_cell(b, scene)?;
            scene.index(x, y).map_err(|_| Error::OutsideGrid)
        })
        .collect::<Result<Vec<_>>>()?;
    let pre: Vec<EncodeItem> = bounces.iter().map(|b| EncodeItem { traj: &b.pre, origin: b.impact_point }).collect();
    let post: Vec<EncodeItem> = bounces.iter().map(|b| EncodeItem { traj: &b.post, origin: b.impact_point }).collect();
    let t_i = model.encode_many(Which::Pre, &pre, 64)?;
    let t_o = model.encode_many(Which::Post, &post, 64)?;
    Ok(cells
        .into_iter()
        .zip(t_i.into_iter().zip(t_o))
        .map(|(cell, (t_i, t_o))| LocatedBounce { cell, t_i, t_o })
        .collect())
}

/// Nodes of the field objective for a batch.
pub struct FieldLoss {
    pub loss: NodeId,
    pub field: NodeId,
}

/// Mean over the batch of `d(t_o, f(t_i, rho_cell)) + |rho_cell - P(t_i, t_o)|^2`
/// plus `lambda` times the neighbour smoothness of the whole field. `t_i`
/// and `t_o` are `B x E` nodes; `cells` index field rows.
pub fn field_loss_nodes(
    model: &PimModel,
    g: &mut Graph<'_>,
    field: &SurfaceField,
    cells: &[usize],
    t_i: NodeId,
    t_o: NodeId,
    lambda: f64,
) -> Result<FieldLoss> {
    let f = g.variable(field.raw.clone());
    let rho = g.gather_rows(f, cells)?;
    let t_p = model.engine_node(g, t_i, rho)?;
    let d = g.cosine_distance_rows(t_o, t_p)?;
    let rec = model.recon_node(g, t_i, t_o)?;
    let sq = g.sq_distance_rows(rho, rec)?;
    let per = g.add(d, sq)?;
    let mut loss = g.mean(per)?;
    if lambda != 0.0 {
        let s = g.grid_smoothness(f, field.height, field.width)?;
        let s = g.scale(s, lambda);
        loss = g.add(loss, s)?;
    }
    Ok(FieldLoss { loss, field: f })
}

fn matrix_of(rows: &[&[f64]]) -> Result<Tensor> {
    let cols = rows.first().map_or(0, |r| r.len());
    Ok(Tensor::matrix(rows.len(), cols, rows.iter().flat_map(|r| r.iter().copied()).collect())?)
}

/// Field objective on pre-encoded bounces, as a plain value.
pub fn joint_loss(model: &PimModel, field: &SurfaceField, bounces: &[&LocatedBounce], lambda: f64) -> Result<f64> {
    let mut g = Graph::new(&model.store);
    let ti: Vec<&[f64]> = bounces.iter().map(|b| b.t_i.as_slice()).collect();
    let to: Vec<&[f64]> = bounces.iter().map(|b| b.t_o.as_slice()).collect();
    let t_i = g.input(matrix_of(&ti)?);
    let t_o = g.input(matrix_of(&to)?);
    let cells: Vec<usize> = bounces.iter().map(|b| b.cell).collect();
    let l = field_loss_nodes(model, &mut g, field, &cells, t_i, t_o, lambda)?;
    Ok(g.value(l.loss).data()[0])
}

/// Parameter groups frozen under `regime` (the reconstruction net always is).
pub fn frozen_params(model: &PimModel, regime: Regime) -> Vec<ParamId> {
    let mut ids = model.recon_param_ids();
    if regime != Regime::All {
        ids.extend(model.encoder_param_ids(Which::Pre));
        ids.extend(model.encoder_param_ids(Which::Post));
    }
    if regime == Regime::Frozen {
        ids.extend(model.engine_param_ids());
    }
    ids
}

/// Adam on the field objective. The field always learns; predictor parts
/// learn according to `cfg.regime`. Returns the loss per iteration.
pub fn train_joint(
    field: &mut SurfaceField,
    model: &mut PimModel,
    bounces: &[BounceSample],
    scene: &SceneSpec,
    cfg: &JointConfig,
) -> Result<Vec<f64>> {
    if bounces.is_empty() {
        return Err(Error::Empty("bounce set"));
    }
    if field.height != scene.height || field.width != scene.width {
        return Err(Error::Config("field and scene grids differ".into()));
    }
    let frozen = frozen_params(model, cfg.regime);
    let trainable: Vec<ParamId> = model.store.ids().filter(|id| !frozen.contains(id)).collect();
    let encoders_learn = cfg.regime == Regime::All;
    // With fixed encoders the encodings never change, so compute them once.
    let located = locate_and_encode(model, bounces, scene)?;
    let mut adam = Adam::for_store(
        AdamConfig { lr: cfg.lr, weight_decay: cfg.weight_decay, ..AdamConfig::default() },
        &model.store,
    );
    let mut field_adam = Adam::new(AdamConfig { lr: cfg.field_lr, ..AdamConfig::default() }, &[field.raw.len()]);
    let mut rng = rng_stream(cfg.seed, 2);
    let batch = cfg.batch.clamp(1, bounces.len());
    let mut order: Vec<usize> = (0..bounces.len()).collect();
    let mut cursor = order.len();
    let mut losses = Vec::with_capacity(cfg.iterations);
    for iter in 0..cfg.iterations {
        if cursor + batch > order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let picked = &order[cursor..cursor + batch];
        cursor += batch;
        let cells: Vec<usize> = picked.iter().map(|&i| located[i].cell).collect();
        let (grads, loss) = {
            let mut g = Graph::new(&model.store);
            g.freeze(frozen.iter().copied());
            let (t_i, t_o) = if encoders_learn {
                let pre: Vec<EncodeItem> =
                    picked.iter().map(|&i| EncodeItem { traj: &bounces[i].pre, origin: bounces[i].impact_point }).collect();
                let post: Vec<EncodeItem> =
                    picked.iter().map(|&i| EncodeItem { traj: &bounces[i].post, origin: bounces[i].impact_point }).collect();
                (model.encode_graph(&mut g, Which::Pre, &pre)?, model.encode_graph(&mut g, Which::Post, &post)?)
            } else {
                let ti: Vec<&[f64]> = picked.iter().map(|&i| located[i].t_i.as_slice()).collect();
                let to: Vec<&[f64]> = picked.iter().map(|&i| located[i].t_o.as_slice()).collect();
                (g.input(matrix_of(&ti)?), g.input(matrix_of(&to)?))
            };
            let l = field_loss_nodes(model, &mut g, field, &cells, t_i, t_o, cfg.lambda)?;
            let loss = g.value(l.loss).data()[0];
            let grads = g.backward_scalar(l.loss)?;
            let fg = grads.node(l.field).cloned();
            (( grads.into_params(), fg), loss)
        };
        let decay = cfg.decay(iter);
        if !trainable.is_empty() {
            adam.step(&mut model.store, &grads.0, &trainable, cfg.lr * decay);
        }
        if let Some(fg) = grads.1 {
            field_adam.begin_step();
            field_adam.update_slot(0, field.raw.data_mut(), fg.data(), cfg.field_lr * decay);
        }
        losses.push(loss);
    }
    Ok(losses)
}

/// Incremental field estimation over a bounce stream with the predictor
/// fixed. After each arrival the field is optimized on all bounces seen so
/// far until the loss settles; one snapshot per arrival is returned.
pub fn online_update(
    field: &mut SurfaceField,
    model: &PimModel,
    stream: &[BounceSample],
    scene: &SceneSpec,
    cfg: &OnlineConfig,
) -> Result<Vec<SurfaceField>> {
    let located = locate_and_encode(model, stream, scene)?;
    let mut snapshots = Vec::with_capacity(stream.len());
    for k in 1..=located.len() {
        let seen = &located[..k];
        let cells: Vec<usize> = seen.iter().map(|b| b.cell).collect();
        let ti: Vec<&[f64]> = seen.iter().map(|b| b.t_i.as_slice()).collect();
        let to: Vec<&[f64]> = seen.iter().map(|b| b.t_o.as_slice()).collect();
        let ti = matrix_of(&ti)?;
        let to = matrix_of(&to)?;
        let mut adam = Adam::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() }, &[field.raw.len()]);
        let mut history = Vec::with_capacity(cfg.max_steps);
        for _ in 0..cfg.max_steps {
            let (loss, grad) = {
                let mut g = Graph::new(&model.store);
                g.freeze(model.store.ids());
                let t_i = g.input(ti.clone());
                let t_o = g.input(to.clone());
                let l = field_loss_nodes(model, &mut g, field, &cells, t_i, t_o, 0.0)?;
                let grads = g.backward_scalar(l.loss)?;
                (g.value(l.loss).data()[0], grads.node(l.field).cloned())
            };
            history.push(loss);
            let n = history.len();
            if n > cfg.window && (history[n - 1 - cfg.window] - loss).abs() < cfg.tolerance {
                break;
            }
            if let Some(gr) = grad {
                adam.begin_step();
                adam.update_slot(0, field.raw.data_mut(), gr.data(), cfg.lr);
            }
        }
        snapshots.push(field.clone());
    }
    Ok(snapshots)
}
