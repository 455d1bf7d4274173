//! The learned trajectory predictor: encoders, core engine, reconstruction
//! net, retrieval decoder, pretraining and grid-search inversion.

mod decoder;
mod invert;
mod model;
mod train;

use std::io::{Read, Write};

use rebound_nn::{read_tensor_blob, write_tensor_blob};

pub use decoder::{build_decoder_db, DbEntry, DecoderDb, DB_MAGIC};
pub use invert::{fibonacci_directions, incoming_axis, invert_params, InversionGrid, Inversion};
pub use model::{resample_frame, EncodeItem, EncoderKind, PimConfig, PimModel, Which};
pub use train::{negative_lists, pretrain_loss, pretrain_pim, pretrain_pim_with, BatchLoss, LossCurve, PretrainConfig};

use crate::config::KeyValues;
use crate::fit::{estimate_impact, extract_centers, fit_parabola, RansacParams};
use crate::geom::{SurfaceParams, Vec3};
use crate::io::{read_u32, read_string, write_string};
use crate::sim::{PlanePatch, Trajectory};
use crate::{Error, Result};

pub const MODEL_MAGIC: &[u8; 4] = b"BLM1";
const MODEL_VERSION: u32 = 1;

/// Moves a trajectory into the impact frame: impact point at the origin,
/// impact at time zero. Orientation is left alone.
pub fn canonicalize(traj: &Trajectory, impact_point: Vec3, impact_time: f64) -> Trajectory {
    traj.translated(-impact_point, -impact_time)
}

/// Impact time and ball center estimated from the pre trajectory and the
/// struck plane.
pub fn solve_impact(pre: &Trajectory, plane: &PlanePatch, radius: f64, ransac: &RansacParams) -> Result<(f64, Vec3)> {
    let fit = fit_parabola(&extract_centers(pre, radius, ransac)?)?;
    let first = pre.frames.first().ok_or(Error::Empty("pre trajectory"))?.time;
    let (t, c, _) = estimate_impact(&fit, plane, radius, first)?;
    Ok((t, c))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// Decoded post trajectory in world coordinates.
    pub post: Trajectory,
    pub db_index: usize,
    pub distance: f64,
    pub t_p: Vec<f64>,
}

/// Encode the pre trajectory in the impact frame, step it through the core
/// engine with `params`, retrieve the nearest database trajectory and move it
/// back to world coordinates.
pub fn predict_post(
    model: &PimModel,
    db: &DecoderDb,
    pre: &Trajectory,
    params: SurfaceParams,
    impact: (f64, Vec3),
) -> Result<Prediction> {
    db.check_fresh(model)?;
    let (t_star, point) = impact;
    let t_i = model.encode(Which::Pre, pre, point)?;
    let t_p = model.engine_forward(&t_i, params)?;
    let (db_index, distance) = db.decode(&t_p)?;
    let post = db.entries[db_index].post.translated(point, t_star);
    Ok(Prediction { post, db_index, distance, t_p })
}

impl PimModel {
    fn sections(&self) -> [(&'static str, Vec<rebound_nn::ParamId>); 4] {
        [
            ("encoder_pre", self.encoder_param_ids(Which::Pre)),
            ("encoder_post", self.encoder_param_ids(Which::Post)),
            ("engine", self.engine_param_ids()),
            ("recon", self.recon_param_ids()),
        ]
    }

    /// Versioned binary model file: magic, version, config text, then one
    /// section of named tensors per component.
    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MODEL_MAGIC)?;
        w.write_all(&MODEL_VERSION.to_le_bytes())?;
        write_string(w, &crate::config::pim_to_kv(&self.config).to_text())?;
        let sections = self.sections();
        w.write_all(&(sections.len() as u32).to_le_bytes())?;
        for (name, ids) in sections {
            write_string(w, name)?;
            w.write_all(&(ids.len() as u32).to_le_bytes())?;
            for id in ids {
                write_tensor_blob(w, self.store.name(id), self.store.get(id))?;
            }
        }
        Ok(())
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MODEL_MAGIC {
            return Err(Error::Format("not a model file (bad magic)".into()));
        }
        let version = read_u32(r)?;
        if version != MODEL_VERSION {
            return Err(Error::Format(format!("unsupported model version {version}")));
        }
        let config = crate::config::pim_from_kv(&KeyValues::parse(&read_string(r)?)?)?;
        let mut model = PimModel::new(config)?;
        let expected = model.sections();
        let count = read_u32(r)? as usize;
        if count != expected.len() {
            return Err(Error::Format(format!("model has {count} sections, expected {}", expected.len())));
        }
        for (name, ids) in expected {
            let got = read_string(r)?;
            if got != name {
                return Err(Error::Format(format!("section {got:?} where {name:?} was expected")));
            }
            let n = read_u32(r)? as usize;
            if n != ids.len() {
                return Err(Error::Format(format!("section {name} has {n} tensors, expected {}", ids.len())));
            }
            for id in ids {
                let (tname, t) = read_tensor_blob(r)?;
                if tname != model.store.name(id) || t.shape() != model.store.get(id).shape() {
                    return Err(Error::Format(format!("tensor {tname} does not fit the configured model")));
                }
                *model.store.get_mut(id) = t;
            }
        }
        Ok(model)
    }
}
