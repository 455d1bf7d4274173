//! Non-parametric decoder: nearest neighbour over encoded post trajectories.

use std::io::{Read, Write};

use rayon::prelude::*;

use crate::geom::{cosine_distance, SurfaceParams};
use crate::io::{read_f64, read_trajectory_f32, read_u32, read_u64, write_trajectory_f32};
use crate::pim::model::{EncodeItem, PimModel, Which};
use crate::pim::canonicalize;
use crate::sim::{generate_sample, BounceSample, SimConfig, Trajectory};
use crate::geom::Vec3;
use crate::{Error, Result};

pub const DB_MAGIC: &[u8; 4] = b"BDB1";
const DB_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct DbEntry {
    /// Post-impact trajectory in the canonical impact frame.
    pub post: Trajectory,
    pub params: SurfaceParams,
    pub encoding: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderDb {
    pub entries: Vec<DbEntry>,
    /// Fingerprint of the post encoder that produced the encodings.
    pub encoder_fingerprint: u64,
}

impl DecoderDb {
    /// Encodes the canonical post trajectories of `samples` with the model's post encoder.
    pub fn from_samples(model: &PimModel, samples: &[BounceSample]) -> Result<Self> {
        let mut entries = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(256) {
            let posts: Vec<Trajectory> =
                chunk.iter().map(|s| canonicalize(&s.post, s.impact_point, s.impact_time)).collect();
            let items: Vec<EncodeItem> = posts.iter().map(|t| EncodeItem { traj: t, origin: Vec3::ZERO }).collect();
            let enc = model.encode_many(Which::Post, &items, 64)?;
            for ((post, s), encoding) in posts.into_iter().zip(chunk).zip(enc) {
                entries.push(DbEntry { post, params: s.params, encoding });
            }
        }
        Ok(Self { entries, encoder_fingerprint: model.post_encoder_fingerprint() })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Errors if the model's post encoder changed since the database was built.
    pub fn check_fresh(&self, model: &PimModel) -> Result<()> {
        if self.encoder_fingerprint != model.post_encoder_fingerprint() {
            return Err(Error::StaleDatabase);
        }
        Ok(())
    }

    /// Index and cosine distance of the entry nearest to `t_p`; lowest index on ties.
    pub fn decode(&self, t_p: &[f64]) -> Result<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for (i, e) in self.entries.iter().enumerate() {
            let d = cosine_distance(t_p, &e.encoding);
            if best.is_none_or(|b| d < b.1) {
                best = Some((i, d));
            }
        }
        best.ok_or(Error::EmptyDatabase)
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        let embed = self.entries.first().map_or(0, |e| e.encoding.len());
        w.write_all(DB_MAGIC)?;
        w.write_all(&DB_VERSION.to_le_bytes())?;
        w.write_all(&(embed as u32).to_le_bytes())?;
        w.write_all(&self.encoder_fingerprint.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u64).to_le_bytes())?;
        for e in &self.entries {
            for v in e.params.to_array().iter().chain(&e.encoding) {
                w.write_all(&v.to_le_bytes())?;
            }
            write_trajectory_f32(w, &e.post)?;
        }
        Ok(())
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != DB_MAGIC {
            return Err(Error::Format("not a decoder database (bad magic)".into()));
        }
        let version = read_u32(r)?;
        if version != DB_VERSION {
            return Err(Error::Format(format!("unsupported database version {version}")));
        }
        let embed = read_u32(r)? as usize;
        let encoder_fingerprint = read_u64(r)?;
        let count = read_u64(r)? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let mut raw = [0.0; 4];
            for v in &mut raw {
                *v = read_f64(r)?;
            }
            let encoding = (0..embed).map(|_| read_f64(r)).collect::<Result<Vec<_>>>()?;
            let post = read_trajectory_f32(r)?;
            entries.push(DbEntry { post, params: SurfaceParams::from_raw(raw)?, encoding });
        }
        Ok(Self { entries, encoder_fingerprint })
    }
}

/// Simulates `count` bounces from `seed` and encodes their post trajectories.
/// Generation runs in blocks so only post trajectories stay resident.
pub fn build_decoder_db(model: &PimModel, sim: &SimConfig, count: usize, seed: u64) -> Result<DecoderDb> {
    if count == 0 {
        return Err(Error::Empty("decoder database count"));
    }
    sim.validate()?;
    let mut db = DecoderDb { entries: Vec::with_capacity(count), encoder_fingerprint: model.post_encoder_fingerprint() };
    let block = 512;
    for start in (0..count).step_by(block) {
        let end = (start + block).min(count);
        let samples = (start as u64..end as u64)
            .into_par_iter()
            .map(|i| generate_sample(i, sim, seed))
            .collect::<Result<Vec<_>>>()?;
        db.entries.extend(DecoderDb::from_samples(model, &samples)?.entries);
    }
    Ok(db)
}
