//! Encoders, core engine and reconstruction network sharing one parameter store.

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rebound_nn::{Activation, Dense, Graph, NodeId, ParamId, ParamStore, Tensor};

use crate::geom::{rng_stream, SurfaceParams, Vec3};
use crate::sim::{Frame, Trajectory};
use crate::{Error, Result};

/// How a frame's point set becomes a per-frame feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderKind {
    /// Shared per-point network followed by max pooling over the frame.
    Pooling,
    /// Points sorted lexicographically, chunked into groups of `group`
    /// consecutive points, each chunk mapped by a shared network, then pooled.
    Sorted { group: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PimConfig {
    pub frames: usize,
    pub points: usize,
    pub embed: usize,
    pub encoder: EncoderKind,
    pub point_hidden: usize,
    pub point_out: usize,
    pub frame_out: usize,
    pub trunk_hidden: usize,
    pub param_hidden: usize,
    pub param_embed: usize,
    pub engine_hidden: usize,
    pub recon_hidden: usize,
    /// Multiplies canonical coordinates (m) before the first layer.
    pub input_scale: f64,
    pub seed: u64,
}

impl Default for PimConfig {
    fn default() -> Self {
        Self {
            frames: 10,
            points: 500,
            embed: 64,
            encoder: EncoderKind::Pooling,
            point_hidden: 32,
            point_out: 64,
            frame_out: 128,
            trunk_hidden: 256,
            param_hidden: 16,
            param_embed: 32,
            engine_hidden: 64,
            recon_hidden: 64,
            input_scale: 4.0,
            seed: 0,
        }
    }
}

impl PimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.points == 0 || self.embed == 0 {
            return Err(Error::Config("frames, points and embed must be positive".into()));
        }
        if let EncoderKind::Sorted { group } = self.encoder {
            if group == 0 || self.points % group != 0 {
                return Err(Error::Config(format!("points {} not divisible by group {group}", self.points)));
            }
        }
        Ok(())
    }

    fn chunk(&self) -> usize {
        match self.encoder {
            EncoderKind::Pooling => 1,
            EncoderKind::Sorted { group } => group,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Which {
    Pre,
    Post,
}

#[derive(Debug, Clone)]
pub(crate) struct Encoder {
    point: [Dense; 2],
    head: Dense,
    trunk: [Dense; 2],
}

impl Encoder {
    fn new(store: &mut ParamStore, name: &str, cfg: &PimConfig, rng: &mut impl Rng) -> Self {
        let c = cfg.chunk();
        Self {
            point: [
                Dense::new(store, &format!("{name}.point1"), 3 * c, cfg.point_hidden, rng),
                Dense::new(store, &format!("{name}.point2"), cfg.point_hidden, cfg.point_out, rng),
            ],
            head: Dense::new(store, &format!("{name}.head"), cfg.point_out, cfg.frame_out, rng),
            trunk: [
                Dense::new(store, &format!("{name}.trunk1"), cfg.frames * cfg.frame_out, cfg.trunk_hidden, rng),
                Dense::new(store, &format!("{name}.trunk2"), cfg.trunk_hidden, cfg.embed, rng),
            ],
        }
    }

    fn params(&self) -> Vec<ParamId> {
        [self.point[0], self.point[1], self.head, self.trunk[0], self.trunk[1]]
            .iter()
            .flat_map(Dense::params)
            .collect()
    }
}

#[derive(Debug, Clone)]
pub(crate) struct CoreEngine {
    param: [Dense; 2],
    predict: [Dense; 2],
}

#[derive(Debug, Clone)]
pub(crate) struct ReconNet {
    layers: [Dense; 2],
}

/// One trajectory to encode, with the translation that canonicalizes it.
#[derive(Debug, Clone, Copy)]
pub struct EncodeItem<'a> {
    pub traj: &'a Trajectory,
    pub origin: Vec3,
}

#[derive(Debug, Clone)]
pub struct PimModel {
    pub config: PimConfig,
    pub store: ParamStore,
    pub(crate) pre: Encoder,
    pub(crate) post: Encoder,
    pub(crate) engine: CoreEngine,
    pub(crate) recon: ReconNet,
}

/// Exactly `n` points of `frame`: unchanged if it already has `n`, otherwise
/// drawn from the frame's own stream.
pub fn resample_frame(frame: &Frame, n: usize, seed: u64, stream: u64) -> Result<Vec<Vec3>> {
    let m = frame.points.len();
    if m == 0 {
        return Err(Error::EmptyFrame);
    }
    if m == n {
        return Ok(frame.points.clone());
    }
    let mut rng = rng_stream(seed, stream);
    if m > n {
        let mut idx = sample_indices(&mut rng, m, n).into_vec();
        idx.sort_unstable();
        return Ok(idx.into_iter().map(|i| frame.points[i]).collect());
    }
    let mut out = frame.points.clone();
    while out.len() < n {
        out.push(frame.points[rng.random_range(0..m)]);
    }
    Ok(out)
}

impl PimModel {
    pub fn new(config: PimConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_stream(config.seed, 0);
        let mut store = ParamStore::new();
        let pre = Encoder::new(&mut store, "encoder_pre", &config, &mut rng);
        let post = Encoder::new(&mut store, "encoder_post", &config, &mut rng);
        let e = config.embed;
        let engine = CoreEngine {
            param: [
                Dense::new(&mut store, "engine.param1", 4, config.param_hidden, &mut rng),
                Dense::new(&mut store, "engine.param2", config.param_hidden, config.param_embed, &mut rng),
            ],
            predict: [
                Dense::new(&mut store, "engine.predict1", e + config.param_embed, config.engine_hidden, &mut rng),
                Dense::new(&mut store, "engine.predict2", config.engine_hidden, e, &mut rng),
            ],
        };
        let recon = ReconNet {
            layers: [
                Dense::new(&mut store, "recon.hidden", 2 * e, config.recon_hidden, &mut rng),
                Dense::new(&mut store, "recon.out", config.recon_hidden, 4, &mut rng),
            ],
        };
        Ok(Self { config, store, pre, post, engine, recon })
    }

    pub fn encoder_param_ids(&self, which: Which) -> Vec<ParamId> {
        match which {
            Which::Pre => self.pre.params(),
            Which::Post => self.post.params(),
        }
    }

    pub fn engine_param_ids(&self) -> Vec<ParamId> {
        let e = &self.engine;
        [e.param[0], e.param[1], e.predict[0], e.predict[1]].iter().flat_map(Dense::params).collect()
    }

    pub fn recon_param_ids(&self) -> Vec<ParamId> {
        self.recon.layers.iter().flat_map(Dense::params).collect()
    }

    /// Fingerprint of the post-trajectory encoder weights.
    pub fn post_encoder_fingerprint(&self) -> u64 {
        self.store.fingerprint_of(&self.post.params())
    }

    /// Network input for a batch: one row per point (pooling) or per sorted
    /// chunk, frames in order, trajectories in order.
    pub fn encoder_input(&self, items: &[EncodeItem<'_>]) -> Result<Tensor> {
        let cfg = &self.config;
        let c = cfg.chunk();
        let mut data = Vec::with_capacity(items.len() * cfg.frames * cfg.points * 3);
        for item in items {
            if item.traj.len() != cfg.frames {
                return Err(Error::FrameCount { got: item.traj.len(), expected: cfg.frames });
            }
            for (fi, frame) in item.traj.frames.iter().enumerate() {
                let mut pts: Vec<[f64; 3]> = resample_frame(frame, cfg.points, cfg.seed, fi as u64)?
                    .into_iter()
                    .map(|p| ((p - item.origin) * cfg.input_scale).to_array())
                    .collect();
                if c > 1 {
                    pts.sort_by(|a, b| {
                        a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])).then(a[2].total_cmp(&b[2]))
                    });
                }
                data.extend(pts.iter().flatten());
            }
        }
        let rows = items.len() * cfg.frames * cfg.points / c;
        Ok(Tensor::matrix(rows, 3 * c, data)?)
    }

    /// Encoder graph from a prepared input node; returns `B x E` unit rows.
    pub fn encode_node(&self, g: &mut Graph<'_>, which: Which, input: NodeId, batch: usize) -> Result<NodeId> {
        let cfg = &self.config;
        let enc = match which {
            Which::Pre => &self.pre,
            Which::Post => &self.post,
        };
        let h = g.dense(input, &enc.point[0], Activation::Relu)?;
        let h = g.dense(h, &enc.point[1], Activation::Relu)?;
        let f = g.maxpool_groups(h, cfg.points / cfg.chunk())?;
        let f = g.dense(f, &enc.head, Activation::Relu)?;
        let f = g.reshape(f, vec![batch, cfg.frames * cfg.frame_out])?;
        let z = g.dense(f, &enc.trunk[0], Activation::Relu)?;
        let z = g.dense(z, &enc.trunk[1], Activation::Identity)?;
        Ok(g.l2_normalize_rows(z)?)
    }

    pub fn encode_graph(&self, g: &mut Graph<'_>, which: Which, items: &[EncodeItem<'_>]) -> Result<NodeId> {
        let x = g.input(self.encoder_input(items)?);
        self.encode_node(g, which, x, items.len())
    }

    /// `t_p` rows from `t_i` rows and raw parameter rows (`B x 4`).
    pub fn engine_node(&self, g: &mut Graph<'_>, t_i: NodeId, rho: NodeId) -> Result<NodeId> {
        let e = &self.engine;
        let v = g.dense(rho, &e.param[0], Activation::Relu)?;
        let v = g.dense(v, &e.param[1], Activation::Relu)?;
        let x = g.concat_cols(&[t_i, v])?;
        let h = g.dense(x, &e.predict[0], Activation::Relu)?;
        let h = g.dense(h, &e.predict[1], Activation::Identity)?;
        Ok(g.l2_normalize_rows(h)?)
    }

    /// Raw `B x 4` parameter estimates from `t_i`, `t_o` rows.
    pub fn recon_node(&self, g: &mut Graph<'_>, t_i: NodeId, t_o: NodeId) -> Result<NodeId> {
        let x = g.concat_cols(&[t_i, t_o])?;
        let h = g.dense(x, &self.recon.layers[0], Activation::Relu)?;
        Ok(g.dense(h, &self.recon.layers[1], Activation::Identity)?)
    }

    /// Encodings of many trajectories, processed in chunks of `batch`.
    pub fn encode_many(&self, which: Which, items: &[EncodeItem<'_>], batch: usize) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(items.len());
        for chunk in items.chunks(batch.max(1)) {
            let mut g = Graph::new(&self.store);
            let z = self.encode_graph(&mut g, which, chunk)?;
            let v = g.value(z);
            out.extend((0..v.rows()).map(|r| v.row(r).to_vec()));
        }
        Ok(out)
    }

    pub fn encode(&self, which: Which, traj: &Trajectory, origin: Vec3) -> Result<Vec<f64>> {
        Ok(self.encode_many(which, &[EncodeItem { traj, origin }], 1)?.remove(0))
    }

    /// `t_p` for each raw parameter row, all sharing one `t_i`.
    pub fn engine_forward_many(&self, t_i: &[f64], rhos: &[[f64; 4]]) -> Result<Vec<Vec<f64>>> {
        if rhos.is_empty() {
            return Ok(Vec::new());
        }
        let e = self.config.embed;
        if t_i.len() != e {
            return Err(Error::Format(format!("encoding has {} values, expected {e}", t_i.len())));
        }
        let mut g = Graph::new(&self.store);
        let ti: Vec<f64> = (0..rhos.len()).flat_map(|_| t_i.iter().copied()).collect();
        let ti = g.input(Tensor::matrix(rhos.len(), e, ti)?);
        let rho = g.input(Tensor::matrix(rhos.len(), 4, rhos.iter().flatten().copied().collect())?);
        let tp = self.engine_node(&mut g, ti, rho)?;
        let v = g.value(tp);
        Ok((0..v.rows()).map(|r| v.row(r).to_vec()).collect())
    }

    pub fn engine_forward(&self, t_i: &[f64], params: SurfaceParams) -> Result<Vec<f64>> {
        Ok(self.engine_forward_many(t_i, &[params.to_array()])?.remove(0))
    }

    /// Raw reconstruction output.
    pub fn recon_raw(&self, t_i: &[f64], t_o: &[f64]) -> Result<[f64; 4]> {
        let e = self.config.embed;
        let mut g = Graph::new(&self.store);
        let a = g.input(Tensor::matrix(1, e, t_i.to_vec())?);
        let b = g.input(Tensor::matrix(1, e, t_o.to_vec())?);
        let r = self.recon_node(&mut g, a, b)?;
        let d = g.value(r).data();
        Ok([d[0], d[1], d[2], d[3]])
    }

    /// Reconstruction read out as valid parameters.
    pub fn recon_params(&self, t_i: &[f64], t_o: &[f64]) -> Result<SurfaceParams> {
        SurfaceParams::from_raw(self.recon_raw(t_i, t_o)?)
    }
}
