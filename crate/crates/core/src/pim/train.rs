//! Pretraining of the encoders, core engine and reconstruction net.

use rand::seq::SliceRandom;
use rebound_nn::{Adam, AdamConfig, Graph, NodeId, Tensor};

use crate::geom::rng_stream;
use crate::pim::model::{EncodeItem, PimModel, Which};
use crate::sim::BounceSample;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Learning rate is multiplied by 0.1 every `lr_step` iterations.
    pub lr_step: usize,
    pub iterations: usize,
    pub margin: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { batch: 32, lr: 0.01, weight_decay: 0.0005, lr_step: 32000, iterations: 96000, margin: 0.5, seed: 0 }
    }
}

impl PretrainConfig {
    pub fn lr_at(&self, iter: usize) -> f64 {
        self.lr * 0.1f64.powi((iter / self.lr_step.max(1)) as i32)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossCurve {
    pub total: Vec<f64>,
    pub triplet: Vec<f64>,
    pub recon: Vec<f64>,
}

/// Nodes of the pretraining objective for one batch.
pub struct BatchLoss {
    pub loss: NodeId,
    pub triplet: NodeId,
    pub recon: NodeId,
}

/// In-batch negatives: every other row.
pub fn negative_lists(batch: usize) -> Vec<Vec<usize>> {
    (0..batch).map(|i| (0..batch).filter(|&j| j != i).collect()).collect()
}

/// Triplet loss of `t_p` against `t_o` with in-batch negatives, plus the
/// squared reconstruction error of the true parameters, both batch means.
pub fn pretrain_loss(model: &PimModel, g: &mut Graph<'_>, batch: &[&BounceSample], margin: f64) -> Result<BatchLoss> {
    if batch.len() < 2 {
        return Err(Error::Empty("batch needs at least two samples for negatives"));
    }
    let pre: Vec<EncodeItem> = batch.iter().map(|s| EncodeItem { traj: &s.pre, origin: s.impact_point }).collect();
    let post: Vec<EncodeItem> = batch.iter().map(|s| EncodeItem { traj: &s.post, origin: s.impact_point }).collect();
    let t_i = model.encode_graph(g, Which::Pre, &pre)?;
    let t_o = model.encode_graph(g, Which::Post, &post)?;
    let rho = Tensor::matrix(batch.len(), 4, batch.iter().flat_map(|s| s.params.to_array()).collect())?;
    let rho = g.input(rho);
    let t_p = model.engine_node(g, t_i, rho)?;
    let trip = g.triplet_cosine(t_p, t_o, t_o, negative_lists(batch.len()), margin)?;
    let triplet = g.mean(trip)?;
    let rec = model.recon_node(g, t_i, t_o)?;
    let err = g.sq_distance_rows(rec, rho)?;
    let recon = g.mean(err)?;
    let loss = g.add(triplet, recon)?;
    Ok(BatchLoss { loss, triplet, recon })
}

pub fn pretrain_pim(model: &mut PimModel, data: &[BounceSample], cfg: &PretrainConfig) -> Result<LossCurve> {
    pretrain_pim_with(model, data, cfg, |_, _| {})
}

/// As [`pretrain_pim`], calling `progress(iteration, loss)` after each step.
pub fn pretrain_pim_with(
    model: &mut PimModel,
    data: &[BounceSample],
    cfg: &PretrainConfig,
    mut progress: impl FnMut(usize, f64),
) -> Result<LossCurve> {
    if data.is_empty() {
        return Err(Error::Empty("training dataset"));
    }
    let batch = cfg.batch.min(data.len());
    if batch < 2 {
        return Err(Error::Empty("batch needs at least two samples for negatives"));
    }
    let mut rng = rng_stream(cfg.seed, 1);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = data.len();
    let mut adam = Adam::for_store(
        AdamConfig { lr: cfg.lr, weight_decay: cfg.weight_decay, ..AdamConfig::default() },
        &model.store,
    );
    let ids: Vec<_> = model.store.ids().collect();
    let mut curve = LossCurve::default();
    for iter in 0..cfg.iterations {
        if cursor + batch > order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let picked: Vec<&BounceSample> = order[cursor..cursor + batch].iter().map(|&i| &data[i]).collect();
        cursor += batch;
        let (grads, values) = {
            let mut g = Graph::new(&model.store);
            let l = pretrain_loss(model, &mut g, &picked, cfg.margin)?;
            let values = [l.loss, l.triplet, l.recon].map(|n| g.value(n).data()[0]);
            (g.backward_scalar(l.loss)?, values)
        };
        adam.step(&mut model.store, grads.params(), &ids, cfg.lr_at(iter));
        curve.total.push(values[0]);
        curve.triplet.push(values[1]);
        curve.recon.push(values[2]);
        progress(iter, values[0]);
    }
    Ok(curve)
}
