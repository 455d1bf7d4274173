//! Plain-value versions of the graph ops, for callers that do not need
//! gradients. Each one agrees with the corresponding [`Graph`](crate::Graph)
//! method on the forward value.

use crate::graph::dot;
use crate::{Dense, NnError, ParamStore, Result, Tensor};

pub fn dense_forward(store: &ParamStore, layer: &Dense, input: &Tensor) -> Result<Tensor> {
    let mut g = crate::Graph::new(store);
    let x = g.input(input.clone());
    let y = g.dense(x, layer, crate::Activation::Identity)?;
    Ok(g.value(y).clone())
}

pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

/// Element-wise max over the rows of an `M x K` set.
pub fn maxpool_set(set: &Tensor) -> Result<Vec<f64>> {
    if set.rows() == 0 {
        return Err(NnError::Empty("maxpool_set"));
    }
    let mut out = set.row(0).to_vec();
    for r in 1..set.rows() {
        for (o, v) in out.iter_mut().zip(set.row(r)) {
            if *v > *o {
                *o = *v;
            }
        }
    }
    Ok(out)
}

pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = dot(v, v).sqrt();
    if n <= 1e-12 {
        return Err(NnError::ZeroNorm(n));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Mean over negatives of `max(d(t_p, t_o) - d(t_p, n_j) + margin, 0)` with
/// cosine distance `d(a, b) = 1 - <a, b>`.
pub fn triplet_cosine_loss(
    predicted: &[f64],
    observed: &[f64],
    negatives: &[Vec<f64>],
    margin: f64,
) -> Result<f64> {
    if negatives.is_empty() {
        return Err(NnError::EmptyNegatives(0));
    }
    let d_pos = 1.0 - dot(predicted, observed);
    let total: f64 = negatives
        .iter()
        .map(|n| (d_pos - (1.0 - dot(predicted, n)) + margin).max(0.0))
        .sum();
    Ok(total / negatives.len() as f64)
}

/// Sum of squared differences.
pub fn mse(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(NnError::ShapeMismatch {
            op: "mse",
            left: vec![a.len()],
            right: vec![b.len()],
        });
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}
