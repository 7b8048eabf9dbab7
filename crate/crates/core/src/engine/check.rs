//! Finite-difference gradient verification. This is the independent oracle
//! for every piece of training math: central differences of the loss against
//! the gradients reported by [`Graph::backward`].

use rayon::prelude::*;

use crate::engine::graph::{Graph, NodeId};
use crate::engine::params::ParamSet;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Worst relative error between analytic and central-difference gradients
/// over every parameter coordinate. The relative error uses
/// `|a - n| / max(|a|, |n|, 1e-8)`.
///
/// `loss_fn` must rebuild the (deterministic) loss graph from scratch for the
/// parameter values it is given.
pub fn finite_diff_check<S, F>(loss_fn: F, params: &ParamSet<S>, eps: S) -> Result<f64>
where
    S: Scalar,
    F: Fn(&ParamSet<S>) -> Result<(Graph<S>, NodeId)> + Sync,
{
    let (graph, loss) = loss_fn(params)?;
    let base = graph.value(loss);
    if !base.is_scalar() {
        return Err(Error::NonScalarLoss(base.shape().to_vec()));
    }
    let analytic = graph.backward(loss, params.len())?;

    // (param, coord) work items, processed in chunks so each worker clones
    // the parameter set once per chunk instead of once per coordinate.
    let mut items = Vec::new();
    for p in 0..params.len() {
        for c in 0..params.tensor(p).numel() {
            items.push((p, c));
        }
    }
    let chunk = 512.max(items.len() / 256).min(items.len().max(1));

    let maxima: Vec<Result<f64>> = items
        .par_chunks(chunk)
        .map(|chunk_items| {
            let mut local = params.clone();
            let mut worst = 0.0_f64;
            for &(p, c) in chunk_items {
                let orig = local.tensor(p).data()[c];
                local.tensor_mut(p).data_mut()[c] = orig + eps;
                let plus = eval(&loss_fn, &local)?;
                local.tensor_mut(p).data_mut()[c] = orig - eps;
                let minus = eval(&loss_fn, &local)?;
                local.tensor_mut(p).data_mut()[c] = orig;
                if !plus.is_finite() || !minus.is_finite() {
                    return Err(Error::NonFinitePerturbedLoss {
                        param: local.get(p).name.clone(),
                        coord: c,
                    });
                }
                let numeric =
                    (plus - minus).to_f64_lossy() / (2.0 * eps.to_f64_lossy());
                let a = analytic[p]
                    .as_ref()
                    .map(|t| t.data()[c].to_f64_lossy())
                    .unwrap_or(0.0);
                let denom = a.abs().max(numeric.abs()).max(1e-8);
                let rel = (a - numeric).abs() / denom;
                if rel > worst {
                    worst = rel;
                }
            }
            Ok(worst)
        })
        .collect();

    let mut worst = 0.0_f64;
    for m in maxima {
        worst = worst.max(m?);
    }
    Ok(worst)
}

fn eval<S, F>(loss_fn: &F, params: &ParamSet<S>) -> Result<S>
where
    S: Scalar,
    F: Fn(&ParamSet<S>) -> Result<(Graph<S>, NodeId)>,
{
    let (graph, loss) = loss_fn(params)?;
    Ok(graph.value(loss).item())
}
