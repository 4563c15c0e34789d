//! Reference computations for test suites: central finite differences and
//! plain re-implementations of the training losses with their stop-gradient
//! inputs frozen, so analytic gradients can be checked against them.
//!
//! Only built with the `oracles` feature.

use alloc::vec::Vec;

use crate::agent::{actor_loss, critic_loss, Networks};
use crate::diffcore::{Matrix, Mlp, ParamSet};
use crate::error::Result;
use crate::invariance::{one_hot, policy_input, vrex_penalty, LatentModels, ObsBatch, TransitionBatch};
use crate::math;
use crate::otmetric::{w2_diag_gaussian, DiagGaussian};

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h` at each coordinate.
pub fn central_difference(
    params: &mut ParamSet,
    coords: &[usize],
    h: f64,
    mut f: impl FnMut(&ParamSet) -> f64,
) -> Vec<f64> {
    coords
        .iter()
        .map(|&i| {
            let x = params.get(i);
            params.set(i, x + h);
            let up = f(params);
            params.set(i, x - h);
            let down = f(params);
            params.set(i, x);
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `||a - b|| / max(||a||, ||b||)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| math::sqrt(v.map(|x| x * x).sum::<f64>());
    let diff = norm(&mut a.iter().zip(b).map(|(x, y)| x - y));
    let scale = norm(&mut a.iter().copied()).max(norm(&mut b.iter().copied()));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| math::exp(v - m)).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Bisimulation targets `|R(z_i) - R(z_j)| + gamma W2(...)` per pair, computed
/// once and then held fixed.
pub fn bisim_targets(
    params: &ParamSet,
    models: &LatentModels,
    actor: &Mlp,
    batch: &ObsBatch,
    pairs: &[(usize, usize)],
    gamma: f64,
) -> Result<Vec<f64>> {
    let z = models.encoder.infer(params, &batch.obs)?;
    let reward = models.reward_head.infer(params, &z)?;
    let logits = actor.infer(params, &policy_input(&z, batch.proprio.as_ref()))?;
    let mut probs = Matrix::zeros(logits.rows, logits.cols);
    for r in 0..logits.rows {
        probs.row_mut(r).copy_from_slice(&softmax(logits.row(r)));
    }
    let input = z.hcat(&probs);
    let mean = models.dynamics_mean.infer(params, &input)?;
    let std = models.dynamics_std.infer(params, &input)?;
    pairs
        .iter()
        .map(|&(i, j)| {
            let gi = DiagGaussian::new(mean.row(i).to_vec(), std.row(i).to_vec())?;
            let gj = DiagGaussian::new(mean.row(j).to_vec(), std.row(j).to_vec())?;
            Ok((reward.get(i, 0) - reward.get(j, 0)).abs() + gamma * w2_diag_gaussian(&gi, &gj)?)
        })
        .collect()
}

/// `mean_k (|z_i - z_j|_1 - target_k)^2` with fixed targets.
pub fn bisim_reference(
    params: &ParamSet,
    models: &LatentModels,
    batch: &ObsBatch,
    pairs: &[(usize, usize)],
    targets: &[f64],
) -> Result<f64> {
    let z = models.encoder.infer(params, &batch.obs)?;
    let mut loss = 0.0;
    for (&(i, j), t) in pairs.iter().zip(targets) {
        let l1: f64 = z.row(i).iter().zip(z.row(j)).map(|(a, b)| (a - b).abs()).sum();
        loss += (l1 - t) * (l1 - t);
    }
    Ok(loss / pairs.len() as f64)
}

/// Per-row dynamics and reward errors with `next_z` held fixed.
pub fn model_rows(
    params: &ParamSet,
    models: &LatentModels,
    batch: &TransitionBatch,
    next_z: &Matrix,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let z = models.encoder.infer(params, &batch.obs.obs)?;
    let mean = models.dynamics_mean.infer(params, &z.hcat(&one_hot(&batch.actions, models.n_actions)))?;
    let pred = models.reward_head.infer(params, &mean)?;
    let l = mean.cols as f64;
    let dyn_rows =
        (0..mean.rows).map(|r| mean.row(r).iter().zip(next_z.row(r)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / l);
    let rew_rows = (0..mean.rows).map(|r| (pred.get(r, 0) - batch.rewards[r]) * (pred.get(r, 0) - batch.rewards[r]));
    Ok((dyn_rows.collect(), rew_rows.collect()))
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// `model_weight * (dyn + rew) + penalty_weight * (beta Var(R) + sum R)` with
/// per-domain risks `R_e = dyn_e + rew_e` over the domains present in
/// `domains`.
#[allow(clippy::too_many_arguments)]
pub fn rex_reference(
    params: &ParamSet,
    models: &LatentModels,
    batch: &TransitionBatch,
    next_z: &Matrix,
    domains: &[u32],
    beta: f64,
    model_weight: f64,
    penalty_weight: f64,
) -> Result<f64> {
    let (d, r) = model_rows(params, models, batch, next_z)?;
    let mut risks = Vec::new();
    for &e in domains {
        let idx: Vec<usize> = (0..batch.len()).filter(|&k| batch.env_tags[k] == e).collect();
        if idx.is_empty() {
            continue;
        }
        let de: Vec<f64> = idx.iter().map(|&k| d[k]).collect();
        let re: Vec<f64> = idx.iter().map(|&k| r[k]).collect();
        risks.push(mean(&de) + mean(&re));
    }
    Ok(model_weight * (mean(&d) + mean(&r)) + penalty_weight * vrex_penalty(&risks, beta))
}

/// Critic loss as a plain function of the parameters.
pub fn critic_reference(nets: &Networks, params: &ParamSet, views: &[ObsBatch], actions: &[usize], targets: &[f64]) -> f64 {
    let probe = Networks { params: params.clone(), ..nets.clone() };
    critic_loss(&probe, views, actions, targets, None).expect("valid batch")
}

/// Actor loss as a plain function of the parameters.
pub fn actor_reference(nets: &Networks, params: &ParamSet, batch: &ObsBatch) -> f64 {
    let probe = Networks { params: params.clone(), ..nets.clone() };
    actor_loss(&probe, batch, None).expect("valid batch").actor_loss
}
