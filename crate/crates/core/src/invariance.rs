//! Representation learning losses: the bisimulation loss on latent pairs,
//! latent dynamics and reward model losses, per-domain risks and the
//! variance-of-risks penalty.
//!
//! Every loss takes a flat gradient buffer indexed like the full parameter
//! vector and accumulates into it, so several losses can share one optimizer
//! step.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::diffcore::{Matrix, Mlp, ParamSet, Tape};
use crate::error::{Error, Result};
use crate::math;
use crate::otmetric::w2_diag_raw;

/// Encoder, reward head and diagonal-Gaussian dynamics head.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentModels {
    /// Observation to latent `z`.
    pub encoder: Mlp,
    /// `z` to a scalar reward.
    pub reward_head: Mlp,
    /// `[z, action embedding]` to the mean of the next latent.
    pub dynamics_mean: Mlp,
    /// `[z, action embedding]` to the per-dimension std of the next latent.
    pub dynamics_std: Mlp,
    pub n_actions: usize,
}

impl LatentModels {
    pub fn latent_dim(&self) -> usize {
        self.encoder.output_width()
    }
}

/// Observations plus the optional proprioceptive features that get appended
/// to the encoder output before the policy and critics.
#[derive(Debug, Clone, PartialEq)]
pub struct ObsBatch {
    pub obs: Matrix,
    pub proprio: Option<Matrix>,
}

impl ObsBatch {
    pub fn len(&self) -> usize {
        self.obs.rows
    }

    pub fn is_empty(&self) -> bool {
        self.obs.rows == 0
    }
}

/// A batch of transitions, row-aligned.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionBatch {
    pub obs: ObsBatch,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub next_obs: ObsBatch,
    pub dones: Vec<bool>,
    pub env_tags: Vec<u32>,
}

impl TransitionBatch {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    fn check(&self) -> Result<()> {
        let n = self.len();
        if n == 0 {
            return Err(Error::EmptyBatch);
        }
        for len in [self.rewards.len(), self.dones.len(), self.env_tags.len(), self.obs.len(), self.next_obs.len()] {
            if len != n {
                return Err(Error::DimensionMismatch { expected: n, got: len });
            }
        }
        Ok(())
    }
}

/// `[z, proprio]`, the input of the actor and critics.
pub fn policy_input(z: &Matrix, proprio: Option<&Matrix>) -> Matrix {
    match proprio {
        Some(p) => z.hcat(p),
        None => z.clone(),
    }
}

/// One-hot rows for discrete actions.
pub fn one_hot(actions: &[usize], n_actions: usize) -> Matrix {
    let mut m = Matrix::zeros(actions.len(), n_actions);
    for (r, &a) in actions.iter().enumerate() {
        m.row_mut(r)[a] = 1.0;
    }
    m
}

/// Bisimulation loss between two aligned observation batches.
///
/// For every pair `k` the residual is
/// `|z_i - z_j|_1 - |R(zb_i) - R(zb_j)| - gamma * W2(P(zb_i, pi(zb_i)), P(zb_j, pi(zb_j)))`
/// where `zb` is the latent with gradients stopped and `pi` the actor's
/// action probabilities (its mean one-hot embedding). Returns the mean
/// squared residual; gradients reach only the encoder.
#[allow(clippy::too_many_arguments)]
pub fn bisim_loss(
    params: &ParamSet,
    models: &LatentModels,
    actor: &Mlp,
    batch_i: &ObsBatch,
    batch_j: &ObsBatch,
    gamma: f64,
    weight: f64,
    grad: &mut [f64],
) -> Result<f64> {
    let n = batch_i.len();
    if batch_j.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: batch_j.len() });
    }
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    let stacked = ObsBatch {
        obs: vstack(&batch_i.obs, &batch_j.obs),
        proprio: match (&batch_i.proprio, &batch_j.proprio) {
            (Some(a), Some(b)) => Some(vstack(a, b)),
            (None, None) => None,
            _ => return Err(Error::InvalidConfig("proprio present on only one side of the pair".into())),
        },
    };
    let pairs: Vec<(usize, usize)> = (0..n).map(|k| (k, n + k)).collect();
    bisim_loss_pairs(params, models, actor, &stacked, &pairs, gamma, weight, grad)
}

/// Bisimulation loss of a batch against a permutation of itself:
/// pair `k` is `(k, perm[k])`. The encoder runs once over the batch.
#[allow(clippy::too_many_arguments)]
pub fn bisim_loss_permuted(
    params: &ParamSet,
    models: &LatentModels,
    actor: &Mlp,
    batch: &ObsBatch,
    perm: &[usize],
    gamma: f64,
    weight: f64,
    grad: &mut [f64],
) -> Result<f64> {
    if perm.len() != batch.len() {
        return Err(Error::DimensionMismatch { expected: batch.len(), got: perm.len() });
    }
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let pairs: Vec<(usize, usize)> = perm.iter().enumerate().map(|(k, &j)| (k, j)).collect();
    bisim_loss_pairs(params, models, actor, batch, &pairs, gamma, weight, grad)
}

#[allow(clippy::too_many_arguments)]
fn bisim_loss_pairs(
    params: &ParamSet,
    models: &LatentModels,
    actor: &Mlp,
    batch: &ObsBatch,
    pairs: &[(usize, usize)],
    gamma: f64,
    weight: f64,
    grad: &mut [f64],
) -> Result<f64> {
    let (z, tape) = models.encoder.forward(params, &batch.obs)?;
    let targets = BisimTargets::new(params, models, actor, &z, batch.proprio.as_ref())?;
    let latent = z.cols;
    let scale = 1.0 / pairs.len() as f64;
    let mut loss = 0.0;
    let mut dz = Matrix::zeros(z.rows, latent);
    for &(i, j) in pairs {
        let zi = z.row(i);
        let zj = z.row(j);
        let l1: f64 = zi.iter().zip(zj).map(|(a, b)| (a - b).abs()).sum();
        let e = l1 - targets.distance(i, j, gamma);
        loss += e * e * scale;
        let g = 2.0 * e * scale * weight;
        for c in 0..latent {
            let s = sign(z.get(i, c) - z.get(j, c));
            dz.row_mut(i)[c] += g * s;
            dz.row_mut(j)[c] -= g * s;
        }
    }
    if weight != 0.0 {
        models.encoder.backward(params, &tape, &dz, grad)?;
    }
    Ok(loss)
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Detached reward predictions and next-latent Gaussians for every row.
struct BisimTargets {
    reward: Vec<f64>,
    mean: Matrix,
    std: Matrix,
}

impl BisimTargets {
    fn new(params: &ParamSet, models: &LatentModels, actor: &Mlp, z: &Matrix, proprio: Option<&Matrix>) -> Result<Self> {
        let reward = models.reward_head.infer(params, z)?.data;
        let logits = actor.infer(params, &policy_input(z, proprio))?;
        let probs = softmax_rows(&logits);
        let input = z.hcat(&probs);
        let mean = models.dynamics_mean.infer(params, &input)?;
        let std = models.dynamics_std.infer(params, &input)?;
        Ok(Self { reward, mean, std })
    }

    fn distance(&self, i: usize, j: usize, gamma: f64) -> f64 {
        let dr = (self.reward[i] - self.reward[j]).abs();
        let w2 = w2_diag_raw(self.mean.row(i), self.std.row(i), self.mean.row(j), self.std.row(j));
        dr + gamma * w2
    }
}

pub(crate) fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for r in 0..out.rows {
        let row = out.row_mut(r);
        let lse = math::log_sum_exp(row);
        row.iter_mut().for_each(|v| *v = math::exp(*v - lse));
    }
    out
}

pub(crate) fn vstack(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.cols, b.cols);
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Matrix::from_vec(a.rows + b.rows, a.cols, data)
}

/// Forward pass of the latent model losses, kept so that per-row weights
/// can be chosen after the losses are known (as the risk penalty needs).
pub struct ModelPass {
    /// Per-row mean squared error of the predicted next latent.
    pub dyn_rows: Vec<f64>,
    /// Per-row squared reward error.
    pub rew_rows: Vec<f64>,
    z_tape: Tape,
    dyn_tape: Tape,
    rew_tape: Tape,
    mean: Matrix,
    next_z: Matrix,
    reward_pred: Vec<f64>,
    rewards: Vec<f64>,
}

impl ModelPass {
    /// Dynamics: `P(phi(s), a)` mean against the stopped `phi(s')`.
    /// Reward: `R(P(phi(s), a))` against the transition's stored reward.
    pub fn forward(params: &ParamSet, models: &LatentModels, batch: &TransitionBatch) -> Result<Self> {
        batch.check()?;
        let (z, z_tape) = models.encoder.forward(params, &batch.obs.obs)?;
        let next_z = models.encoder.infer(params, &batch.next_obs.obs)?;
        let input = z.hcat(&one_hot(&batch.actions, models.n_actions));
        let (mean, dyn_tape) = models.dynamics_mean.forward(params, &input)?;
        let (pred, rew_tape) = models.reward_head.forward(params, &mean)?;
        let latent = mean.cols as f64;
        let dyn_rows = (0..mean.rows)
            .map(|r| mean.row(r).iter().zip(next_z.row(r)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / latent)
            .collect();
        let rew_rows = pred.data.iter().zip(&batch.rewards).map(|(p, r)| (p - r) * (p - r)).collect();
        Ok(Self {
            dyn_rows,
            rew_rows,
            z_tape,
            dyn_tape,
            rew_tape,
            mean,
            next_z,
            reward_pred: pred.data,
            rewards: batch.rewards.clone(),
        })
    }

    pub fn dyn_loss(&self) -> f64 {
        mean(&self.dyn_rows)
    }

    pub fn rew_loss(&self) -> f64 {
        mean(&self.rew_rows)
    }

    /// Accumulates the gradient of `sum_r w_dyn[r] * dyn_rows[r] + w_rew[r] * rew_rows[r]`.
    pub fn backward(
        &self,
        params: &ParamSet,
        models: &LatentModels,
        w_dyn: &[f64],
        w_rew: &[f64],
        grad: &mut [f64],
    ) -> Result<()> {
        let n = self.dyn_rows.len();
        if w_dyn.len() != n || w_rew.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: w_dyn.len().min(w_rew.len()) });
        }
        let latent = self.mean.cols;
        let g_pred = Matrix::from_vec(
            n,
            1,
            (0..n).map(|r| 2.0 * (self.reward_pred[r] - self.rewards[r]) * w_rew[r]).collect(),
        );
        let mut g_mean = models.reward_head.backward(params, &self.rew_tape, &g_pred, grad)?;
        for r in 0..n {
            let k = 2.0 * w_dyn[r] / latent as f64;
            let row = g_mean.row_mut(r);
            for (c, g) in row.iter_mut().enumerate() {
                *g += k * (self.mean.get(r, c) - self.next_z.get(r, c));
            }
        }
        let g_input = models.dynamics_mean.backward(params, &self.dyn_tape, &g_mean, grad)?;
        let g_z = g_input.columns(0..models.latent_dim());
        models.encoder.backward(params, &self.z_tape, &g_z, grad)?;
        Ok(())
    }
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelLosses {
    pub dyn_loss: f64,
    pub rew_loss: f64,
}

/// Batch-mean dynamics and reward losses; gradients scaled by `weight` flow
/// into the encoder, the dynamics mean head and the reward head.
pub fn model_losses(
    params: &ParamSet,
    models: &LatentModels,
    batch: &TransitionBatch,
    weight: f64,
    grad: &mut [f64],
) -> Result<ModelLosses> {
    let pass = ModelPass::forward(params, models, batch)?;
    if weight != 0.0 {
        let w = vec![weight / batch.len() as f64; batch.len()];
        pass.backward(params, models, &w, &w, grad)?;
    }
    Ok(ModelLosses { dyn_loss: pass.dyn_loss(), rew_loss: pass.rew_loss() })
}

/// Per-domain risks, ordered by env tag.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskVector {
    pub tags: Vec<u32>,
    pub risks: Vec<f64>,
    /// Requested domains that had no samples and were left out.
    pub missing: Vec<u32>,
}

impl RiskVector {
    /// Population variance of the risks.
    pub fn variance(&self) -> f64 {
        population_variance(&self.risks)
    }
}

/// Row indices per requested domain, plus the domains with no rows.
fn group_rows(tags: &[u32], domains: &[u32]) -> (Vec<(u32, Vec<usize>)>, Vec<u32>) {
    let mut by_tag: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (r, &t) in tags.iter().enumerate() {
        if domains.contains(&t) {
            by_tag.entry(t).or_default().push(r);
        }
    }
    let missing = domains.iter().copied().filter(|t| !by_tag.contains_key(t)).collect();
    (by_tag.into_iter().collect(), missing)
}

/// Per-domain risks of the latent models over `batch`:
/// `risk_e = dyn_loss_e + rew_loss_e`, each computed only on domain `e`'s
/// rows. Domains listed in `domains` but absent from the batch are reported
/// in `missing`.
pub fn per_domain_risks(
    params: &ParamSet,
    models: &LatentModels,
    batch: &TransitionBatch,
    domains: &[u32],
) -> Result<RiskVector> {
    let pass = ModelPass::forward(params, models, batch)?;
    Ok(risks_from_pass(&pass, &batch.env_tags, domains).0)
}

fn risks_from_pass(pass: &ModelPass, tags: &[u32], domains: &[u32]) -> (RiskVector, Vec<Vec<usize>>) {
    let (groups, missing) = group_rows(tags, domains);
    let mut out = RiskVector { tags: Vec::new(), risks: Vec::new(), missing };
    let mut rows = Vec::new();
    for (tag, idx) in groups {
        let n = idx.len() as f64;
        let d: f64 = idx.iter().map(|&r| pass.dyn_rows[r]).sum::<f64>() / n;
        let w: f64 = idx.iter().map(|&r| pass.rew_rows[r]).sum::<f64>() / n;
        out.tags.push(tag);
        out.risks.push(d + w);
        rows.push(idx);
    }
    (out, rows)
}

pub fn population_variance(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64
}

/// `beta * Var(risks) + sum(risks)`, population variance.
pub fn vrex_penalty(risks: &[f64], beta: f64) -> f64 {
    beta * population_variance(risks) + risks.iter().sum::<f64>()
}

/// Partial derivatives of [`vrex_penalty`] with respect to each risk.
pub fn vrex_penalty_grad(risks: &[f64], beta: f64) -> Vec<f64> {
    let m = risks.len() as f64;
    let mu = mean(risks);
    risks.iter().map(|r| beta * 2.0 * (r - mu) / m + 1.0).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RexTerms {
    pub losses: ModelLosses,
    pub risks: RiskVector,
    pub penalty: f64,
}

/// Model losses plus the variance-of-risks penalty over the batch's domains,
/// in one pass: accumulates the gradient of
/// `model_weight * (dyn + rew) + penalty_weight * vrex_penalty(risks, beta)`.
#[allow(clippy::too_many_arguments)]
pub fn model_losses_with_rex(
    params: &ParamSet,
    models: &LatentModels,
    batch: &TransitionBatch,
    domains: &[u32],
    beta: f64,
    model_weight: f64,
    penalty_weight: f64,
    grad: &mut [f64],
) -> Result<RexTerms> {
    let pass = ModelPass::forward(params, models, batch)?;
    let n = batch.len();
    let (risks, rows) = risks_from_pass(&pass, &batch.env_tags, domains);
    let penalty = vrex_penalty(&risks.risks, beta);
    let mut w = vec![model_weight / n as f64; n];
    if penalty_weight != 0.0 {
        let dr = vrex_penalty_grad(&risks.risks, beta);
        for (g, idx) in dr.iter().zip(&rows) {
            let k = penalty_weight * g / idx.len() as f64;
            for &r in idx {
                w[r] += k;
            }
        }
    }
    if w.iter().any(|&x| x != 0.0) {
        pass.backward(params, models, &w, &w, grad)?;
    }
    Ok(RexTerms { losses: ModelLosses { dyn_loss: pass.dyn_loss(), rew_loss: pass.rew_loss() }, risks, penalty })
}
