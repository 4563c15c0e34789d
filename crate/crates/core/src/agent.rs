//! Discrete soft actor-critic with twin critics, target networks,
//! temperature tuning and shift-augmented critic targets, plus the training
//! loop that interleaves it with the invariance losses.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand::SeedableRng;

use crate::diffcore::{Activation, AdamConfig, AdamState, Matrix, Mlp, OutputTransform, ParamSet};
use crate::envlab::{apply_post_render, render_with, step, AugmentationSpec, DomainSpec, GridEnv, Observation};
use crate::error::{Error, Result};
use crate::eval::{evaluate, DomainEval};
use crate::invariance::{
    bisim_loss_permuted, model_losses, model_losses_with_rex, policy_input, softmax_rows, vstack, LatentModels,
    ObsBatch, TransitionBatch,
};
use crate::math;
use crate::Rng;

/// Layer widths of every network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkShape {
    pub latent_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub model_hidden: Vec<usize>,
    pub actor_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    /// Append normalised agent coordinates to the encoder output.
    pub proprio: bool,
}

impl Default for NetworkShape {
    fn default() -> Self {
        Self {
            latent_dim: 16,
            encoder_hidden: vec![256, 256],
            model_hidden: vec![256],
            actor_hidden: vec![256, 256],
            critic_hidden: vec![256, 256],
            proprio: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub obs_dim: usize,
    pub n_actions: usize,
    pub shape: NetworkShape,
}

impl NetworkSpec {
    pub fn proprio_dim(&self) -> usize {
        if self.shape.proprio {
            2
        } else {
            0
        }
    }
}

/// All networks of an agent laid out in one [`ParamSet`] with the slices
/// `encoder`, `reward_head`, `dynamics_head`, `actor`, `critic1`, `critic2`,
/// `critic_targets` and `log_temperature`, in that order.
#[derive(Debug, Clone, PartialEq)]
pub struct Networks {
    pub spec: NetworkSpec,
    pub params: ParamSet,
    pub latent: LatentModels,
    pub actor: Mlp,
    pub critic1: Mlp,
    pub critic2: Mlp,
    pub target_encoder: Mlp,
    pub target_critic1: Mlp,
    pub target_critic2: Mlp,
    pub log_temperature: usize,
}

fn widths(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut w = vec![input];
    w.extend_from_slice(hidden);
    w.push(output);
    w
}

/// Allocates one named slice holding several networks back to back.
fn alloc_group(params: &mut ParamSet, name: &str, nets: &[(Vec<usize>, OutputTransform)]) -> Result<Vec<Mlp>> {
    let total = nets.iter().map(|(w, _)| Mlp::param_count(w)).sum();
    let range = params.add_slice(name, total);
    let mut start = range.start;
    let mut out = Vec::new();
    for (w, t) in nets {
        let len = Mlp::param_count(w);
        out.push(Mlp::at(start..start + len, w, Activation::Relu, *t)?);
        start += len;
    }
    Ok(out)
}

impl Networks {
    pub fn new(spec: NetworkSpec, init_temperature: f64, rng: &mut Rng) -> Result<Self> {
        if !(init_temperature > 0.0) {
            return Err(Error::InvalidConfig(format!("init temperature must be positive, got {init_temperature}")));
        }
        let s = &spec.shape;
        let l = s.latent_dim;
        let a = spec.n_actions;
        let pin = l + spec.proprio_dim();
        let id = OutputTransform::Identity;
        let mut params = ParamSet::new();
        let enc_w = widths(spec.obs_dim, &s.encoder_hidden, l);
        let critic_w = widths(pin, &s.critic_hidden, a);
        let encoder = alloc_group(&mut params, "encoder", &[(enc_w.clone(), id)])?.remove(0);
        let reward_head = alloc_group(&mut params, "reward_head", &[(widths(l, &s.model_hidden, 1), id)])?.remove(0);
        let mut dynamics = alloc_group(
            &mut params,
            "dynamics_head",
            &[(widths(l + a, &s.model_hidden, l), id), (widths(l + a, &s.model_hidden, l), OutputTransform::SoftplusStd)],
        )?;
        let dynamics_std = dynamics.pop().expect("two dynamics nets");
        let dynamics_mean = dynamics.pop().expect("two dynamics nets");
        let actor = alloc_group(&mut params, "actor", &[(widths(pin, &s.actor_hidden, a), id)])?.remove(0);
        let critic1 = alloc_group(&mut params, "critic1", &[(critic_w.clone(), id)])?.remove(0);
        let critic2 = alloc_group(&mut params, "critic2", &[(critic_w.clone(), id)])?.remove(0);
        let mut targets =
            alloc_group(&mut params, "critic_targets", &[(enc_w, id), (critic_w.clone(), id), (critic_w, id)])?;
        let target_critic2 = targets.pop().expect("three target nets");
        let target_critic1 = targets.pop().expect("three target nets");
        let target_encoder = targets.pop().expect("three target nets");
        let log_temperature = params.add_slice("log_temperature", 1).start;

        for net in [&encoder, &reward_head, &dynamics_mean, &dynamics_std, &actor, &critic1, &critic2] {
            net.init(&mut params, rng);
        }
        // Constant initial std; a near-uniform initial policy.
        dynamics_std.scale_last_layer(&mut params, 0.0);
        actor.scale_last_layer(&mut params, 0.1);
        params.copy_range(encoder.range(), target_encoder.range());
        params.copy_range(critic1.range(), target_critic1.range());
        params.copy_range(critic2.range(), target_critic2.range());
        params.set(log_temperature, math::ln(init_temperature));

        let latent = LatentModels { encoder, reward_head, dynamics_mean, dynamics_std, n_actions: a };
        Ok(Self {
            spec,
            params,
            latent,
            actor,
            critic1,
            critic2,
            target_encoder,
            target_critic1,
            target_critic2,
            log_temperature,
        })
    }

    pub fn alpha(&self) -> f64 {
        math::exp(self.params.get(self.log_temperature))
    }

    pub fn encoder(&self) -> &Mlp {
        &self.latent.encoder
    }

    /// Latents of a batch (no tape).
    pub fn encode(&self, obs: &Matrix) -> Result<Matrix> {
        self.latent.encoder.infer(&self.params, obs)
    }

    /// Action probabilities for a batch.
    pub fn policy(&self, batch: &ObsBatch) -> Result<Matrix> {
        let z = self.encode(&batch.obs)?;
        let logits = self.actor.infer(&self.params, &policy_input(&z, batch.proprio.as_ref()))?;
        Ok(softmax_rows(&logits))
    }

    /// `min(Q1, Q2)` for a batch.
    pub fn q_min(&self, batch: &ObsBatch) -> Result<Matrix> {
        let z = self.encode(&batch.obs)?;
        let input = policy_input(&z, batch.proprio.as_ref());
        let q1 = self.critic1.infer(&self.params, &input)?;
        let q2 = self.critic2.infer(&self.params, &input)?;
        Ok(elementwise_min(&q1, &q2))
    }

    /// `(Q1, Q2)` for a batch.
    pub fn q_values(&self, batch: &ObsBatch) -> Result<(Matrix, Matrix)> {
        let z = self.encode(&batch.obs)?;
        let input = policy_input(&z, batch.proprio.as_ref());
        Ok((self.critic1.infer(&self.params, &input)?, self.critic2.infer(&self.params, &input)?))
    }

    fn ranges(&self, names: &[&str]) -> Vec<Range<usize>> {
        names.iter().map(|n| self.params.range(n).expect("slice allocated in Networks::new")).collect()
    }
}

fn elementwise_min(a: &Matrix, b: &Matrix) -> Matrix {
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x.min(*y)).collect();
    Matrix::from_vec(a.rows, a.cols, data)
}

/// Single observation as a one-row batch.
pub fn single_batch(obs: &Observation) -> ObsBatch {
    ObsBatch {
        obs: Matrix::row_vector(obs.values.clone()),
        proprio: obs.proprio.map(|p| Matrix::row_vector(p.to_vec())),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActMode {
    Sample,
    Greedy,
}

/// Samples from (or takes the argmax of) the policy at `obs`.
pub fn act(nets: &Networks, obs: &Observation, mode: ActMode, rng: &mut Rng) -> Result<usize> {
    let probs = nets.policy(&single_batch(obs))?;
    Ok(choose_action(probs.row(0), mode, rng))
}

/// Categorical draw (inverse CDF) or first argmax.
pub fn choose_action(probs: &[f64], mode: ActMode, rng: &mut Rng) -> usize {
    match mode {
        ActMode::Greedy => {
            let mut best = 0;
            for (i, &p) in probs.iter().enumerate() {
                if p > probs[best] {
                    best = i;
                }
            }
            best
        }
        ActMode::Sample => {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (i, &p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    return i;
                }
            }
            probs.len() - 1
        }
    }
}

/// Soft state value `sum_a pi(a) * (min_q(a) - alpha * ln pi(a))` per row.
pub fn soft_state_values(q_min: &Matrix, logits: &Matrix, alpha: f64) -> Vec<f64> {
    (0..q_min.rows)
        .map(|r| {
            let row = logits.row(r);
            let lse = math::log_sum_exp(row);
            row.iter()
                .zip(q_min.row(r))
                .map(|(&l, &q)| {
                    let logp = l - lse;
                    math::exp(logp) * (q - alpha * logp)
                })
                .sum()
        })
        .collect()
}

/// Critic regression targets `r + discount * (1 - done) * mean_k V(s'_k)`
/// over the augmented views of the next observations. `V` uses the target
/// encoder and target critics with the current actor and temperature.
pub fn critic_targets(
    nets: &Networks,
    next_views: &[ObsBatch],
    rewards: &[f64],
    dones: &[bool],
    discount: f64,
) -> Result<Vec<f64>> {
    if next_views.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let n = rewards.len();
    let stacked = stack_views(next_views)?;
    let p = &nets.params;
    let zt = nets.target_encoder.infer(p, &stacked.obs)?;
    let input_t = policy_input(&zt, stacked.proprio.as_ref());
    let q = elementwise_min(&nets.target_critic1.infer(p, &input_t)?, &nets.target_critic2.infer(p, &input_t)?);
    let z = nets.encode(&stacked.obs)?;
    let logits = nets.actor.infer(p, &policy_input(&z, stacked.proprio.as_ref()))?;
    let v = soft_state_values(&q, &logits, nets.alpha());
    let k = next_views.len() as f64;
    Ok((0..n)
        .map(|b| {
            let mean_v = (0..next_views.len()).map(|view| v[view * n + b]).sum::<f64>() / k;
            let live = if dones[b] { 0.0 } else { 1.0 };
            rewards[b] + discount * live * mean_v
        })
        .collect())
}

fn stack_views(views: &[ObsBatch]) -> Result<ObsBatch> {
    let mut obs = views[0].obs.clone();
    let mut proprio = views[0].proprio.clone();
    for v in &views[1..] {
        if v.len() != views[0].len() {
            return Err(Error::DimensionMismatch { expected: views[0].len(), got: v.len() });
        }
        obs = vstack(&obs, &v.obs);
        proprio = match (proprio, &v.proprio) {
            (Some(a), Some(b)) => Some(vstack(&a, b)),
            (None, None) => None,
            _ => return Err(Error::InvalidConfig("proprio present in only some views".into())),
        };
    }
    Ok(ObsBatch { obs, proprio })
}

/// Twin critic loss `mean_m mean_b [(Q1 - y)^2 + (Q2 - y)^2]` over the
/// augmented views of the observations. With `grad`, gradients reach the
/// encoder and both critics.
pub fn critic_loss(
    nets: &Networks,
    views: &[ObsBatch],
    actions: &[usize],
    targets: &[f64],
    grad: Option<&mut [f64]>,
) -> Result<f64> {
    if views.is_empty() || actions.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let n = actions.len();
    if targets.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: targets.len() });
    }
    let p = &nets.params;
    let stacked = stack_views(views)?;
    let (z, z_tape) = nets.latent.encoder.forward(p, &stacked.obs)?;
    let input = policy_input(&z, stacked.proprio.as_ref());
    let (q1, t1) = nets.critic1.forward(p, &input)?;
    let (q2, t2) = nets.critic2.forward(p, &input)?;
    let rows = stacked.obs.rows;
    let scale = 1.0 / rows as f64;
    let mut loss = 0.0;
    let mut g1 = Matrix::zeros(rows, q1.cols);
    let mut g2 = Matrix::zeros(rows, q2.cols);
    for r in 0..rows {
        let a = actions[r % n];
        let y = targets[r % n];
        let e1 = q1.get(r, a) - y;
        let e2 = q2.get(r, a) - y;
        loss += (e1 * e1 + e2 * e2) * scale;
        g1.row_mut(r)[a] = 2.0 * e1 * scale;
        g2.row_mut(r)[a] = 2.0 * e2 * scale;
    }
    if let Some(grad) = grad {
        let mut gin = nets.critic1.backward(p, &t1, &g1, grad)?;
        gin.add_assign(&nets.critic2.backward(p, &t2, &g2, grad)?);
        let gz = gin.columns(0..z.cols);
        nets.latent.encoder.backward(p, &z_tape, &gz, grad)?;
    }
    Ok(loss)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActorTerms {
    pub actor_loss: f64,
    /// Mean policy entropy over the batch.
    pub entropy: f64,
}

/// Actor loss `mean_b sum_a pi(a) * (alpha * ln pi(a) - min_q(a))` with the
/// encoder, critics and temperature held fixed; gradients reach the actor
/// only.
pub fn actor_loss(nets: &Networks, batch: &ObsBatch, grad: Option<&mut [f64]>) -> Result<ActorTerms> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let p = &nets.params;
    let z = nets.encode(&batch.obs)?;
    let input = policy_input(&z, batch.proprio.as_ref());
    let (logits, tape) = nets.actor.forward(p, &input)?;
    let q = elementwise_min(&nets.critic1.infer(p, &input)?, &nets.critic2.infer(p, &input)?);
    let alpha = nets.alpha();
    let rows = logits.rows;
    let scale = 1.0 / rows as f64;
    let mut loss = 0.0;
    let mut entropy = 0.0;
    let mut g = Matrix::zeros(rows, logits.cols);
    for r in 0..rows {
        let row = logits.row(r);
        let lse = math::log_sum_exp(row);
        let logp: Vec<f64> = row.iter().map(|l| l - lse).collect();
        let probs: Vec<f64> = logp.iter().map(|&l| math::exp(l)).collect();
        let f: Vec<f64> = logp.iter().zip(q.row(r)).map(|(lp, q)| alpha * lp - q).collect();
        let expected: f64 = probs.iter().zip(&f).map(|(p, f)| p * f).sum();
        loss += expected * scale;
        entropy -= probs.iter().zip(&logp).map(|(p, l)| p * l).sum::<f64>() * scale;
        for (c, gv) in g.row_mut(r).iter_mut().enumerate() {
            *gv = probs[c] * (f[c] - expected) * scale;
        }
    }
    if let Some(grad) = grad {
        nets.actor.backward(p, &tape, &g, grad)?;
    }
    Ok(ActorTerms { actor_loss: loss, entropy })
}

/// Temperature loss `alpha * (entropy - target_entropy)` and its derivative
/// with respect to `ln alpha`.
pub fn temperature_loss(log_alpha: f64, entropy: f64, target_entropy: f64) -> (f64, f64) {
    let alpha = math::exp(log_alpha);
    let v = alpha * (entropy - target_entropy);
    (v, v)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SacConfig {
    pub discount: f64,
    pub critic_tau: f64,
    pub encoder_tau: f64,
    pub critic_lr: f64,
    pub actor_lr: f64,
    pub encoder_lr: f64,
    pub temperature_lr: f64,
    pub temperature_beta1: f64,
    pub init_temperature: f64,
    /// Defaults to `0.5 * ln |A|` when `None`.
    pub target_entropy: Option<f64>,
    pub batch_size: usize,
    pub actor_update_freq: u64,
    pub critic_target_update_freq: u64,
    /// Augmented views of `s'` averaged in the critic target.
    pub aug_k: usize,
    /// Augmented views of `s` averaged in the critic loss.
    pub aug_m: usize,
}

impl Default for SacConfig {
    fn default() -> Self {
        Self {
            discount: 0.99,
            critic_tau: 0.005,
            encoder_tau: 0.005,
            critic_lr: 1e-3,
            actor_lr: 1e-3,
            encoder_lr: 1e-4,
            temperature_lr: 1e-4,
            temperature_beta1: 0.9,
            init_temperature: 0.1,
            target_entropy: None,
            batch_size: 32,
            actor_update_freq: 2,
            critic_target_update_freq: 2,
            aug_k: 2,
            aug_m: 2,
        }
    }
}

impl SacConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if !(0.0..1.0).contains(&self.discount) {
            return bad("discount must lie in [0, 1)");
        }
        if !(self.critic_tau > 0.0 && self.critic_tau <= 1.0) || !(self.encoder_tau > 0.0 && self.encoder_tau <= 1.0) {
            return bad("soft-update rates must lie in (0, 1]");
        }
        if self.aug_k == 0 || self.aug_m == 0 {
            return bad("augmentation counts K and M must be at least 1");
        }
        if self.batch_size == 0 || self.actor_update_freq == 0 || self.critic_target_update_freq == 0 {
            return bad("batch size and update frequencies must be positive");
        }
        for lr in [self.critic_lr, self.actor_lr, self.encoder_lr, self.temperature_lr] {
            if !(lr > 0.0) {
                return bad("learning rates must be positive");
            }
        }
        if !(self.init_temperature > 0.0) {
            return bad("init temperature must be positive");
        }
        Ok(())
    }

    pub fn target_entropy_for(&self, n_actions: usize) -> f64 {
        self.target_entropy.unwrap_or(0.5 * math::ln(n_actions as f64))
    }
}

/// Transition stored in the replay buffer, observations un-augmented.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionRecord {
    pub obs: Vec<f64>,
    pub proprio: Option<[f64; 2]>,
    pub action: usize,
    pub reward: f64,
    pub next_obs: Vec<f64>,
    pub next_proprio: Option<[f64; 2]>,
    pub done: bool,
    pub env_tag: u32,
}

/// FIFO ring buffer with uniform sampling.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<TransitionRecord>,
    /// Slot the next push overwrites once full.
    head: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidConfig("replay capacity must be positive".into()));
        }
        Ok(Self { capacity, items: Vec::new(), head: 0 })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, record: TransitionRecord) {
        if self.items.len() < self.capacity {
            self.items.push(record);
        } else {
            self.items[self.head] = record;
            self.head = (self.head + 1) % self.capacity;
        }
    }

    /// Records from oldest to newest.
    pub fn iter(&self) -> impl Iterator<Item = &TransitionRecord> {
        let (newer, older) = self.items.split_at(self.head);
        older.iter().chain(newer.iter())
    }

    /// `n` indices drawn uniformly with replacement.
    pub fn sample_indices(&self, n: usize, rng: &mut Rng) -> Result<Vec<usize>> {
        if self.items.is_empty() {
            return Err(Error::EmptyBatch);
        }
        Ok((0..n).map(|_| rng.random_range(0..self.items.len())).collect())
    }

    pub fn get(&self, index: usize) -> &TransitionRecord {
        &self.items[index]
    }

    /// Assembles a batch from stored records.
    pub fn batch(&self, indices: &[usize]) -> TransitionBatch {
        let records: Vec<&TransitionRecord> = indices.iter().map(|&i| &self.items[i]).collect();
        batch_from_records(&records)
    }

    pub fn sample(&self, n: usize, rng: &mut Rng) -> Result<TransitionBatch> {
        let idx = self.sample_indices(n, rng)?;
        Ok(self.batch(&idx))
    }
}

/// Row-aligned batch from transition records.
pub fn batch_from_records(records: &[&TransitionRecord]) -> TransitionBatch {
    let n = records.len();
    let dim = records.first().map_or(0, |r| r.obs.len());
    let mut obs = Vec::with_capacity(n * dim);
    let mut next = Vec::with_capacity(n * dim);
    let has_proprio = records.first().is_some_and(|r| r.proprio.is_some());
    let mut prop = Vec::new();
    let mut next_prop = Vec::new();
    for r in records {
        obs.extend_from_slice(&r.obs);
        next.extend_from_slice(&r.next_obs);
        if has_proprio {
            prop.extend_from_slice(&r.proprio.unwrap_or_default());
            next_prop.extend_from_slice(&r.next_proprio.unwrap_or_default());
        }
    }
    let wrap = |data: Vec<f64>, p: Vec<f64>| ObsBatch {
        obs: Matrix::from_vec(n, dim, data),
        proprio: has_proprio.then(|| Matrix::from_vec(n, 2, p)),
    };
    TransitionBatch {
        obs: wrap(obs, prop),
        actions: records.iter().map(|r| r.action).collect(),
        rewards: records.iter().map(|r| r.reward).collect(),
        next_obs: wrap(next, next_prop),
        dones: records.iter().map(|r| r.done).collect(),
        env_tags: records.iter().map(|r| r.env_tag).collect(),
    }
}

/// Applies a post-rendering intervention to every row independently.
pub fn augment_batch(batch: &ObsBatch, side: usize, aug: Option<&AugmentationSpec>, rng: &mut Rng) -> ObsBatch {
    let Some(aug) = aug else {
        return batch.clone();
    };
    let mut out = batch.obs.clone();
    for r in 0..out.rows {
        let obs = Observation { side, values: batch.obs.row(r).to_vec(), proprio: None };
        let shifted = apply_post_render(&obs, aug, rng);
        out.row_mut(r).copy_from_slice(&shifted.values);
    }
    ObsBatch { obs: out, proprio: batch.proprio.clone() }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ActorUpdate {
    pub actor_loss: f64,
    pub temperature_loss: f64,
    pub entropy: f64,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct InvarianceUpdate {
    pub bisim_loss: f64,
    pub dyn_loss: f64,
    pub rew_loss: f64,
    /// Population variance of per-domain risks (REx only).
    pub risk_variance: Option<f64>,
}

/// Weights of the encoder objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InvarianceWeights {
    pub bisim_gamma: f64,
    pub model_weight: f64,
    /// `None` disables the variance-of-risks penalty.
    pub rex: Option<RexWeights>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RexWeights {
    pub beta: f64,
    /// Current (annealed) weight of the penalty.
    pub weight: f64,
}

/// Networks plus optimizer states.
#[derive(Debug, Clone)]
pub struct Agent {
    pub nets: Networks,
    pub sac: SacConfig,
    critic_opt: AdamState,
    actor_opt: AdamState,
    temperature_opt: AdamState,
    model_opt: AdamState,
    grad: Vec<f64>,
}

impl Agent {
    pub fn new(spec: NetworkSpec, sac: SacConfig, rng: &mut Rng) -> Result<Self> {
        sac.validate()?;
        let nets = Networks::new(spec, sac.init_temperature, rng)?;
        let critic_opt = AdamState::new(nets.ranges(&["encoder", "critic1", "critic2"]));
        let actor_opt = AdamState::new(nets.ranges(&["actor"]));
        let temperature_opt = AdamState::new(nets.ranges(&["log_temperature"]));
        let model_opt = AdamState::new(nets.ranges(&["encoder", "reward_head", "dynamics_head"]));
        let grad = vec![0.0; nets.params.len()];
        Ok(Self { nets, sac, critic_opt, actor_opt, temperature_opt, model_opt, grad })
    }

    fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    /// One critic step on `batch`. With `aug`, the target averages `K`
    /// augmented views of `s'` and the loss `M` views of `s`; without it a
    /// single un-augmented view is used for each.
    pub fn update_critic(
        &mut self,
        batch: &TransitionBatch,
        aug: Option<&AugmentationSpec>,
        side: usize,
        rng: &mut Rng,
    ) -> Result<f64> {
        let (k, m) = if aug.is_some() { (self.sac.aug_k, self.sac.aug_m) } else { (1, 1) };
        let next_views: Vec<ObsBatch> = (0..k).map(|_| augment_batch(&batch.next_obs, side, aug, rng)).collect();
        let views: Vec<ObsBatch> = (0..m).map(|_| augment_batch(&batch.obs, side, aug, rng)).collect();
        let y = critic_targets(&self.nets, &next_views, &batch.rewards, &batch.dones, self.sac.discount)?;
        self.zero_grad();
        let loss = critic_loss(&self.nets, &views, &batch.actions, &y, Some(&mut self.grad))?;
        self.critic_opt.step(&mut self.nets.params, &self.grad, &AdamConfig::with_lr(self.sac.critic_lr))?;
        Ok(loss)
    }

    /// One actor step followed by one temperature step.
    pub fn update_actor_and_temperature(&mut self, obs: &ObsBatch) -> Result<ActorUpdate> {
        self.zero_grad();
        let terms = actor_loss(&self.nets, obs, Some(&mut self.grad))?;
        self.actor_opt.step(&mut self.nets.params, &self.grad, &AdamConfig::with_lr(self.sac.actor_lr))?;

        let li = self.nets.log_temperature;
        let target = self.sac.target_entropy_for(self.nets.spec.n_actions);
        let (t_loss, t_grad) = temperature_loss(self.nets.params.get(li), terms.entropy, target);
        self.zero_grad();
        self.grad[li] = t_grad;
        let cfg = AdamConfig { beta1: self.sac.temperature_beta1, ..AdamConfig::with_lr(self.sac.temperature_lr) };
        self.temperature_opt.step(&mut self.nets.params, &self.grad, &cfg)?;
        Ok(ActorUpdate {
            actor_loss: terms.actor_loss,
            temperature_loss: t_loss,
            entropy: terms.entropy,
            alpha: self.nets.alpha(),
        })
    }

    /// Polyak-averages the target encoder and target critics.
    pub fn soft_update_targets(&mut self) {
        let n = &self.nets;
        let pairs = [
            (n.critic1.range(), n.target_critic1.range(), self.sac.critic_tau),
            (n.critic2.range(), n.target_critic2.range(), self.sac.critic_tau),
            (n.latent.encoder.range(), n.target_encoder.range(), self.sac.encoder_tau),
        ];
        for (src, dst, tau) in pairs {
            self.nets.params.soft_update(src, dst, tau);
        }
    }

    /// One encoder/model step: bisimulation loss of `batch` against its
    /// permutation `perm`, plus weighted dynamics and reward losses, plus the
    /// risk penalty over `domains` when enabled.
    pub fn update_invariance(
        &mut self,
        batch: &TransitionBatch,
        perm: &[usize],
        domains: &[u32],
        weights: &InvarianceWeights,
    ) -> Result<InvarianceUpdate> {
        self.zero_grad();
        let nets = &self.nets;
        let bisim =
            bisim_loss_permuted(&nets.params, &nets.latent, &nets.actor, &batch.obs, perm, weights.bisim_gamma, 1.0, &mut self.grad)?;
        let (losses, risk_variance) = match weights.rex {
            None => (model_losses(&nets.params, &nets.latent, batch, weights.model_weight, &mut self.grad)?, None),
            Some(rex) => {
                let t = model_losses_with_rex(
                    &nets.params,
                    &nets.latent,
                    batch,
                    domains,
                    rex.beta,
                    weights.model_weight,
                    rex.weight,
                    &mut self.grad,
                )?;
                (t.losses, Some(t.risks.variance()))
            }
        };
        self.model_opt.step(&mut self.nets.params, &self.grad, &AdamConfig::with_lr(self.sac.encoder_lr))?;
        Ok(InvarianceUpdate { bisim_loss: bisim, dyn_loss: losses.dyn_loss, rew_loss: losses.rew_loss, risk_variance })
    }

    /// Optimizer moments, for checkpoints.
    pub fn optimizer_state(&self) -> Vec<(String, Vec<f64>)> {
        [
            ("critic", &self.critic_opt),
            ("actor", &self.actor_opt),
            ("temperature", &self.temperature_opt),
            ("model", &self.model_opt),
        ]
        .into_iter()
        .map(|(n, s)| (String::from(n), s.to_vec()))
        .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Sac,
    DrQ,
    Ibit,
    IbitRex,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Sac, Method::DrQ, Method::Ibit, Method::IbitRex];

    pub fn name(self) -> &'static str {
        match self {
            Method::Sac => "SAC",
            Method::DrQ => "DrQ",
            Method::Ibit => "IBIT",
            Method::IbitRex => "IBIT-REx",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name().eq_ignore_ascii_case(s))
    }

    pub fn uses_invariance(self) -> bool {
        matches!(self, Method::Ibit | Method::IbitRex)
    }
}

/// Everything the training loop needs besides the environment and domains.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub method: Method,
    /// Train on all `N` rendering-intervention domains; otherwise on domain 0 only.
    pub rendering_interventions: bool,
    /// Post-rendering intervention applied when acting and to sampled batches.
    pub post_rendering: Option<AugmentationSpec>,
    pub sac: SacConfig,
    pub network: NetworkShape,
    pub total_steps: u64,
    /// Uniform random actions and no updates before this step.
    pub init_steps: u64,
    pub env_batch: usize,
    pub resample_rate: u64,
    pub episode_limit: usize,
    pub replay_capacity: usize,
    pub bisim_gamma: f64,
    pub model_weight: f64,
    pub penalty_weight: f64,
    pub penalty_anneal_steps: u64,
    pub rex_beta: f64,
    pub eval_every: u64,
    pub eval_episodes: usize,
    /// Zero disables periodic checkpoints (the final state is always reported).
    pub checkpoint_every: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Ibit,
            rendering_interventions: true,
            post_rendering: Some(AugmentationSpec::random_shift(1)),
            sac: SacConfig::default(),
            network: NetworkShape::default(),
            total_steps: 60_000,
            init_steps: 1_000,
            env_batch: 5,
            resample_rate: 150,
            episode_limit: 20,
            replay_capacity: 100_000,
            bisim_gamma: 0.5,
            model_weight: 0.5,
            penalty_weight: 0.5,
            penalty_anneal_steps: 1_000,
            rex_beta: 1.0,
            eval_every: 5_000,
            eval_episodes: 20,
            checkpoint_every: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.sac.validate()?;
        let bad = |m: String| Err(Error::InvalidConfig(m));
        match self.method {
            Method::DrQ if self.post_rendering.is_none() => {
                return bad("DrQ requires post-rendering interventions".into());
            }
            Method::Sac if self.post_rendering.is_some() => {
                return bad("SAC runs without post-rendering interventions".into());
            }
            Method::IbitRex if !(self.rex_beta > 0.0) => {
                return bad(format!("IBIT-REx requires beta > 0, got {}", self.rex_beta));
            }
            _ => {}
        }
        if self.env_batch == 0 || self.resample_rate == 0 || self.episode_limit == 0 {
            return bad("env batch, resample rate and episode limit must be positive".into());
        }
        if self.eval_every == 0 || self.eval_episodes == 0 {
            return bad("eval cadence and episode count must be positive".into());
        }
        if self.replay_capacity == 0 {
            return bad("replay capacity must be positive".into());
        }
        if !(0.0..1.0).contains(&self.bisim_gamma) {
            return bad(format!("bisim gamma must lie in [0, 1), got {}", self.bisim_gamma));
        }
        if self.model_weight < 0.0 || self.penalty_weight < 0.0 {
            return bad("loss weights must be nonnegative".into());
        }
        Ok(())
    }

    /// Domain ids the agent may train on, given the full list whose last
    /// entry is the held-out domain.
    pub fn training_domain_ids(&self, domains: &[DomainSpec]) -> Vec<u32> {
        let train = &domains[..domains.len() - 1];
        if self.rendering_interventions {
            train.iter().map(|d| d.domain_id).collect()
        } else {
            vec![train[0].domain_id]
        }
    }

    /// Penalty weight after linear annealing from zero.
    pub fn annealed_penalty(&self, updates: u64) -> f64 {
        if self.penalty_anneal_steps == 0 {
            return self.penalty_weight;
        }
        self.penalty_weight * (updates as f64 / self.penalty_anneal_steps as f64).min(1.0)
    }
}

/// One row of the metrics stream, written at every evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    /// Domains in the current environment batch.
    pub env_tags: Vec<u32>,
    pub episode_return_seen: f64,
    pub episode_return_unseen: f64,
    pub success_seen: f64,
    pub success_unseen: f64,
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub bisim_loss: f64,
    pub dyn_loss: f64,
    pub rew_loss: f64,
    pub risk_variance: f64,
    pub alpha: f64,
}

pub enum TrainEvent<'a> {
    /// The environment batch was redrawn.
    Resample { step: u64, domain_ids: &'a [u32] },
    Metrics(&'a MetricsRow),
    Checkpoint { step: u64, agent: &'a Agent },
}

pub struct TrainOutcome {
    pub agent: Agent,
    pub rows: Vec<MetricsRow>,
    /// Evaluation of every domain (training and held-out) after the last step.
    pub final_eval: Vec<DomainEval>,
}

/// Independent random streams of one run.
struct Streams {
    init: Rng,
    env: Rng,
    replay: Rng,
    aug: Rng,
    policy: Rng,
}

impl Streams {
    fn new(seed: u64) -> Self {
        let stream = |k: u64| {
            let mut r = Rng::seed_from_u64(seed);
            r.set_stream(k);
            r
        };
        Self { init: stream(1), env: stream(2), replay: stream(3), aug: stream(4), policy: stream(5) }
    }
}

struct Slot {
    domain: usize,
    state: usize,
    t: usize,
}

#[derive(Default)]
struct Accum {
    critic: (f64, u64),
    actor: (f64, u64),
    bisim: (f64, u64),
    dyn_: (f64, u64),
    rew: (f64, u64),
    risk_var: (f64, u64),
}

fn push(acc: &mut (f64, u64), v: f64) {
    acc.0 += v;
    acc.1 += 1;
}

fn take(acc: &mut (f64, u64)) -> f64 {
    let v = if acc.1 == 0 { 0.0 } else { acc.0 / acc.1 as f64 };
    *acc = (0.0, 0);
    v
}

/// Seed of the `k`-th evaluation's start states; shared by the training loop
/// and stand-alone evaluation so reports line up.
pub fn eval_seed(seed: u64, k: u64) -> u64 {
    seed ^ 0xE7A1_0000_0000_0000 ^ k
}

/// Runs training as in the interleaved scheme: for every environment in the
/// current batch, act on the (augmented) frame, step, store, update the
/// critic and actor, then draw a fresh batch, permute it and take an
/// encoder/model step on the invariance objective.
///
/// `domains` lists the training domains followed by the held-out domain; the
/// held-out domain is only ever rendered by evaluation.
pub fn training_loop(
    cfg: &TrainConfig,
    env: &GridEnv,
    domains: &[DomainSpec],
    mut on_event: impl FnMut(TrainEvent<'_>) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if domains.len() < 2 {
        return Err(Error::InvalidConfig("need at least one training domain and one held-out domain".into()));
    }
    // Replay holds clean renders; augmentation is applied by the loop.
    let domains: Vec<DomainSpec> = domains.iter().map(|d| DomainSpec { post_render: None, ..d.clone() }).collect();
    let unseen = domains.len() - 1;
    let train_ids = cfg.training_domain_ids(&domains);
    let train_idx: Vec<usize> = (0..unseen).filter(|&i| train_ids.contains(&domains[i].domain_id)).collect();

    let mut rngs = Streams::new(cfg.seed);
    let spec = NetworkSpec { obs_dim: env.obs_len(), n_actions: env.mdp.n_actions(), shape: cfg.network.clone() };
    let mut agent = Agent::new(spec, cfg.sac.clone(), &mut rngs.init)?;
    let mut replay = ReplayBuffer::new(cfg.replay_capacity)?;
    let aug = cfg.post_rendering.as_ref();
    let side = env.side();
    let proprio = cfg.network.proprio;
    let n_actions = env.mdp.n_actions();

    let mut rows = Vec::new();
    let mut acc = Accum::default();
    let mut alpha = agent.nets.alpha();
    let mut slots: Vec<Slot> = Vec::new();
    let mut tags: Vec<u32> = Vec::new();
    let mut step_count: u64 = 0;
    let mut since_resample = cfg.resample_rate;
    let mut updates: u64 = 0;
    let mut evals: u64 = 0;

    while step_count < cfg.total_steps {
        if since_resample >= cfg.resample_rate {
            slots = (0..cfg.env_batch)
                .map(|_| {
                    let domain = train_idx[rngs.env.random_range(0..train_idx.len())];
                    Slot { domain, state: env.mdp.sample_initial(&mut rngs.env), t: 0 }
                })
                .collect();
            tags = slots.iter().map(|s| domains[s.domain].domain_id).collect();
            on_event(TrainEvent::Resample { step: step_count, domain_ids: &tags })?;
            since_resample = 0;
        }
        for slot in slots.iter_mut() {
            if step_count >= cfg.total_steps {
                break;
            }
            let domain = &domains[slot.domain];
            let obs = render_with(env, domain, slot.state, proprio);
            let action = if step_count < cfg.init_steps {
                rngs.policy.random_range(0..n_actions)
            } else {
                let seen = match aug {
                    Some(a) => apply_post_render(&obs, a, &mut rngs.aug),
                    None => obs.clone(),
                };
                act(&agent.nets, &seen, ActMode::Sample, &mut rngs.policy)?
            };
            let out = step(env, domain, slot.state, action, &mut rngs.env);
            let next_obs = render_with(env, domain, out.next_state, proprio);
            replay.push(TransitionRecord {
                obs: obs.values,
                proprio: obs.proprio,
                action,
                reward: out.reward,
                next_obs: next_obs.values,
                next_proprio: next_obs.proprio,
                done: out.done,
                env_tag: domain.domain_id,
            });
            slot.t += 1;
            if out.done || slot.t >= cfg.episode_limit {
                slot.state = env.mdp.sample_initial(&mut rngs.env);
                slot.t = 0;
            } else {
                slot.state = out.next_state;
            }
            step_count += 1;

            if step_count > cfg.init_steps {
                updates += 1;
                let batch = replay.sample(cfg.sac.batch_size, &mut rngs.replay)?;
                push(&mut acc.critic, agent.update_critic(&batch, aug, side, &mut rngs.aug)?);
                if updates % cfg.sac.actor_update_freq == 0 {
                    let view = augment_batch(&batch.obs, side, aug, &mut rngs.aug);
                    let a = agent.update_actor_and_temperature(&view)?;
                    push(&mut acc.actor, a.actor_loss);
                    alpha = a.alpha;
                }
                if updates % cfg.sac.critic_target_update_freq == 0 {
                    agent.soft_update_targets();
                }
                if cfg.method.uses_invariance() {
                    let mut b_i = replay.sample(cfg.sac.batch_size, &mut rngs.replay)?;
                    b_i.obs = augment_batch(&b_i.obs, side, aug, &mut rngs.aug);
                    b_i.next_obs = augment_batch(&b_i.next_obs, side, aug, &mut rngs.aug);
                    let mut perm: Vec<usize> = (0..b_i.len()).collect();
                    perm.shuffle(&mut rngs.replay);
                    let rex = (cfg.method == Method::IbitRex)
                        .then(|| RexWeights { beta: cfg.rex_beta, weight: cfg.annealed_penalty(updates) });
                    let w = InvarianceWeights { bisim_gamma: cfg.bisim_gamma, model_weight: cfg.model_weight, rex };
                    let u = agent.update_invariance(&b_i, &perm, &train_ids, &w)?;
                    push(&mut acc.bisim, u.bisim_loss);
                    push(&mut acc.dyn_, u.dyn_loss);
                    push(&mut acc.rew, u.rew_loss);
                    if let Some(v) = u.risk_variance {
                        push(&mut acc.risk_var, v);
                    }
                }
            }

            if step_count % cfg.eval_every == 0 || step_count == cfg.total_steps {
                let report = evaluate(
                    &agent.nets,
                    env,
                    &domains,
                    cfg.eval_episodes,
                    cfg.episode_limit,
                    eval_seed(cfg.seed, evals),
                )?;
                evals += 1;
                let seen: Vec<&DomainEval> = train_idx.iter().map(|&i| &report[i]).collect();
                let mean_of = |f: fn(&DomainEval) -> f64| seen.iter().map(|d| f(d)).sum::<f64>() / seen.len() as f64;
                let row = MetricsRow {
                    step: step_count,
                    env_tags: tags.clone(),
                    episode_return_seen: mean_of(|d| d.mean_return),
                    episode_return_unseen: report[unseen].mean_return,
                    success_seen: mean_of(|d| d.success_rate),
                    success_unseen: report[unseen].success_rate,
                    critic_loss: take(&mut acc.critic),
                    actor_loss: take(&mut acc.actor),
                    bisim_loss: take(&mut acc.bisim),
                    dyn_loss: take(&mut acc.dyn_),
                    rew_loss: take(&mut acc.rew),
                    risk_variance: take(&mut acc.risk_var),
                    alpha,
                };
                on_event(TrainEvent::Metrics(&row))?;
                rows.push(row);
            }
            if cfg.checkpoint_every > 0 && step_count % cfg.checkpoint_every == 0 {
                on_event(TrainEvent::Checkpoint { step: step_count, agent: &agent })?;
            }
        }
        since_resample += cfg.env_batch as u64;
    }
    let final_eval =
        evaluate(&agent.nets, env, &domains, cfg.eval_episodes, cfg.episode_limit, eval_seed(cfg.seed, u64::MAX))?;
    Ok(TrainOutcome { agent, rows, final_eval })
}
