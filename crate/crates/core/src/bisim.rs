//! Ground-truth bisimulation machinery on finite MDPs.
//!
//! [`coarsest_bisim_partition`] refines the reward partition until block
//! transition probabilities agree. [`bisim_metric_fixed_point`] iterates the
//! reward-plus-discounted-W1 operator from the zero metric; the W1 terms are
//! exact transport solves. [`verify_valid_intervention`] checks that a new
//! emission keeps behaviourally distinct states observably distinct.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::envlab::{background_pixel, render, shift, AugmentationKind, DomainSpec, GridEnv, LatentMdp, Observation};
use crate::error::{Error, Result};
use crate::math;
use crate::otmetric;

/// Absolute tolerance on block-aggregated probabilities during refinement.
pub const PARTITION_TOL: f64 = 1e-9;

/// Assignment of each state to a block; block ids are numbered by first
/// occurrence in state order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    block_of: Vec<usize>,
    n_blocks: usize,
}

impl Partition {
    /// Canonicalises arbitrary labels.
    pub fn from_labels(labels: &[usize]) -> Self {
        let mut remap = BTreeMap::new();
        let block_of = labels
            .iter()
            .map(|l| {
                let next = remap.len();
                *remap.entry(*l).or_insert(next)
            })
            .collect();
        Self { block_of, n_blocks: remap.len() }
    }

    pub fn block_of(&self, s: usize) -> usize {
        self.block_of[s]
    }

    pub fn n_blocks(&self) -> usize {
        self.n_blocks
    }

    pub fn n_states(&self) -> usize {
        self.block_of.len()
    }

    pub fn same_block(&self, s: usize, t: usize) -> bool {
        self.block_of[s] == self.block_of[t]
    }

    /// Members of every block, in block order.
    pub fn blocks(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_blocks];
        for (s, &b) in self.block_of.iter().enumerate() {
            out[b].push(s);
        }
        out
    }

    pub fn labels(&self) -> &[usize] {
        &self.block_of
    }
}

/// Coarsest partition satisfying equal rewards and equal block-transition
/// probabilities for every action.
pub fn coarsest_bisim_partition(mdp: &LatentMdp) -> Partition {
    let n = mdp.n_states();
    let na = mdp.n_actions();

    // Exact reward signatures.
    let mut labels = vec![0usize; n];
    let mut signatures: Vec<Vec<f64>> = Vec::new();
    for (s, label) in labels.iter_mut().enumerate() {
        let sig: Vec<f64> = (0..na).map(|a| mdp.reward(s, a)).collect();
        *label = match signatures.iter().position(|g| *g == sig) {
            Some(i) => i,
            None => {
                signatures.push(sig);
                signatures.len() - 1
            }
        };
    }
    let mut partition = Partition::from_labels(&labels);

    loop {
        let k = partition.n_blocks();
        let aggregated: Vec<Vec<f64>> = (0..n)
            .map(|s| {
                let mut v = vec![0.0; na * k];
                for a in 0..na {
                    for (next, &p) in mdp.transition_row(s, a).iter().enumerate() {
                        v[a * k + partition.block_of(next)] += p;
                    }
                }
                v
            })
            .collect();

        let mut next_labels = vec![0usize; n];
        let mut fresh = 0usize;
        for members in partition.blocks() {
            let mut reps: Vec<(usize, usize)> = Vec::new();
            for &s in &members {
                let found = reps.iter().find(|(rep, _)| {
                    aggregated[*rep].iter().zip(&aggregated[s]).all(|(x, y)| (x - y).abs() <= PARTITION_TOL)
                });
                next_labels[s] = match found {
                    Some(&(_, label)) => label,
                    None => {
                        reps.push((s, fresh));
                        fresh += 1;
                        fresh - 1
                    }
                };
            }
        }
        let refined = Partition::from_labels(&next_labels);
        if refined.n_blocks() == partition.n_blocks() {
            return refined;
        }
        partition = refined;
    }
}

/// Symmetric, zero-diagonal `|S| x |S|` distance table.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricMatrix {
    n: usize,
    values: Vec<f64>,
}

impl MetricMatrix {
    pub fn zeros(n: usize) -> Self {
        Self { n, values: vec![0.0; n * n] }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    /// `max |a - b|` over all entries.
    pub fn sup_distance(&self, other: &MetricMatrix) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.n).all(|i| (0..self.n).all(|j| self.get(i, j) == self.get(j, i)))
    }
}

/// Iteration controls for [`bisim_metric_fixed_point`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixedPointOptions {
    /// Weight on the W1 term, in `[0, 1)`.
    pub c: f64,
    /// Stop once `||d_{n+1} - d_n||_inf < tol`.
    pub tol: f64,
    pub max_iter: usize,
}

impl FixedPointOptions {
    /// `tol = 1e-6` and `max_iter = ceil(log(tol) / log(c)) + 50`.
    pub fn with_c(c: f64) -> Self {
        Self::with_c_tol(c, 1e-6)
    }

    pub fn with_c_tol(c: f64, tol: f64) -> Self {
        let max_iter = if c <= 0.0 { 50 } else { math::ceil(math::ln(tol) / math::ln(c)) as usize + 50 };
        Self { c, tol, max_iter }
    }
}

/// Converged metric plus the sup-norm residual of every sweep.
#[derive(Debug, Clone)]
pub struct FixedPointReport {
    pub metric: MetricMatrix,
    /// `residuals[n] = ||d_{n+1} - d_n||_inf`.
    pub residuals: Vec<f64>,
}

impl FixedPointReport {
    pub fn iterations(&self) -> usize {
        self.residuals.len()
    }
}

/// Bisimulation metric by fixed-point iteration from `d_0 = 0`.
///
/// `d_{n+1}(i, j) = max_a (1 - c) |R(i, a) - R(j, a)| + c W1(P(.|i, a), P(.|j, a); d_n)`.
pub fn bisim_metric_fixed_point(mdp: &LatentMdp, opts: FixedPointOptions) -> Result<FixedPointReport> {
    if !(0.0..1.0).contains(&opts.c) {
        return Err(Error::InvalidConfig(format!("c = {} outside [0, 1)", opts.c)));
    }
    let n = mdp.n_states();
    let na = mdp.n_actions();
    let supports: Vec<Vec<(Vec<usize>, Vec<f64>)>> = (0..n)
        .map(|s| {
            (0..na)
                .map(|a| {
                    let row = mdp.transition_row(s, a);
                    let idx: Vec<usize> = (0..n).filter(|&t| row[t] > 0.0).collect();
                    let w: Vec<f64> = idx.iter().map(|&t| row[t]).collect();
                    (idx, w)
                })
                .collect()
        })
        .collect();

    let mut d = MetricMatrix::zeros(n);
    let mut residuals = Vec::new();
    for _ in 0..opts.max_iter {
        let mut next = MetricMatrix::zeros(n);
        for i in 0..n {
            for j in (i + 1)..n {
                let mut best = 0.0f64;
                for a in 0..na {
                    let reward_term = (1.0 - opts.c) * (mdp.reward(i, a) - mdp.reward(j, a)).abs();
                    let transport_term = if opts.c > 0.0 {
                        let (si, wi) = &supports[i][a];
                        let (sj, wj) = &supports[j][a];
                        opts.c * w1_between(si, wi, sj, wj, &d)?
                    } else {
                        0.0
                    };
                    best = best.max(reward_term + transport_term);
                }
                next.values[i * n + j] = best;
                next.values[j * n + i] = best;
            }
        }
        let residual = next.sup_distance(&d);
        residuals.push(residual);
        d = next;
        if residual < opts.tol {
            return Ok(FixedPointReport { metric: d, residuals });
        }
    }
    Err(Error::FixedPointNotConverged { iterations: opts.max_iter, residual: residuals.last().copied().unwrap_or(0.0) })
}

fn w1_between(si: &[usize], wi: &[f64], sj: &[usize], wj: &[f64], d: &MetricMatrix) -> Result<f64> {
    if si.len() == 1 && sj.len() == 1 {
        return Ok(d.get(si[0], sj[0]));
    }
    if si == sj && wi == wj {
        return Ok(0.0);
    }
    Ok(otmetric::transport(wi, wj, |a, b| d.get(si[a], sj[b]))?.value)
}

/// Label of a pooled state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PooledLabel {
    pub state: usize,
    pub domain_id: u32,
}

/// Disjoint union of one copy of `mdp` per domain.
///
/// Pooled state `k * |S| + s` is latent state `s` observed in `domains[k]`;
/// dynamics never cross copies and rewards are duplicated.
pub fn pooled_observation_mdp(mdp: &LatentMdp, domains: &[DomainSpec]) -> Result<(LatentMdp, Vec<PooledLabel>)> {
    if domains.is_empty() {
        return Err(Error::InvalidConfig("pooling needs at least one domain".into()));
    }
    let n = mdp.n_states();
    let na = mdp.n_actions();
    let m = domains.len();
    let big = n * m;
    let mut transition = vec![0.0; big * na * big];
    let mut reward = vec![0.0; big * na];
    let mut initial = vec![0.0; big];
    let mut terminal = vec![false; big];
    let mut labels = Vec::with_capacity(big);
    for (k, domain) in domains.iter().enumerate() {
        for s in 0..n {
            let ps = k * n + s;
            labels.push(PooledLabel { state: s, domain_id: domain.domain_id });
            initial[ps] = mdp.initial_distribution()[s] / m as f64;
            terminal[ps] = mdp.is_terminal(s);
            for a in 0..na {
                reward[ps * na + a] = mdp.reward(s, a);
                let row = mdp.transition_row(s, a);
                let out = &mut transition[(ps * na + a) * big..][..big];
                out[k * n..(k + 1) * n].copy_from_slice(row);
            }
        }
    }
    // Renormalise the initial distribution exactly.
    let total: f64 = initial.iter().sum();
    for p in &mut initial {
        *p /= total;
    }
    let pooled = LatentMdp::new(big, na, transition, reward, mdp.discount(), initial, terminal)?;
    Ok((pooled, labels))
}

/// Outcome of [`verify_valid_intervention`].
#[derive(Debug, Clone, PartialEq)]
pub enum Validity {
    Valid,
    Invalid(InvalidReason),
}

impl Validity {
    pub fn is_valid(&self) -> bool {
        matches!(self, Validity::Valid)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum InvalidReason {
    /// Two states from different bisimulation blocks can produce the same
    /// perceived observation.
    Collision { state_a: usize, state_b: usize },
    /// The goal marker is not brighter than every background pixel.
    GoalNotSeparable { goal_value: f64, max_background: f64 },
    /// The two domains disagree on observation geometry.
    ShapeMismatch,
}

/// Checks that `new_domain` is a valid (bisimulation-preserving) intervention
/// relative to `base_domain` on the shared latent MDP.
///
/// Domains only parameterise the emission, so condition (a), emission-only
/// change, holds by construction. Condition (b) is checked on perceived
/// observations: the goal marker is composited over the background layer
/// (a marker no brighter than the background is lost in it), and every
/// offset a post-rendering shift can produce is enumerated. The intervention
/// is invalid if two states in different coarsest-partition blocks share a
/// perceived observation, or if the goal is not separable from background.
pub fn verify_valid_intervention(env: &GridEnv, base_domain: &DomainSpec, new_domain: &DomainSpec) -> Validity {
    let base_shape = render(env, base_domain, 0).values.len();
    if render(env, new_domain, 0).values.len() != base_shape {
        return Validity::Invalid(InvalidReason::ShapeMismatch);
    }
    let partition = coarsest_bisim_partition(&env.mdp);
    let n = env.mdp.n_states();
    let supports: Vec<Vec<Vec<f64>>> = (0..n).map(|s| perceived_support(env, new_domain, s)).collect();
    for a in 0..n {
        for b in (a + 1)..n {
            if partition.same_block(a, b) {
                continue;
            }
            if supports[a].iter().any(|x| supports[b].iter().any(|y| x == y)) {
                return Validity::Invalid(InvalidReason::Collision { state_a: a, state_b: b });
            }
        }
    }
    let n2 = env.side() * env.side();
    let max_background = (0..n2).map(|cell| background_pixel(&new_domain.emission, cell)).fold(0.0, f64::max);
    let goal_value = new_domain.emission.goal_channel_value;
    if !(goal_value > max_background) {
        return Validity::Invalid(InvalidReason::GoalNotSeparable { goal_value, max_background });
    }
    Validity::Valid
}

/// Every perceived observation of `s` under the domain's emission and
/// post-rendering shift (noise is zero-mean on the background layer and is
/// not enumerated).
///
/// Offsets that crop the agent out of the frame are skipped: on a small grid
/// any edge state loses its agent under some shift, and such frames are
/// uninformative for every state alike.
fn perceived_support(env: &GridEnv, domain: &DomainSpec, s: usize) -> Vec<Vec<f64>> {
    let obs = render(env, domain, s);
    let pad = match &domain.post_render {
        Some(aug) if aug.kind == AugmentationKind::RandomShift => aug.shift_pad as i64,
        _ => 0,
    };
    let mut out = Vec::new();
    for dy in -pad..=pad {
        for dx in -pad..=pad {
            let shifted = shift(&obs, dx, dy);
            if shifted.channel(0).iter().any(|&v| v > 0.5) {
                out.push(composite(&shifted));
            }
        }
    }
    out
}

/// Agent layer plus the goal marker drawn over the background layer.
fn composite(obs: &Observation) -> Vec<f64> {
    let n2 = obs.side * obs.side;
    let mut out = Vec::with_capacity(2 * n2);
    out.extend_from_slice(obs.channel(0));
    let goal = obs.channel(1);
    let background = obs.channel(2);
    out.extend(goal.iter().zip(background).map(|(g, b)| g.max(*b)));
    out
}
