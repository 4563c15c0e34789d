//! Greedy evaluation and representation diagnostics.

use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;

use crate::agent::{choose_action, ActMode, Networks};
use crate::bisim::MetricMatrix;
use crate::diffcore::Matrix;
use crate::envlab::{render_with, step, DomainSpec, GridEnv};
use crate::error::{Error, Result};
use crate::invariance::ObsBatch;
use crate::math;
use crate::Rng;

/// Greedy-policy results on one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainEval {
    pub domain_id: u32,
    pub returns: Vec<f64>,
    pub mean_return: f64,
    /// Standard error of the mean return.
    pub stderr: f64,
    /// Fraction of episodes that reached the goal within the step limit.
    pub success_rate: f64,
}

/// Start states shared by every domain of one evaluation.
pub fn eval_start_states(env: &GridEnv, episodes: usize, seed: u64) -> Vec<usize> {
    let mut rng = Rng::seed_from_u64(seed);
    (0..episodes).map(|_| env.mdp.sample_initial(&mut rng)).collect()
}

/// Runs `episodes` greedy episodes on every domain from the same start
/// states. Observations are clean renders; no parameters change.
pub fn evaluate(
    nets: &Networks,
    env: &GridEnv,
    domains: &[DomainSpec],
    episodes: usize,
    limit: usize,
    seed: u64,
) -> Result<Vec<DomainEval>> {
    if episodes == 0 {
        return Err(Error::InvalidConfig("evaluation needs at least one episode".into()));
    }
    let starts = eval_start_states(env, episodes, seed);
    domains.iter().map(|d| evaluate_domain(nets, env, d, &starts, limit, seed)).collect()
}

/// Greedy episodes on one domain from the given start states, stepped in
/// lockstep so each time step is one batched forward pass.
pub fn evaluate_domain(
    nets: &Networks,
    env: &GridEnv,
    domain: &DomainSpec,
    starts: &[usize],
    limit: usize,
    seed: u64,
) -> Result<DomainEval> {
    let clean = DomainSpec { post_render: None, ..domain.clone() };
    let proprio = nets.spec.shape.proprio;
    let n = starts.len();
    let mut state = starts.to_vec();
    let mut done: Vec<bool> = starts.iter().map(|&s| env.mdp.is_terminal(s)).collect();
    let mut success = done.clone();
    let mut returns = vec![0.0; n];
    // One transition stream per episode so slip draws pair up across domains.
    let mut rngs: Vec<Rng> = (0..n)
        .map(|i| {
            let mut r = Rng::seed_from_u64(seed);
            r.set_stream(1000 + i as u64);
            r
        })
        .collect();
    let mut dummy = Rng::seed_from_u64(0);
    for _ in 0..limit {
        let live: Vec<usize> = (0..n).filter(|&i| !done[i]).collect();
        if live.is_empty() {
            break;
        }
        let renders: Vec<_> = live.iter().map(|&i| render_with(env, &clean, state[i], proprio)).collect();
        let batch = obs_batch(&renders);
        let probs = nets.policy(&batch)?;
        for (row, &i) in live.iter().enumerate() {
            let a = choose_action(probs.row(row), ActMode::Greedy, &mut dummy);
            let out = step(env, &clean, state[i], a, &mut rngs[i]);
            returns[i] += out.reward;
            state[i] = out.next_state;
            if out.done {
                done[i] = true;
                success[i] = true;
            }
        }
    }
    let mean_return = returns.iter().sum::<f64>() / n as f64;
    let stderr = if n > 1 {
        let var = returns.iter().map(|r| (r - mean_return) * (r - mean_return)).sum::<f64>() / (n - 1) as f64;
        math::sqrt(var / n as f64)
    } else {
        0.0
    };
    let success_rate = success.iter().filter(|&&s| s).count() as f64 / n as f64;
    Ok(DomainEval { domain_id: domain.domain_id, returns, mean_return, stderr, success_rate })
}

fn obs_batch(renders: &[crate::envlab::Observation]) -> ObsBatch {
    let dim = renders[0].values.len();
    let mut data = Vec::with_capacity(renders.len() * dim);
    for r in renders {
        data.extend_from_slice(&r.values);
    }
    let proprio = renders[0].proprio.is_some().then(|| {
        let p: Vec<f64> = renders.iter().flat_map(|r| r.proprio.unwrap_or_default()).collect();
        Matrix::from_vec(renders.len(), 2, p)
    });
    ObsBatch { obs: Matrix::from_vec(renders.len(), dim, data), proprio }
}

/// Latents of every state rendered under `domain`, one row per state.
pub fn domain_latents(nets: &Networks, env: &GridEnv, domain: &DomainSpec) -> Result<Matrix> {
    let clean = DomainSpec { post_render: None, ..domain.clone() };
    let renders: Vec<_> = (0..env.mdp.n_states()).map(|s| render_with(env, &clean, s, false)).collect();
    nets.encode(&obs_batch(&renders).obs)
}

/// A diagnostic that may be undefined; undefined values are reported as 0
/// with `degenerate` set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Diagnostic {
    pub value: f64,
    pub degenerate: bool,
}

fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Mean L1 distance between latents of the same state under different
/// domains, divided by the mean L1 distance over all pairs of rendered
/// (state, domain) observations. `latents[d]` holds one row per state.
pub fn invariance_score_from_latents(latents: &[Matrix]) -> Diagnostic {
    let domains = latents.len();
    let states = latents.first().map_or(0, |m| m.rows);
    let mut matched = (0.0, 0usize);
    for s in 0..states {
        for d in 0..domains {
            for e in (d + 1)..domains {
                matched.0 += l1(latents[d].row(s), latents[e].row(s));
                matched.1 += 1;
            }
        }
    }
    let mut all = (0.0, 0usize);
    let flat: Vec<&[f64]> = latents.iter().flat_map(|m| (0..m.rows).map(move |r| m.row(r))).collect();
    for i in 0..flat.len() {
        for j in (i + 1)..flat.len() {
            all.0 += l1(flat[i], flat[j]);
            all.1 += 1;
        }
    }
    let denom = if all.1 == 0 { 0.0 } else { all.0 / all.1 as f64 };
    if denom < 1e-12 || matched.1 == 0 {
        return Diagnostic { value: 0.0, degenerate: true };
    }
    Diagnostic { value: (matched.0 / matched.1 as f64) / denom, degenerate: false }
}

/// [`invariance_score_from_latents`] with the trained encoder.
pub fn invariance_score(nets: &Networks, env: &GridEnv, domains: &[DomainSpec]) -> Result<Diagnostic> {
    let latents = domains.iter().map(|d| domain_latents(nets, env, d)).collect::<Result<Vec<_>>>()?;
    Ok(invariance_score_from_latents(&latents))
}

/// Ranks with ties sharing their average rank (1-based).
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation (Pearson on average ranks). Constant inputs
/// give a degenerate 0.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Diagnostic {
    let n = xs.len().min(ys.len());
    if n < 2 {
        return Diagnostic { value: 0.0, degenerate: true };
    }
    let rx = average_ranks(&xs[..n]);
    let ry = average_ranks(&ys[..n]);
    let mx = rx.iter().sum::<f64>() / n as f64;
    let my = ry.iter().sum::<f64>() / n as f64;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return Diagnostic { value: 0.0, degenerate: true };
    }
    Diagnostic { value: sxy / math::sqrt(sxx * syy), degenerate: false }
}

/// Spearman correlation between latent L1 distances and metric entries over
/// all unordered state pairs. `latents` has one row per state.
pub fn bisim_correlation_from_latents(latents: &Matrix, metric: &MetricMatrix) -> Diagnostic {
    let n = latents.rows;
    let mut lat = Vec::new();
    let mut met = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            lat.push(l1(latents.row(i), latents.row(j)));
            met.push(metric.get(i, j));
        }
    }
    spearman(&lat, &met)
}

/// [`bisim_correlation_from_latents`] with the trained encoder on `domain`.
pub fn bisim_correlation(nets: &Networks, env: &GridEnv, metric: &MetricMatrix, domain: &DomainSpec) -> Result<Diagnostic> {
    if metric.size() != env.mdp.n_states() {
        return Err(Error::DimensionMismatch { expected: env.mdp.n_states(), got: metric.size() });
    }
    Ok(bisim_correlation_from_latents(&domain_latents(nets, env, domain)?, metric))
}

/// One exported latent.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentRow {
    pub latent: Vec<f64>,
    pub domain_id: u32,
    pub state_id: usize,
    /// `max_a min(Q1, Q2)(z, a)`.
    pub value: f64,
}

/// Latents and critic values of every state under every domain.
pub fn latent_rows(nets: &Networks, env: &GridEnv, domains: &[DomainSpec]) -> Result<Vec<LatentRow>> {
    let proprio = nets.spec.shape.proprio;
    let mut rows = Vec::new();
    for d in domains {
        let clean = DomainSpec { post_render: None, ..d.clone() };
        let renders: Vec<_> = (0..env.mdp.n_states()).map(|s| render_with(env, &clean, s, proprio)).collect();
        let batch = obs_batch(&renders);
        let z = nets.encode(&batch.obs)?;
        let q = nets.q_min(&batch)?;
        for s in 0..renders.len() {
            let value = q.row(s).iter().copied().fold(f64::NEG_INFINITY, f64::max);
            rows.push(LatentRow { latent: z.row(s).to_vec(), domain_id: d.domain_id, state_id: s, value });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranks_average_ties() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn spearman_monotone_and_constant() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y = [10.0, 20.0, 25.0, 100.0];
        assert!((spearman(&x, &y).value - 1.0).abs() < 1e-12);
        let y_rev: Vec<f64> = y.iter().map(|v| -v).collect();
        assert!((spearman(&x, &y_rev).value + 1.0).abs() < 1e-12);
        let c = spearman(&x, &[1.0; 4]);
        assert!(c.degenerate && c.value == 0.0);
    }

    #[test]
    fn constant_encoder_is_degenerate() {
        let m = Matrix::from_vec(3, 2, vec![1.0; 6]);
        let d = invariance_score_from_latents(&[m.clone(), m]);
        assert!(d.degenerate);
        assert_eq!(d.value, 0.0);
    }

    #[test]
    fn domain_blind_encoder_scores_zero() {
        let m = Matrix::from_vec(3, 1, vec![0.0, 1.0, 5.0]);
        let d = invariance_score_from_latents(&[m.clone(), m.clone(), m]);
        assert!(!d.degenerate);
        assert_eq!(d.value, 0.0);
    }
}
