//! Structured MDPs, emission functions and interventions.
//!
//! A [`LatentMdp`] holds the dynamics and reward every domain shares. A
//! [`DomainSpec`] only parameterises the emission from latent state to
//! [`Observation`], optionally followed by a post-rendering augmentation, so
//! interventions can never touch reward or dynamics.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::Rng;

/// Tolerance on transition row sums.
pub const ROW_SUM_TOL: f64 = 1e-12;

/// Finite MDP with tabular dynamics and rewards.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentMdp {
    n_states: usize,
    n_actions: usize,
    /// `transition[(s * n_actions + a) * n_states + s']`
    transition: Vec<f64>,
    /// `reward[s * n_actions + a]`
    reward: Vec<f64>,
    discount: f64,
    initial_distribution: Vec<f64>,
    terminal_mask: Vec<bool>,
}

impl LatentMdp {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transition: Vec<f64>,
        reward: Vec<f64>,
        discount: f64,
        initial_distribution: Vec<f64>,
        terminal_mask: Vec<bool>,
    ) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(Error::InvalidMdp("state and action counts must be positive".into()));
        }
        let expect = |name: &str, got: usize, want: usize| {
            if got != want {
                Err(Error::InvalidMdp(format!("{name} has length {got}, expected {want}")))
            } else {
                Ok(())
            }
        };
        expect("transition", transition.len(), n_states * n_actions * n_states)?;
        expect("reward", reward.len(), n_states * n_actions)?;
        expect("initial distribution", initial_distribution.len(), n_states)?;
        expect("terminal mask", terminal_mask.len(), n_states)?;
        if !(0.0..1.0).contains(&discount) {
            return Err(Error::InvalidMdp(format!("discount {discount} outside [0, 1)")));
        }
        if let Some(r) = reward.iter().find(|r| !r.is_finite()) {
            return Err(Error::InvalidMdp(format!("non-finite reward {r}")));
        }
        for s in 0..n_states {
            for a in 0..n_actions {
                let row = &transition[(s * n_actions + a) * n_states..][..n_states];
                if row.iter().any(|p| !(*p >= 0.0)) {
                    return Err(Error::InvalidMdp(format!("negative probability in P(.|{s},{a})")));
                }
                let total: f64 = row.iter().sum();
                if (total - 1.0).abs() > ROW_SUM_TOL {
                    return Err(Error::InvalidMdp(format!("P(.|{s},{a}) sums to {total}")));
                }
                if terminal_mask[s] {
                    if row[s] != 1.0 {
                        return Err(Error::InvalidMdp(format!("terminal state {s} must self-loop")));
                    }
                    if reward[s * n_actions + a] != 0.0 {
                        return Err(Error::InvalidMdp(format!("terminal state {s} has nonzero reward")));
                    }
                }
            }
        }
        let init_total: f64 = initial_distribution.iter().sum();
        if initial_distribution.iter().any(|p| !(*p >= 0.0)) || (init_total - 1.0).abs() > ROW_SUM_TOL {
            return Err(Error::InvalidMdp("initial distribution is not a probability vector".into()));
        }
        Ok(Self { n_states, n_actions, transition, reward, discount, initial_distribution, terminal_mask })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    /// `P(. | s, a)` as a dense row.
    #[inline]
    pub fn transition_row(&self, s: usize, a: usize) -> &[f64] {
        &self.transition[(s * self.n_actions + a) * self.n_states..][..self.n_states]
    }

    #[inline]
    pub fn prob(&self, s: usize, a: usize, next: usize) -> f64 {
        self.transition_row(s, a)[next]
    }

    #[inline]
    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.n_actions + a]
    }

    pub fn rewards(&self) -> &[f64] {
        &self.reward
    }

    pub fn transitions(&self) -> &[f64] {
        &self.transition
    }

    pub fn initial_distribution(&self) -> &[f64] {
        &self.initial_distribution
    }

    pub fn is_terminal(&self, s: usize) -> bool {
        self.terminal_mask[s]
    }

    pub fn terminal_mask(&self) -> &[bool] {
        &self.terminal_mask
    }

    /// Samples a start state from the initial distribution.
    pub fn sample_initial(&self, rng: &mut Rng) -> usize {
        sample_index(&self.initial_distribution, rng)
    }

    /// Samples `s' ~ P(. | s, a)`.
    pub fn sample_next(&self, s: usize, a: usize, rng: &mut Rng) -> usize {
        sample_index(self.transition_row(s, a), rng)
    }
}

fn sample_index(weights: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            acc += w;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// Grid moves, in action-index order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridAction {
    Up = 0,
    Down = 1,
    Left = 2,
    Right = 3,
}

impl GridAction {
    pub const ALL: [GridAction; 4] = [GridAction::Up, GridAction::Down, GridAction::Left, GridAction::Right];

    fn delta(self) -> (i64, i64) {
        match self {
            GridAction::Up => (0, -1),
            GridAction::Down => (0, 1),
            GridAction::Left => (-1, 0),
            GridAction::Right => (1, 0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RewardMode {
    /// `-manhattan(agent, goal) / (2 (n - 1))`
    Dense,
    /// 1 on the transition that enters the goal, else 0.
    Sparse,
}

/// A single-goal reach task on an `n x n` grid.
///
/// Cells are `(x, y)` with `x` the column; state index is `y * n + x`. The goal
/// cell is absorbing in both reward modes, and episodes start uniformly on the
/// other cells.
#[derive(Debug, Clone, PartialEq)]
pub struct GridReachTask {
    pub side: usize,
    pub goal: (usize, usize),
    pub reward_mode: RewardMode,
    /// Probability mass moved from the chosen action to the other three.
    pub slip: f64,
    pub discount: f64,
}

impl Default for GridReachTask {
    fn default() -> Self {
        Self { side: 5, goal: (2, 2), reward_mode: RewardMode::Dense, slip: 0.0, discount: 0.99 }
    }
}

impl GridReachTask {
    pub fn n_states(&self) -> usize {
        self.side * self.side
    }

    pub fn state_of(&self, x: usize, y: usize) -> usize {
        y * self.side + x
    }

    pub fn coords(&self, s: usize) -> (usize, usize) {
        (s % self.side, s / self.side)
    }

    pub fn goal_state(&self) -> usize {
        self.state_of(self.goal.0, self.goal.1)
    }

    pub fn manhattan_to_goal(&self, s: usize) -> usize {
        let (x, y) = self.coords(s);
        x.abs_diff(self.goal.0) + y.abs_diff(self.goal.1)
    }

    fn moved(&self, s: usize, action: GridAction) -> usize {
        let (x, y) = self.coords(s);
        let (dx, dy) = action.delta();
        let nx = x as i64 + dx;
        let ny = y as i64 + dy;
        let n = self.side as i64;
        if nx < 0 || ny < 0 || nx >= n || ny >= n {
            s
        } else {
            self.state_of(nx as usize, ny as usize)
        }
    }
}

/// Builds the latent MDP of a grid reach task.
pub fn build_grid_reach(task: &GridReachTask) -> Result<LatentMdp> {
    let n = task.side;
    if n < 2 {
        return Err(Error::InvalidTask(format!("grid side {n} < 2")));
    }
    if task.goal.0 >= n || task.goal.1 >= n {
        return Err(Error::InvalidTask(format!("goal {:?} outside {n}x{n} grid", task.goal)));
    }
    if !(0.0..=1.0).contains(&task.slip) {
        return Err(Error::InvalidTask(format!("slip {} outside [0, 1]", task.slip)));
    }
    let n_states = n * n;
    let n_actions = GridAction::ALL.len();
    let goal = task.goal_state();
    let norm = 2.0 * (n as f64 - 1.0);
    let mut transition = vec![0.0; n_states * n_actions * n_states];
    let mut reward = vec![0.0; n_states * n_actions];
    for s in 0..n_states {
        for (a, &action) in GridAction::ALL.iter().enumerate() {
            let row = &mut transition[(s * n_actions + a) * n_states..][..n_states];
            if s == goal {
                row[s] = 1.0;
                continue;
            }
            for &other in &GridAction::ALL {
                let p = if other == action { 1.0 - task.slip } else { task.slip / 3.0 };
                if p > 0.0 {
                    row[task.moved(s, other)] += p;
                }
            }
            reward[s * n_actions + a] = match task.reward_mode {
                RewardMode::Dense => -(task.manhattan_to_goal(s) as f64) / norm,
                RewardMode::Sparse => row[goal],
            };
        }
    }
    let mut initial = vec![1.0 / (n_states - 1) as f64; n_states];
    initial[goal] = 0.0;
    let mut terminal = vec![false; n_states];
    terminal[goal] = true;
    LatentMdp::new(n_states, n_actions, transition, reward, task.discount, initial, terminal)
}

/// A grid task together with its latent MDP.
#[derive(Debug, Clone, PartialEq)]
pub struct GridEnv {
    pub task: GridReachTask,
    pub mdp: LatentMdp,
}

impl GridEnv {
    pub fn new(task: GridReachTask) -> Result<Self> {
        let mdp = build_grid_reach(&task)?;
        Ok(Self { task, mdp })
    }

    pub fn side(&self) -> usize {
        self.task.side
    }

    /// Length of a flattened observation (three channels).
    pub fn obs_len(&self) -> usize {
        3 * self.task.side * self.task.side
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugmentationKind {
    None,
    RandomShift,
    GaussianNoise,
}

/// Post-rendering intervention applied to an observation.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationSpec {
    pub kind: AugmentationKind,
    pub shift_pad: usize,
    pub noise_sigma: f64,
    pub rng_seed: u64,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        Self { kind: AugmentationKind::None, shift_pad: 1, noise_sigma: 0.02, rng_seed: 0 }
    }
}

impl AugmentationSpec {
    pub fn random_shift(pad: usize) -> Self {
        Self { kind: AugmentationKind::RandomShift, shift_pad: pad, ..Self::default() }
    }

    pub fn gaussian_noise(sigma: f64) -> Self {
        Self { kind: AugmentationKind::GaussianNoise, noise_sigma: sigma, ..Self::default() }
    }
}

/// Parameters of the emission `q_d`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmissionParams {
    pub background_value: f64,
    pub texture_seed: u64,
    pub texture_amplitude: f64,
    pub goal_channel_value: f64,
}

impl Default for EmissionParams {
    fn default() -> Self {
        Self { background_value: 0.1, texture_seed: 0, texture_amplitude: 0.1, goal_channel_value: 1.0 }
    }
}

/// One domain: an emission parameterisation plus an optional augmentation.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainSpec {
    pub domain_id: u32,
    pub emission: EmissionParams,
    pub post_render: Option<AugmentationSpec>,
}

impl Default for DomainSpec {
    fn default() -> Self {
        Self { domain_id: 0, emission: EmissionParams::default(), post_render: None }
    }
}

/// A 3-channel `side x side` image, channel-major (`c * side^2 + y * side + x`).
///
/// Channel 0 is the agent, channel 1 the goal, channel 2 background plus texture.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub side: usize,
    pub values: Vec<f64>,
    /// Normalised agent coordinates, when proprioception is enabled.
    pub proprio: Option<[f64; 2]>,
}

impl Observation {
    #[inline]
    pub fn get(&self, channel: usize, x: usize, y: usize) -> f64 {
        self.values[channel * self.side * self.side + y * self.side + x]
    }

    pub fn channel(&self, channel: usize) -> &[f64] {
        let n2 = self.side * self.side;
        &self.values[channel * n2..(channel + 1) * n2]
    }

    /// `(x, y)` of the largest value in `channel` (first on ties).
    pub fn argmax(&self, channel: usize) -> (usize, usize) {
        let ch = self.channel(channel);
        let mut best = 0;
        for (i, &v) in ch.iter().enumerate() {
            if v > ch[best] {
                best = i;
            }
        }
        (best % self.side, best / self.side)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic per-cell texture value in `[0, 1)`.
fn texture_cell(seed: u64, cell: usize) -> f64 {
    let h = splitmix64(seed ^ splitmix64(cell as u64 + 1));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Channel-2 value of a cell: background plus centred texture, clamped.
pub fn background_pixel(emission: &EmissionParams, cell: usize) -> f64 {
    let t = texture_cell(emission.texture_seed, cell) - 0.5;
    (emission.background_value + emission.texture_amplitude * t).clamp(0.0, 1.0)
}

/// Renders latent state `s` under `domain`'s emission (no augmentation).
pub fn render(env: &GridEnv, domain: &DomainSpec, s: usize) -> Observation {
    render_with(env, domain, s, false)
}

/// As [`render`], with normalised agent coordinates attached when `proprio`.
pub fn render_with(env: &GridEnv, domain: &DomainSpec, s: usize, proprio: bool) -> Observation {
    let n = env.task.side;
    let n2 = n * n;
    let mut values = vec![0.0; 3 * n2];
    values[s] = 1.0;
    values[n2 + env.task.goal_state()] = domain.emission.goal_channel_value;
    for cell in 0..n2 {
        values[2 * n2 + cell] = background_pixel(&domain.emission, cell);
    }
    let proprio = proprio.then(|| {
        let (x, y) = env.task.coords(s);
        let d = (n - 1) as f64;
        [x as f64 / d, y as f64 / d]
    });
    Observation { side: n, values, proprio }
}

/// Translates every channel by `(dx, dy)` with edge replication.
///
/// Equivalent to replicate-padding by `max(|dx|, |dy|)` and cropping the
/// window offset by `(-dx, -dy)`. Content moves right for positive `dx`.
pub fn shift(obs: &Observation, dx: i64, dy: i64) -> Observation {
    let n = obs.side;
    let n2 = n * n;
    let last = n as i64 - 1;
    let mut values = vec![0.0; obs.values.len()];
    for c in 0..3 {
        for y in 0..n {
            let sy = (y as i64 - dy).clamp(0, last) as usize;
            for x in 0..n {
                let sx = (x as i64 - dx).clamp(0, last) as usize;
                values[c * n2 + y * n + x] = obs.values[c * n2 + sy * n + sx];
            }
        }
    }
    Observation { side: n, values, proprio: obs.proprio }
}

/// Applies a post-rendering intervention, drawing randomness from `rng`.
pub fn apply_post_render(obs: &Observation, aug: &AugmentationSpec, rng: &mut Rng) -> Observation {
    match aug.kind {
        AugmentationKind::None => obs.clone(),
        AugmentationKind::RandomShift => {
            let pad = aug.shift_pad as i64;
            let dx = rng.random_range(-pad..=pad);
            let dy = rng.random_range(-pad..=pad);
            shift(obs, dx, dy)
        }
        AugmentationKind::GaussianNoise => {
            let mut out = obs.clone();
            let n2 = obs.side * obs.side;
            if aug.noise_sigma > 0.0 {
                let normal = Normal::new(0.0, aug.noise_sigma).expect("sigma is finite and positive");
                for v in &mut out.values[2 * n2..] {
                    *v = (*v + normal.sample(rng)).clamp(0.0, 1.0);
                }
            }
            out
        }
    }
}

/// Lower and upper background values spanned by the training domains.
pub const TRAIN_BACKGROUND_RANGE: (f64, f64) = (0.1, 0.5);
/// Background of the held-out evaluation domain; outside the training range.
pub const UNSEEN_BACKGROUND: f64 = 0.9;

/// `n_train` training domains plus one held-out domain at index `n_train`.
///
/// Training backgrounds are evenly spaced over [`TRAIN_BACKGROUND_RANGE`]; the
/// held-out domain uses [`UNSEEN_BACKGROUND`]. Texture seeds are derived from
/// `seed`; everything else is copied from `base`.
pub fn make_intervention_set(base: &DomainSpec, n_train: usize, seed: u64) -> Result<Vec<DomainSpec>> {
    if n_train < 2 {
        return Err(Error::InvalidTask(format!("need at least 2 training domains, got {n_train}")));
    }
    let (lo, hi) = TRAIN_BACKGROUND_RANGE;
    let mut seeds: Vec<u64> = Vec::with_capacity(n_train + 1);
    let mut state = seed;
    while seeds.len() < n_train + 1 {
        state = splitmix64(state);
        if !seeds.contains(&state) {
            seeds.push(state);
        }
    }
    let specs = (0..=n_train)
        .map(|i| {
            let background_value =
                if i == n_train { UNSEEN_BACKGROUND } else { lo + (hi - lo) * i as f64 / (n_train - 1) as f64 };
            DomainSpec {
                domain_id: i as u32,
                emission: EmissionParams { background_value, texture_seed: seeds[i], ..base.emission.clone() },
                post_render: base.post_render.clone(),
            }
        })
        .collect();
    Ok(specs)
}

/// Result of one environment transition.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub next_state: usize,
    pub reward: f64,
    pub obs: Observation,
    pub done: bool,
}

/// One environment transition from latent state `s` under action `a`.
///
/// Terminal states stay put with zero reward. The next observation is
/// rendered and then passed through the domain's post-rendering intervention.
pub fn step(env: &GridEnv, domain: &DomainSpec, s: usize, a: usize, rng: &mut Rng) -> StepOutcome {
    let (next_state, reward) =
        if env.mdp.is_terminal(s) { (s, 0.0) } else { (env.mdp.sample_next(s, a, rng), env.mdp.reward(s, a)) };
    let mut obs = render(env, domain, next_state);
    if let Some(aug) = &domain.post_render {
        obs = apply_post_render(&obs, aug, rng);
    }
    StepOutcome { next_state, reward, obs, done: env.mdp.is_terminal(next_state) }
}
