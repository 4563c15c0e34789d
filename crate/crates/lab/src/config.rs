//! TOML run configuration.
//!
//! Every field has a default, so an empty file is a valid config. Defaults are
//! the desk-scale settings: 60k environment steps, penalty annealed over 1000
//! updates, environments resampled every 150 steps.

use std::fs;
use std::path::Path;

use anyhow::Context;
use invlab_core::agent::{Method, NetworkShape, SacConfig, TrainConfig};
use invlab_core::envlab::{
    make_intervention_set, AugmentationKind, AugmentationSpec, DomainSpec, EmissionParams, GridEnv, GridReachTask,
    RewardMode,
};
use serde::{Deserialize, Serialize};

use crate::HarnessError;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub task: TaskSection,
    pub domains: DomainsSection,
    pub method: MethodSection,
    pub sac: SacSection,
    pub network: NetworkSection,
    pub run: RunSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardKind {
    Dense,
    Sparse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSection {
    pub side: usize,
    pub goal: [usize; 2],
    pub reward: RewardKind,
    pub slip: f64,
    pub discount: f64,
}

impl Default for TaskSection {
    fn default() -> Self {
        Self { side: 5, goal: [2, 2], reward: RewardKind::Dense, slip: 0.0, discount: 0.99 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DomainsSection {
    /// Training domains; one held-out domain is always added.
    pub n_train: usize,
    /// Seed of the texture draws.
    pub seed: u64,
    pub texture_amplitude: f64,
    pub goal_channel_value: f64,
}

impl Default for DomainsSection {
    fn default() -> Self {
        Self { n_train: 5, seed: 7, texture_amplitude: 0.1, goal_channel_value: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentKind {
    RandomShift,
    GaussianNoise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MethodSection {
    /// One of SAC, DrQ, IBIT, IBIT-REx (case-insensitive).
    pub name: String,
    /// Rendering interventions: train on all training domains rather than the first.
    pub rendering: bool,
    /// Post-rendering interventions (augmentation).
    pub post_rendering: bool,
    pub augmentation: AugmentKind,
    pub shift_pad: usize,
    pub noise_sigma: f64,
    pub beta: f64,
    pub penalty_weight: f64,
    pub penalty_anneal_iters: u64,
    /// Discount inside the bisimulation target.
    pub bisim_gamma: f64,
    /// Weight of the dynamics and reward losses.
    pub model_weight: f64,
}

impl Default for MethodSection {
    fn default() -> Self {
        Self {
            name: "IBIT".into(),
            rendering: true,
            post_rendering: true,
            augmentation: AugmentKind::RandomShift,
            shift_pad: 1,
            noise_sigma: 0.02,
            beta: 1.0,
            penalty_weight: 0.5,
            penalty_anneal_iters: 1_000,
            bisim_gamma: 0.5,
            model_weight: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SacSection {
    pub critic_tau: f64,
    pub encoder_tau: f64,
    pub critic_lr: f64,
    pub actor_lr: f64,
    pub encoder_lr: f64,
    pub temperature_lr: f64,
    pub temperature_beta1: f64,
    pub init_temperature: f64,
    /// Defaults to half the maximum entropy when absent.
    pub target_entropy: Option<f64>,
    pub batch_size: usize,
    pub actor_update_freq: u64,
    pub critic_target_update_freq: u64,
    pub aug_k: usize,
    pub aug_m: usize,
}

impl Default for SacSection {
    fn default() -> Self {
        let s = SacConfig::default();
        Self {
            critic_tau: s.critic_tau,
            encoder_tau: s.encoder_tau,
            critic_lr: s.critic_lr,
            actor_lr: s.actor_lr,
            encoder_lr: s.encoder_lr,
            temperature_lr: s.temperature_lr,
            temperature_beta1: s.temperature_beta1,
            init_temperature: s.init_temperature,
            target_entropy: s.target_entropy,
            batch_size: s.batch_size,
            actor_update_freq: s.actor_update_freq,
            critic_target_update_freq: s.critic_target_update_freq,
            aug_k: s.aug_k,
            aug_m: s.aug_m,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSection {
    pub latent_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub model_hidden: Vec<usize>,
    pub actor_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub proprio: bool,
}

impl Default for NetworkSection {
    fn default() -> Self {
        let n = NetworkShape::default();
        Self {
            latent_dim: n.latent_dim,
            encoder_hidden: n.encoder_hidden,
            model_hidden: n.model_hidden,
            actor_hidden: n.actor_hidden,
            critic_hidden: n.critic_hidden,
            proprio: n.proprio,
        }
    }
}

impl NetworkSection {
    /// Same hidden width everywhere, keeping the layer counts.
    pub fn with_width(mut self, width: usize) -> Self {
        for layers in [&mut self.encoder_hidden, &mut self.model_hidden, &mut self.actor_hidden, &mut self.critic_hidden] {
            layers.iter_mut().for_each(|w| *w = width);
        }
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seeds: Vec<u64>,
    pub total_steps: u64,
    pub init_steps: u64,
    pub env_batch: usize,
    pub resample_rate: u64,
    pub episode_limit: usize,
    pub replay_capacity: usize,
    pub eval_every: u64,
    pub eval_episodes: usize,
    /// 0 disables intermediate checkpoints; the final one is always written.
    pub checkpoint_every: u64,
    pub output_dir: String,
}

impl Default for RunSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            seeds: vec![0],
            total_steps: t.total_steps,
            init_steps: t.init_steps,
            env_batch: t.env_batch,
            resample_rate: t.resample_rate,
            episode_limit: t.episode_limit,
            replay_capacity: t.replay_capacity,
            eval_every: t.eval_every,
            eval_episodes: t.eval_episodes,
            checkpoint_every: t.checkpoint_every,
            output_dir: "runs".into(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))
            .map_err(|e| HarnessError::Config(format!("{e:#}")))?;
        Self::from_toml(&text).map_err(|e| match e {
            HarnessError::Config(m) => HarnessError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config always serialises")
    }

    pub fn method(&self) -> Result<Method, HarnessError> {
        Method::parse(&self.method.name).ok_or_else(|| {
            HarnessError::Config(format!("unknown method {:?}; expected SAC, DrQ, IBIT or IBIT-REx", self.method.name))
        })
    }

    /// Checks everything that can be checked without running.
    pub fn validate(&self) -> Result<(), HarnessError> {
        self.env()?;
        self.domains()?;
        if self.run.seeds.is_empty() {
            return Err(HarnessError::Config("run.seeds must not be empty".into()));
        }
        if self.network.latent_dim == 0 {
            return Err(HarnessError::Config("network.latent_dim must be positive".into()));
        }
        self.train_config(self.run.seeds[0])?;
        Ok(())
    }

    pub fn task(&self) -> GridReachTask {
        GridReachTask {
            side: self.task.side,
            goal: (self.task.goal[0], self.task.goal[1]),
            reward_mode: match self.task.reward {
                RewardKind::Dense => RewardMode::Dense,
                RewardKind::Sparse => RewardMode::Sparse,
            },
            slip: self.task.slip,
            discount: self.task.discount,
        }
    }

    pub fn env(&self) -> Result<GridEnv, HarnessError> {
        GridEnv::new(self.task()).map_err(|e| HarnessError::Config(e.to_string()))
    }

    /// Training domains followed by the held-out domain.
    pub fn domains(&self) -> Result<Vec<DomainSpec>, HarnessError> {
        let base = DomainSpec {
            domain_id: 0,
            emission: EmissionParams {
                texture_amplitude: self.domains.texture_amplitude,
                goal_channel_value: self.domains.goal_channel_value,
                ..EmissionParams::default()
            },
            post_render: None,
        };
        make_intervention_set(&base, self.domains.n_train, self.domains.seed)
            .map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn augmentation(&self) -> Option<AugmentationSpec> {
        self.method.post_rendering.then(|| AugmentationSpec {
            kind: match self.method.augmentation {
                AugmentKind::RandomShift => AugmentationKind::RandomShift,
                AugmentKind::GaussianNoise => AugmentationKind::GaussianNoise,
            },
            shift_pad: self.method.shift_pad,
            noise_sigma: self.method.noise_sigma,
            rng_seed: 0,
        })
    }

    pub fn network_shape(&self) -> NetworkShape {
        let n = &self.network;
        NetworkShape {
            latent_dim: n.latent_dim,
            encoder_hidden: n.encoder_hidden.clone(),
            model_hidden: n.model_hidden.clone(),
            actor_hidden: n.actor_hidden.clone(),
            critic_hidden: n.critic_hidden.clone(),
            proprio: n.proprio,
        }
    }

    pub fn train_config(&self, seed: u64) -> Result<TrainConfig, HarnessError> {
        let s = &self.sac;
        let r = &self.run;
        let m = &self.method;
        let cfg = TrainConfig {
            method: self.method()?,
            rendering_interventions: m.rendering,
            post_rendering: self.augmentation(),
            sac: SacConfig {
                discount: self.task.discount,
                critic_tau: s.critic_tau,
                encoder_tau: s.encoder_tau,
                critic_lr: s.critic_lr,
                actor_lr: s.actor_lr,
                encoder_lr: s.encoder_lr,
                temperature_lr: s.temperature_lr,
                temperature_beta1: s.temperature_beta1,
                init_temperature: s.init_temperature,
                target_entropy: s.target_entropy,
                batch_size: s.batch_size,
                actor_update_freq: s.actor_update_freq,
                critic_target_update_freq: s.critic_target_update_freq,
                aug_k: s.aug_k,
                aug_m: s.aug_m,
            },
            network: self.network_shape(),
            total_steps: r.total_steps,
            init_steps: r.init_steps,
            env_batch: r.env_batch,
            resample_rate: r.resample_rate,
            episode_limit: r.episode_limit,
            replay_capacity: r.replay_capacity,
            bisim_gamma: m.bisim_gamma,
            model_weight: m.model_weight,
            penalty_weight: m.penalty_weight,
            penalty_anneal_steps: m.penalty_anneal_iters,
            rex_beta: m.beta,
            eval_every: r.eval_every,
            eval_episodes: r.eval_episodes,
            checkpoint_every: r.checkpoint_every,
            seed,
        };
        cfg.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        Ok(cfg)
    }

    /// Short directory-safe label, e.g. `ibit-ri1-pri0`.
    pub fn label(&self) -> Result<String, HarnessError> {
        let m = self.method()?.name().to_ascii_lowercase();
        Ok(format!("{m}-ri{}-pri{}", self.method.rendering as u8, self.method.post_rendering as u8))
    }
}
