//! Experiment configuration file.
//!
//! Every field has a default, so an empty file is a valid config. Unknown
//! keys are rejected. The resolved config (defaults filled in, command-line
//! overrides applied) is written into each run directory.

use std::path::Path;

use anyhow::{bail, Context};
use rpbt_core::envs::{Cell, DuelConfig, GridConfig};
use rpbt_core::model::RiskConfig;
use rpbt_core::neural::Activation;
use rpbt_core::population::PopulationConfig;
use rpbt_core::rppo::RppoConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Worker threads for population training.
    pub workers: usize,
    pub gridworld: GridSection,
    pub duel: DuelSection,
    pub verify: VerifySection,
    pub toy: ToySection,
    pub rpbt: RpbtSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            workers: 1,
            gridworld: GridSection::default(),
            duel: DuelSection::default(),
            verify: VerifySection::default(),
            toy: ToySection::default(),
            rpbt: RpbtSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("invalid config {}", path.display()))
    }

    pub fn parse(text: &str) -> anyhow::Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Checks every section that a command may use.
    pub fn validate(&self) -> anyhow::Result<()> {
        if self.workers == 0 {
            bail!("workers must be at least 1");
        }
        self.gridworld.to_core()?.validate()?;
        rpbt_core::envs::GridDuel::new(self.duel.to_core())?;
        if self.toy.taus.is_empty() {
            bail!("toy.taus must not be empty");
        }
        if self.toy.seeds.is_empty() {
            bail!("toy.seeds must not be empty");
        }
        for &tau in &self.toy.taus {
            self.toy.rppo.to_core(tau)?;
        }
        if self.toy.total_steps == 0 {
            bail!("toy.total_steps must be at least 1");
        }
        if self.toy.eval_episodes == 0 {
            bail!("toy.eval_episodes must be at least 1");
        }
        if self.toy.checkpoint_every == 0 {
            bail!("toy.checkpoint_every must be at least 1");
        }
        self.rpbt.population().validate()?;
        for &tau in &self.rpbt.initial_taus {
            self.rpbt.rppo.to_core(tau)?;
        }
        if self.rpbt.champion_games == 0 {
            bail!("rpbt.champion_games must be at least 1");
        }
        if self.verify.n_mdps == 0 || self.verify.max_states == 0 || self.verify.max_actions == 0 {
            bail!("verify sizes must be at least 1");
        }
        Ok(())
    }
}

/// Windy gridworld. Cells are `[row, column]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    pub width: usize,
    pub height: usize,
    pub start: Cell,
    pub flag: Cell,
    pub water: Vec<Cell>,
    /// Probability that wind pushes the agent one cell toward the water.
    pub wind_prob: f64,
    pub max_steps: usize,
}

impl Default for GridSection {
    fn default() -> Self {
        let g = GridConfig::default();
        Self {
            width: g.width,
            height: g.height,
            start: g.start,
            flag: g.flag,
            water: g.water,
            wind_prob: g.wind_prob,
            max_steps: g.max_steps,
        }
    }
}

impl GridSection {
    pub fn to_core(&self) -> anyhow::Result<GridConfig> {
        let g = GridConfig {
            width: self.width,
            height: self.height,
            start: self.start,
            flag: self.flag,
            water: self.water.clone(),
            wind_prob: self.wind_prob,
            max_steps: self.max_steps,
        };
        g.validate()?;
        Ok(g)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DuelSection {
    pub length: usize,
    pub slip_prob: f64,
    pub max_steps: usize,
}

impl Default for DuelSection {
    fn default() -> Self {
        let d = DuelConfig::default();
        Self {
            length: d.length,
            slip_prob: d.slip_prob,
            max_steps: d.max_steps,
        }
    }
}

impl DuelSection {
    pub fn to_core(&self) -> DuelConfig {
        DuelConfig {
            length: self.length,
            slip_prob: self.slip_prob,
            max_steps: self.max_steps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifySection {
    pub seed: u64,
    pub n_mdps: usize,
    pub max_states: usize,
    pub max_actions: usize,
}

impl Default for VerifySection {
    fn default() -> Self {
        let v = rpbt_core::verify::VerifyConfig::default();
        Self {
            seed: v.seed,
            n_mdps: v.n_mdps,
            max_states: v.max_states,
            max_actions: v.max_actions,
        }
    }
}

/// Learner settings shared by both training commands. The risk level comes
/// from the command (`toy.taus` or `rpbt.initial_taus`).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RppoSection {
    pub gamma: f64,
    pub lambda: f64,
    /// Step size of the expectile operator; defaults to `1 / (2 max(tau, 1 - tau))`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    /// Maximum n-step horizon kept in the return table.
    pub n_max: usize,
    pub clip_epsilon: f64,
    pub update_epochs: usize,
    pub entropy_coef: f64,
    pub learning_rate: f64,
    /// Environment steps per update.
    pub horizon: usize,
    pub minibatch_size: usize,
    pub normalize_advantages: bool,
    /// Global gradient-norm clip; 0 disables it.
    pub max_grad_norm: f64,
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl RppoSection {
    fn from_core(c: &RppoConfig) -> Self {
        Self {
            gamma: c.risk.gamma(),
            lambda: c.risk.lambda(),
            alpha: None,
            n_max: c.risk.n_max(),
            clip_epsilon: c.clip_epsilon,
            update_epochs: c.update_epochs,
            entropy_coef: c.entropy_coef,
            learning_rate: c.learning_rate,
            horizon: c.horizon,
            minibatch_size: c.minibatch_size,
            normalize_advantages: c.normalize_advantages,
            max_grad_norm: c.max_grad_norm.unwrap_or(0.0),
            hidden: c.hidden.clone(),
            activation: c.activation,
        }
    }

    /// Gridworld learner: gamma and lambda 0.95, learning rate 1e-4, two
    /// tanh layers of 128, batch 200, clip 0.2, 4 epochs, entropy 0.01.
    pub fn toy_default() -> Self {
        Self::from_core(&RppoConfig::toy(0.5).expect("valid defaults"))
    }

    /// Duel learner: gamma 0.99, learning rate 3e-4, two tanh layers of 64.
    pub fn duel_default() -> Self {
        Self::from_core(&rpbt_core::population::duel_rppo_config().expect("valid defaults"))
    }

    pub fn to_core(&self, tau: f64) -> anyhow::Result<RppoConfig> {
        let mut risk = RiskConfig::new(tau, self.gamma, self.lambda)?.with_n_max(self.n_max)?;
        if let Some(alpha) = self.alpha {
            risk = risk.with_alpha(alpha)?;
        }
        if self.max_grad_norm < 0.0 {
            bail!("max_grad_norm must be nonnegative");
        }
        let c = RppoConfig {
            risk,
            clip_epsilon: self.clip_epsilon,
            update_epochs: self.update_epochs,
            entropy_coef: self.entropy_coef,
            learning_rate: self.learning_rate,
            horizon: self.horizon,
            minibatch_size: self.minibatch_size,
            normalize_advantages: self.normalize_advantages,
            max_grad_norm: (self.max_grad_norm > 0.0).then_some(self.max_grad_norm),
            hidden: self.hidden.clone(),
            activation: self.activation,
        };
        c.validate()?;
        Ok(c)
    }
}

/// Learner keys given in a file; missing keys keep the command's defaults.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RppoOverrides {
    gamma: Option<f64>,
    lambda: Option<f64>,
    alpha: Option<f64>,
    n_max: Option<usize>,
    clip_epsilon: Option<f64>,
    update_epochs: Option<usize>,
    entropy_coef: Option<f64>,
    learning_rate: Option<f64>,
    horizon: Option<usize>,
    minibatch_size: Option<usize>,
    normalize_advantages: Option<bool>,
    max_grad_norm: Option<f64>,
    hidden: Option<Vec<usize>>,
    activation: Option<Activation>,
}

impl RppoOverrides {
    fn apply(self, base: RppoSection) -> RppoSection {
        RppoSection {
            gamma: self.gamma.unwrap_or(base.gamma),
            lambda: self.lambda.unwrap_or(base.lambda),
            alpha: self.alpha.or(base.alpha),
            n_max: self.n_max.unwrap_or(base.n_max),
            clip_epsilon: self.clip_epsilon.unwrap_or(base.clip_epsilon),
            update_epochs: self.update_epochs.unwrap_or(base.update_epochs),
            entropy_coef: self.entropy_coef.unwrap_or(base.entropy_coef),
            learning_rate: self.learning_rate.unwrap_or(base.learning_rate),
            horizon: self.horizon.unwrap_or(base.horizon),
            minibatch_size: self.minibatch_size.unwrap_or(base.minibatch_size),
            normalize_advantages: self.normalize_advantages.unwrap_or(base.normalize_advantages),
            max_grad_norm: self.max_grad_norm.unwrap_or(base.max_grad_norm),
            hidden: self.hidden.unwrap_or(base.hidden),
            activation: self.activation.unwrap_or(base.activation),
        }
    }
}

fn toy_rppo<'de, D: serde::Deserializer<'de>>(d: D) -> Result<RppoSection, D::Error> {
    Ok(RppoOverrides::deserialize(d)?.apply(RppoSection::toy_default()))
}

fn duel_rppo<'de, D: serde::Deserializer<'de>>(d: D) -> Result<RppoSection, D::Error> {
    Ok(RppoOverrides::deserialize(d)?.apply(RppoSection::duel_default()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToySection {
    /// One agent is trained per risk level and seed.
    pub taus: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Environment steps per agent.
    pub total_steps: u64,
    pub eval_episodes: usize,
    /// Evaluate with the most likely action instead of sampling.
    pub greedy_eval: bool,
    /// Updates between checkpoints.
    pub checkpoint_every: u64,
    #[serde(default = "RppoSection::toy_default", deserialize_with = "toy_rppo")]
    pub rppo: RppoSection,
}

impl Default for ToySection {
    fn default() -> Self {
        Self {
            taus: vec![0.2, 0.5, 0.8],
            seeds: vec![0],
            total_steps: 200_000,
            eval_episodes: 1000,
            greedy_eval: true,
            checkpoint_every: 100,
            rppo: RppoSection::toy_default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RpbtSection {
    pub seed: u64,
    pub rounds: usize,
    pub initial_taus: Vec<f64>,
    /// Agents rated more than this below the best are replaced.
    pub exploit_threshold: f64,
    pub noise_bound: f64,
    pub tau_min: f64,
    pub tau_max: f64,
    pub elo_k: f64,
    pub initial_rating: f64,
    /// Evaluation games per ordered pair of agents each round.
    pub eval_games: usize,
    /// Rollouts (and updates) per agent each round.
    pub rollouts_per_round: usize,
    /// Games of the final champion against a uniform-random policy.
    pub champion_games: usize,
    #[serde(default = "RppoSection::duel_default", deserialize_with = "duel_rppo")]
    pub rppo: RppoSection,
}

impl Default for RpbtSection {
    fn default() -> Self {
        let p = PopulationConfig::default();
        Self {
            seed: 0,
            rounds: 30,
            initial_taus: p.initial_taus,
            exploit_threshold: p.exploit_threshold,
            noise_bound: p.noise_bound,
            tau_min: p.tau_min,
            tau_max: p.tau_max,
            elo_k: p.elo_k,
            initial_rating: p.initial_rating,
            eval_games: p.eval_games,
            rollouts_per_round: p.rollouts_per_round,
            champion_games: 200,
            rppo: RppoSection::duel_default(),
        }
    }
}

impl RpbtSection {
    pub fn population(&self) -> PopulationConfig {
        PopulationConfig {
            initial_taus: self.initial_taus.clone(),
            exploit_threshold: self.exploit_threshold,
            noise_bound: self.noise_bound,
            tau_min: self.tau_min,
            tau_max: self.tau_max,
            elo_k: self.elo_k,
            initial_rating: self.initial_rating,
            eval_games: self.eval_games,
            rollouts_per_round: self.rollouts_per_round,
        }
    }
}
