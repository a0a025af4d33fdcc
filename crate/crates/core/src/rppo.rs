//! Risk-sensitive PPO: rollouts, expectile-lambda advantages, clipped policy
//! updates and value regression onto the expectile targets.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::advantage::{compute_advantages, AdvantageBatch};
use crate::error::{domain, Error, Result};
use crate::model::{Action, ActionSpace, Env, MarkovGame, RiskConfig, Step, Trajectory};
use crate::neural::{
    adam_step, backward, clip_grad_norm, forward, init_mlp_params, log_prob, sample, Activation, AdamConfig, AdamState, LossSample,
    LossSpec, MlpSpec, ParamVector, PolicyHead, PolicyNet,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RppoConfig {
    pub risk: RiskConfig,
    pub clip_epsilon: f64,
    pub update_epochs: usize,
    pub entropy_coef: f64,
    pub learning_rate: f64,
    /// Steps collected per update (the batch).
    pub horizon: usize,
    pub minibatch_size: usize,
    pub normalize_advantages: bool,
    pub max_grad_norm: Option<f64>,
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl RppoConfig {
    /// Windy-gridworld defaults: gamma 0.95, lambda 0.95, batch 200,
    /// learning rate 1e-4, two tanh layers of 128.
    pub fn toy(tau: f64) -> Result<Self> {
        Ok(Self {
            risk: RiskConfig::new(tau, 0.95, 0.95)?,
            clip_epsilon: 0.2,
            update_epochs: 4,
            entropy_coef: 0.01,
            learning_rate: 1e-4,
            horizon: 200,
            minibatch_size: 200,
            normalize_advantages: true,
            max_grad_norm: Some(0.5),
            hidden: vec![128, 128],
            activation: Activation::Tanh,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.risk.validate()?;
        if !(self.clip_epsilon > 0.0) {
            return Err(domain("clip epsilon must be positive"));
        }
        if self.update_epochs == 0 || self.horizon == 0 || self.minibatch_size == 0 {
            return Err(domain("epochs, horizon and minibatch size must be at least 1"));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(domain("learning rate must be positive"));
        }
        if !(self.entropy_coef >= 0.0) {
            return Err(domain("entropy coefficient must be nonnegative"));
        }
        if let Some(g) = self.max_grad_norm {
            if !(g > 0.0) {
                return Err(domain("gradient norm bound must be positive"));
            }
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(domain("hidden layer sizes must be at least 1"));
        }
        Ok(())
    }
}

/// Everything one learner owns. `config.risk.tau()` is the agent's risk
/// level.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentState {
    pub policy: PolicyNet,
    pub policy_params: ParamVector,
    pub value: MlpSpec,
    pub value_params: ParamVector,
    pub policy_opt: AdamState,
    pub value_opt: AdamState,
    pub config: RppoConfig,
    /// Environment steps consumed so far.
    pub steps: u64,
    pub updates: u64,
    pub seed: u64,
}

impl AgentState {
    pub fn new(obs_dim: usize, action_space: &ActionSpace, config: RppoConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let head = match action_space {
            ActionSpace::Discrete(n) => PolicyHead::Categorical { n: *n },
            ActionSpace::Continuous { low, .. } => PolicyHead::Gaussian { dim: low.len() },
        };
        let policy = PolicyNet::new(obs_dim, config.hidden.clone(), config.activation, head)?;
        let value = MlpSpec::new(obs_dim, 1).with_hidden(config.hidden.clone()).with_activation(config.activation);
        value.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let policy_params = policy.init(&mut rng);
        let value_params = ParamVector::from_vec(value.layout(), init_mlp_params(&value, 1.0, &mut rng))?;
        Ok(Self {
            policy_opt: AdamState::new(policy_params.len()),
            value_opt: AdamState::new(value_params.len()),
            policy,
            policy_params,
            value,
            value_params,
            config,
            steps: 0,
            updates: 0,
            seed,
        })
    }

    pub fn tau(&self) -> f64 {
        self.config.risk.tau()
    }

    /// Sets the risk level; alpha follows the default for the new level.
    pub fn set_tau(&mut self, tau: f64) -> Result<()> {
        self.config.risk = self.config.risk.with_tau(tau)?;
        Ok(())
    }

    pub fn value_of(&self, obs: &[f64]) -> Result<f64> {
        Ok(forward(&self.value_params, &self.value, obs)?[0])
    }

    /// Samples an action; returns it with its log-probability.
    pub fn act(&self, obs: &[f64], rng: &mut dyn RngCore) -> Result<(Action, f64)> {
        let logits = self.policy.logits(&self.policy_params, obs)?;
        let action = sample(&self.policy.head, &logits, rng)?;
        let lp = log_prob(&self.policy.head, &logits, &action)?;
        Ok((action, lp))
    }

    /// Most likely action (categorical) or the mean (Gaussian).
    pub fn act_greedy(&self, obs: &[f64]) -> Result<Action> {
        greedy(&self.policy, &self.policy_params, obs)
    }

    pub fn reset_optimizer(&mut self) {
        self.policy_opt.reset();
        self.value_opt.reset();
    }
}

fn greedy(net: &PolicyNet, params: &ParamVector, obs: &[f64]) -> Result<Action> {
    let logits = net.logits(params, obs)?;
    Ok(match net.head {
        PolicyHead::Categorical { .. } => {
            let mut best = 0;
            for (i, z) in logits.iter().enumerate() {
                if *z > logits[best] {
                    best = i;
                }
            }
            Action::Discrete(best)
        }
        PolicyHead::Gaussian { dim } => Action::Continuous(logits[..dim].to_vec()),
    })
}

/// Clamps continuous actions to the control range; discrete actions pass.
pub fn clip_action(action: &Action, space: &ActionSpace) -> Action {
    match (action, space) {
        (Action::Continuous(a), ActionSpace::Continuous { low, high }) => {
            Action::Continuous(a.iter().zip(low.iter().zip(high)).map(|(x, (l, h))| x.clamp(*l, *h)).collect())
        }
        _ => action.clone(),
    }
}

/// Keeps an environment and its current observation across rollouts, so
/// consecutive rollouts continue the same episode.
#[derive(Debug, Clone)]
pub struct Runner<E> {
    pub env: E,
    obs: Option<Vec<f64>>,
    episode_return: f64,
    episode_len: usize,
    /// `(return, length)` of episodes finished since the last drain.
    pub finished: Vec<(f64, usize)>,
}

impl<E: Env> Runner<E> {
    pub fn new(env: E) -> Self {
        Self {
            env,
            obs: None,
            episode_return: 0.0,
            episode_len: 0,
            finished: Vec::new(),
        }
    }

    pub fn drain_finished(&mut self) -> Vec<(f64, usize)> {
        std::mem::take(&mut self.finished)
    }
}

/// Runs the agent's current policy for exactly `horizon` steps. The value and
/// log-probability of each step are recorded from the collecting policy; if
/// the last step is not terminal, the value of the following state is stored
/// as the bootstrap.
pub fn collect_rollout<E: Env>(agent: &AgentState, runner: &mut Runner<E>, horizon: usize, rng: &mut dyn RngCore) -> Result<Trajectory> {
    if horizon == 0 {
        return Err(domain("rollout horizon must be at least 1"));
    }
    let space = runner.env.action_space();
    let mut steps = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        let obs = match runner.obs.take() {
            Some(o) => o,
            None => runner.env.reset(rng),
        };
        let value = agent.value_of(&obs)?;
        let (action, lp) = agent.act(&obs, rng)?;
        let (next, reward, done) = runner.env.step(&clip_action(&action, &space), rng)?;
        runner.episode_return += reward;
        runner.episode_len += 1;
        if done {
            runner.finished.push((runner.episode_return, runner.episode_len));
            runner.episode_return = 0.0;
            runner.episode_len = 0;
        } else {
            runner.obs = Some(next);
        }
        steps.push(Step {
            obs,
            action,
            reward,
            value,
            log_prob: lp,
            done,
        });
    }
    let bootstrap_value = match &runner.obs {
        Some(o) => agent.value_of(o)?,
        None => 0.0,
    };
    Ok(Trajectory { steps, bootstrap_value })
}

/// Advantages and value targets for a trajectory, plus the advantages the
/// policy loss consumes (normalized to zero mean and unit standard
/// deviation when the config asks for it).
pub fn prepare_advantages(traj: &Trajectory, config: &RppoConfig) -> Result<(AdvantageBatch, Vec<f64>)> {
    let batch = compute_advantages(traj, &config.risk)?;
    let mut policy_adv = batch.advantages.clone();
    if config.normalize_advantages && policy_adv.len() > 1 {
        let n = policy_adv.len() as f64;
        let mean = policy_adv.iter().sum::<f64>() / n;
        let var = policy_adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        for a in &mut policy_adv {
            *a = (*a - mean) / (std + 1e-8);
        }
    }
    Ok((batch, policy_adv))
}

/// Averages over all minibatch steps of one update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateDiagnostics {
    pub step: u64,
    pub update: u64,
    pub tau: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
    pub mean_advantage: f64,
}

/// `update_epochs` passes of shuffled minibatch Adam steps on the clipped
/// surrogate and the value loss. The agent is left untouched if any loss or
/// parameter turns non-finite.
pub fn rppo_update(agent: &mut AgentState, traj: &Trajectory, rng: &mut dyn RngCore) -> Result<UpdateDiagnostics> {
    let cfg = agent.config.clone();
    let (batch, policy_adv) = prepare_advantages(traj, &cfg)?;
    let samples: Vec<LossSample> = traj
        .steps
        .iter()
        .enumerate()
        .map(|(t, s)| LossSample {
            obs: s.obs.clone(),
            action: s.action.clone(),
            old_log_prob: s.log_prob,
            advantage: policy_adv[t],
            target: batch.targets[t],
        })
        .collect();
    let policy_loss = LossSpec::ClippedSurrogate {
        head: agent.policy.head,
        clip_epsilon: cfg.clip_epsilon,
        entropy_coef: cfg.entropy_coef,
    };
    let adam = AdamConfig::with_lr(cfg.learning_rate);
    let mut next = agent.clone();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut acc = [0.0; 5];
    let mut count = 0usize;
    let mut mb = Vec::with_capacity(cfg.minibatch_size);
    for _ in 0..cfg.update_epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.minibatch_size) {
            mb.clear();
            mb.extend(chunk.iter().map(|&i| samples[i].clone()));
            let mut p = backward(&next.policy_params, &next.policy.mlp, &mb, &policy_loss)?;
            let mut v = backward(&next.value_params, &next.value, &mb, &LossSpec::ValueMse)?;
            if !p.loss.is_finite() || !v.loss.is_finite() || !p.approx_kl.is_finite() {
                return Err(Error::NonFinite(format!(
                    "rppo update {} produced policy loss {} and value loss {}",
                    agent.updates, p.loss, v.loss
                )));
            }
            if let Some(max) = cfg.max_grad_norm {
                clip_grad_norm(&mut p.grad, max);
                clip_grad_norm(&mut v.grad, max);
            }
            adam_step(&mut next.policy_params, &p.grad, &mut next.policy_opt, &adam)?;
            adam_step(&mut next.value_params, &v.grad, &mut next.value_opt, &adam)?;
            for (a, x) in acc.iter_mut().zip([p.loss, v.loss, p.entropy, p.clip_fraction, p.approx_kl]) {
                *a += x;
            }
            count += 1;
        }
    }
    if !next.policy_params.is_finite() || !next.value_params.is_finite() {
        return Err(Error::NonFinite(format!("rppo update {} produced non-finite parameters", agent.updates)));
    }
    next.steps += traj.len() as u64;
    next.updates += 1;
    *agent = next;
    let c = count as f64;
    Ok(UpdateDiagnostics {
        step: agent.steps,
        update: agent.updates,
        tau: agent.tau(),
        policy_loss: acc[0] / c,
        value_loss: acc[1] / c,
        entropy: acc[2] / c,
        clip_fraction: acc[3] / c,
        approx_kl: acc[4] / c,
        mean_advantage: batch.advantages.iter().sum::<f64>() / batch.advantages.len() as f64,
    })
}

/// A frozen policy that plays a game seat.
#[derive(Debug, Clone)]
pub enum Opponent {
    Policy { net: PolicyNet, params: Arc<ParamVector> },
    /// Uniformly random actions (discrete spaces) or uniform over the box.
    Uniform,
}

impl Opponent {
    pub fn act(&self, obs: &[f64], space: &ActionSpace, rng: &mut dyn RngCore) -> Result<Action> {
        match self {
            Opponent::Policy { net, params } => {
                let logits = net.logits(params, obs)?;
                Ok(clip_action(&sample(&net.head, &logits, rng)?, space))
            }
            Opponent::Uniform => Ok(match space {
                ActionSpace::Discrete(n) => Action::Discrete(rng.gen_range(0..*n)),
                ActionSpace::Continuous { low, high } => Action::Continuous(low.iter().zip(high).map(|(l, h)| rng.gen_range(*l..=*h)).collect()),
            }),
        }
    }
}

/// A two-player game seen from one player, with the other seat driven by a
/// frozen opponent; opponents are part of the environment dynamics. The
/// learner's seat is drawn uniformly at every reset.
#[derive(Debug, Clone)]
pub struct VersusEnv<G> {
    pub game: G,
    pub opponent: Opponent,
    pub seat: usize,
    opponent_obs: Vec<f64>,
}

impl<G: MarkovGame> VersusEnv<G> {
    pub fn new(game: G, opponent: Opponent) -> Self {
        Self {
            game,
            opponent,
            seat: 0,
            opponent_obs: Vec::new(),
        }
    }
}

impl<G: MarkovGame> Env for VersusEnv<G> {
    fn observation_dim(&self) -> usize {
        self.game.observation_dim()
    }

    fn action_space(&self) -> ActionSpace {
        self.game.action_space()
    }

    fn reset(&mut self, rng: &mut dyn RngCore) -> Vec<f64> {
        self.seat = rng.gen_range(0..2);
        let mut obs = self.game.reset(rng);
        self.opponent_obs = std::mem::take(&mut obs[1 - self.seat]);
        std::mem::take(&mut obs[self.seat])
    }

    fn step(&mut self, action: &Action, rng: &mut dyn RngCore) -> Result<(Vec<f64>, f64, bool)> {
        let space = self.game.action_space();
        let theirs = self.opponent.act(&self.opponent_obs, &space, rng)?;
        let actions = if self.seat == 0 { [action, &theirs] } else { [&theirs, action] };
        let mut out = self.game.step(actions, rng)?;
        self.opponent_obs = std::mem::take(&mut out[1 - self.seat].obs);
        let me = &mut out[self.seat];
        Ok((std::mem::take(&mut me.obs), me.reward, me.done))
    }
}

/// Result of one game between two policies, from player A's side.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GameResult {
    WinA,
    WinB,
    Draw,
}

impl GameResult {
    /// Score for player A: win 1, draw 0.5, loss 0.
    pub fn score_a(self) -> f64 {
        match self {
            GameResult::WinA => 1.0,
            GameResult::WinB => 0.0,
            GameResult::Draw => 0.5,
        }
    }
}

/// Plays one full game; A takes seat `seat_a`. Outcome is decided by the sign
/// of A's total reward.
pub fn play_game<G: MarkovGame>(game: &mut G, a: &Opponent, b: &Opponent, seat_a: usize, rng: &mut dyn RngCore) -> Result<GameResult> {
    let space = game.action_space();
    let mut obs = game.reset(rng);
    let mut total = 0.0;
    loop {
        let act_a = a.act(&obs[seat_a], &space, rng)?;
        let act_b = b.act(&obs[1 - seat_a], &space, rng)?;
        let actions = if seat_a == 0 { [&act_a, &act_b] } else { [&act_b, &act_a] };
        let out = game.step(actions, rng)?;
        total += out[seat_a].reward;
        let done = out[0].done;
        obs = out.map(|p| p.obs);
        if done {
            break;
        }
    }
    Ok(if total > 0.0 {
        GameResult::WinA
    } else if total < 0.0 {
        GameResult::WinB
    } else {
        GameResult::Draw
    })
}

/// Head-to-head record over `games` plays with alternating seats.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MatchRecord {
    pub wins: usize,
    pub draws: usize,
    pub losses: usize,
}

impl MatchRecord {
    pub fn games(&self) -> usize {
        self.wins + self.draws + self.losses
    }

    pub fn win_rate(&self) -> f64 {
        self.wins as f64 / self.games().max(1) as f64
    }
}

pub fn play_match<G: MarkovGame>(game: &mut G, a: &Opponent, b: &Opponent, games: usize, rng: &mut dyn RngCore) -> Result<MatchRecord> {
    let mut rec = MatchRecord::default();
    for g in 0..games {
        match play_game(game, a, b, g % 2, rng)? {
            GameResult::WinA => rec.wins += 1,
            GameResult::WinB => rec.losses += 1,
            GameResult::Draw => rec.draws += 1,
        }
    }
    Ok(rec)
}

impl AgentState {
    /// Frozen copy of the current policy.
    pub fn as_opponent(&self) -> Opponent {
        Opponent::Policy {
            net: self.policy.clone(),
            params: Arc::new(self.policy_params.clone()),
        }
    }
}
