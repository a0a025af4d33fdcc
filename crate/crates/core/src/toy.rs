//! The windy-gridworld risk-preference experiment: train one agent per risk
//! level, then measure where the trained policies go.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::envs::{visitation_counts, GridConfig, Move, Visitation, WindyGridworld};
use crate::error::Result;
use crate::model::{Action, ActionSpace};
use crate::rppo::{collect_rollout, rppo_update, AgentState, RppoConfig, Runner, UpdateDiagnostics};
use crate::seeded_rng;

/// Random-stream identifiers derived from a run seed.
const STREAM_INIT: u64 = 0;
const STREAM_EVAL: u64 = 1;
const STREAM_UPDATE_BASE: u64 = 1 << 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub rppo: RppoConfig,
    pub total_steps: u64,
    pub seed: u64,
}

/// Fresh agent for the gridworld.
pub fn new_toy_agent(grid: &GridConfig, cfg: &ToyConfig) -> Result<AgentState> {
    let init_seed = seeded_rng(cfg.seed, STREAM_INIT).next_u64();
    AgentState::new(grid.n_cells(), &ActionSpace::Discrete(4), cfg.rppo.clone(), init_seed)
}

/// Trains until `total_steps` environment steps have been consumed. Each
/// update draws from its own random stream keyed by the update index, so a
/// run resumed from a checkpoint continues with the same streams.
pub fn train_toy<F>(grid: &GridConfig, cfg: &ToyConfig, agent: &mut AgentState, mut on_update: F) -> Result<()>
where
    F: FnMut(&UpdateDiagnostics, &AgentState, &[(f64, usize)]) -> Result<()>,
{
    let mut runner = Runner::new(WindyGridworld::new(grid.clone())?);
    while agent.steps < cfg.total_steps {
        let horizon = (cfg.total_steps - agent.steps).min(agent.config.horizon as u64) as usize;
        let mut rng = seeded_rng(cfg.seed, STREAM_UPDATE_BASE + agent.updates);
        let traj = collect_rollout(agent, &mut runner, horizon, &mut rng)?;
        let diag = rppo_update(agent, &traj, &mut rng)?;
        let finished = runner.drain_finished();
        on_update(&diag, agent, &finished)?;
    }
    Ok(())
}

/// Evaluation protocol for a trained gridworld agent.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyEvaluation {
    pub visitation: Visitation,
    /// Share of visitation mass on non-water cells bordering water.
    pub water_adjacent_fraction: f64,
    /// Share of visitation mass in water.
    pub water_fraction: f64,
    pub success_rate: f64,
    pub mean_success_length: Option<f64>,
}

/// Rolls `episodes` evaluation episodes. With `greedy` the most likely
/// action is taken; otherwise actions are sampled from the policy.
pub fn evaluate_toy(grid: &GridConfig, agent: &AgentState, episodes: usize, seed: u64, greedy: bool) -> Result<ToyEvaluation> {
    let mut rng = seeded_rng(seed, STREAM_EVAL);
    let visitation = visitation_counts(
        grid,
        |_, obs, rng| {
            let action = if greedy { agent.act_greedy(obs)? } else { agent.act(obs, rng)?.0 };
            match action {
                Action::Discrete(i) => Move::from_index(i),
                Action::Continuous(_) => unreachable!("gridworld agents have categorical heads"),
            }
        },
        episodes,
        &mut rng,
    )?;
    Ok(ToyEvaluation {
        water_adjacent_fraction: visitation.mass(&grid.water_adjacent()),
        water_fraction: visitation.mass(&grid.water),
        success_rate: visitation.success_lengths.len() as f64 / episodes as f64,
        mean_success_length: visitation.mean_success_length(),
        visitation,
    })
}
