//! Population-based self-play over risk levels.
//!
//! Each round every agent trains with RPPO against opponents drawn uniformly
//! from the pool of all past snapshots, the current agents then play a
//! round-robin of evaluation games that drives the ELO ratings, every agent
//! is snapshotted into the pool, and agents rated far below the best copy
//! the best agent (exploit) before perturbing the copied risk level
//! (explore).

use std::sync::Arc;

use rand::{Rng, RngCore};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::envs::GridDuel;
use crate::error::{domain, Result};
use crate::model::{MarkovGame, RiskConfig};
use crate::neural::{ParamVector, PolicyNet};
use crate::rppo::{collect_rollout, play_game, rppo_update, AgentState, Opponent, RppoConfig, Runner, UpdateDiagnostics, VersusEnv};
use crate::seeded_rng;

/// Frozen policy snapshot.
#[derive(Debug, Clone)]
pub struct PoolEntry {
    pub id: usize,
    pub agent: usize,
    pub round: usize,
    pub tau: f64,
    pub net: PolicyNet,
    pub params: Arc<ParamVector>,
    /// SHA-256 of the parameters at insertion.
    pub fingerprint: String,
}

impl PoolEntry {
    pub fn opponent(&self) -> Opponent {
        Opponent::Policy {
            net: self.net.clone(),
            params: Arc::clone(&self.params),
        }
    }
}

/// Append-only list of snapshots. Entries are shared immutably, so a
/// snapshot's parameters cannot change once added.
#[derive(Debug, Clone, Default)]
pub struct PolicyPool {
    entries: Vec<Arc<PoolEntry>>,
}

impl PolicyPool {
    pub fn push(&mut self, agent_id: usize, round: usize, agent: &AgentState) -> usize {
        self.push_snapshot(agent_id, round, agent.tau(), agent.policy.clone(), agent.policy_params.clone())
    }

    /// Adds a snapshot that is not attached to a live agent, e.g. one read
    /// back from disk.
    pub fn push_snapshot(&mut self, agent_id: usize, round: usize, tau: f64, net: PolicyNet, params: ParamVector) -> usize {
        let id = self.entries.len();
        let params = Arc::new(params);
        self.entries.push(Arc::new(PoolEntry {
            id,
            agent: agent_id,
            round,
            tau,
            net,
            fingerprint: params.fingerprint(),
            params,
        }));
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: usize) -> Option<&Arc<PoolEntry>> {
        self.entries.get(id)
    }

    pub fn entries(&self) -> &[Arc<PoolEntry>] {
        &self.entries
    }
}

/// Uniform draw over every pool entry.
pub fn sample_opponent<'a>(pool: &'a PolicyPool, rng: &mut dyn RngCore) -> Result<&'a Arc<PoolEntry>> {
    if pool.is_empty() {
        return Err(domain("cannot sample from an empty policy pool"));
    }
    Ok(&pool.entries[rng.gen_range(0..pool.len())])
}

pub const DEFAULT_K: f64 = 32.0;
pub const INITIAL_RATING: f64 = 1000.0;

/// Expected score of a player rated `r_a` against one rated `r_b`.
pub fn elo_expected(r_a: f64, r_b: f64) -> f64 {
    1.0 / (1.0 + 10f64.powf((r_b - r_a) / 400.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EloTable {
    pub ratings: Vec<f64>,
    pub k: f64,
}

impl EloTable {
    pub fn new(n: usize, k: f64, initial: f64) -> Self {
        Self { ratings: vec![initial; n], k }
    }

    /// Applies one game result; `score_a` is 1 (win), 0.5 (draw) or 0.
    /// Returns the change applied to A (B moves by the negation).
    pub fn update(&mut self, a: usize, b: usize, score_a: f64) -> Result<f64> {
        if score_a != 0.0 && score_a != 0.5 && score_a != 1.0 {
            return Err(domain(format!("game score must be 0, 0.5 or 1, got {score_a}")));
        }
        let n = self.ratings.len();
        if a >= n || b >= n || a == b {
            return Err(domain(format!("cannot rate agents {a} and {b} in a table of {n}")));
        }
        let (ra, rb) = (self.ratings[a], self.ratings[b]);
        // B's expected score is 1 - E_A, so its change is -da.
        let da = self.k * (score_a - elo_expected(ra, rb));
        self.ratings[a] = ra + da;
        self.ratings[b] = rb - da;
        Ok(da)
    }

    pub fn total(&self) -> f64 {
        self.ratings.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationConfig {
    pub initial_taus: Vec<f64>,
    /// Agents rated more than this below the best are replaced.
    pub exploit_threshold: f64,
    pub noise_bound: f64,
    pub tau_min: f64,
    pub tau_max: f64,
    pub elo_k: f64,
    pub initial_rating: f64,
    /// Evaluation games per ordered agent pair at the end of each round.
    pub eval_games: usize,
    /// Training rollouts (each of `horizon` steps) per agent per round.
    pub rollouts_per_round: usize,
}

impl Default for PopulationConfig {
    fn default() -> Self {
        Self {
            initial_taus: vec![0.1, 0.4, 0.5, 0.6, 0.9],
            exploit_threshold: 500.0,
            noise_bound: 0.2,
            tau_min: 0.05,
            tau_max: 0.95,
            elo_k: DEFAULT_K,
            initial_rating: INITIAL_RATING,
            eval_games: 4,
            rollouts_per_round: 4,
        }
    }
}

impl PopulationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.initial_taus.is_empty() {
            return Err(domain("population needs at least one agent"));
        }
        if !(0.0 < self.tau_min && self.tau_min <= self.tau_max && self.tau_max < 1.0) {
            return Err(domain("risk-level clip interval must lie inside (0, 1)"));
        }
        if let Some(t) = self.initial_taus.iter().find(|t| !(**t >= self.tau_min && **t <= self.tau_max)) {
            return Err(domain(format!("initial risk level {t} is outside the clip interval")));
        }
        if !(self.noise_bound >= 0.0) || !(self.exploit_threshold >= 0.0) || !(self.elo_k > 0.0) {
            return Err(domain("noise bound and exploit threshold must be nonnegative and K positive"));
        }
        if self.rollouts_per_round == 0 {
            return Err(domain("each agent needs at least one rollout per round"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PopulationState {
    pub agents: Vec<AgentState>,
    pub elo: EloTable,
    pub pool: PolicyPool,
    pub round: usize,
    pub config: PopulationConfig,
    pub seed: u64,
}

impl PopulationState {
    /// One agent per initial risk level, all snapshotted into the pool as
    /// round 0.
    pub fn new<G: MarkovGame>(game: &G, config: PopulationConfig, rppo: &RppoConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut agents = Vec::with_capacity(config.initial_taus.len());
        for (i, &tau) in config.initial_taus.iter().enumerate() {
            let mut c = rppo.clone();
            c.risk = c.risk.with_tau(tau)?;
            let agent_seed = seeded_rng(seed, 1 + i as u64).next_u64();
            agents.push(AgentState::new(game.observation_dim(), &game.action_space(), c, agent_seed)?);
        }
        let mut pool = PolicyPool::default();
        for (i, a) in agents.iter().enumerate() {
            pool.push(i, 0, a);
        }
        Ok(Self {
            elo: EloTable::new(agents.len(), config.elo_k, config.initial_rating),
            agents,
            pool,
            round: 0,
            config,
            seed,
        })
    }
}

/// What exploit/explore did to one agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExploitEvent {
    pub agent: usize,
    pub source: usize,
    pub rating_gap: f64,
    pub copied_tau: f64,
    pub noise: f64,
    pub new_tau: f64,
}

/// Replaces every agent rated more than the threshold below the best with a
/// copy of the best (parameters, risk level, fresh optimizer moments), then
/// perturbs its risk level by uniform noise and clips it. The copy takes the
/// source's rating so it is not immediately replaced again.
pub fn exploit_explore(pop: &mut PopulationState, rng: &mut dyn RngCore) -> Result<Vec<ExploitEvent>> {
    let best = select_champion(pop);
    let best_rating = pop.elo.ratings[best];
    let mut events = Vec::new();
    for i in 0..pop.agents.len() {
        let gap = best_rating - pop.elo.ratings[i];
        if i == best || gap <= pop.config.exploit_threshold {
            continue;
        }
        let source = pop.agents[best].clone();
        let target = &mut pop.agents[i];
        target.policy_params = source.policy_params.clone();
        target.value_params = source.value_params.clone();
        target.reset_optimizer();
        let copied_tau = source.tau();
        let noise = if pop.config.noise_bound > 0.0 {
            rng.gen_range(-pop.config.noise_bound..=pop.config.noise_bound)
        } else {
            0.0
        };
        let new_tau = (copied_tau + noise).clamp(pop.config.tau_min, pop.config.tau_max);
        target.set_tau(new_tau)?;
        pop.elo.ratings[i] = best_rating;
        events.push(ExploitEvent {
            agent: i,
            source: best,
            rating_gap: gap,
            copied_tau,
            noise,
            new_tau,
        });
    }
    Ok(events)
}

/// Highest rating; ties go to the lowest id.
pub fn select_champion(pop: &PopulationState) -> usize {
    argmax_lowest(&pop.elo.ratings)
}

pub fn argmax_lowest(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

/// Evaluation game outcome used for the ELO batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchOutcome {
    pub a: usize,
    pub b: usize,
    pub score_a: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentRoundReport {
    pub agent: usize,
    pub tau: f64,
    pub opponents: Vec<usize>,
    pub updates: Vec<UpdateDiagnostics>,
    pub mean_return: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub agents: Vec<AgentRoundReport>,
    pub matches: Vec<MatchOutcome>,
    pub ratings: Vec<f64>,
    pub pool_additions: Vec<usize>,
    pub pool_size: usize,
    pub exploits: Vec<ExploitEvent>,
    pub taus: Vec<f64>,
    pub champion: usize,
}

const STREAM_TRAIN: u64 = 1 << 40;
const STREAM_EVAL: u64 = 2 << 40;
const STREAM_EXPLORE: u64 = 3 << 40;

/// One training round. Agents train in parallel on `workers` threads; all
/// shared-state mutation happens afterwards on the calling thread, and the
/// input state is not modified, so a failing round leaves no partial
/// changes.
pub fn run_round<G, F>(pop: &PopulationState, make_game: F, workers: usize) -> Result<(PopulationState, RoundReport)>
where
    G: MarkovGame,
    F: Fn() -> G + Sync,
{
    let round = pop.round + 1;
    let pool = &pop.pool;
    let seed = pop.seed;
    let rollouts = pop.config.rollouts_per_round;
    let work = |(i, agent): (usize, &AgentState)| -> Result<(AgentState, AgentRoundReport)> {
        let mut a = agent.clone();
        let mut rng = seeded_rng(seed, STREAM_TRAIN + ((i as u64) << 24) + round as u64);
        let mut report = AgentRoundReport {
            agent: i,
            tau: a.tau(),
            opponents: Vec::new(),
            updates: Vec::new(),
            mean_return: 0.0,
        };
        let mut returns = Vec::new();
        for _ in 0..rollouts {
            let entry = sample_opponent(pool, &mut rng)?;
            report.opponents.push(entry.id);
            let mut runner = Runner::new(VersusEnv::new(make_game(), entry.opponent()));
            let horizon = a.config.horizon;
            let traj = collect_rollout(&a, &mut runner, horizon, &mut rng)?;
            report.updates.push(rppo_update(&mut a, &traj, &mut rng)?);
            returns.extend(runner.finished.iter().map(|f| f.0));
        }
        if !returns.is_empty() {
            report.mean_return = returns.iter().sum::<f64>() / returns.len() as f64;
        }
        Ok((a, report))
    };
    let threads = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| domain(format!("cannot start worker pool: {e}")))?;
    let results: Vec<Result<(AgentState, AgentRoundReport)>> = threads.install(|| pop.agents.par_iter().enumerate().map(work).collect());
    let mut agents = Vec::with_capacity(pop.agents.len());
    let mut reports = Vec::with_capacity(pop.agents.len());
    for r in results {
        let (a, rep) = r?;
        agents.push(a);
        reports.push(rep);
    }

    let mut next = PopulationState {
        agents,
        elo: pop.elo.clone(),
        pool: pop.pool.clone(),
        round,
        config: pop.config.clone(),
        seed,
    };
    let matches = evaluation_round_robin(&next.agents, &make_game, next.config.eval_games, seeded_rng(seed, STREAM_EVAL + round as u64))?;
    for m in &matches {
        next.elo.update(m.a, m.b, m.score_a)?;
    }
    let ratings = next.elo.ratings.clone();
    let pool_additions = (0..next.agents.len()).map(|i| next.pool.push(i, round, &next.agents[i])).collect();
    let mut rng = seeded_rng(seed, STREAM_EXPLORE + round as u64);
    let exploits = exploit_explore(&mut next, &mut rng)?;
    let report = RoundReport {
        round,
        agents: reports,
        matches,
        ratings,
        pool_additions,
        pool_size: next.pool.len(),
        exploits,
        taus: next.agents.iter().map(|a| a.tau()).collect(),
        champion: select_champion(&next),
    };
    Ok((next, report))
}

/// Every ordered pair `(a, b)`, `a != b`, plays `games` games with `a` in
/// seat `g % 2`. Outcomes are listed in a fixed order.
pub fn evaluation_round_robin<G, F>(agents: &[AgentState], make_game: &F, games: usize, mut rng: impl RngCore) -> Result<Vec<MatchOutcome>>
where
    G: MarkovGame,
    F: Fn() -> G,
{
    let opponents: Vec<Opponent> = agents.iter().map(|a| a.as_opponent()).collect();
    let mut out = Vec::new();
    let mut game = make_game();
    for a in 0..agents.len() {
        for b in 0..agents.len() {
            if a == b {
                continue;
            }
            for g in 0..games {
                let result = play_game(&mut game, &opponents[a], &opponents[b], g % 2, &mut rng)?;
                out.push(MatchOutcome { a, b, score_a: result.score_a() });
            }
        }
    }
    Ok(out)
}

/// Default duel-training RPPO settings kept small enough for a desk run.
pub fn duel_rppo_config() -> Result<RppoConfig> {
    Ok(RppoConfig {
        risk: RiskConfig::new(0.5, 0.99, 0.95)?,
        learning_rate: 3e-4,
        horizon: 256,
        minibatch_size: 128,
        hidden: vec![64, 64],
        ..RppoConfig::toy(0.5)?
    })
}

pub fn default_game() -> GridDuel {
    GridDuel::default()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_rppo() -> RppoConfig {
        RppoConfig {
            hidden: vec![8],
            horizon: 32,
            minibatch_size: 32,
            update_epochs: 1,
            ..duel_rppo_config().unwrap()
        }
    }

    fn tiny_pop(taus: Vec<f64>) -> PopulationState {
        let config = PopulationConfig {
            initial_taus: taus,
            eval_games: 2,
            rollouts_per_round: 1,
            ..PopulationConfig::default()
        };
        PopulationState::new(&default_game(), config, &tiny_rppo(), 5).unwrap()
    }

    #[test]
    fn elo_hand_values() {
        assert_eq!(elo_expected(1000.0, 1000.0), 0.5);
        assert!((elo_expected(1000.0, 1400.0) - 1.0 / 11.0).abs() < 1e-12);
        let mut t = EloTable::new(2, 32.0, 1000.0);
        t.update(0, 1, 1.0).unwrap();
        assert_eq!(t.ratings, vec![1016.0, 984.0]);
        let mut t = EloTable { ratings: vec![1000.0, 1400.0], k: 32.0 };
        t.update(0, 1, 1.0).unwrap();
        assert!((t.ratings[0] - (1000.0 + 32.0 * 10.0 / 11.0)).abs() < 1e-9);
        let mut t = EloTable::new(2, 32.0, 1000.0);
        t.update(0, 1, 0.5).unwrap();
        assert_eq!(t.ratings, vec![1000.0, 1000.0]);
        assert!(t.update(0, 1, 0.3).is_err());
        assert!(t.update(0, 0, 1.0).is_err());
    }

    #[test]
    fn sampling_from_pool() {
        let pop = tiny_pop(vec![0.5]);
        let mut rng = seeded_rng(0, 0);
        assert_eq!(sample_opponent(&pop.pool, &mut rng).unwrap().id, 0);
        assert!(sample_opponent(&PolicyPool::default(), &mut rng).is_err());
    }

    #[test]
    fn champion_tie_break() {
        assert_eq!(argmax_lowest(&[1.0, 2.0, 3.0]), 2);
        assert_eq!(argmax_lowest(&[5.0, 5.0, 5.0]), 0);
        assert_eq!(argmax_lowest(&[1.0, 7.0, 7.0]), 1);
    }

    #[test]
    fn exploit_copies_and_clips() {
        let mut pop = tiny_pop(vec![0.9, 0.5, 0.3]);
        pop.elo.ratings = vec![1600.0, 1000.0, 1550.0];
        pop.agents[1].policy_opt.t = 9;
        let mut rng = seeded_rng(1, 0);
        let events = exploit_explore(&mut pop, &mut rng).unwrap();
        assert_eq!(events.len(), 1);
        let e = &events[0];
        assert_eq!((e.agent, e.source), (1, 0));
        assert_eq!(pop.agents[1].policy_params, pop.agents[0].policy_params);
        assert_eq!(pop.agents[1].value_params, pop.agents[0].value_params);
        assert_eq!(pop.agents[1].policy_opt.t, 0);
        assert_eq!(e.new_tau, (0.9 + e.noise).clamp(0.05, 0.95));
        assert!(e.noise.abs() <= 0.2);
        assert_eq!(pop.agents[1].tau(), e.new_tau);
        // Within the threshold: untouched.
        assert_ne!(pop.agents[2].policy_params, pop.agents[0].policy_params);
    }

    #[test]
    fn no_exploit_within_threshold() {
        let mut pop = tiny_pop(vec![0.1, 0.9]);
        pop.elo.ratings = vec![1400.0, 1000.0];
        let before = pop.agents.clone();
        assert!(exploit_explore(&mut pop, &mut seeded_rng(0, 0)).unwrap().is_empty());
        assert_eq!(pop.agents, before);
    }

    #[test]
    fn round_grows_pool_and_leaves_input_alone() {
        let pop = tiny_pop(vec![0.2, 0.8]);
        let snapshot = pop.agents.clone();
        let (next, report) = run_round(&pop, default_game, 1).unwrap();
        assert_eq!(pop.agents, snapshot);
        assert_eq!(pop.pool.len(), 2);
        assert_eq!(next.pool.len(), 4);
        assert_eq!(report.pool_additions, vec![2, 3]);
        assert_eq!(report.matches.len(), 4);
        assert!((next.elo.total() - 2000.0).abs() < 1e-9);
        let (again, report2) = run_round(&pop, default_game, 1).unwrap();
        assert_eq!(report, report2);
        assert_eq!(again.agents, next.agents);
    }

    #[test]
    fn single_agent_population_is_self_play() {
        let pop = tiny_pop(vec![0.5]);
        let (next, report) = run_round(&pop, default_game, 1).unwrap();
        assert!(report.matches.is_empty());
        assert_eq!(next.pool.len(), 2);
        assert_eq!(report.agents[0].opponents, vec![0]);
    }

    #[test]
    fn config_validation() {
        let bad = PopulationConfig {
            initial_taus: vec![0.99],
            ..PopulationConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(PopulationConfig::default().validate().is_ok());
    }
}
