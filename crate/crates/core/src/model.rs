//! Shared domain types: risk configuration, finite MDPs, tabular policies,
//! trajectories and the environment interfaces used by the learners.
//!
//! Rewards live on transitions `r(s, a, s')`. Terminal states are absorbing
//! zero-reward self-loops so that every operator can be iterated uniformly.

use std::fmt;
use std::fmt::Write as _;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};

/// Tolerance on probability sums for MDP rows and policy rows.
pub const PROB_TOL: f64 = 1e-12;

/// Largest admissible expectile step size for a risk level:
/// `1 / (2 max(tau, 1 - tau))`.
pub fn default_alpha(tau: f64) -> Result<f64> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(domain(format!("risk level tau = {tau} must lie in (0, 1)")));
    }
    Ok(1.0 / (2.0 * tau.max(1.0 - tau)))
}

/// Risk level, step size, discount and mixing parameters shared by every
/// estimator.
///
/// `gamma` may equal 1 for episodic sample estimates; the exact tabular
/// solvers reject it because the contraction argument needs `gamma < 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskConfig {
    tau: f64,
    alpha: f64,
    gamma: f64,
    lambda: f64,
    n_max: usize,
}

/// Default cap on the number of rows kept in the return table.
pub const DEFAULT_N_MAX: usize = 50;

impl RiskConfig {
    /// Builds a config with `alpha = default_alpha(tau)` and the default
    /// row cap.
    pub fn new(tau: f64, gamma: f64, lambda: f64) -> Result<Self> {
        let alpha = default_alpha(tau)?;
        let cfg = Self {
            tau,
            alpha,
            gamma,
            lambda,
            n_max: DEFAULT_N_MAX,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Risk-neutral config (`tau = 0.5`, `alpha = 1`).
    pub fn neutral(gamma: f64, lambda: f64) -> Result<Self> {
        Self::new(0.5, gamma, lambda)
    }

    pub fn with_alpha(mut self, alpha: f64) -> Result<Self> {
        self.alpha = alpha;
        self.validate()?;
        Ok(self)
    }

    /// Replaces the risk level and resets `alpha` to its default for the new
    /// level.
    pub fn with_tau(mut self, tau: f64) -> Result<Self> {
        self.alpha = default_alpha(tau)?;
        self.tau = tau;
        self.validate()?;
        Ok(self)
    }

    pub fn with_lambda(mut self, lambda: f64) -> Result<Self> {
        self.lambda = lambda;
        self.validate()?;
        Ok(self)
    }

    pub fn with_gamma(mut self, gamma: f64) -> Result<Self> {
        self.gamma = gamma;
        self.validate()?;
        Ok(self)
    }

    pub fn with_n_max(mut self, n_max: usize) -> Result<Self> {
        self.n_max = n_max;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let max_alpha = default_alpha(self.tau)?;
        if !(self.alpha > 0.0 && self.alpha <= max_alpha * (1.0 + 1e-12)) {
            return Err(domain(format!(
                "step size alpha = {} must lie in (0, {max_alpha}] for tau = {}",
                self.alpha, self.tau
            )));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(domain(format!("discount gamma = {} must lie in (0, 1]", self.gamma)));
        }
        if !(0.0..1.0).contains(&self.lambda) {
            return Err(domain(format!("lambda = {} must lie in [0, 1)", self.lambda)));
        }
        if self.n_max == 0 {
            return Err(domain("n_max must be at least 1"));
        }
        Ok(())
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }
    pub fn alpha(&self) -> f64 {
        self.alpha
    }
    pub fn gamma(&self) -> f64 {
        self.gamma
    }
    pub fn lambda(&self) -> f64 {
        self.lambda
    }
    pub fn n_max(&self) -> usize {
        self.n_max
    }
}

/// One outcome of taking an action: successor, probability and reward.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub next: usize,
    pub prob: f64,
    pub reward: f64,
}

/// Finite MDP with explicit stochastic transitions.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    /// Indexed by `s * n_actions + a`.
    transitions: Vec<Vec<Transition>>,
    terminal: Vec<bool>,
}

/// A violated MDP invariant. See [`validate_mdp`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    ProbabilitySum { state: usize, action: usize, sum: f64 },
    NegativeProbability { state: usize, action: usize, next: usize, prob: f64 },
    SuccessorOutOfRange { state: usize, action: usize, next: usize },
    NonFiniteReward { state: usize, action: usize, next: usize },
    TerminalNotAbsorbing { state: usize, action: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::ProbabilitySum { state, action, sum } => {
                write!(f, "probabilities of ({state}, {action}) sum to {sum}")
            }
            Violation::NegativeProbability { state, action, next, prob } => {
                write!(f, "negative probability {prob} on ({state}, {action}) -> {next}")
            }
            Violation::SuccessorOutOfRange { state, action, next } => {
                write!(f, "successor {next} of ({state}, {action}) is out of range")
            }
            Violation::NonFiniteReward { state, action, next } => {
                write!(f, "non-finite reward on ({state}, {action}) -> {next}")
            }
            Violation::TerminalNotAbsorbing { state, action } => {
                write!(f, "terminal state {state} is not a zero-reward self-loop under action {action}")
            }
        }
    }
}

impl TabularMdp {
    /// Creates an MDP without transitions. Terminal states get their
    /// absorbing self-loops when [`TabularMdp::set_terminal`] is called.
    pub fn new(n_states: usize, n_actions: usize) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(domain("an MDP needs at least one state and one action"));
        }
        Ok(Self {
            n_states,
            n_actions,
            transitions: vec![Vec::new(); n_states * n_actions],
            terminal: vec![false; n_states],
        })
    }

    /// Appends an outcome to `(state, action)`. Merging and normalization are
    /// the caller's business; [`validate_mdp`] reports inconsistencies.
    pub fn add_transition(&mut self, state: usize, action: usize, next: usize, prob: f64, reward: f64) -> Result<()> {
        if state >= self.n_states || action >= self.n_actions {
            return Err(domain(format!("({state}, {action}) is outside the MDP")));
        }
        self.transitions[state * self.n_actions + action].push(Transition { next, prob, reward });
        Ok(())
    }

    /// Marks a state terminal and replaces its outgoing rows with absorbing
    /// zero-reward self-loops.
    pub fn set_terminal(&mut self, state: usize) -> Result<()> {
        if state >= self.n_states {
            return Err(domain(format!("state {state} is outside the MDP")));
        }
        self.terminal[state] = true;
        for a in 0..self.n_actions {
            self.transitions[state * self.n_actions + a] = vec![Transition {
                next: state,
                prob: 1.0,
                reward: 0.0,
            }];
        }
        Ok(())
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn is_terminal(&self, state: usize) -> bool {
        self.terminal[state]
    }

    pub fn outcomes(&self, state: usize, action: usize) -> &[Transition] {
        &self.transitions[state * self.n_actions + action]
    }

    /// Mutable access to a row, for tests and generators that need to build
    /// malformed models.
    pub fn outcomes_mut(&mut self, state: usize, action: usize) -> &mut Vec<Transition> {
        &mut self.transitions[state * self.n_actions + action]
    }

    /// True when every `(s, a)` has a single successor.
    pub fn is_deterministic(&self) -> bool {
        self.transitions.iter().all(|row| row.iter().filter(|t| t.prob > 0.0).count() == 1)
    }

    /// Row-stochastic state-to-state matrix induced by a policy.
    pub fn induced_chain(&self, pi: &TabularPolicy) -> Result<Vec<Vec<f64>>> {
        check_policy_shape(self, pi)?;
        let mut chain = vec![vec![0.0; self.n_states]; self.n_states];
        for (s, row) in chain.iter_mut().enumerate() {
            for a in 0..self.n_actions {
                let pa = pi.prob(s, a);
                if pa == 0.0 {
                    continue;
                }
                for t in self.outcomes(s, a) {
                    row[t.next] += pa * t.prob;
                }
            }
        }
        Ok(chain)
    }

    /// Checks the MDP and converts the report into an error.
    pub fn ensure_valid(&self) -> Result<()> {
        let report = validate_mdp(self);
        if report.is_empty() {
            Ok(())
        } else {
            let lines: Vec<String> = report.iter().map(ToString::to_string).collect();
            Err(domain(format!("invalid MDP: {}", lines.join("; "))))
        }
    }
}

/// Lists every violated MDP invariant; an empty report means the MDP is valid.
pub fn validate_mdp(mdp: &TabularMdp) -> Vec<Violation> {
    let mut report = Vec::new();
    for s in 0..mdp.n_states {
        for a in 0..mdp.n_actions {
            let row = mdp.outcomes(s, a);
            let mut sum = 0.0;
            for t in row {
                if t.next >= mdp.n_states {
                    report.push(Violation::SuccessorOutOfRange { state: s, action: a, next: t.next });
                }
                if t.prob < 0.0 || t.prob.is_nan() {
                    report.push(Violation::NegativeProbability {
                        state: s,
                        action: a,
                        next: t.next,
                        prob: t.prob,
                    });
                }
                if !t.reward.is_finite() {
                    report.push(Violation::NonFiniteReward { state: s, action: a, next: t.next });
                }
                sum += t.prob;
            }
            if !((sum - 1.0).abs() <= PROB_TOL) {
                report.push(Violation::ProbabilitySum { state: s, action: a, sum });
            }
            if mdp.terminal[s] && row.iter().any(|t| t.prob > 0.0 && (t.next != s || t.reward != 0.0)) {
                report.push(Violation::TerminalNotAbsorbing { state: s, action: a });
            }
        }
    }
    report
}

/// Per-state action distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    probs: Vec<Vec<f64>>,
}

impl TabularPolicy {
    pub fn from_rows(probs: Vec<Vec<f64>>) -> Result<Self> {
        for (s, row) in probs.iter().enumerate() {
            if row.iter().any(|&p| p < 0.0 || !p.is_finite()) {
                return Err(domain(format!("policy row {s} has a negative or non-finite entry")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > PROB_TOL {
                return Err(domain(format!("policy row {s} sums to {sum}")));
            }
        }
        Ok(Self { probs })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self {
            probs: vec![vec![1.0 / n_actions as f64; n_actions]; n_states],
        }
    }

    /// Puts all mass on `actions[s]` in every state.
    pub fn deterministic(actions: &[usize], n_actions: usize) -> Result<Self> {
        let mut probs = Vec::with_capacity(actions.len());
        for &a in actions {
            if a >= n_actions {
                return Err(domain(format!("action {a} out of range")));
            }
            let mut row = vec![0.0; n_actions];
            row[a] = 1.0;
            probs.push(row);
        }
        Ok(Self { probs })
    }

    pub fn prob(&self, state: usize, action: usize) -> f64 {
        self.probs[state][action]
    }

    pub fn n_states(&self) -> usize {
        self.probs.len()
    }

    pub fn n_actions(&self) -> usize {
        self.probs.first().map_or(0, Vec::len)
    }

    pub fn row(&self, state: usize) -> &[f64] {
        &self.probs[state]
    }
}

pub(crate) fn check_policy_shape(mdp: &TabularMdp, pi: &TabularPolicy) -> Result<()> {
    if pi.n_states() != mdp.n_states() {
        return Err(Error::Shape {
            what: "policy states",
            expected: mdp.n_states(),
            got: pi.n_states(),
        });
    }
    if pi.n_actions() != mdp.n_actions() {
        return Err(Error::Shape {
            what: "policy actions",
            expected: mdp.n_actions(),
            got: pi.n_actions(),
        });
    }
    Ok(())
}

/// Parses the plain-text MDP format:
///
/// ```text
/// # comment
/// states 3
/// actions 2
/// terminal 2
/// t <state> <action> <next> <prob> <reward>
/// ```
///
/// `states` and `actions` must come before any other directive. Terminal
/// states listed without transitions get absorbing self-loops; explicit rows
/// for terminal states are kept and checked by [`validate_mdp`].
pub fn parse_mdp(text: &str) -> Result<TabularMdp> {
    let mut n_states = None;
    let mut n_actions = None;
    let mut mdp: Option<TabularMdp> = None;
    let mut terminals = Vec::new();
    let mut explicit_rows = Vec::new();

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split_whitespace();
        let keyword = fields.next().unwrap_or_default();
        let rest: Vec<&str> = fields.collect();
        let perr = |message: String| Error::Parse { line: line_no, message };
        match keyword {
            "states" | "actions" => {
                if mdp.is_some() {
                    return Err(perr(format!("`{keyword}` must precede transitions")));
                }
                let [value] = rest.as_slice() else {
                    return Err(perr(format!("`{keyword}` takes one integer")));
                };
                let value: usize = value.parse().map_err(|e| perr(format!("{e}")))?;
                if keyword == "states" {
                    n_states = Some(value);
                } else {
                    n_actions = Some(value);
                }
            }
            "terminal" => {
                for s in &rest {
                    terminals.push(s.parse::<usize>().map_err(|e| perr(format!("{e}")))?);
                }
            }
            "t" => {
                if mdp.is_none() {
                    let (Some(ns), Some(na)) = (n_states, n_actions) else {
                        return Err(perr("`states` and `actions` must be declared first".into()));
                    };
                    mdp = Some(TabularMdp::new(ns, na).map_err(|e| perr(e.to_string()))?);
                }
                let [s, a, next, p, r] = rest.as_slice() else {
                    return Err(perr("expected `t <state> <action> <next> <prob> <reward>`".into()));
                };
                let s: usize = s.parse().map_err(|e| perr(format!("state: {e}")))?;
                let a: usize = a.parse().map_err(|e| perr(format!("action: {e}")))?;
                let next: usize = next.parse().map_err(|e| perr(format!("next: {e}")))?;
                let p: f64 = p.parse().map_err(|e| perr(format!("prob: {e}")))?;
                let r: f64 = r.parse().map_err(|e| perr(format!("reward: {e}")))?;
                let m = mdp.as_mut().expect("initialized above");
                m.add_transition(s, a, next, p, r).map_err(|e| perr(e.to_string()))?;
                explicit_rows.push(s);
            }
            other => return Err(perr(format!("unknown directive `{other}`"))),
        }
    }

    let mut mdp = match mdp {
        Some(m) => m,
        None => {
            let (Some(ns), Some(na)) = (n_states, n_actions) else {
                return Err(Error::Parse {
                    line: 0,
                    message: "missing `states` or `actions`".into(),
                });
            };
            TabularMdp::new(ns, na)?
        }
    };
    for s in terminals {
        if s >= mdp.n_states {
            return Err(domain(format!("terminal state {s} out of range")));
        }
        if explicit_rows.contains(&s) {
            mdp.terminal[s] = true;
        } else {
            mdp.set_terminal(s)?;
        }
    }
    Ok(mdp)
}

/// Writes an MDP in the format read by [`parse_mdp`].
pub fn format_mdp(mdp: &TabularMdp) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "states {}", mdp.n_states);
    let _ = writeln!(out, "actions {}", mdp.n_actions);
    let terminals: Vec<String> = (0..mdp.n_states)
        .filter(|&s| mdp.terminal[s])
        .map(|s| s.to_string())
        .collect();
    if !terminals.is_empty() {
        let _ = writeln!(out, "terminal {}", terminals.join(" "));
    }
    for s in 0..mdp.n_states {
        for a in 0..mdp.n_actions {
            for t in mdp.outcomes(s, a) {
                let _ = writeln!(out, "t {s} {a} {} {:?} {:?}", t.next, t.prob, t.reward);
            }
        }
    }
    out
}

/// A discrete index or a continuous vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Action {
    Discrete(usize),
    Continuous(Vec<f64>),
}

impl Action {
    pub fn index(&self) -> Option<usize> {
        match self {
            Action::Discrete(i) => Some(*i),
            Action::Continuous(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ActionSpace {
    Discrete(usize),
    /// Box with per-coordinate bounds.
    Continuous { low: Vec<f64>, high: Vec<f64> },
}

impl ActionSpace {
    pub fn dim(&self) -> usize {
        match self {
            ActionSpace::Discrete(n) => *n,
            ActionSpace::Continuous { low, .. } => low.len(),
        }
    }
}

/// One recorded interaction. `value` and `log_prob` are taken from the
/// policy that collected the data.
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub obs: Vec<f64>,
    pub action: Action,
    pub reward: f64,
    pub value: f64,
    pub log_prob: f64,
    pub done: bool,
}

/// Time-ordered rollout; episodes are concatenated and separated by `done`.
/// `bootstrap_value` is the value of the state after the last step and only
/// matters when that step is not terminal.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub steps: Vec<Step>,
    pub bootstrap_value: f64,
}

impl Trajectory {
    /// Scalar-only trajectory, convenient for estimator tests.
    pub fn from_scalars(rewards: &[f64], values: &[f64], dones: &[bool], bootstrap_value: f64) -> Result<Self> {
        if rewards.len() != values.len() || rewards.len() != dones.len() {
            return Err(Error::Shape {
                what: "trajectory columns",
                expected: rewards.len(),
                got: values.len().min(dones.len()),
            });
        }
        let steps = rewards
            .iter()
            .zip(values)
            .zip(dones)
            .map(|((&reward, &value), &done)| Step {
                obs: Vec::new(),
                action: Action::Discrete(0),
                reward,
                value,
                log_prob: 0.0,
                done,
            })
            .collect();
        Ok(Self { steps, bootstrap_value })
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Single-agent environment with flat numeric observations.
pub trait Env {
    fn observation_dim(&self) -> usize;
    fn action_space(&self) -> ActionSpace;
    fn reset(&mut self, rng: &mut dyn RngCore) -> Vec<f64>;
    /// Returns `(observation, reward, done)`.
    fn step(&mut self, action: &Action, rng: &mut dyn RngCore) -> Result<(Vec<f64>, f64, bool)>;
}

/// Per-player result of a joint step.
#[derive(Debug, Clone, PartialEq)]
pub struct PlayerStep {
    pub obs: Vec<f64>,
    pub reward: f64,
    pub done: bool,
}

/// Symmetric two-player Markov game. Episodes end for both players at once.
pub trait MarkovGame {
    fn observation_dim(&self) -> usize;
    fn action_space(&self) -> ActionSpace;
    fn reset(&mut self, rng: &mut dyn RngCore) -> [Vec<f64>; 2];
    fn step(&mut self, actions: [&Action; 2], rng: &mut dyn RngCore) -> Result<[PlayerStep; 2]>;
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_state() -> TabularMdp {
        let mut m = TabularMdp::new(2, 1).unwrap();
        m.add_transition(0, 0, 0, 0.3, 1.0).unwrap();
        m.add_transition(0, 0, 1, 0.7, -1.0).unwrap();
        m.set_terminal(1).unwrap();
        m
    }

    #[test]
    fn valid_mdp_has_empty_report() {
        assert!(validate_mdp(&two_state()).is_empty());
    }

    #[test]
    fn short_row_is_reported() {
        let mut m = two_state();
        m.outcomes_mut(0, 0)[1].prob = 0.6;
        let report = validate_mdp(&m);
        assert!(matches!(report.as_slice(), [Violation::ProbabilitySum { state: 0, action: 0, .. }]));
    }

    #[test]
    fn negative_probability_is_reported() {
        let mut m = two_state();
        m.outcomes_mut(0, 0)[0].prob = -0.3;
        m.outcomes_mut(0, 0)[1].prob = 1.3;
        let report = validate_mdp(&m);
        assert!(report.iter().any(|v| matches!(v, Violation::NegativeProbability { .. })));
    }

    #[test]
    fn terminal_with_reward_is_reported() {
        let mut m = two_state();
        m.outcomes_mut(1, 0)[0].reward = 1.0;
        assert!(matches!(validate_mdp(&m).as_slice(), [Violation::TerminalNotAbsorbing { state: 1, .. }]));
    }

    #[test]
    fn default_alpha_values() {
        assert_eq!(default_alpha(0.5).unwrap(), 1.0);
        assert!((default_alpha(0.9).unwrap() - 1.0 / 1.8).abs() < 1e-15);
        assert!((default_alpha(0.1).unwrap() - 1.0 / 1.8).abs() < 1e-15);
        assert!(default_alpha(0.0).is_err());
        assert!(default_alpha(1.0).is_err());
        assert!(default_alpha(f64::NAN).is_err());
    }

    #[test]
    fn risk_config_rejects_bad_values() {
        assert!(RiskConfig::new(0.5, 0.0, 0.5).is_err());
        assert!(RiskConfig::new(0.5, 0.9, 1.0).is_err());
        assert!(RiskConfig::new(0.9, 0.9, 0.5).unwrap().with_alpha(0.6).is_err());
        assert!(RiskConfig::new(0.9, 0.9, 0.5).unwrap().with_n_max(0).is_err());
        let cfg = RiskConfig::new(0.9, 0.9, 0.5).unwrap().with_tau(0.5).unwrap();
        assert_eq!(cfg.alpha(), 1.0);
    }

    #[test]
    fn parse_round_trip() {
        let m = two_state();
        let text = format_mdp(&m);
        let back = parse_mdp(&text).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn parse_fills_terminal_self_loops() {
        let text = "# bandit\nstates 2\nactions 1\nterminal 1\nt 0 0 1 1.0 0.5\n";
        let m = parse_mdp(text).unwrap();
        assert!(m.is_terminal(1));
        assert_eq!(m.outcomes(1, 0), &[Transition { next: 1, prob: 1.0, reward: 0.0 }]);
        assert!(validate_mdp(&m).is_empty());
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let err = parse_mdp("states 2\nactions 1\nt 0 0 1 x 0\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        let err = parse_mdp("t 0 0 1 1 0\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
        assert!(parse_mdp("states 2\nbogus\n").is_err());
    }

    #[test]
    fn induced_chain_is_row_stochastic() {
        let m = two_state();
        let pi = TabularPolicy::uniform(2, 1);
        for row in m.induced_chain(&pi).unwrap() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= PROB_TOL);
        }
    }

    #[test]
    fn policy_rows_are_checked() {
        assert!(TabularPolicy::from_rows(vec![vec![0.5, 0.4]]).is_err());
        assert!(TabularPolicy::from_rows(vec![vec![1.5, -0.5]]).is_err());
        assert!(TabularPolicy::deterministic(&[2], 2).is_err());
    }
}
