//! Randomized property suites for the exact operators, the sample-based
//! estimator and the network gradients.
//!
//! Every check draws its cases from a seeded generator and compares against
//! an oracle that does not share code with the implementation under test
//! where that is practical (brute-force n-step returns, a plain GAE
//! recursion, central finite differences, closed forms).

use std::fmt::Write as _;

use rand::{Rng, RngCore};
use serde::Serialize;

use crate::advantage::{build_return_table, compute_advantages};
use crate::error::{Error, Result};
use crate::expectile::{
    expectile_backup, gamma_tau, gamma_tau_lambda, multistep_backup, multistep_terms, solve_fixed_point, solve_multistep_fixed_point,
    BackupKind, ValueTable, RATIO_FLOOR,
};
use crate::model::{Action, RiskConfig, TabularMdp, TabularPolicy, Trajectory};
use crate::neural::{backward, loss_value, log_prob, Activation, LossSample, LossSpec, MlpSpec, ParamVector, PolicyHead, PolicyNet};
use crate::seeded_rng;

pub const TAU_GRID: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];
pub const GAMMAS: [f64; 3] = [0.8, 0.9, 0.95];
pub const LOW_TAUS: [f64; 5] = [0.2, 0.1, 0.05, 0.01, 0.001];
pub const HIGH_TAUS: [f64; 5] = [0.8, 0.9, 0.95, 0.99, 0.999];
pub const MULTISTEP_LAMBDAS: [f64; 3] = [0.3, 0.7, 0.95];

/// Random finite MDP with a random stochastic policy.
///
/// States `2..=max_states`, actions `1..=max_actions`; each nonterminal
/// `(s, a)` reaches 1 to 3 distinct successors with rewards uniform in
/// `[-1, 1]`. With probability one half the last state is terminal.
pub fn random_mdp(rng: &mut dyn RngCore, max_states: usize, max_actions: usize) -> (TabularMdp, TabularPolicy) {
    let n_states = rng.gen_range(2..=max_states.max(2));
    let n_actions = rng.gen_range(1..=max_actions.max(1));
    let mut mdp = TabularMdp::new(n_states, n_actions).expect("positive sizes");
    let terminal = rng.gen_bool(0.5);
    for s in 0..n_states {
        if terminal && s + 1 == n_states {
            mdp.set_terminal(s).expect("state in range");
            continue;
        }
        for a in 0..n_actions {
            let k = rng.gen_range(1..=3.min(n_states));
            let mut succ: Vec<usize> = (0..n_states).collect();
            for i in 0..k {
                let j = rng.gen_range(i..n_states);
                succ.swap(i, j);
            }
            let probs = random_simplex(rng, k);
            for (i, p) in probs.into_iter().enumerate() {
                mdp.add_transition(s, a, succ[i], p, rng.gen_range(-1.0..=1.0)).expect("valid transition");
            }
        }
    }
    let rows = (0..n_states).map(|_| random_simplex(rng, n_actions)).collect();
    (mdp, TabularPolicy::from_rows(rows).expect("rows are distributions"))
}

/// Deterministic MDP and deterministic policy.
pub fn random_deterministic_mdp(rng: &mut dyn RngCore, max_states: usize, max_actions: usize) -> (TabularMdp, TabularPolicy) {
    let n_states = rng.gen_range(2..=max_states.max(2));
    let n_actions = rng.gen_range(1..=max_actions.max(1));
    let mut mdp = TabularMdp::new(n_states, n_actions).expect("positive sizes");
    let terminal = rng.gen_bool(0.5);
    for s in 0..n_states {
        if terminal && s + 1 == n_states {
            mdp.set_terminal(s).expect("state in range");
            continue;
        }
        for a in 0..n_actions {
            mdp.add_transition(s, a, rng.gen_range(0..n_states), 1.0, rng.gen_range(-1.0..=1.0)).expect("valid transition");
        }
    }
    let actions: Vec<usize> = (0..n_states).map(|_| rng.gen_range(0..n_actions)).collect();
    (mdp, TabularPolicy::deterministic(&actions, n_actions).expect("actions in range"))
}

/// Probabilities bounded away from zero, summing to one up to rounding.
fn random_simplex(rng: &mut dyn RngCore, k: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.05..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let mut p: Vec<f64> = raw.iter().map(|x| x / total).collect();
    let head: f64 = p[..k - 1].iter().sum();
    p[k - 1] = 1.0 - head;
    p
}

/// Bernoulli bandit: state 0 moves to terminal state 1 (reward 0) or 2
/// (reward 1) with equal probability.
pub fn bernoulli_bandit() -> TabularMdp {
    let mut m = TabularMdp::new(3, 1).expect("positive sizes");
    m.add_transition(0, 0, 1, 0.5, 0.0).expect("valid");
    m.add_transition(0, 0, 2, 0.5, 1.0).expect("valid");
    m.set_terminal(1).expect("valid");
    m.set_terminal(2).expect("valid");
    m
}

/// Solves so that the distance to the true fixed point is at most `err`,
/// using the a-posteriori bound `|v - v*| <= c / (1 - c) |Δ|` for a
/// `c`-contraction.
pub fn solve_within(
    mdp: &TabularMdp,
    pi: &TabularPolicy,
    cfg: &RiskConfig,
    kind: BackupKind,
    err: f64,
    max_iter: usize,
) -> Result<ValueTable> {
    let c = match kind {
        BackupKind::Expectile => gamma_tau(cfg),
        BackupKind::Worst | BackupKind::Best => cfg.gamma(),
    };
    let tol = (err * (1.0 - c) / c).max(1e-15);
    Ok(solve_fixed_point(mdp, pi, cfg, kind, tol, max_iter)?.values)
}

/// Multi-step counterpart of [`solve_within`].
pub fn solve_multistep_within(mdp: &TabularMdp, pi: &TabularPolicy, cfg: &RiskConfig, n_terms: usize, err: f64, max_iter: usize) -> Result<ValueTable> {
    let c = gamma_tau_lambda(cfg).max(1e-3);
    let tol = (err * (1.0 - c) / c).max(1e-15);
    Ok(solve_multistep_fixed_point(mdp, pi, cfg, n_terms, tol, max_iter)?.values)
}

/// Deliberately broken operators used to confirm the suites can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Fault {
    /// Scales every expectile backup by 1.5, which breaks contraction.
    ExpansiveOperator,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyConfig {
    pub seed: u64,
    pub n_mdps: usize,
    pub max_states: usize,
    pub max_actions: usize,
    /// MDPs used by the slow limit and multi-step checks.
    pub n_slow_mdps: usize,
    pub n_trajectories: usize,
    pub n_gradient_seeds: usize,
    pub fault: Option<Fault>,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_mdps: 100,
            max_states: 10,
            max_actions: 3,
            n_slow_mdps: 20,
            n_trajectories: 50,
            n_gradient_seeds: 20,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckReport {
    pub id: usize,
    pub name: &'static str,
    pub passed: bool,
    pub cases: usize,
    /// Largest observed value of the checked quantity minus its bound
    /// (nonpositive when the check passes).
    pub worst_margin: f64,
    pub failures: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub checks: Vec<CheckReport>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            let _ = writeln!(
                out,
                "check {} {}: {} ({} cases, worst margin {:.3e})",
                c.id,
                c.name,
                if c.passed { "PASS" } else { "FAIL" },
                c.cases,
                c.worst_margin
            );
            for f in c.failures.iter().take(5) {
                let _ = writeln!(out, "    {f}");
            }
        }
        out
    }
}

struct Tracker {
    report: CheckReport,
}

impl Tracker {
    fn new(id: usize, name: &'static str) -> Self {
        Self {
            report: CheckReport {
                id,
                name,
                passed: true,
                cases: 0,
                worst_margin: f64::NEG_INFINITY,
                failures: Vec::new(),
            },
        }
    }

    /// Records `value <= bound`.
    fn le(&mut self, value: f64, bound: f64, what: impl FnOnce() -> String) {
        self.report.cases += 1;
        let margin = value - bound;
        if margin > self.report.worst_margin || margin.is_nan() {
            self.report.worst_margin = margin;
        }
        if !(margin <= 0.0) {
            self.report.passed = false;
            if self.report.failures.len() < 20 {
                self.report.failures.push(format!("{}: {value:.6e} exceeds {bound:.6e}", what()));
            }
        }
    }

    fn error(&mut self, what: String, e: Error) {
        self.report.passed = false;
        self.report.failures.push(format!("{what}: {e}"));
    }

    fn done(mut self) -> CheckReport {
        if self.report.cases == 0 {
            self.report.worst_margin = 0.0;
        }
        self.report
    }
}

fn apply(v: &ValueTable, mdp: &TabularMdp, pi: &TabularPolicy, cfg: &RiskConfig, fault: Option<Fault>) -> Result<ValueTable> {
    let mut out = expectile_backup(v, mdp, pi, cfg)?;
    if fault == Some(Fault::ExpansiveOperator) {
        for x in out.iter_mut() {
            *x *= 1.5;
        }
    }
    Ok(out)
}

/// Iterates from zero for up to `iters` steps (or until changes fall below
/// float resolution) and returns the observed successive-change ratios.
pub fn observed_ratios<F>(n_states: usize, mut op: F, iters: usize) -> Result<Vec<f64>>
where
    F: FnMut(&ValueTable) -> Result<ValueTable>,
{
    let mut v = ValueTable::zeros(n_states);
    let mut prev: Option<f64> = None;
    let mut ratios = Vec::new();
    for _ in 0..iters {
        let next = op(&v)?;
        let change = next.distance(&v);
        if !change.is_finite() {
            break;
        }
        if let Some(p) = prev {
            if p >= RATIO_FLOOR * (1.0 + v.sup_norm()) {
                ratios.push(change / p);
            } else {
                break;
            }
        }
        prev = Some(change);
        v = next;
    }
    Ok(ratios)
}

fn random_cases(cfg: &VerifyConfig, stream: u64, n: usize) -> Vec<(TabularMdp, TabularPolicy, f64)> {
    let mut rng = seeded_rng(cfg.seed, stream);
    (0..n)
        .map(|i| {
            let (m, p) = random_mdp(&mut rng, cfg.max_states, cfg.max_actions);
            (m, p, GAMMAS[i % GAMMAS.len()])
        })
        .collect()
}

/// Check 1: every successive-change ratio of the one-step operator is at
/// most `gamma_tau + 1e-9`; also on random pairs of value tables.
pub fn check_contraction(cfg: &VerifyConfig) -> CheckReport {
    let mut t = Tracker::new(1, "contraction");
    let mut rng = seeded_rng(cfg.seed, 101);
    for (i, (mdp, pi, gamma)) in random_cases(cfg, 100, cfg.n_mdps).iter().enumerate() {
        for &tau in &TAU_GRID {
            let risk = RiskConfig::new(tau, *gamma, 0.0).expect("grid values are valid");
            let bound = gamma_tau(&risk) + 1e-9;
            match observed_ratios(mdp.n_states(), |v| apply(v, mdp, pi, &risk, cfg.fault), 2000) {
                Ok(ratios) => {
                    for r in ratios {
                        t.le(r, bound, || format!("mdp {i} tau {tau} gamma {gamma}"));
                    }
                }
                Err(e) => t.error(format!("mdp {i} tau {tau}"), e),
            }
            // Direct pairwise check on random value tables.
            for _ in 0..3 {
                // Terminal states are held fixed by the operator, so they
                // are pinned to zero in both tables.
                let mut draw = || ValueTable((0..mdp.n_states()).map(|s| if mdp.is_terminal(s) { 0.0 } else { rng.gen_range(-5.0..5.0) }).collect());
                let v = draw();
                let w = draw();
                let (tv, tw) = match (apply(&v, mdp, pi, &risk, cfg.fault), apply(&w, mdp, pi, &risk, cfg.fault)) {
                    (Ok(a), Ok(b)) => (a, b),
                    (Err(e), _) | (_, Err(e)) => {
                        t.error(format!("mdp {i} tau {tau}"), e);
                        continue;
                    }
                };
                let d = v.distance(&w);
                t.le(tw.distance(&tv), gamma_tau(&risk) * d + 1e-12, || format!("pair on mdp {i} tau {tau}"));
            }
        }
    }
    t.done()
}

/// Check 2: fixed points are elementwise nondecreasing in `tau`.
pub fn check_monotonicity(cfg: &VerifyConfig) -> CheckReport {
    let mut t = Tracker::new(2, "monotonicity");
    for (i, (mdp, pi, gamma)) in random_cases(cfg, 100, cfg.n_mdps).iter().enumerate() {
        let mut prev: Option<ValueTable> = None;
        for &tau in &TAU_GRID {
            let risk = RiskConfig::new(tau, *gamma, 0.0).expect("valid");
            match solve_within(mdp, pi, &risk, BackupKind::Expectile, 1e-10, 2_000_000) {
                Ok(v) => {
                    if let Some(p) = &prev {
                        for s in 0..v.len() {
                            t.le(p[s] - v[s], 1e-8, || format!("mdp {i} state {s} tau {tau}"));
                        }
                    }
                    prev = Some(v);
                }
                Err(e) => t.error(format!("mdp {i} tau {tau}"), e),
            }
        }
    }
    t.done()
}

/// Check 3: worst <= V*_tau <= best, monotone approach to the extremes as
/// tau goes to 0 or 1, and the bandit closed form V*(s0) = tau.
pub fn check_limits(cfg: &VerifyConfig) -> CheckReport {
    let mut t = Tracker::new(3, "limits");
    let bandit = bernoulli_bandit();
    let one = TabularPolicy::uniform(3, 1);
    for &tau in &TAU_GRID {
        let risk = RiskConfig::new(tau, 0.9, 0.0).expect("valid");
        match solve_within(&bandit, &one, &risk, BackupKind::Expectile, 1e-12, 1_000_000) {
            Ok(v) => t.le((v[0] - tau).abs(), 1e-9, || format!("bandit tau {tau}")),
            Err(e) => t.error(format!("bandit tau {tau}"), e),
        }
    }
    for (i, (mdp, pi, gamma)) in random_cases(cfg, 300, cfg.n_slow_mdps).iter().enumerate() {
        let base = RiskConfig::new(0.5, *gamma, 0.0).expect("valid");
        let (worst, best) = match (
            solve_within(mdp, pi, &base, BackupKind::Worst, 1e-11, 1_000_000),
            solve_within(mdp, pi, &base, BackupKind::Best, 1e-11, 1_000_000),
        ) {
            (Ok(w), Ok(b)) => (w, b),
            (Err(e), _) | (_, Err(e)) => {
                t.error(format!("mdp {i} extremes"), e);
                continue;
            }
        };
        for (taus, target) in [(&LOW_TAUS, &worst), (&HIGH_TAUS, &best)] {
            let mut prev_gap = f64::INFINITY;
            for &tau in taus.iter() {
                let risk = base.with_tau(tau).expect("valid");
                let v = match solve_within(mdp, pi, &risk, BackupKind::Expectile, 1e-10, 20_000_000) {
                    Ok(v) => v,
                    Err(e) => {
                        t.error(format!("mdp {i} tau {tau}"), e);
                        continue;
                    }
                };
                for s in 0..v.len() {
                    t.le(worst[s] - v[s], 1e-8, || format!("mdp {i} state {s} tau {tau} below worst"));
                    t.le(v[s] - best[s], 1e-8, || format!("mdp {i} state {s} tau {tau} above best"));
                }
                let gap = v.distance(target);
                t.le(gap, prev_gap + 1e-8, || format!("mdp {i} tau {tau} moved away from the extreme"));
                prev_gap = gap;
            }
        }
    }
    t.done()
}

/// Check 4: multi-step contraction, fixed-point identity with the one-step
/// operator, and monotonicity in tau.
pub fn check_multistep(cfg: &VerifyConfig) -> CheckReport {
    let mut t = Tracker::new(4, "multistep");
    for (i, (mdp, pi, gamma)) in random_cases(cfg, 400, cfg.n_slow_mdps).iter().enumerate() {
        for &lambda in &MULTISTEP_LAMBDAS {
            let n_terms = multistep_terms(lambda, 1e-12);
            let mut prev: Option<ValueTable> = None;
            for &tau in &[0.1, 0.3, 0.5, 0.7, 0.9] {
                let risk = RiskConfig::new(tau, *gamma, lambda).expect("valid");
                let bound = gamma_tau_lambda(&risk) + 1e-9;
                match observed_ratios(mdp.n_states(), |v| multistep_backup(v, mdp, pi, &risk, n_terms), 2000) {
                    Ok(rs) => {
                        for r in rs {
                            t.le(r, bound, || format!("mdp {i} lambda {lambda} tau {tau} ratio"));
                        }
                    }
                    Err(e) => t.error(format!("mdp {i} lambda {lambda} tau {tau}"), e),
                }
                let one = solve_within(mdp, pi, &risk, BackupKind::Expectile, 1e-9, 5_000_000);
                let multi = solve_multistep_within(mdp, pi, &risk, n_terms, 1e-9, 5_000_000);
                match (one, multi) {
                    (Ok(a), Ok(b)) => {
                        t.le(a.distance(&b), 1e-6, || format!("mdp {i} lambda {lambda} tau {tau} fixed points differ"));
                        if let Some(p) = &prev {
                            for s in 0..b.len() {
                                t.le(p[s] - b[s], 1e-8, || format!("mdp {i} lambda {lambda} tau {tau} state {s} not monotone"));
                            }
                        }
                        prev = Some(b);
                    }
                    (Err(e), _) | (_, Err(e)) => t.error(format!("mdp {i} lambda {lambda} tau {tau}"), e),
                }
            }
        }
    }
    t.done()
}

/// Random trajectory with episode boundaries and a cut final segment.
pub fn random_trajectory(rng: &mut dyn RngCore, len: usize, done_prob: f64) -> Trajectory {
    let rewards: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..=1.0)).collect();
    let values: Vec<f64> = (0..len).map(|_| rng.gen_range(-2.0..=2.0)).collect();
    let dones: Vec<bool> = (0..len).map(|_| rng.gen_bool(done_prob)).collect();
    Trajectory::from_scalars(&rewards, &values, &dones, rng.gen_range(-2.0..=2.0)).expect("equal lengths")
}

/// Brute-force n-step return from `t`: `sum_{l<n} gamma^l r_{t+l} +
/// gamma^n V(s_{t+n})`, with the bootstrap after the last step and zero
/// after a terminal step.
pub fn n_step_return(traj: &Trajectory, gamma: f64, t: usize, n: usize) -> f64 {
    let mut g = 0.0;
    let mut disc = 1.0;
    for l in 0..n {
        let s = &traj.steps[t + l];
        g += disc * s.reward;
        disc *= gamma;
        if s.done {
            return g;
        }
    }
    let k = t + n;
    let tail = if k == traj.len() { traj.bootstrap_value } else { traj.steps[k].value };
    g + disc * tail
}

/// Plain GAE recursion.
pub fn gae(traj: &Trajectory, gamma: f64, lambda: f64) -> Vec<f64> {
    let n = traj.len();
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    for t in (0..n).rev() {
        let s = &traj.steps[t];
        let next_v = if s.done {
            0.0
        } else if t + 1 == n {
            traj.bootstrap_value
        } else {
            traj.steps[t + 1].value
        };
        let delta = s.reward + gamma * next_v - s.value;
        let carry = if s.done || t + 1 == n { 0.0 } else { next_adv };
        adv[t] = delta + gamma * lambda * carry;
        next_adv = adv[t];
    }
    adv
}

/// Check 5: at tau = 0.5, alpha = 1 the return table holds n-step returns
/// and the advantages reduce to GAE where the truncated weight is
/// negligible.
pub fn check_gae_recovery(cfg: &VerifyConfig) -> CheckReport {
    let mut t = Tracker::new(5, "gae-recovery");
    let mut rng = seeded_rng(cfg.seed, 500);
    for k in 0..cfg.n_trajectories {
        let gamma = GAMMAS[k % GAMMAS.len()];
        let lambda = 0.5;
        let done_prob = if k % 2 == 0 { 0.01 } else { 0.1 };
        let traj = random_trajectory(&mut rng, 120, done_prob);
        let risk = RiskConfig::neutral(gamma, lambda).expect("valid");
        let table = match build_return_table(&traj, &risk) {
            Ok(t) => t,
            Err(e) => {
                t.error(format!("trajectory {k}"), e);
                continue;
            }
        };
        for col in 0..traj.len() {
            for n in 1..=table.depth(col) {
                let want = n_step_return(&traj, gamma, col, n);
                let got = table.get(n, col).expect("populated");
                t.le((got - want).abs(), 1e-9 * (1.0 + want.abs()), || format!("trajectory {k} row {n} column {col}"));
            }
        }
        let adv = match compute_advantages(&traj, &risk) {
            Ok(a) => a.advantages,
            Err(e) => {
                t.error(format!("trajectory {k}"), e);
                continue;
            }
        };
        let oracle = gae(&traj, gamma, lambda);
        for col in 0..traj.len() {
            if lambda.powi(table.depth(col) as i32) <= 1e-12 {
                t.le((adv[col] - oracle[col]).abs(), 1e-6 * (1.0 + adv[col].abs()), || format!("trajectory {k} step {col}"));
            }
        }
    }
    t.done()
}

fn gradient_errors(params: &ParamVector, spec: &MlpSpec, batch: &[LossSample], loss: &LossSpec) -> Result<f64> {
    let out = backward(params, spec, batch, loss)?;
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for i in 0..params.len() {
        let mut p = params.clone();
        p.as_mut_slice()[i] += h;
        let up = loss_value(&p, spec, batch, loss)?;
        p.as_mut_slice()[i] -= 2.0 * h;
        let down = loss_value(&p, spec, batch, loss)?;
        let fd = (up - down) / (2.0 * h);
        let g = out.grad.as_slice()[i];
        let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// Check 6: exact gradients of the value and policy losses against central
/// differences, for categorical and Gaussian heads.
pub fn check_gradients(cfg: &VerifyConfig) -> CheckReport {
    let mut t = Tracker::new(6, "gradients");
    for seed in 0..cfg.n_gradient_seeds as u64 {
        let mut rng = seeded_rng(cfg.seed, 600 + seed);
        let activation = [Activation::Tanh, Activation::Linear][seed as usize % 2];
        let input = rng.gen_range(2..=4);
        // Value network: input -> 6 -> 1, at most 37 parameters.
        let spec = MlpSpec::new(input, 1).with_hidden(vec![6]).with_activation(activation);
        let params = random_params(&spec.layout(), &mut rng);
        let batch: Vec<LossSample> = (0..5)
            .map(|_| LossSample {
                obs: (0..input).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                action: Action::Discrete(0),
                old_log_prob: 0.0,
                advantage: 0.0,
                target: rng.gen_range(-1.0..1.0),
            })
            .collect();
        match gradient_errors(&params, &spec, &batch, &LossSpec::ValueMse) {
            Ok(e) => t.le(e, 1e-4, || format!("value seed {seed}")),
            Err(e) => t.error(format!("value seed {seed}"), e),
        }
        for head in [PolicyHead::Categorical { n: 3 }, PolicyHead::Gaussian { dim: 2 }] {
            let net = PolicyNet::new(input, vec![5], activation, head).expect("valid");
            let params = random_params(&net.layout(), &mut rng);
            let batch: Vec<LossSample> = (0..5)
                .map(|_| {
                    let obs: Vec<f64> = (0..input).map(|_| rng.gen_range(-1.0..1.0)).collect();
                    let logits = net.logits(&params, &obs).expect("shapes match");
                    let action = crate::neural::sample(&head, &logits, &mut rng).expect("finite logits");
                    let lp = log_prob(&head, &logits, &action).expect("valid action");
                    // Ratios stay within 5% of one, away from the clip kinks.
                    LossSample {
                        obs,
                        action,
                        old_log_prob: lp + rng.gen_range(-0.05..0.05),
                        advantage: rng.gen_range(-1.0..1.0),
                        target: 0.0,
                    }
                })
                .collect();
            let loss = LossSpec::ClippedSurrogate {
                head,
                clip_epsilon: 0.2,
                entropy_coef: 0.01,
            };
            match gradient_errors(&params, &net.mlp, &batch, &loss) {
                Ok(e) => t.le(e, 1e-4, || format!("policy {head:?} seed {seed}")),
                Err(e) => t.error(format!("policy seed {seed}"), e),
            }
        }
    }
    t.done()
}

fn random_params(layout: &crate::neural::Layout, rng: &mut dyn RngCore) -> ParamVector {
    let data = (0..layout.total()).map(|_| rng.gen_range(-0.8..0.8)).collect();
    ParamVector::from_vec(layout.clone(), data).expect("finite values")
}

/// Check 7: on deterministic dynamics with a deterministic policy the fixed
/// point does not depend on tau.
pub fn check_deterministic_invariance(cfg: &VerifyConfig) -> CheckReport {
    let mut t = Tracker::new(7, "deterministic-invariance");
    let mut rng = seeded_rng(cfg.seed, 700);
    for i in 0..cfg.n_mdps {
        let (mdp, pi) = random_deterministic_mdp(&mut rng, cfg.max_states, cfg.max_actions);
        let gamma = GAMMAS[i % GAMMAS.len()];
        let mut reference: Option<ValueTable> = None;
        for &tau in &TAU_GRID {
            let risk = RiskConfig::new(tau, gamma, 0.0).expect("valid");
            match solve_within(&mdp, &pi, &risk, BackupKind::Expectile, 1e-12, 5_000_000) {
                Ok(v) => match &reference {
                    Some(r) => t.le(r.distance(&v), 1e-10, || format!("mdp {i} tau {tau}")),
                    None => reference = Some(v),
                },
                Err(e) => t.error(format!("mdp {i} tau {tau}"), e),
            }
        }
    }
    t.done()
}

/// Runs checks 1 to 7.
pub fn run_verification(cfg: &VerifyConfig) -> VerifyReport {
    VerifyReport {
        seed: cfg.seed,
        checks: vec![
            check_contraction(cfg),
            check_monotonicity(cfg),
            check_limits(cfg),
            check_multistep(cfg),
            check_gae_recovery(cfg),
            check_gradients(cfg),
            check_deterministic_invariance(cfg),
        ],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::validate_mdp;

    fn quick() -> VerifyConfig {
        VerifyConfig {
            n_mdps: 6,
            n_slow_mdps: 2,
            n_trajectories: 4,
            n_gradient_seeds: 2,
            ..VerifyConfig::default()
        }
    }

    #[test]
    fn generated_mdps_are_valid() {
        let mut rng = seeded_rng(1, 0);
        for _ in 0..200 {
            let (m, _) = random_mdp(&mut rng, 10, 3);
            assert!(validate_mdp(&m).is_empty());
            let (d, _) = random_deterministic_mdp(&mut rng, 10, 3);
            assert!(validate_mdp(&d).is_empty() && d.is_deterministic());
        }
    }

    #[test]
    fn quick_suite_passes() {
        let report = run_verification(&quick());
        assert!(report.all_passed(), "{}", report.to_text());
        assert_eq!(report.checks.iter().map(|c| c.id).collect::<Vec<_>>(), (1..=7).collect::<Vec<_>>());
    }

    #[test]
    fn injected_fault_breaks_contraction() {
        let cfg = VerifyConfig {
            fault: Some(Fault::ExpansiveOperator),
            ..quick()
        };
        let c = check_contraction(&cfg);
        assert!(!c.passed);
        assert!(!c.failures.is_empty());
    }

    #[test]
    fn gae_oracle_matches_hand_value() {
        let traj = Trajectory::from_scalars(&[1.0, 1.0], &[0.0, 0.0], &[false, true], 0.0).unwrap();
        let a = gae(&traj, 0.9, 0.5);
        assert!((a[0] - (1.0 + 0.45 * 1.0 + 0.9 * 0.0)).abs() < 1e-15);
        assert_eq!(n_step_return(&traj, 0.9, 0, 2), 1.9);
    }
}
