//! Exact tabular policy-evaluation operators.
//!
//! * the expectile operator, which scales positive TD errors by `tau` and
//!   negative ones by `1 - tau`;
//! * the worst- and best-case operators, which take the min / max over
//!   outcomes that can actually occur under the policy and the dynamics;
//! * the multi-step expectile operator, an exponentially weighted mixture of
//!   repeated expectile backups.
//!
//! All solvers iterate from `v = 0` and record the observed contraction
//! ratio `|Δ_{k+1}| / |Δ_k|` (sup norm) at every iteration whose previous
//! change is still well above floating-point resolution.

use std::ops::{Deref, DerefMut};

use crate::error::{domain, Error, Result};
use crate::model::{check_policy_shape, RiskConfig, TabularMdp, TabularPolicy};

pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_MAX_ITER: usize = 200_000;

/// Ratios are only recorded while the previous sup-norm change is at least
/// this fraction of `1 + |v|`. Below that, rounding in `v` dominates the
/// difference and the ratio no longer measures the operator.
pub const RATIO_FLOOR: f64 = 1e-6;

/// State values.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueTable(pub Vec<f64>);

impl ValueTable {
    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    /// Sup-norm distance.
    pub fn distance(&self, other: &ValueTable) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn sup_norm(&self) -> f64 {
        self.0.iter().map(|x| x.abs()).fold(0.0, f64::max)
    }
}

impl Deref for ValueTable {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ValueTable {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackupKind {
    Expectile,
    Worst,
    Best,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixedPointResult {
    pub values: ValueTable,
    pub iterations: usize,
    /// Sup-norm change of the last update.
    pub residual: f64,
    pub contraction_estimates: Vec<f64>,
}

/// Modulus of the one-step expectile operator:
/// `1 - 2 alpha (1 - gamma) min(tau, 1 - tau)`.
pub fn gamma_tau(cfg: &RiskConfig) -> f64 {
    1.0 - 2.0 * cfg.alpha() * (1.0 - cfg.gamma()) * cfg.tau().min(1.0 - cfg.tau())
}

/// Modulus of the multi-step operator:
/// `(1 - lambda) gamma_tau / (1 - lambda gamma_tau)`.
pub fn gamma_tau_lambda(cfg: &RiskConfig) -> f64 {
    let g = gamma_tau(cfg);
    let l = cfg.lambda();
    (1.0 - l) * g / (1.0 - l * g)
}

fn check_inputs(v: &ValueTable, mdp: &TabularMdp, pi: &TabularPolicy) -> Result<()> {
    check_policy_shape(mdp, pi)?;
    if v.len() != mdp.n_states() {
        return Err(Error::Shape {
            what: "value table",
            expected: mdp.n_states(),
            got: v.len(),
        });
    }
    Ok(())
}

#[inline]
fn expectile_weight(delta: f64, tau: f64) -> f64 {
    if delta > 0.0 {
        tau * delta
    } else {
        (1.0 - tau) * delta
    }
}

/// One application of the expectile operator. Terminal states keep their
/// value.
pub fn expectile_backup(v: &ValueTable, mdp: &TabularMdp, pi: &TabularPolicy, cfg: &RiskConfig) -> Result<ValueTable> {
    cfg.validate()?;
    check_inputs(v, mdp, pi)?;
    Ok(expectile_backup_unchecked(v, mdp, pi, cfg))
}

fn expectile_backup_unchecked(v: &ValueTable, mdp: &TabularMdp, pi: &TabularPolicy, cfg: &RiskConfig) -> ValueTable {
    let (tau, gamma, two_alpha) = (cfg.tau(), cfg.gamma(), 2.0 * cfg.alpha());
    let mut out = v.clone();
    for s in 0..mdp.n_states() {
        if mdp.is_terminal(s) {
            continue;
        }
        let mut acc = 0.0;
        for a in 0..mdp.n_actions() {
            let pa = pi.prob(s, a);
            if pa == 0.0 {
                continue;
            }
            for t in mdp.outcomes(s, a) {
                let delta = t.reward + gamma * v[t.next] - v[s];
                acc += pa * t.prob * expectile_weight(delta, tau);
            }
        }
        out[s] = v[s] + two_alpha * acc;
    }
    out
}

fn extreme_backup(v: &ValueTable, mdp: &TabularMdp, pi: &TabularPolicy, gamma: f64, best: bool) -> Result<ValueTable> {
    let mut out = v.clone();
    for s in 0..mdp.n_states() {
        if mdp.is_terminal(s) {
            continue;
        }
        let mut extreme: Option<f64> = None;
        for a in 0..mdp.n_actions() {
            if pi.prob(s, a) <= 0.0 {
                continue;
            }
            for t in mdp.outcomes(s, a).iter().filter(|t| t.prob > 0.0) {
                let q = t.reward + gamma * v[t.next];
                extreme = Some(match extreme {
                    None => q,
                    Some(e) if best => e.max(q),
                    Some(e) => e.min(q),
                });
            }
        }
        out[s] = extreme.ok_or_else(|| domain(format!("state {s} has no supported transition")))?;
    }
    Ok(out)
}

/// Minimum of `r + gamma v(s')` over outcomes with `pi(a|s) > 0` and
/// `p(s'|s,a) > 0`.
pub fn worst_case_backup(v: &ValueTable, mdp: &TabularMdp, pi: &TabularPolicy, gamma: f64) -> Result<ValueTable> {
    check_inputs(v, mdp, pi)?;
    extreme_backup(v, mdp, pi, gamma, false)
}

/// Maximum of `r + gamma v(s')` over supported outcomes.
pub fn best_case_backup(v: &ValueTable, mdp: &TabularMdp, pi: &TabularPolicy, gamma: f64) -> Result<ValueTable> {
    check_inputs(v, mdp, pi)?;
    extreme_backup(v, mdp, pi, gamma, true)
}

/// Weights of the truncated mixture: `(1 - lambda) lambda^(n-1)` for
/// `n < n_terms`, with the geometric tail folded into the last term so the
/// weights sum to one.
pub fn multistep_weights(lambda: f64, n_terms: usize) -> Vec<f64> {
    let mut w = Vec::with_capacity(n_terms);
    let mut pow = 1.0;
    for n in 1..=n_terms {
        if n == n_terms {
            w.push(pow);
        } else {
            w.push((1.0 - lambda) * pow);
            pow *= lambda;
        }
    }
    w
}

/// Smallest number of terms whose folded tail weight `lambda^(n-1)` is at
/// most `eps`.
pub fn multistep_terms(lambda: f64, eps: f64) -> usize {
    if lambda <= 0.0 {
        return 1;
    }
    1 + (eps.ln() / lambda.ln()).ceil().max(0.0) as usize
}

/// Truncated multi-step expectile operator.
pub fn multistep_backup(
    v: &ValueTable,
    mdp: &TabularMdp,
    pi: &TabularPolicy,
    cfg: &RiskConfig,
    n_terms: usize,
) -> Result<ValueTable> {
    if n_terms == 0 {
        return Err(domain("multistep_backup needs at least one term"));
    }
    cfg.validate()?;
    check_inputs(v, mdp, pi)?;
    Ok(multistep_unchecked(v, mdp, pi, cfg, n_terms))
}

fn multistep_unchecked(v: &ValueTable, mdp: &TabularMdp, pi: &TabularPolicy, cfg: &RiskConfig, n_terms: usize) -> ValueTable {
    let weights = multistep_weights(cfg.lambda(), n_terms);
    let mut acc = ValueTable::zeros(v.len());
    let mut cur = v.clone();
    for w in weights {
        cur = expectile_backup_unchecked(&cur, mdp, pi, cfg);
        for (a, c) in acc.iter_mut().zip(cur.iter()) {
            *a += w * c;
        }
    }
    acc
}

/// Iterates `backup` from zero until the sup-norm change drops to `tol`.
pub fn iterate_to_fixed_point<F>(n_states: usize, mut backup: F, tol: f64, max_iter: usize) -> Result<FixedPointResult>
where
    F: FnMut(&ValueTable) -> Result<ValueTable>,
{
    if !(tol > 0.0) {
        return Err(domain(format!("tolerance {tol} must be positive")));
    }
    let mut v = ValueTable::zeros(n_states);
    let mut prev_change: Option<f64> = None;
    let mut ratios = Vec::new();
    let mut residual = f64::INFINITY;
    for iter in 1..=max_iter {
        let next = backup(&v)?;
        let change = next.distance(&v);
        if !change.is_finite() {
            return Err(Error::NonFinite(format!("fixed-point iterate {iter}")));
        }
        if let Some(prev) = prev_change {
            if prev >= RATIO_FLOOR * (1.0 + v.sup_norm()) {
                ratios.push(change / prev);
            }
        }
        prev_change = Some(change);
        residual = change;
        v = next;
        if change <= tol {
            return Ok(FixedPointResult {
                values: v,
                iterations: iter,
                residual,
                contraction_estimates: ratios,
            });
        }
    }
    Err(Error::NoConvergence {
        iterations: max_iter,
        residual,
    })
}

fn check_solver_inputs(mdp: &TabularMdp, pi: &TabularPolicy, cfg: &RiskConfig) -> Result<()> {
    cfg.validate()?;
    if cfg.gamma() >= 1.0 {
        return Err(domain("exact fixed points need gamma < 1"));
    }
    mdp.ensure_valid()?;
    check_policy_shape(mdp, pi)
}

/// Fixed point of the chosen one-step operator.
pub fn solve_fixed_point(
    mdp: &TabularMdp,
    pi: &TabularPolicy,
    cfg: &RiskConfig,
    kind: BackupKind,
    tol: f64,
    max_iter: usize,
) -> Result<FixedPointResult> {
    check_solver_inputs(mdp, pi, cfg)?;
    let gamma = cfg.gamma();
    match kind {
        BackupKind::Expectile => iterate_to_fixed_point(
            mdp.n_states(),
            |v| Ok(expectile_backup_unchecked(v, mdp, pi, cfg)),
            tol,
            max_iter,
        ),
        BackupKind::Worst => iterate_to_fixed_point(mdp.n_states(), |v| extreme_backup(v, mdp, pi, gamma, false), tol, max_iter),
        BackupKind::Best => iterate_to_fixed_point(mdp.n_states(), |v| extreme_backup(v, mdp, pi, gamma, true), tol, max_iter),
    }
}

/// Fixed point of the truncated multi-step operator.
pub fn solve_multistep_fixed_point(
    mdp: &TabularMdp,
    pi: &TabularPolicy,
    cfg: &RiskConfig,
    n_terms: usize,
    tol: f64,
    max_iter: usize,
) -> Result<FixedPointResult> {
    if n_terms == 0 {
        return Err(domain("multistep operator needs at least one term"));
    }
    check_solver_inputs(mdp, pi, cfg)?;
    iterate_to_fixed_point(mdp.n_states(), |v| Ok(multistep_unchecked(v, mdp, pi, cfg, n_terms)), tol, max_iter)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// One decision state, one action, two equiprobable terminal successors
    /// paying 0 and 1.
    fn bandit() -> TabularMdp {
        let mut m = TabularMdp::new(3, 1).unwrap();
        m.add_transition(0, 0, 1, 0.5, 0.0).unwrap();
        m.add_transition(0, 0, 2, 0.5, 1.0).unwrap();
        m.set_terminal(1).unwrap();
        m.set_terminal(2).unwrap();
        m
    }

    fn chain() -> TabularMdp {
        // 0 -> 1 -> 2 (terminal), rewards 0.5 and -1.
        let mut m = TabularMdp::new(3, 1).unwrap();
        m.add_transition(0, 0, 1, 1.0, 0.5).unwrap();
        m.add_transition(1, 0, 2, 1.0, -1.0).unwrap();
        m.set_terminal(2).unwrap();
        m
    }

    #[test]
    fn neutral_backup_is_standard_bellman() {
        let m = bandit();
        let pi = TabularPolicy::uniform(3, 1);
        let cfg = RiskConfig::neutral(0.9, 0.0).unwrap();
        let v = ValueTable(vec![0.3, -0.2, 0.7]);
        let out = expectile_backup(&v, &m, &pi, &cfg).unwrap();
        let expected = 0.5 * (0.0 + 0.9 * -0.2) + 0.5 * (1.0 + 0.9 * 0.7);
        assert!((out[0] - expected).abs() < 1e-15);
        assert_eq!(out[1], -0.2);
        assert_eq!(out[2], 0.7);
    }

    #[test]
    fn bandit_backup_hand_value() {
        let cfg = RiskConfig::new(0.9, 0.9, 0.0).unwrap();
        let out = expectile_backup(&ValueTable::zeros(3), &bandit(), &TabularPolicy::uniform(3, 1), &cfg).unwrap();
        assert!((out[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn backup_at_standard_fixed_point_is_identity() {
        let cfg = RiskConfig::new(0.2, 0.9, 0.0).unwrap();
        let v = ValueTable(vec![0.5 - 0.9, -1.0, 0.0]);
        let out = expectile_backup(&v, &chain(), &TabularPolicy::uniform(3, 1), &cfg).unwrap();
        assert!(out.distance(&v) < 1e-15);
    }

    #[test]
    fn bandit_extremes() {
        let pi = TabularPolicy::uniform(3, 1);
        let v = ValueTable::zeros(3);
        assert_eq!(worst_case_backup(&v, &bandit(), &pi, 0.9).unwrap()[0], 0.0);
        assert_eq!(best_case_backup(&v, &bandit(), &pi, 0.9).unwrap()[0], 1.0);
    }

    #[test]
    fn extremes_ignore_unsupported_actions() {
        let mut m = TabularMdp::new(2, 2).unwrap();
        m.add_transition(0, 0, 1, 1.0, 0.25).unwrap();
        m.add_transition(0, 1, 1, 1.0, 10.0).unwrap();
        m.set_terminal(1).unwrap();
        let pi = TabularPolicy::deterministic(&[0, 0], 2).unwrap();
        let v = ValueTable::zeros(2);
        assert_eq!(best_case_backup(&v, &m, &pi, 0.9).unwrap()[0], 0.25);
        assert_eq!(worst_case_backup(&v, &m, &pi, 0.9).unwrap()[0], 0.25);
    }

    #[test]
    fn extremes_on_deterministic_mdp_match_standard_backup() {
        let cfg = RiskConfig::neutral(0.9, 0.0).unwrap();
        let pi = TabularPolicy::uniform(3, 1);
        let v = ValueTable(vec![1.0, 2.0, 0.0]);
        let std = expectile_backup(&v, &chain(), &pi, &cfg).unwrap();
        assert_eq!(worst_case_backup(&v, &chain(), &pi, 0.9).unwrap(), std);
        assert_eq!(best_case_backup(&v, &chain(), &pi, 0.9).unwrap(), std);
    }

    #[test]
    fn unsupported_state_is_an_error() {
        let mut m = TabularMdp::new(2, 1).unwrap();
        m.add_transition(0, 0, 1, 0.0, 1.0).unwrap();
        m.set_terminal(1).unwrap();
        let err = worst_case_backup(&ValueTable::zeros(2), &m, &TabularPolicy::uniform(2, 1), 0.9);
        assert!(matches!(err, Err(Error::Domain(_))));
    }

    #[test]
    fn bandit_fixed_point_is_tau() {
        let pi = TabularPolicy::uniform(3, 1);
        for i in 1..=9 {
            let tau = i as f64 / 10.0;
            let cfg = RiskConfig::new(tau, 0.9, 0.0).unwrap();
            let res = solve_fixed_point(&bandit(), &pi, &cfg, BackupKind::Expectile, 1e-12, DEFAULT_MAX_ITER).unwrap();
            assert!((res.values[0] - tau).abs() < 1e-9, "tau {tau}: {}", res.values[0]);
        }
        let cfg = RiskConfig::neutral(0.9, 0.0).unwrap();
        let worst = solve_fixed_point(&bandit(), &pi, &cfg, BackupKind::Worst, 1e-12, 100).unwrap();
        let best = solve_fixed_point(&bandit(), &pi, &cfg, BackupKind::Best, 1e-12, 100).unwrap();
        assert_eq!(worst.values[0], 0.0);
        assert_eq!(best.values[0], 1.0);
    }

    #[test]
    fn gamma_tau_values() {
        let c = RiskConfig::neutral(0.9, 0.0).unwrap();
        assert!((gamma_tau(&c) - 0.9).abs() < 1e-15);
        let c = RiskConfig::new(0.9, 0.99, 0.0).unwrap();
        assert!((gamma_tau(&c) - (1.0 - 0.02 * 0.1 / 1.8)).abs() < 1e-15);
        assert!((gamma_tau(&c) - 0.998_888_888_888_889).abs() < 1e-12);
        let c = RiskConfig::new(1e-9, 0.9, 0.0).unwrap();
        assert!(gamma_tau(&c) > 1.0 - 1e-9);
    }

    #[test]
    fn gamma_tau_lambda_values() {
        let c = RiskConfig::neutral(0.9, 0.0).unwrap();
        assert!((gamma_tau_lambda(&c) - 0.9).abs() < 1e-15);
        let c = c.with_lambda(0.5).unwrap();
        assert!((gamma_tau_lambda(&c) - 0.45 / 0.55).abs() < 1e-15);
        let c = c.with_lambda(1.0 - 1e-12).unwrap();
        assert!(gamma_tau_lambda(&c) < 1e-10);
    }

    #[test]
    fn multistep_special_cases() {
        let m = bandit();
        let pi = TabularPolicy::uniform(3, 1);
        let v = ValueTable(vec![0.1, 0.0, 0.0]);
        let cfg = RiskConfig::new(0.7, 0.9, 0.0).unwrap();
        let one = expectile_backup(&v, &m, &pi, &cfg).unwrap();
        assert_eq!(multistep_backup(&v, &m, &pi, &cfg, 5).unwrap(), one);

        let cfg = cfg.with_lambda(0.5).unwrap();
        let two = expectile_backup(&one, &m, &pi, &cfg).unwrap();
        let mixed = multistep_backup(&v, &m, &pi, &cfg, 2).unwrap();
        assert!((mixed[0] - (0.5 * one[0] + 0.5 * two[0])).abs() < 1e-15);
        assert!(multistep_backup(&v, &m, &pi, &cfg, 0).is_err());
    }

    #[test]
    fn multistep_preserves_one_step_fixed_point() {
        let pi = TabularPolicy::uniform(3, 1);
        let cfg = RiskConfig::new(0.3, 0.9, 0.8).unwrap();
        let fix = solve_fixed_point(&bandit(), &pi, &cfg, BackupKind::Expectile, 1e-14, DEFAULT_MAX_ITER).unwrap();
        let out = multistep_backup(&fix.values, &bandit(), &pi, &cfg, 40).unwrap();
        assert!(out.distance(&fix.values) < 1e-12);
    }

    #[test]
    fn weights_sum_to_one() {
        for &l in &[0.0, 0.3, 0.95] {
            for n in 1..20 {
                let s: f64 = multistep_weights(l, n).iter().sum();
                assert!((s - 1.0).abs() < 1e-14);
            }
        }
        assert_eq!(multistep_terms(0.0, 1e-12), 1);
        let n = multistep_terms(0.5, 1e-12);
        assert!(0.5f64.powi(n as i32 - 1) <= 1e-12 && 0.5f64.powi(n as i32 - 2) > 1e-12);
    }

    #[test]
    fn non_convergence_reports_residual() {
        let cfg = RiskConfig::new(0.01, 0.99, 0.0).unwrap();
        let err = solve_fixed_point(&bandit(), &TabularPolicy::uniform(3, 1), &cfg, BackupKind::Expectile, 1e-12, 3).unwrap_err();
        match err {
            Error::NoConvergence { iterations, residual } => {
                assert_eq!(iterations, 3);
                assert!(residual > 0.0);
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn solver_rejects_undiscounted_config() {
        let cfg = RiskConfig::neutral(1.0, 0.0).unwrap();
        assert!(solve_fixed_point(&chain(), &TabularPolicy::uniform(3, 1), &cfg, BackupKind::Expectile, 1e-10, 10).is_err());
    }
}
