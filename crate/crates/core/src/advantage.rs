//! Sample-form multi-step expectile returns and advantages.
//!
//! The expectile backup is nonlinear, so the n-step values cannot be
//! telescoped the way GAE telescopes TD errors. Instead a triangular table
//! is kept: row `n`, column `t` holds the n-times-iterated sample backup at
//! `s_t`, computed from row `n - 1` at column `t + 1`. Each column is then
//! mixed with exponential weights normalized over the `d_t` rows that exist
//! before the episode ends (or the rollout is cut, or the row cap is hit).
//!
//! At `tau = 0.5`, `alpha = 1` every entry is the ordinary n-step return and
//! the mixture reduces to GAE plus the value baseline. For other risk levels
//! the sample operator is a biased estimate of the exact operator; no
//! attempt is made to correct that bias.

use crate::error::{domain, Result};
use crate::model::{RiskConfig, Trajectory};

/// One sample backup: `v + 2 alpha (tau [d]+ + (1 - tau) [d]-)` with
/// `d = r + gamma v_next (1 - done) - v`.
pub fn one_step_sample(v_s: f64, v_target_next: f64, reward: f64, cfg: &RiskConfig, done: bool) -> f64 {
    let next = if done { 0.0 } else { v_target_next };
    let delta = reward + cfg.gamma() * next - v_s;
    let weighted = if delta > 0.0 {
        cfg.tau() * delta
    } else {
        (1.0 - cfg.tau()) * delta
    };
    v_s + 2.0 * cfg.alpha() * weighted
}

/// Triangular table of iterated sample backups, stored column-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ReturnTable {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    depth: Vec<usize>,
}

impl ReturnTable {
    /// Number of rows kept: `min(n_max, longest segment)`.
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn len(&self) -> usize {
        self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.cols == 0
    }

    /// Valid rows `d_t` for column `t`.
    pub fn depth(&self, t: usize) -> usize {
        self.depth[t]
    }

    /// Entry for `n`-step row (1-based) and column `t`; `None` outside the
    /// triangle.
    pub fn get(&self, n: usize, t: usize) -> Option<f64> {
        (n >= 1 && n <= self.depth[t]).then(|| self.data[t * self.rows + n - 1])
    }

    /// The populated part of column `t`, row 1 first.
    pub fn column(&self, t: usize) -> &[f64] {
        let start = t * self.rows;
        &self.data[start..start + self.depth[t]]
    }
}

/// Builds the return table for a trajectory.
pub fn build_return_table(traj: &Trajectory, cfg: &RiskConfig) -> Result<ReturnTable> {
    if traj.is_empty() {
        return Err(domain("cannot estimate returns from an empty trajectory"));
    }
    cfg.validate()?;
    let len = traj.len();
    let n_max = cfg.n_max();

    // Distance to the end of each segment, counting the step itself.
    let mut raw_depth = vec![0usize; len];
    for t in (0..len).rev() {
        let s = &traj.steps[t];
        raw_depth[t] = if s.done || t + 1 == len { 1 } else { raw_depth[t + 1] + 1 };
    }
    let depth: Vec<usize> = raw_depth.iter().map(|&d| d.min(n_max)).collect();
    let rows = depth.iter().copied().max().unwrap_or(1);

    let mut data = vec![0.0; rows * len];
    for t in (0..len).rev() {
        let step = &traj.steps[t];
        let next_value = if t + 1 == len {
            traj.bootstrap_value
        } else {
            traj.steps[t + 1].value
        };
        data[t * rows] = one_step_sample(step.value, next_value, step.reward, cfg, step.done);
        for n in 2..=depth[t] {
            // depth[t] >= 2 implies the step is not terminal and t + 1 exists.
            let prev = data[(t + 1) * rows + n - 2];
            data[t * rows + n - 1] = one_step_sample(step.value, prev, step.reward, cfg, step.done);
        }
    }
    Ok(ReturnTable {
        rows,
        cols: len,
        data,
        depth,
    })
}

/// Normalized mixture weights `(1 - lambda) / (1 - lambda^d) lambda^(h-1)`,
/// `h = 1..=d`. `lambda = 0` puts all weight on the first row.
pub fn lambda_weights(lambda: f64, d: usize) -> Vec<f64> {
    let mut w = vec![0.0; d];
    if d == 0 {
        return w;
    }
    if lambda == 0.0 {
        w[0] = 1.0;
        return w;
    }
    let norm = (1.0 - lambda) / (1.0 - lambda.powi(d as i32));
    let mut pow = 1.0;
    for x in w.iter_mut() {
        *x = norm * pow;
        pow *= lambda;
    }
    w
}

/// Per-step mixed value targets.
pub fn lambda_returns(table: &ReturnTable, cfg: &RiskConfig) -> Vec<f64> {
    let lambda = cfg.lambda();
    (0..table.len())
        .map(|t| {
            let col = table.column(t);
            lambda_weights(lambda, col.len())
                .iter()
                .zip(col)
                .map(|(w, x)| w * x)
                .sum()
        })
        .collect()
}

/// Advantages with their value targets; `targets[t] = value[t] + advantages[t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageBatch {
    pub advantages: Vec<f64>,
    pub targets: Vec<f64>,
}

pub fn compute_advantages(traj: &Trajectory, cfg: &RiskConfig) -> Result<AdvantageBatch> {
    let table = build_return_table(traj, cfg)?;
    let mixed = lambda_returns(&table, cfg);
    let advantages: Vec<f64> = mixed.iter().zip(&traj.steps).map(|(g, s)| g - s.value).collect();
    // Rebuild targets from the advantages so the identity holds bit-for-bit.
    let targets = advantages.iter().zip(&traj.steps).map(|(a, s)| s.value + a).collect();
    Ok(AdvantageBatch { advantages, targets })
}
