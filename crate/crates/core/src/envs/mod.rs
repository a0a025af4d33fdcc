//! Built-in environments.

pub mod duel;
pub mod gridworld;

use std::fmt::Write as _;

use rand::RngCore;

pub use duel::{DuelConfig, DuelMove, DuelState, GridDuel, Outcome};
pub use gridworld::{Cell, GridConfig, GridState, Move, WindyGridworld};

use crate::error::{domain, Result};

/// Per-cell occupancy frequencies of a gridworld, indexed `[row][col]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Visitation {
    pub width: usize,
    pub height: usize,
    pub freq: Vec<f64>,
    /// Lengths of the episodes that reached the flag.
    pub success_lengths: Vec<usize>,
    pub episodes: usize,
}

impl Visitation {
    pub fn at(&self, cell: Cell) -> f64 {
        self.freq[cell.0 * self.width + cell.1]
    }

    /// Total frequency mass on the given cells.
    pub fn mass(&self, cells: &[Cell]) -> f64 {
        cells.iter().map(|&c| self.at(c)).sum()
    }

    pub fn mean_success_length(&self) -> Option<f64> {
        if self.success_lengths.is_empty() {
            None
        } else {
            Some(self.success_lengths.iter().sum::<usize>() as f64 / self.success_lengths.len() as f64)
        }
    }

    /// One CSV line per grid row, top row first.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for r in 0..self.height {
            let row: Vec<String> = (0..self.width).map(|c| format!("{:.6}", self.at((r, c)))).collect();
            let _ = writeln!(out, "{}", row.join(","));
        }
        out
    }
}

/// Rolls `episodes` episodes of `policy` and counts every occupied cell,
/// including the start cell of each episode; the counts are normalized to sum
/// to one over all cells.
pub fn visitation_counts<P>(config: &GridConfig, mut policy: P, episodes: usize, rng: &mut dyn RngCore) -> Result<Visitation>
where
    P: FnMut(&GridState, &[f64], &mut dyn RngCore) -> Result<Move>,
{
    if episodes == 0 {
        return Err(domain("visitation needs at least one episode"));
    }
    config.validate()?;
    let mut counts = vec![0u64; config.n_cells()];
    let mut success_lengths = Vec::new();
    for _ in 0..episodes {
        let mut state = config.initial_state();
        counts[state.cell.0 * config.width + state.cell.1] += 1;
        while !state.done {
            let obs = config.state_encoding(&state);
            let m = policy(&state, &obs, rng)?;
            let (next, reward, _) = config.step(&state, m, rng)?;
            counts[next.cell.0 * config.width + next.cell.1] += 1;
            if reward > 0.0 {
                success_lengths.push(next.steps);
            }
            state = next;
        }
    }
    let total: u64 = counts.iter().sum();
    Ok(Visitation {
        width: config.width,
        height: config.height,
        freq: counts.iter().map(|&c| c as f64 / total as f64).collect(),
        success_lengths,
        episodes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn frequencies_sum_to_one() {
        let g = GridConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let v = visitation_counts(&g, |_, _, _| Ok(Move::Right), 1000, &mut rng).unwrap();
        assert!((v.freq.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(v.episodes, 1000);
        assert!(!v.success_lengths.is_empty());
        assert_eq!(v.to_csv().lines().count(), 4);
    }

    #[test]
    fn calm_policy_into_wall_stays_on_start() {
        let g = GridConfig {
            wind_prob: 0.0,
            ..GridConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let v = visitation_counts(&g, |_, _, _| Ok(Move::Left), 3, &mut rng).unwrap();
        assert_eq!(v.at(g.start), 1.0);
        assert_eq!(v.mean_success_length(), None);
    }

    #[test]
    fn zero_episodes_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(visitation_counts(&GridConfig::default(), |_, _, _| Ok(Move::Up), 0, &mut rng).is_err());
    }
}
