//! GridDuel: a one-dimensional pushing game for two players.
//!
//! Cells are `0..length`. Player 0 starts left of centre and faces right,
//! player 1 starts right of centre and faces left; each loses by being pushed
//! past its own edge. Moves are simultaneous:
//!
//! * `Advance` steps toward the opponent. When the players touch, an advance
//!   pushes the opponent back one cell unless the opponent braces or advances
//!   too (both pushes cancel).
//! * `Retreat` steps away (clamped at the edge; a player is only ever lost by
//!   being pushed).
//! * `Brace` holds position and blocks pushes.
//!
//! Before resolution each player's action is independently replaced by a
//! uniformly random one with probability `slip_prob`. The winner gets +1, the
//! loser -1; reaching the step cap is a 0-0 draw. Observations are the two
//! positions normalized to `[0, 1]`, mirrored for player 1 so both players
//! see the game from the same side.

use rand::{Rng, RngCore};

use crate::error::{domain, Result};
use crate::model::{Action, ActionSpace, MarkovGame, PlayerStep};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DuelMove {
    Advance,
    Retreat,
    Brace,
}

impl DuelMove {
    pub const ALL: [DuelMove; 3] = [DuelMove::Advance, DuelMove::Retreat, DuelMove::Brace];

    pub fn from_action(action: &Action) -> Result<DuelMove> {
        match action {
            Action::Discrete(i) if *i < 3 => Ok(Self::ALL[*i]),
            _ => Err(domain(format!("invalid duel action {action:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DuelConfig {
    pub length: usize,
    pub slip_prob: f64,
    pub max_steps: usize,
}

impl Default for DuelConfig {
    fn default() -> Self {
        Self {
            length: 9,
            slip_prob: 0.2,
            max_steps: 50,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    /// Index of the winning player.
    Win(usize),
    Draw,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DuelState {
    /// Player positions, `positions[0] < positions[1]`.
    pub positions: [usize; 2],
    pub steps: usize,
    pub outcome: Option<Outcome>,
}

/// Per-step record of what happened.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DuelRecord {
    pub intended: [DuelMove; 2],
    pub executed: [DuelMove; 2],
    pub positions: [usize; 2],
    pub outcome: Option<Outcome>,
}

#[derive(Debug, Clone)]
pub struct GridDuel {
    pub config: DuelConfig,
    pub state: DuelState,
    pub history: Vec<DuelRecord>,
}

impl GridDuel {
    pub fn new(config: DuelConfig) -> Result<Self> {
        if config.length < 4 || config.max_steps == 0 || !(0.0..=1.0).contains(&config.slip_prob) {
            return Err(domain("duel arena needs at least 4 cells, a positive step cap and slip in [0, 1]"));
        }
        let state = Self::initial(&config);
        Ok(Self {
            config,
            state,
            history: Vec::new(),
        })
    }

    fn initial(config: &DuelConfig) -> DuelState {
        let mid = config.length / 2;
        DuelState {
            positions: [mid - 1, config.length - mid],
            steps: 0,
            outcome: None,
        }
    }

    pub fn observation(&self, player: usize) -> Vec<f64> {
        let last = (self.config.length - 1) as f64;
        let [p0, p1] = self.state.positions;
        if player == 0 {
            vec![p0 as f64 / last, p1 as f64 / last]
        } else {
            vec![(last - p1 as f64) / last, (last - p0 as f64) / last]
        }
    }

    /// Joint transition with explicit executed moves (after slips).
    pub fn resolve(&mut self, moves: [DuelMove; 2]) -> Result<[f64; 2]> {
        if self.state.outcome.is_some() {
            return Err(domain("duel step after the game ended"));
        }
        use DuelMove::*;
        let last = self.config.length - 1;
        let [p0, p1] = self.state.positions;
        let mut outcome = None;
        let (mut n0, mut n1) = (p0, p1);
        if p1 == p0 + 1 {
            match moves {
                [Advance, Retreat] => {
                    if p1 == last {
                        outcome = Some(Outcome::Win(0));
                    } else {
                        n0 = p0 + 1;
                        n1 = p1 + 1;
                    }
                }
                [Retreat, Advance] => {
                    if p0 == 0 {
                        outcome = Some(Outcome::Win(1));
                    } else {
                        n0 = p0 - 1;
                        n1 = p1 - 1;
                    }
                }
                [Retreat, Retreat] => {
                    n0 = p0.saturating_sub(1);
                    n1 = (p1 + 1).min(last);
                }
                [Retreat, Brace] => n0 = p0.saturating_sub(1),
                [Brace, Retreat] => n1 = (p1 + 1).min(last),
                // Advance into advance or brace, or both bracing: no movement.
                _ => {}
            }
        } else {
            let d0: isize = match moves[0] {
                Advance => 1,
                Retreat => -1,
                Brace => 0,
            };
            let d1: isize = match moves[1] {
                Advance => -1,
                Retreat => 1,
                Brace => 0,
            };
            let c0 = (p0 as isize + d0).clamp(0, last as isize) as usize;
            let c1 = (p1 as isize + d1).clamp(0, last as isize) as usize;
            if c0 < c1 {
                n0 = c0;
                n1 = c1;
            }
            // Otherwise both advanced into the same free cell and bounce.
        }
        self.state.positions = [n0, n1];
        self.state.steps += 1;
        if outcome.is_none() && self.state.steps >= self.config.max_steps {
            outcome = Some(Outcome::Draw);
        }
        self.state.outcome = outcome;
        Ok(match outcome {
            Some(Outcome::Win(0)) => [1.0, -1.0],
            Some(Outcome::Win(_)) => [-1.0, 1.0],
            _ => [0.0, 0.0],
        })
    }
}

impl Default for GridDuel {
    fn default() -> Self {
        Self::new(DuelConfig::default()).expect("default duel config is valid")
    }
}

impl MarkovGame for GridDuel {
    fn observation_dim(&self) -> usize {
        2
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace::Discrete(3)
    }

    fn reset(&mut self, _rng: &mut dyn RngCore) -> [Vec<f64>; 2] {
        self.state = Self::initial(&self.config);
        self.history.clear();
        [self.observation(0), self.observation(1)]
    }

    fn step(&mut self, actions: [&Action; 2], rng: &mut dyn RngCore) -> Result<[PlayerStep; 2]> {
        let intended = [DuelMove::from_action(actions[0])?, DuelMove::from_action(actions[1])?];
        let mut executed = intended;
        for m in executed.iter_mut() {
            if rng.gen_bool(self.config.slip_prob) {
                *m = DuelMove::ALL[rng.gen_range(0..3)];
            }
        }
        let rewards = self.resolve(executed)?;
        self.history.push(DuelRecord {
            intended,
            executed,
            positions: self.state.positions,
            outcome: self.state.outcome,
        });
        let done = self.state.outcome.is_some();
        Ok([0, 1].map(|p| PlayerStep {
            obs: self.observation(p),
            reward: rewards[p],
            done,
        }))
    }
}
