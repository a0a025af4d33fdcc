//! 4x4 windy gridworld with a flag and a band of water.
//!
//! Rows are numbered from the top. The bottom row is water; the agent starts
//! in the row just above it at the left edge and the flag sits at the right
//! end of that same row, so the shortest route runs along the water and the
//! longest detours through the top row:
//!
//! ```text
//!   . . . .
//!   . . . .
//!   S . . F
//!   ~ ~ ~ ~
//! ```
//!
//! Each step applies the chosen move (clamped at walls); then, with
//! probability `wind_prob`, the wind displaces the agent one more cell in a
//! uniformly random cardinal direction (also clamped). Ending a step on the
//! flag pays +1 and ends the episode; ending it in water costs -1. Episodes
//! are cut after `max_steps` steps.

use rand::{Rng, RngCore};

use crate::error::{domain, Error, Result};
use crate::model::{Action, ActionSpace, Env};

pub type Cell = (usize, usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Move {
    Up,
    Down,
    Left,
    Right,
}

impl Move {
    pub const ALL: [Move; 4] = [Move::Up, Move::Down, Move::Left, Move::Right];

    pub fn from_index(i: usize) -> Result<Move> {
        Move::ALL
            .get(i)
            .copied()
            .ok_or_else(|| domain(format!("gridworld action {i} out of range")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridConfig {
    pub width: usize,
    pub height: usize,
    pub start: Cell,
    pub flag: Cell,
    pub water: Vec<Cell>,
    pub wind_prob: f64,
    pub max_steps: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            width: 4,
            height: 4,
            start: (2, 0),
            flag: (2, 3),
            water: vec![(3, 0), (3, 1), (3, 2), (3, 3)],
            wind_prob: 0.5,
            max_steps: 25,
        }
    }
}

impl GridConfig {
    pub fn validate(&self) -> Result<()> {
        let inside = |c: Cell| c.0 < self.height && c.1 < self.width;
        if !inside(self.start) || !inside(self.flag) || !self.water.iter().all(|&c| inside(c)) {
            return Err(domain("gridworld cells must lie inside the grid"));
        }
        if self.water.contains(&self.flag) {
            return Err(domain("the flag cannot be in water"));
        }
        if !(0.0..=1.0).contains(&self.wind_prob) || self.max_steps == 0 {
            return Err(domain("wind probability must be in [0, 1] and the step cap positive"));
        }
        Ok(())
    }

    pub fn n_cells(&self) -> usize {
        self.width * self.height
    }

    pub fn is_water(&self, c: Cell) -> bool {
        self.water.contains(&c)
    }

    /// Cells that share an edge with water but are not water themselves.
    pub fn water_adjacent(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for r in 0..self.height {
            for c in 0..self.width {
                let cell = (r, c);
                if self.is_water(cell) {
                    continue;
                }
                let near = Move::ALL.iter().any(|&m| {
                    let n = self.shift(cell, m);
                    n != cell && self.is_water(n)
                });
                if near {
                    out.push(cell);
                }
            }
        }
        out
    }

    fn shift(&self, (r, c): Cell, m: Move) -> Cell {
        match m {
            Move::Up => (r.saturating_sub(1), c),
            Move::Down => ((r + 1).min(self.height - 1), c),
            Move::Left => (r, c.saturating_sub(1)),
            Move::Right => (r, (c + 1).min(self.width - 1)),
        }
    }

    pub fn initial_state(&self) -> GridState {
        GridState {
            cell: self.start,
            steps: 0,
            done: false,
        }
    }

    /// One-hot encoding of the cell index `row * width + col`.
    pub fn state_encoding(&self, state: &GridState) -> Vec<f64> {
        let mut v = vec![0.0; self.n_cells()];
        v[state.cell.0 * self.width + state.cell.1] = 1.0;
        v
    }

    /// Pure transition function.
    pub fn step<R: RngCore + ?Sized>(&self, state: &GridState, action: Move, rng: &mut R) -> Result<(GridState, f64, bool)> {
        if state.done {
            return Err(domain("gridworld step after the episode ended"));
        }
        let mut cell = self.shift(state.cell, action);
        if rng.gen_bool(self.wind_prob) {
            let gust = Move::ALL[rng.gen_range(0..4)];
            cell = self.shift(cell, gust);
        }
        self.settle(state, cell)
    }

    /// Transition with the wind outcome given explicitly (`None` = calm).
    pub fn step_with_wind(&self, state: &GridState, action: Move, wind: Option<Move>) -> Result<(GridState, f64, bool)> {
        if state.done {
            return Err(domain("gridworld step after the episode ended"));
        }
        let mut cell = self.shift(state.cell, action);
        if let Some(gust) = wind {
            cell = self.shift(cell, gust);
        }
        self.settle(state, cell)
    }

    fn settle(&self, state: &GridState, cell: Cell) -> Result<(GridState, f64, bool)> {
        let steps = state.steps + 1;
        let (reward, reached) = if cell == self.flag {
            (1.0, true)
        } else if self.is_water(cell) {
            (-1.0, false)
        } else {
            (0.0, false)
        };
        let done = reached || steps >= self.max_steps;
        Ok((GridState { cell, steps, done }, reward, done))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridState {
    pub cell: Cell,
    pub steps: usize,
    pub done: bool,
}

/// [`GridConfig`] wrapped as a single-agent [`Env`].
#[derive(Debug, Clone)]
pub struct WindyGridworld {
    pub config: GridConfig,
    pub state: GridState,
}

impl WindyGridworld {
    pub fn new(config: GridConfig) -> Result<Self> {
        config.validate()?;
        let state = config.initial_state();
        Ok(Self { config, state })
    }
}

impl Default for WindyGridworld {
    fn default() -> Self {
        Self::new(GridConfig::default()).expect("default layout is valid")
    }
}

impl Env for WindyGridworld {
    fn observation_dim(&self) -> usize {
        self.config.n_cells()
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace::Discrete(4)
    }

    fn reset(&mut self, _rng: &mut dyn RngCore) -> Vec<f64> {
        self.state = self.config.initial_state();
        self.config.state_encoding(&self.state)
    }

    fn step(&mut self, action: &Action, rng: &mut dyn RngCore) -> Result<(Vec<f64>, f64, bool)> {
        let idx = action
            .index()
            .ok_or_else(|| Error::Domain("gridworld takes discrete actions".into()))?;
        let (next, reward, done) = self.config.step(&self.state, Move::from_index(idx)?, rng)?;
        self.state = next;
        Ok((self.config.state_encoding(&next), reward, done))
    }
}
