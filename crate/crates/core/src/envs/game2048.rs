use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Env, Step};
use crate::error::{Error, Result};
use crate::model::{Action, ActionSpace};

pub const DEFAULT_TARGET_TILE: u32 = 128;
/// Episodes are cut off after this many moves.
pub const DEFAULT_MAX_MOVES: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Up = 0,
    Down = 1,
    Left = 2,
    Right = 3,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::Up, Direction::Down, Direction::Left, Direction::Right];

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

pub type Grid = [[u32; 4]; 4];

/// Result of sliding a board, before any spawn.
#[derive(Clone, Debug, PartialEq)]
pub struct SlideOutcome {
    pub grid: Grid,
    pub merges: usize,
    pub largest_merge: u32,
    pub changed: bool,
}

/// Slides one line toward index 0; each tile merges at most once.
pub fn slide_line(line: [u32; 4]) -> ([u32; 4], usize, u32) {
    let tiles: Vec<u32> = line.iter().copied().filter(|&v| v != 0).collect();
    let mut out = [0u32; 4];
    let (mut merges, mut largest) = (0, 0);
    let (mut i, mut w) = (0, 0);
    while i < tiles.len() {
        if i + 1 < tiles.len() && tiles[i] == tiles[i + 1] {
            let v = tiles[i] * 2;
            out[w] = v;
            merges += 1;
            largest = largest.max(v);
            i += 2;
        } else {
            out[w] = tiles[i];
            i += 1;
        }
        w += 1;
    }
    (out, merges, largest)
}

pub fn slide(grid: &Grid, dir: Direction) -> SlideOutcome {
    let mut out = [[0u32; 4]; 4];
    let (mut merges, mut largest) = (0, 0);
    for i in 0..4 {
        // cells of line i ordered from the movement edge inward
        let cells: [(usize, usize); 4] = std::array::from_fn(|j| match dir {
            Direction::Left => (i, j),
            Direction::Right => (i, 3 - j),
            Direction::Up => (j, i),
            Direction::Down => (3 - j, i),
        });
        let line = cells.map(|(r, c)| grid[r][c]);
        let (moved, m, l) = slide_line(line);
        merges += m;
        largest = largest.max(l);
        for (j, (r, c)) in cells.into_iter().enumerate() {
            out[r][c] = moved[j];
        }
    }
    SlideOutcome { changed: out != *grid, grid: out, merges, largest_merge: largest }
}

pub fn empty_cells(grid: &Grid) -> usize {
    grid.iter().flatten().filter(|&&v| v == 0).count()
}

/// Stochastic 2048 board with a sparse reward for creating the target tile.
#[derive(Clone, Debug)]
pub struct Game2048 {
    grid: Grid,
    steps: usize,
    done: bool,
    target_tile: u32,
    max_moves: usize,
    rng: ChaCha8Rng,
}

impl Game2048 {
    /// Fresh board with two spawned tiles.
    pub fn new(rng: ChaCha8Rng) -> Self {
        let mut g = Self::from_grid([[0; 4]; 4], rng);
        g.spawn();
        g.spawn();
        g.done = !g.has_legal_move();
        g
    }

    pub fn from_grid(grid: Grid, rng: ChaCha8Rng) -> Self {
        let mut g = Game2048 { grid, steps: 0, done: false, target_tile: DEFAULT_TARGET_TILE, max_moves: DEFAULT_MAX_MOVES, rng };
        g.done = !g.has_legal_move();
        g
    }

    pub fn with_target(mut self, target: u32) -> Self {
        self.target_tile = target;
        self
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn target_tile(&self) -> u32 {
        self.target_tile
    }

    pub fn has_legal_move(&self) -> bool {
        Direction::ALL.iter().any(|&d| slide(&self.grid, d).changed)
    }

    pub fn legal_moves(&self) -> [bool; 4] {
        Direction::ALL.map(|d| slide(&self.grid, d).changed)
    }

    fn spawn(&mut self) {
        let empty: Vec<(usize, usize)> =
            (0..16).map(|i| (i / 4, i % 4)).filter(|&(r, c)| self.grid[r][c] == 0).collect();
        if empty.is_empty() {
            return;
        }
        let (r, c) = empty[self.rng.random_range(0..empty.len())];
        self.grid[r][c] = if self.rng.random::<f64>() < 0.9 { 2 } else { 4 };
    }

    pub fn step_dir(&mut self, dir: Direction) -> Result<Step> {
        if self.done {
            return Err(Error::EpisodeDone);
        }
        self.steps += 1;
        let out = slide(&self.grid, dir);
        let mut reward = 0.0;
        if out.changed {
            self.grid = out.grid;
            let created = out.largest_merge >= self.target_tile;
            if created {
                reward = 1.0;
            }
            self.spawn();
            self.done = created || !self.has_legal_move();
        }
        if self.steps >= self.max_moves {
            self.done = true;
        }
        Ok(Step { obs: self.observe(), reward, done: self.done })
    }
}

impl Env for Game2048 {
    fn obs_dim(&self) -> usize {
        16
    }
    fn action_dim(&self) -> usize {
        4
    }
    fn action_space(&self) -> ActionSpace {
        ActionSpace::Discrete
    }
    /// log2(tile) / log2(target) per cell, 0 for empty cells.
    fn observe(&self) -> Vec<f64> {
        let denom = (self.target_tile as f64).log2();
        self.grid.iter().flatten().map(|&v| if v == 0 { 0.0 } else { (v as f64).log2() / denom }).collect()
    }
    fn timestep(&self) -> usize {
        self.steps
    }
    fn is_done(&self) -> bool {
        self.done
    }
    fn step(&mut self, action: &Action) -> Result<Step> {
        match action {
            Action::Discrete(i) => {
                let d = Direction::from_index(*i).ok_or_else(|| Error::InvalidArgument(format!("no direction {i}")))?;
                self.step_dir(d)
            }
            other => Err(Error::InvalidArgument(format!("2048 expects a discrete action, got {other:?}"))),
        }
    }
    fn legal_actions(&self) -> Option<Vec<bool>> {
        Some(self.legal_moves().to_vec())
    }
}
