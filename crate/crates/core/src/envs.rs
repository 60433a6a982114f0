//! Benchmark environments: Ring, Chain and Random Frozen Lake.
//!
//! All three label rewards per transition `r(s, a, s')`.

use std::collections::VecDeque;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::mdp::TabularMdp;
use crate::seeding::rng_for;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvName {
    Ring,
    Chain,
    Rfl,
}

impl EnvName {
    pub fn as_str(self) -> &'static str {
        match self {
            EnvName::Ring => "ring",
            EnvName::Chain => "chain",
            EnvName::Rfl => "rfl",
        }
    }
}

impl fmt::Display for EnvName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for EnvName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ring" => Ok(EnvName::Ring),
            "chain" => Ok(EnvName::Chain),
            "rfl" | "frozen-lake" | "frozen_lake" => Ok(EnvName::Rfl),
            other => Err(invalid(format!("unknown environment {other:?}"))),
        }
    }
}

/// Environment selection plus the Random Frozen Lake generation knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub name: EnvName,
    pub grid_size: usize,
    pub slip_prob: f64,
    pub hole_prob: f64,
    pub map_seed: u64,
    pub reward_seed: u64,
}

impl EnvSpec {
    pub fn named(name: EnvName) -> Self {
        Self {
            name,
            grid_size: 8,
            slip_prob: 1.0 / 3.0,
            hole_prob: 0.25,
            map_seed: 0,
            reward_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.name == EnvName::Rfl {
            if self.grid_size < 2 {
                return Err(invalid("grid_size must be at least 2"));
            }
            if !(0.0..1.0).contains(&self.slip_prob) {
                return Err(invalid("slip probability must lie in [0, 1)"));
            }
            if !(0.0..=1.0).contains(&self.hole_prob) {
                return Err(invalid("hole probability must lie in [0, 1]"));
            }
        }
        Ok(())
    }

    pub fn build(&self) -> Result<TabularMdp> {
        self.validate()?;
        match self.name {
            EnvName::Ring => Ok(ring()),
            EnvName::Chain => Ok(chain()),
            EnvName::Rfl => random_frozen_lake(self),
        }
    }
}

struct Builder {
    ns: usize,
    na: usize,
    t: Vec<f64>,
    r: Vec<f64>,
}

impl Builder {
    fn new(ns: usize, na: usize) -> Self {
        Self {
            ns,
            na,
            t: vec![0.0; ns * na * ns],
            r: vec![0.0; ns * na * ns],
        }
    }

    fn idx(&self, s: usize, a: usize, next: usize) -> usize {
        (s * self.na + a) * self.ns + next
    }

    fn add(&mut self, s: usize, a: usize, next: usize, p: f64) {
        let i = self.idx(s, a, next);
        self.t[i] += p;
    }

    fn reward(&mut self, s: usize, a: usize, next: usize, r: f64) {
        let i = self.idx(s, a, next);
        self.r[i] = r;
    }

    fn finish(self, initial: Vec<f64>, terminal: Vec<bool>) -> TabularMdp {
        TabularMdp::with_transition_rewards(self.ns, self.na, self.t, self.r, initial, terminal)
            .expect("environment tensors are valid")
    }
}

fn point_mass(n: usize, at: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[at] = 1.0;
    v
}

pub const RING_A: usize = 0;
pub const RING_B: usize = 1;
pub const RING_C: usize = 2;

/// Five states on a loop, three actions, start in state 0.
///
/// In states 0, 1 and 3: `a` steps left; `b` stays w.p. 0.8 and moves left
/// or right w.p. 0.1 each; `c` steps right w.p. 0.9 and stays w.p. 0.1.
/// In states 2 and 4 the moves succeed only half the time: `a` and `c` stay
/// w.p. 0.5, and `b` moves left or right w.p. 0.5 each.
/// Rewards: 0.5 for 2 -> 3 and 4 -> 3, 1 for 3 -> 3.
pub fn ring() -> TabularMdp {
    const N: usize = 5;
    let mut b = Builder::new(N, 3);
    let left = |s: usize| (s + N - 1) % N;
    let right = |s: usize| (s + 1) % N;
    for s in 0..N {
        let steady = matches!(s, 0 | 1 | 3);
        if steady {
            b.add(s, RING_A, left(s), 1.0);
            b.add(s, RING_B, s, 0.8);
            b.add(s, RING_B, left(s), 0.1);
            b.add(s, RING_B, right(s), 0.1);
            b.add(s, RING_C, right(s), 0.9);
            b.add(s, RING_C, s, 0.1);
        } else {
            b.add(s, RING_A, left(s), 0.5);
            b.add(s, RING_A, s, 0.5);
            b.add(s, RING_B, left(s), 0.5);
            b.add(s, RING_B, right(s), 0.5);
            b.add(s, RING_C, right(s), 0.5);
            b.add(s, RING_C, s, 0.5);
        }
        for a in 0..3 {
            b.reward(2, a, 3, 0.5);
            b.reward(4, a, 3, 0.5);
            b.reward(3, a, 3, 1.0);
        }
    }
    b.finish(point_mass(N, 0), vec![false; N])
}

pub const CHAIN_A: usize = 0;
pub const CHAIN_B: usize = 1;

/// Five states on an open chain, two actions, start at the left end.
///
/// `a` moves right (reward 0) w.p. 0.8 and falls back to the origin
/// (reward 2) w.p. 0.2; at the right end `a` stays with reward 10 w.p. 0.8.
/// `b` returns to the origin (reward 2) w.p. 0.8 and moves right (reward 0)
/// w.p. 0.2, staying put at the right end.
pub fn chain() -> TabularMdp {
    const N: usize = 5;
    let mut b = Builder::new(N, 2);
    for s in 0..N {
        let right = (s + 1).min(N - 1);
        b.add(s, CHAIN_A, right, 0.8);
        b.add(s, CHAIN_A, 0, 0.2);
        b.add(s, CHAIN_B, 0, 0.8);
        b.add(s, CHAIN_B, right, 0.2);
        b.reward(s, CHAIN_A, 0, 2.0);
        b.reward(s, CHAIN_B, 0, 2.0);
    }
    b.reward(N - 1, CHAIN_A, N - 1, 10.0);
    b.finish(point_mass(N, 0), vec![false; N])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tile {
    Start,
    Frozen,
    Hole,
    Goal,
}

/// A generated frozen-lake layout, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrozenLakeMap {
    pub size: usize,
    pub tiles: Vec<Tile>,
}

impl FrozenLakeMap {
    pub fn tile(&self, row: usize, col: usize) -> Tile {
        self.tiles[row * self.size + col]
    }

    pub fn start(&self) -> usize {
        0
    }

    pub fn goal(&self) -> usize {
        self.size * self.size - 1
    }

    /// Breadth-first search for a hole-free start-to-goal path.
    pub fn has_safe_path(&self) -> bool {
        let n = self.size;
        let mut seen = vec![false; n * n];
        let mut queue = VecDeque::from([self.start()]);
        seen[self.start()] = true;
        while let Some(cell) = queue.pop_front() {
            if cell == self.goal() {
                return true;
            }
            let (r, c) = (cell / n, cell % n);
            for dir in Move::ALL {
                if let Some(next) = dir.step(r, c, n) {
                    if !seen[next] && self.tiles[next] != Tile::Hole {
                        seen[next] = true;
                        queue.push_back(next);
                    }
                }
            }
        }
        false
    }
}

impl fmt::Display for FrozenLakeMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for row in self.tiles.chunks(self.size) {
            let line: String = row
                .iter()
                .map(|t| match t {
                    Tile::Start => 'S',
                    Tile::Frozen => 'F',
                    Tile::Hole => 'H',
                    Tile::Goal => 'G',
                })
                .collect();
            writeln!(f, "{line}")?;
        }
        Ok(())
    }
}

/// Frozen-lake actions, in the usual Gym order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Move {
    Left = 0,
    Down = 1,
    Right = 2,
    Up = 3,
}

impl Move {
    pub const ALL: [Move; 4] = [Move::Left, Move::Down, Move::Right, Move::Up];

    fn step(self, row: usize, col: usize, n: usize) -> Option<usize> {
        let (r, c) = match self {
            Move::Left => (row, col.checked_sub(1)?),
            Move::Down => (row + 1, col),
            Move::Right => (row, col + 1),
            Move::Up => (row.checked_sub(1)?, col),
        };
        (r < n && c < n).then_some(r * n + c)
    }

    fn perpendicular(self) -> [Move; 2] {
        match self {
            Move::Left | Move::Right => [Move::Up, Move::Down],
            Move::Up | Move::Down => [Move::Left, Move::Right],
        }
    }
}

/// Attempts at drawing a map with a safe path before giving up.
pub const MAP_ATTEMPTS: u64 = 10_000;

/// Draws holes from `map_seed` until the start connects to the goal.
pub fn generate_map(spec: &EnvSpec) -> Result<FrozenLakeMap> {
    spec.validate()?;
    let n = spec.grid_size;
    for attempt in 0..MAP_ATTEMPTS {
        let mut rng = rng_for(spec.map_seed, attempt);
        let tiles = (0..n * n)
            .map(|cell| {
                if cell == 0 {
                    Tile::Start
                } else if cell == n * n - 1 {
                    Tile::Goal
                } else if rng.random_bool(spec.hole_prob) {
                    Tile::Hole
                } else {
                    Tile::Frozen
                }
            })
            .collect();
        let map = FrozenLakeMap { size: n, tiles };
        if map.has_safe_path() {
            return Ok(map);
        }
    }
    Err(Error::GenerationFailure(format!(
        "no map with a safe path after {MAP_ATTEMPTS} attempts"
    )))
}

/// Random Frozen Lake on a `grid_size x grid_size` grid.
///
/// The agent starts in the top-left cell; the goal is the opposite corner.
/// Holes and the goal are absorbing with zero reward. A move goes the
/// intended way w.p. `1 - p` and slips to either perpendicular direction
/// w.p. `p / 2`; moves off the grid leave the agent in place. Entering the
/// goal pays 1; every other transition out of a non-terminal cell pays a
/// per-(s, a) reward drawn uniformly from (0, 0.8) with `reward_seed`.
pub fn random_frozen_lake(spec: &EnvSpec) -> Result<TabularMdp> {
    Ok(frozen_lake_from_map(
        &generate_map(spec)?,
        spec.slip_prob,
        spec.reward_seed,
    ))
}

pub fn frozen_lake_from_map(map: &FrozenLakeMap, slip_prob: f64, reward_seed: u64) -> TabularMdp {
    let n = map.size;
    let ns = n * n;
    let mut b = Builder::new(ns, 4);
    let terminal: Vec<bool> = map
        .tiles
        .iter()
        .map(|t| matches!(t, Tile::Hole | Tile::Goal))
        .collect();
    let mut rng = rng_for(reward_seed, 0);
    for (s, &absorbing) in terminal.iter().enumerate() {
        let (row, col) = (s / n, s % n);
        for dir in Move::ALL {
            let a = dir as usize;
            if absorbing {
                b.add(s, a, s, 1.0);
                continue;
            }
            let base = loop {
                let r = rng.random_range(0.0..0.8);
                if r > 0.0 {
                    break r;
                }
            };
            let [p1, p2] = dir.perpendicular();
            for (m, p) in [
                (dir, 1.0 - slip_prob),
                (p1, slip_prob / 2.0),
                (p2, slip_prob / 2.0),
            ] {
                if p > 0.0 {
                    b.add(s, a, m.step(row, col, n).unwrap_or(s), p);
                }
            }
            for next in 0..ns {
                let r = if next == map.goal() { 1.0 } else { base };
                b.reward(s, a, next, r);
            }
        }
    }
    b.finish(point_mass(ns, map.start()), terminal)
}
