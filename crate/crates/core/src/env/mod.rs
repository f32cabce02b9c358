//! Procedurally generated 16×16 gridworlds with seeded levels and disjoint
//! train/test seed splits.
//!
//! * [`dodge`]: survive hazards fired from border emitters and pick up a
//!   collectible. Only cells near the agent matter for acting well.
//! * [`maze`]: reach the goal of a perfect maze. The whole layout matters.

pub mod dodge;
pub mod maze;

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::index::sample;

use crate::error::{Error, Result};
use crate::rng::stream;
use crate::tensor::{Scalar, Tensor};

pub use dodge::DodgeLevel;
pub use maze::MazeLevel;

pub const SIZE: usize = 16;
pub const CELLS: usize = SIZE * SIZE;
pub const CHANNELS: usize = 4;
pub const NUM_ACTIONS: usize = 5;

/// First seed of the held-out pool and its size.
pub const TEST_SEED_BASE: u64 = 1_000_000;
pub const TEST_SEED_POOL: u64 = 10_000;

#[inline]
pub fn cell(y: usize, x: usize) -> usize {
    y * SIZE + x
}

#[inline]
pub fn coords(c: usize) -> (usize, usize) {
    (c / SIZE, c % SIZE)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Action {
    Up,
    Down,
    Left,
    Right,
    Stay,
}

impl Action {
    pub const ALL: [Action; NUM_ACTIONS] = [Action::Up, Action::Down, Action::Left, Action::Right, Action::Stay];

    pub fn from_index(i: usize) -> Action {
        Action::ALL[i]
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn delta(self) -> (isize, isize) {
        match self {
            Action::Up => (-1, 0),
            Action::Down => (1, 0),
            Action::Left => (0, -1),
            Action::Right => (0, 1),
            Action::Stay => (0, 0),
        }
    }
}

/// Moves from `c` unless the target is a wall or off-grid.
pub fn apply_move(walls: &[bool], c: usize, a: Action) -> usize {
    let (y, x) = coords(c);
    let (dy, dx) = a.delta();
    let (ny, nx) = (y as isize + dy, x as isize + dx);
    if ny < 0 || nx < 0 || ny >= SIZE as isize || nx >= SIZE as isize {
        return c;
    }
    let n = cell(ny as usize, nx as usize);
    if walls[n] {
        c
    } else {
        n
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EnvKind {
    Dodge,
    Maze,
}

impl EnvKind {
    pub fn name(self) -> &'static str {
        match self {
            EnvKind::Dodge => "dodgegrid",
            EnvKind::Maze => "mazegrid",
        }
    }

    pub fn horizon(self) -> usize {
        match self {
            EnvKind::Dodge => dodge::HORIZON,
            EnvKind::Maze => maze::HORIZON,
        }
    }

    /// Exact `(R_min, R_max)` of an episode return.
    pub fn return_bounds(self) -> (f64, f64) {
        match self {
            EnvKind::Dodge => (0.0, dodge::COLLECT_REWARD + dodge::SURVIVAL_REWARD * dodge::HORIZON as f64),
            EnvKind::Maze => (0.0, maze::GOAL_REWARD),
        }
    }

    fn tag(self) -> u64 {
        match self {
            EnvKind::Dodge => 1,
            EnvKind::Maze => 2,
        }
    }
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EnvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dodgegrid" | "dodge" => Ok(EnvKind::Dodge),
            "mazegrid" | "maze" => Ok(EnvKind::Maze),
            _ => Err(Error::config(format!("unknown env kind '{s}' (expected dodgegrid or mazegrid)"))),
        }
    }
}

/// A fully determined level.
#[derive(Clone, Debug, PartialEq)]
pub enum LevelSpec {
    Dodge(DodgeLevel),
    Maze(MazeLevel),
}

impl LevelSpec {
    pub fn kind(&self) -> EnvKind {
        match self {
            LevelSpec::Dodge(_) => EnvKind::Dodge,
            LevelSpec::Maze(_) => EnvKind::Maze,
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            LevelSpec::Dodge(l) => l.seed,
            LevelSpec::Maze(l) => l.seed,
        }
    }

    pub fn walls(&self) -> &[bool] {
        match self {
            LevelSpec::Dodge(l) => &l.walls,
            LevelSpec::Maze(l) => &l.walls,
        }
    }

    pub fn start(&self) -> usize {
        match self {
            LevelSpec::Dodge(l) => l.start,
            LevelSpec::Maze(l) => l.start,
        }
    }

    pub fn palette(&self) -> usize {
        match self {
            LevelSpec::Dodge(l) => l.palette,
            LevelSpec::Maze(l) => l.palette,
        }
    }

    /// Canonical byte encoding of the layout, for determinism checks.
    pub fn layout_bytes(&self) -> Vec<u8> {
        let mut out: Vec<u8> = self.walls().iter().map(|&w| w as u8).collect();
        out.extend(self.start().to_le_bytes());
        out.push(self.palette() as u8);
        match self {
            LevelSpec::Dodge(l) => {
                out.extend(l.collectible.to_le_bytes());
                for e in &l.emitters {
                    out.extend(e.cell.to_le_bytes());
                    out.extend([(e.inward.0 * 3 + e.inward.1 + 4) as u8, e.period as u8, e.phase as u8]);
                }
            }
            LevelSpec::Maze(l) => out.extend(l.goal.to_le_bytes()),
        }
        out
    }
}

pub fn generate_level(kind: EnvKind, seed: u64) -> LevelSpec {
    match kind {
        EnvKind::Dodge => LevelSpec::Dodge(DodgeLevel::generate(seed)),
        EnvKind::Maze => LevelSpec::Maze(MazeLevel::generate(seed)),
    }
}

/// Background intensity of palette `p` at a cell; a faint per-palette
/// texture gives levels visual variation unrelated to the task.
pub fn background(palette: usize, c: usize) -> f64 {
    let (y, x) = coords(c);
    let base = 0.15 + 0.08 * palette as f64;
    let stripe = match palette % 4 {
        0 => (y / 2) % 2,
        1 => (x / 2) % 2,
        2 => (y + x) % 2,
        _ => ((y / 4) + (x / 4)) % 2,
    };
    base + 0.1 * stripe as f64
}

pub const PALETTES: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepResult {
    pub reward: f64,
    pub done: bool,
}

/// Mutable episode state over a shared level.
#[derive(Clone, Debug)]
pub struct EnvState {
    pub level: Arc<LevelSpec>,
    pub agent: usize,
    pub t: usize,
    pub done: bool,
}

impl EnvState {
    pub fn new(level: Arc<LevelSpec>) -> Self {
        let agent = level.start();
        EnvState {
            level,
            agent,
            t: 0,
            done: false,
        }
    }

    pub fn reset(&mut self) {
        self.agent = self.level.start();
        self.t = 0;
        self.done = false;
    }

    pub fn kind(&self) -> EnvKind {
        self.level.kind()
    }

    pub fn step(&mut self, action: Action) -> Result<StepResult> {
        if self.done {
            return Err(Error::Usage("step called on a terminated episode".into()));
        }
        let r = match &*self.level {
            LevelSpec::Dodge(l) => l.transition(self.agent, self.t, action),
            LevelSpec::Maze(l) => l.transition(self.agent, action),
        };
        self.agent = r.next;
        self.t += 1;
        self.done = r.terminal || self.t >= self.kind().horizon();
        Ok(StepResult {
            reward: r.reward,
            done: self.done,
        })
    }

    /// Raw `[4, 16, 16]` observation with values in `[0, 1]`.
    pub fn observe_f64(&self) -> [[f64; CELLS]; CHANNELS] {
        let mut ch = [[0.0; CELLS]; CHANNELS];
        let walls = self.level.walls();
        let palette = self.level.palette();
        for c in 0..CELLS {
            if walls[c] {
                ch[0][c] = 1.0;
            } else {
                ch[3][c] = background(palette, c);
            }
        }
        ch[1][self.agent] = 1.0;
        match &*self.level {
            LevelSpec::Dodge(l) => {
                let [walls, _, objects, _] = &mut ch;
                l.paint(self.t, walls, objects)
            }
            LevelSpec::Maze(l) => ch[2][l.goal] = 1.0,
        }
        ch
    }

    pub fn observe<F: Scalar>(&self) -> Tensor<F> {
        let ch = self.observe_f64();
        let data = ch.iter().flat_map(|c| c.iter().map(|&v| F::lit(v))).collect();
        Tensor::new([CHANNELS, SIZE, SIZE], data).expect("observation shape")
    }
}

/// Outcome of one deterministic transition.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transition {
    pub next: usize,
    pub reward: f64,
    pub terminal: bool,
}

/// Train seeds `[0, n_train)`; test seeds sampled without replacement from the
/// held-out pool.
pub fn make_split(kind: EnvKind, n_train: usize, n_test: usize) -> Result<(Vec<u64>, Vec<u64>)> {
    if n_train == 0 || n_test == 0 {
        return Err(Error::config("split sizes must be at least 1"));
    }
    if n_test as u64 > TEST_SEED_POOL {
        return Err(Error::config(format!("at most {TEST_SEED_POOL} test seeds available")));
    }
    let train = (0..n_train as u64).collect();
    let mut rng = stream(0x5EED_5917, &[kind.tag()]);
    let mut test: Vec<u64> = sample(&mut rng, TEST_SEED_POOL as usize, n_test)
        .into_iter()
        .map(|i| TEST_SEED_BASE + i as u64)
        .collect();
    test.sort_unstable();
    Ok((train, test))
}

/// Writes the initial state of a level as a binary PPM, `scale` pixels per
/// cell.
pub fn write_ppm(state: &EnvState, path: &Path, scale: usize) -> Result<()> {
    let ch = state.observe_f64();
    let side = SIZE * scale;
    let mut bytes = format!("P6\n{side} {side}\n255\n").into_bytes();
    for py in 0..side {
        for px in 0..side {
            let c = cell(py / scale, px / scale);
            let rgb = if ch[1][c] > 0.0 {
                [40, 120, 255]
            } else if ch[2][c] >= 1.0 {
                [230, 40, 40]
            } else if ch[2][c] >= 0.75 {
                [250, 210, 30]
            } else if ch[2][c] > 0.0 {
                [150, 70, 70]
            } else if ch[0][c] >= 1.0 {
                [90, 90, 90]
            } else if ch[0][c] > 0.0 {
                [200, 120, 30]
            } else {
                let v = (ch[3][c] * 255.0).round() as u8;
                [v, v, v]
            };
            bytes.extend(rgb);
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_disjoint_and_deterministic() {
        let (train, test) = make_split(EnvKind::Dodge, 20, 20).unwrap();
        assert_eq!(train, (0..20).collect::<Vec<_>>());
        assert_eq!(test.len(), 20);
        assert!(test.iter().all(|s| (TEST_SEED_BASE..TEST_SEED_BASE + TEST_SEED_POOL).contains(s)));
        let mut dedup = test.clone();
        dedup.dedup();
        assert_eq!(dedup.len(), 20);
        assert_eq!(make_split(EnvKind::Dodge, 20, 20).unwrap().1, test);
        assert_eq!(make_split(EnvKind::Maze, 1, 3).unwrap().0, vec![0]);
        assert!(make_split(EnvKind::Maze, 0, 3).is_err());
    }

    #[test]
    fn observation_invariants() {
        for kind in [EnvKind::Dodge, EnvKind::Maze] {
            for seed in 0..20 {
                let s = EnvState::new(Arc::new(generate_level(kind, seed)));
                let o = s.observe::<f64>();
                assert!(o.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
                let agents = o.data()[CELLS..2 * CELLS].iter().filter(|&&v| v > 0.0).count();
                assert_eq!(agents, 1);
            }
        }
    }

    #[test]
    fn stepping_terminated_is_usage_error() {
        let mut s = EnvState::new(Arc::new(generate_level(EnvKind::Maze, 3)));
        s.done = true;
        assert!(matches!(s.step(Action::Stay), Err(Error::Usage(_))));
    }

    #[test]
    fn kind_parse_round_trip() {
        for k in [EnvKind::Dodge, EnvKind::Maze] {
            assert_eq!(k.name().parse::<EnvKind>().unwrap(), k);
        }
        assert!("procgen".parse::<EnvKind>().is_err());
    }
}
