//! DodgeGrid: border emitters launch hazards that travel diagonally and
//! bounce off walls until they expire; the agent survives for a small
//! per-step reward and ends the episode with a bonus by reaching the
//! collectible.

use std::collections::VecDeque;

use rand::Rng;

use super::{apply_move, cell, coords, Action, Transition, CELLS, PALETTES, SIZE};
use crate::rng::stream;

pub const HORIZON: usize = 128;
pub const COLLECT_REWARD: f64 = 10.0;
pub const SURVIVAL_REWARD: f64 = 0.1;
/// Ticks a hazard lives before vanishing.
pub const HAZARD_LIFETIME: usize = 48;
/// Hazard ticks simulated before `t = 0` so levels start populated.
const WARMUP: usize = HAZARD_LIFETIME;
const STREAM_TAG: u64 = 0xD0D6E;
const PERIODS: std::ops::RangeInclusive<usize> = 2..=4;

type Vel = (isize, isize);

fn offset(c: usize, (dy, dx): Vel) -> Option<usize> {
    let (y, x) = coords(c);
    let (ny, nx) = (y as isize + dy, x as isize + dx);
    ((0..SIZE as isize).contains(&ny) && (0..SIZE as isize).contains(&nx)).then(|| cell(ny as usize, nx as usize))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Emitter {
    /// Border wall cell the emitter sits in.
    pub cell: usize,
    /// Unit step from the emitter into the arena.
    pub inward: Vel,
    pub period: usize,
    pub phase: usize,
}

impl Emitter {
    /// Launch velocity if the emitter fires at `tick`: inward plus a sideways
    /// component that alternates between shots.
    fn fires(&self, tick: usize) -> Option<Vel> {
        let k = tick + self.phase;
        if k % self.period != 0 {
            return None;
        }
        let side = if (k / self.period) % 2 == 0 { 1 } else { -1 };
        Some(match self.inward {
            (0, dx) => (side, dx),
            (dy, _) => (dy, side),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Hazard {
    cell: usize,
    vel: Vel,
    age: usize,
}

fn blocked(walls: &[bool], c: usize, d: Vel) -> bool {
    offset(c, d).map_or(true, |n| walls[n])
}

/// One diagonal step with reflection: a blocked axis flips its velocity
/// component (both on a pure corner hit); if the reflected step is blocked
/// too the hazard holds still this tick.
fn bounce(walls: &[bool], h: &mut Hazard) {
    let (mut dy, mut dx) = h.vel;
    if blocked(walls, h.cell, (dy, dx)) {
        let wy = blocked(walls, h.cell, (dy, 0));
        let wx = blocked(walls, h.cell, (0, dx));
        if wy {
            dy = -dy;
        }
        if wx {
            dx = -dx;
        }
        if !wy && !wx {
            dy = -dy;
            dx = -dx;
        }
    }
    h.vel = (dy, dx);
    if let Some(n) = offset(h.cell, h.vel).filter(|&n| !walls[n]) {
        h.cell = n;
    }
}

/// Advances and ages hazards one tick, then spawns from firing emitters.
fn tick_hazards(walls: &[bool], emitters: &[Emitter], hazards: &mut Vec<Hazard>, tick: usize) {
    hazards.retain_mut(|h| {
        h.age += 1;
        if h.age >= HAZARD_LIFETIME {
            return false;
        }
        bounce(walls, h);
        true
    });
    for e in emitters {
        if let (Some(vel), Some(n)) = (e.fires(tick), offset(e.cell, e.inward)) {
            if !walls[n] {
                hazards.push(Hazard { cell: n, vel, age: 0 });
            }
        }
    }
}

/// Hazard occupancy at `t = -1 ..= HORIZON` (index `t + 1`).
fn hazard_schedule(walls: &[bool], emitters: &[Emitter]) -> Vec<Vec<bool>> {
    let mut hazards = Vec::new();
    let mut out = Vec::with_capacity(HORIZON + 2);
    for tick in 0..WARMUP + HORIZON + 1 {
        tick_hazards(walls, emitters, &mut hazards, tick);
        if tick + 2 > WARMUP {
            let mut occ = vec![false; CELLS];
            for h in &hazards {
                occ[h.cell] = true;
            }
            out.push(occ);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct DodgeLevel {
    pub seed: u64,
    pub walls: Vec<bool>,
    pub emitters: Vec<Emitter>,
    pub start: usize,
    pub collectible: usize,
    pub palette: usize,
    /// Number of rejected candidate layouts before this one.
    pub attempts: u32,
    hazards: Vec<Vec<bool>>,
}

impl DodgeLevel {
    /// Samples candidate layouts from sub-streams of `seed` until one admits a
    /// safe route to the collectible.
    pub fn generate(seed: u64) -> Self {
        for attempt in 0.. {
            let level = Self::candidate(seed, attempt);
            if earliest_collect(&level).is_some() {
                return level;
            }
        }
        unreachable!()
    }

    fn candidate(seed: u64, attempt: u32) -> Self {
        let mut rng = stream(seed, &[STREAM_TAG, attempt as u64]);
        let mut walls = vec![false; CELLS];
        for i in 0..SIZE {
            walls[cell(0, i)] = true;
            walls[cell(SIZE - 1, i)] = true;
            walls[cell(i, 0)] = true;
            walls[cell(i, SIZE - 1)] = true;
        }
        let palette = rng.gen_range(0..PALETTES);

        let mut emitters: Vec<Emitter> = Vec::new();
        let count = rng.gen_range(2..=4);
        while emitters.len() < count {
            let side = rng.gen_range(0..4);
            let k = rng.gen_range(1..SIZE - 1);
            let (c, inward) = match side {
                0 => (cell(0, k), (1, 0)),
                1 => (cell(SIZE - 1, k), (-1, 0)),
                2 => (cell(k, 0), (0, 1)),
                _ => (cell(k, SIZE - 1), (0, -1)),
            };
            if emitters.iter().any(|e| e.cell == c) {
                continue;
            }
            let period = rng.gen_range(PERIODS);
            let phase = rng.gen_range(0..period);
            emitters.push(Emitter { cell: c, inward, period, phase });
        }
        let spawn: Vec<usize> = emitters
            .iter()
            .filter_map(|e| offset(e.cell, e.inward))
            .collect();

        let blocks = rng.gen_range(0..=6);
        for _ in 0..blocks {
            let y = rng.gen_range(2..SIZE - 3);
            let x = rng.gen_range(2..SIZE - 3);
            let (h, w) = [(1, 1), (1, 2), (2, 1)][rng.gen_range(0..3)];
            for dy in 0..h {
                for dx in 0..w {
                    let c = cell(y + dy, x + dx);
                    if !spawn.contains(&c) {
                        walls[c] = true;
                    }
                }
            }
        }

        let open: Vec<usize> = (0..CELLS).filter(|&c| !walls[c]).collect();
        let start = open[rng.gen_range(0..open.len())];
        let far: Vec<usize> = open
            .iter()
            .copied()
            .filter(|&c| manhattan(c, start) >= 6)
            .collect();
        let collectible = far[rng.gen_range(0..far.len())];
        let hazards = hazard_schedule(&walls, &emitters);
        DodgeLevel {
            seed,
            walls,
            emitters,
            start,
            collectible,
            palette,
            attempts: attempt,
            hazards,
        }
    }

    /// Hazard occupancy at step `t` (`-1 ..= HORIZON`).
    pub fn hazards_at(&self, t: isize) -> &[bool] {
        &self.hazards[(t + 1) as usize]
    }

    pub fn transition(&self, agent: usize, t: usize, action: Action) -> Transition {
        let next = apply_move(&self.walls, agent, action);
        let t = t as isize;
        if self.hazards_at(t)[next] {
            return Transition { next, reward: 0.0, terminal: true };
        }
        if next == self.collectible {
            return Transition {
                next,
                reward: COLLECT_REWARD + SURVIVAL_REWARD,
                terminal: true,
            };
        }
        if self.hazards_at(t + 1)[next] {
            return Transition { next, reward: 0.0, terminal: true };
        }
        Transition {
            next,
            reward: SURVIVAL_REWARD,
            terminal: false,
        }
    }

    /// Paints emitters into the wall channel and hazards, their previous
    /// positions and the collectible into the object channel.
    pub fn paint(&self, t: usize, walls: &mut [f64], objects: &mut [f64]) {
        for e in &self.emitters {
            walls[e.cell] = 0.5;
        }
        let t = t as isize;
        for c in 0..CELLS {
            let mut v: f64 = 0.0;
            if self.hazards_at(t - 1)[c] {
                v = 0.5;
            }
            if c == self.collectible {
                v = v.max(0.75);
            }
            if self.hazards_at(t)[c] {
                v = 1.0;
            }
            objects[c] = v;
        }
    }
}

fn manhattan(a: usize, b: usize) -> usize {
    let (ay, ax) = coords(a);
    let (by, bx) = coords(b);
    ay.abs_diff(by) + ax.abs_diff(bx)
}

/// Earliest step at which the collectible can be reached without collision.
pub fn earliest_collect(level: &DodgeLevel) -> Option<usize> {
    let mut seen = vec![false; CELLS * (HORIZON + 1)];
    let mut queue = VecDeque::from([(level.start, 0usize)]);
    seen[level.start] = true;
    while let Some((c, t)) = queue.pop_front() {
        if t >= HORIZON {
            continue;
        }
        for a in Action::ALL {
            let tr = level.transition(c, t, a);
            if tr.terminal {
                if tr.reward > 0.0 {
                    return Some(t + 1);
                }
                continue;
            }
            let key = (t + 1) * CELLS + tr.next;
            if !seen[key] {
                seen[key] = true;
                queue.push_back((tr.next, t + 1));
            }
        }
    }
    None
}

/// Undiscounted optimal value `V[t][cell]` for `t = 0 ..= HORIZON`, by
/// backward induction over the deterministic schedule.
pub fn optimal_values(level: &DodgeLevel) -> Vec<Vec<f64>> {
    let mut v = vec![vec![0.0; CELLS]; HORIZON + 1];
    for t in (0..HORIZON).rev() {
        for c in 0..CELLS {
            if level.walls[c] {
                continue;
            }
            v[t][c] = Action::ALL
                .iter()
                .map(|&a| q_value(level, &v, c, t, a))
                .fold(f64::NEG_INFINITY, f64::max);
        }
    }
    v
}

fn q_value(level: &DodgeLevel, v: &[Vec<f64>], c: usize, t: usize, a: Action) -> f64 {
    let tr = level.transition(c, t, a);
    if tr.terminal {
        tr.reward
    } else {
        tr.reward + v[t + 1][tr.next]
    }
}

/// Optimal episode return from the start state.
pub fn optimal_return(level: &DodgeLevel) -> f64 {
    optimal_values(level)[0][level.start]
}

/// Actions whose value is within `1e-9` of the best.
pub fn optimal_actions(level: &DodgeLevel, v: &[Vec<f64>], c: usize, t: usize) -> Vec<Action> {
    let q: Vec<f64> = Action::ALL.iter().map(|&a| q_value(level, v, c, t, a)).collect();
    let best = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Action::ALL
        .iter()
        .zip(&q)
        .filter(|(_, &x)| x >= best - 1e-9)
        .map(|(&a, _)| a)
        .collect()
}

/// Non-terminal `(cell, t)` states reachable from the start without collision.
pub fn reachable_states(level: &DodgeLevel) -> Vec<(usize, usize)> {
    let mut seen = vec![false; CELLS * (HORIZON + 1)];
    let mut out = Vec::new();
    let mut queue = VecDeque::from([(level.start, 0usize)]);
    seen[level.start] = true;
    while let Some((c, t)) = queue.pop_front() {
        out.push((c, t));
        if t + 1 >= HORIZON {
            continue;
        }
        for a in Action::ALL {
            let tr = level.transition(c, t, a);
            let key = (t + 1) * CELLS + tr.next;
            if !tr.terminal && !seen[key] {
                seen[key] = true;
                queue.push_back((tr.next, t + 1));
            }
        }
    }
    out
}

fn chebyshev(a: usize, b: usize) -> usize {
    let (ay, ax) = coords(a);
    let (by, bx) = coords(b);
    ay.abs_diff(by).max(ax.abs_diff(bx))
}

/// The level as seen by an agent at `agent` at time `t` when every cell
/// farther than `radius` (Chebyshev) is blanked, except the collectible:
/// far walls become floor, far emitters disappear and only hazards visible
/// now are tracked forward.
pub fn blanked_view(level: &DodgeLevel, agent: usize, t: usize, radius: usize) -> DodgeLevel {
    let near = |c: usize| chebyshev(c, agent) <= radius;
    let walls: Vec<bool> = (0..CELLS).map(|c| level.walls[c] && near(c)).collect();
    let emitters: Vec<Emitter> = level.emitters.iter().filter(|e| near(e.cell)).copied().collect();
    // visible hazards at t, with directions recovered from the true schedule
    let mut hazards: Vec<Hazard> = Vec::new();
    let mut sim = Vec::new();
    for tick in 0..WARMUP + t {
        tick_hazards(&level.walls, &level.emitters, &mut sim, tick);
    }
    for h in &sim {
        if near(h.cell) {
            hazards.push(*h);
        }
    }
    let mut schedule = vec![vec![false; CELLS]; HORIZON + 2];
    let mark = |occ: &mut Vec<bool>, hs: &[Hazard]| hs.iter().for_each(|h| occ[h.cell] = true);
    mark(&mut schedule[t + 1], &hazards);
    for (step, tt) in (t + 1..=HORIZON).enumerate() {
        tick_hazards(&walls, &emitters, &mut hazards, WARMUP + t + 1 + step);
        mark(&mut schedule[tt + 1], &hazards);
    }
    DodgeLevel {
        seed: level.seed,
        walls,
        emitters,
        start: agent,
        collectible: level.collectible,
        palette: level.palette,
        attempts: level.attempts,
        hazards: schedule,
    }
}

/// Fraction of sampled reachable states where the action chosen by the
/// blanked-view optimal planner (first maximizer) is optimal in the full level.
pub fn local_agreement(level: &DodgeLevel, radius: usize, samples: usize, seed: u64) -> f64 {
    let full = optimal_values(level);
    let states = reachable_states(level);
    let mut rng = stream(seed, &[level.seed]);
    let mut agree = 0;
    for _ in 0..samples {
        let (c, t) = states[rng.gen_range(0..states.len())];
        let view = blanked_view(level, c, t, radius);
        let local = optimal_values(&view);
        let chosen = optimal_actions(&view, &local, c, t)[0];
        if optimal_actions(level, &full, c, t).contains(&chosen) {
            agree += 1;
        }
    }
    agree as f64 / samples as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_level() {
        assert_eq!(DodgeLevel::generate(42), DodgeLevel::generate(42));
        assert_ne!(DodgeLevel::generate(42).walls, DodgeLevel::generate(43).walls);
    }

    #[test]
    fn emitters_and_collectible_present() {
        for seed in 0..50 {
            let l = DodgeLevel::generate(seed);
            assert!((2..=4).contains(&l.emitters.len()));
            assert!(!l.walls[l.start] && !l.walls[l.collectible]);
            assert_ne!(l.start, l.collectible);
        }
    }

    #[test]
    fn stay_without_hazard_earns_survival_tick() {
        let l = DodgeLevel::generate(0);
        // find a state where staying is safe
        let states = reachable_states(&l);
        let &(c, t) = states
            .iter()
            .find(|&&(c, t)| !l.hazards_at(t as isize)[c] && !l.hazards_at(t as isize + 1)[c] && c != l.collectible)
            .unwrap();
        let tr = l.transition(c, t, Action::Stay);
        assert_eq!(tr.reward, SURVIVAL_REWARD);
        assert!(!tr.terminal);
    }

    #[test]
    fn hazards_bounce_off_walls() {
        let mut walls = vec![false; CELLS];
        (0..SIZE).for_each(|i| walls[cell(0, i)] = true);
        let mut h = Hazard { cell: cell(1, 5), vel: (-1, 1), age: 0 };
        bounce(&walls, &mut h);
        assert_eq!((h.cell, h.vel), (cell(2, 6), (1, 1)));
        let mut corner = vec![false; CELLS];
        corner[cell(3, 3)] = true;
        let mut h = Hazard { cell: cell(2, 2), vel: (1, 1), age: 0 };
        bounce(&corner, &mut h);
        assert_eq!((h.cell, h.vel), (cell(1, 1), (-1, -1)));
    }

    #[test]
    fn hazards_expire() {
        let walls = vec![false; CELLS];
        let e = Emitter { cell: cell(0, 5), inward: (1, 0), period: 1000, phase: 0 };
        let mut hs = Vec::new();
        tick_hazards(&walls, &[e], &mut hs, 0);
        assert_eq!(hs.len(), 1);
        for tick in 1..=HAZARD_LIFETIME {
            tick_hazards(&walls, &[e], &mut hs, tick);
        }
        assert!(hs.is_empty());
    }

    #[test]
    fn emitter_alternates_sideways() {
        let e = Emitter { cell: cell(0, 5), inward: (1, 0), period: 4, phase: 0 };
        assert_eq!(e.fires(0), Some((1, 1)));
        assert_eq!(e.fires(1), None);
        assert_eq!(e.fires(4), Some((1, -1)));
    }
}
