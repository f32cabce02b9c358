//! MazeGrid: a perfect maze carved by seeded depth-first search on a 7×7
//! cell lattice; reaching the goal pays once and ends the episode.

use std::collections::VecDeque;

use rand::seq::SliceRandom;
use rand::Rng;

use super::{apply_move, cell, coords, Action, Transition, CELLS, PALETTES, SIZE};
use crate::rng::stream;

pub const HORIZON: usize = 256;
pub const GOAL_REWARD: f64 = 10.0;
pub const LATTICE: usize = 7;
const STREAM_TAG: u64 = 0x3A2E;

#[derive(Clone, Debug, PartialEq)]
pub struct MazeLevel {
    pub seed: u64,
    pub walls: Vec<bool>,
    pub start: usize,
    pub goal: usize,
    pub palette: usize,
}

fn lattice_cell(i: usize, j: usize) -> usize {
    cell(2 * i + 1, 2 * j + 1)
}

impl MazeLevel {
    pub fn generate(seed: u64) -> Self {
        let mut rng = stream(seed, &[STREAM_TAG]);
        let mut walls = vec![true; CELLS];
        let mut visited = [[false; LATTICE]; LATTICE];
        let first = (rng.gen_range(0..LATTICE), rng.gen_range(0..LATTICE));
        let mut stack = vec![first];
        visited[first.0][first.1] = true;
        walls[lattice_cell(first.0, first.1)] = false;
        while let Some(&(i, j)) = stack.last() {
            let mut next: Vec<(usize, usize)> = [(0isize, 1isize), (0, -1), (1, 0), (-1, 0)]
                .iter()
                .filter_map(|&(di, dj)| {
                    let (ni, nj) = (i as isize + di, j as isize + dj);
                    let inside = (0..LATTICE as isize).contains(&ni) && (0..LATTICE as isize).contains(&nj);
                    (inside && !visited[ni as usize][nj as usize]).then_some((ni as usize, nj as usize))
                })
                .collect();
            if next.is_empty() {
                stack.pop();
                continue;
            }
            next.shuffle(&mut rng);
            let (ni, nj) = next[0];
            visited[ni][nj] = true;
            walls[lattice_cell(ni, nj)] = false;
            walls[cell(i + ni + 1, j + nj + 1)] = false;
            stack.push((ni, nj));
        }
        let palette = rng.gen_range(0..PALETTES);
        let start = lattice_cell(rng.gen_range(0..LATTICE), rng.gen_range(0..LATTICE));
        let goal = loop {
            let g = lattice_cell(rng.gen_range(0..LATTICE), rng.gen_range(0..LATTICE));
            if g != start {
                break g;
            }
        };
        MazeLevel {
            seed,
            walls,
            start,
            goal,
            palette,
        }
    }

    pub fn transition(&self, agent: usize, action: Action) -> Transition {
        let next = apply_move(&self.walls, agent, action);
        if next == self.goal {
            Transition {
                next,
                reward: GOAL_REWARD,
                terminal: true,
            }
        } else {
            Transition {
                next,
                reward: 0.0,
                terminal: false,
            }
        }
    }
}

fn neighbours(walls: &[bool], c: usize) -> impl Iterator<Item = usize> + '_ {
    Action::ALL[..4]
        .iter()
        .map(move |&a| apply_move(walls, c, a))
        .filter(move |&n| n != c)
}

/// BFS distance from `target` to every open cell (`usize::MAX` if unreachable).
pub fn distances(walls: &[bool], target: usize) -> Vec<usize> {
    let mut d = vec![usize::MAX; CELLS];
    d[target] = 0;
    let mut queue = VecDeque::from([target]);
    while let Some(c) = queue.pop_front() {
        for n in neighbours(walls, c) {
            if d[n] == usize::MAX {
                d[n] = d[c] + 1;
                queue.push_back(n);
            }
        }
    }
    d
}

/// Number of simple paths between two open cells, by exhaustive DFS.
pub fn count_simple_paths(walls: &[bool], from: usize, to: usize) -> usize {
    fn go(walls: &[bool], c: usize, to: usize, on_path: &mut [bool]) -> usize {
        if c == to {
            return 1;
        }
        on_path[c] = true;
        let mut total = 0;
        let next: Vec<usize> = neighbours(walls, c).collect();
        for n in next {
            if !on_path[n] {
                total += go(walls, n, to, on_path);
            }
        }
        on_path[c] = false;
        total
    }
    go(walls, from, to, &mut vec![false; CELLS])
}

/// Open cells form a spanning tree: connected, and edges = vertices − 1.
pub fn is_perfect(walls: &[bool]) -> bool {
    let open: Vec<usize> = (0..CELLS).filter(|&c| !walls[c]).collect();
    let Some(&root) = open.first() else { return false };
    let d = distances(walls, root);
    let connected = open.iter().all(|&c| d[c] != usize::MAX);
    let edges: usize = open.iter().map(|&c| neighbours(walls, c).count()).sum::<usize>() / 2;
    connected && edges + 1 == open.len()
}

/// Shortest-path action toward the goal (first in action order).
pub fn bfs_action(walls: &[bool], dist: &[usize], c: usize) -> Action {
    *Action::ALL[..4]
        .iter()
        .filter(|&&a| {
            let n = apply_move(walls, c, a);
            n != c && dist[n] != usize::MAX && dist[n] + 1 == dist[c]
        })
        .collect::<Vec<_>>()
        .first()
        .copied()
        .unwrap_or(&Action::Stay)
}

/// Quadrant `q` (0..4) of the 16×16 grid.
pub fn in_quadrant(c: usize, q: usize) -> bool {
    let (y, x) = coords(c);
    (y >= SIZE / 2) == (q / 2 == 1) && (x >= SIZE / 2) == (q % 2 == 1)
}

/// Per non-goal open cell, which quadrants change its BFS-optimal action
/// when that quadrant's walls are blanked to floor.
fn quadrant_changes(level: &MazeLevel) -> Vec<[bool; 4]> {
    let dist = distances(&level.walls, level.goal);
    let states: Vec<usize> = (0..CELLS).filter(|&c| !level.walls[c] && c != level.goal).collect();
    let mut out = vec![[false; 4]; states.len()];
    for q in 0..4 {
        let blanked: Vec<bool> = (0..CELLS)
            .map(|c| level.walls[c] && !in_quadrant(c, q))
            .collect();
        let bdist = distances(&blanked, level.goal);
        for (row, &c) in out.iter_mut().zip(&states) {
            row[q] = bfs_action(&level.walls, &dist, c) != bfs_action(&blanked, &bdist, c);
        }
    }
    out
}

/// Fraction of states whose action changes, per blanked quadrant.
pub fn quadrant_sensitivity(level: &MazeLevel) -> [f64; 4] {
    let rows = quadrant_changes(level);
    let mut out = [0.0; 4];
    for (q, f) in out.iter_mut().enumerate() {
        *f = rows.iter().filter(|r| r[q]).count() as f64 / rows.len() as f64;
    }
    out
}

/// Fraction of states whose action changes when some quadrant is blanked.
pub fn dense_dependence(level: &MazeLevel) -> f64 {
    let rows = quadrant_changes(level);
    rows.iter().filter(|r| r.iter().any(|&b| b)).count() as f64 / rows.len() as f64
}
