//! Genetic-algorithm jigsaw solver.
//!
//! Chromosomes are arrangements (tile index per grid cell, row-major).
//! Crossover grows a child from one tile, preferring placements both parents
//! agree on, then parent placements that are mutual best matches, then the
//! best-fitting free tile.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::Tile;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaParams {
    pub population: usize,
    pub generations: usize,
    pub elite_fraction: f64,
    /// Probability that a child gets one random pairwise swap.
    pub mutation_rate: f64,
    pub seed: u64,
}

impl Default for GaParams {
    fn default() -> Self {
        GaParams { population: 300, generations: 100, elite_fraction: 0.05, mutation_rate: 0.02, seed: 0 }
    }
}

impl GaParams {
    fn elite(&self) -> usize {
        ((self.population as f64 * self.elite_fraction).round() as usize).clamp(1, self.population.max(1))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    /// Tile index for every grid cell, row-major.
    pub arrangement: Vec<usize>,
    pub fitness: f64,
    /// Best fitness after each generation, starting with the initial population.
    pub history: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Dir {
    Right,
    Down,
    Left,
    Up,
}

const DIRS: [Dir; 4] = [Dir::Right, Dir::Down, Dir::Left, Dir::Up];

impl Dir {
    fn step(self) -> (i32, i32) {
        match self {
            Dir::Right => (1, 0),
            Dir::Down => (0, 1),
            Dir::Left => (-1, 0),
            Dir::Up => (0, -1),
        }
    }

    fn opposite(self) -> Dir {
        match self {
            Dir::Right => Dir::Left,
            Dir::Down => Dir::Up,
            Dir::Left => Dir::Right,
            Dir::Up => Dir::Down,
        }
    }
}

/// Edge dissimilarities between every ordered pair of tiles.
#[derive(Debug, Clone)]
pub struct Compatibility {
    n: usize,
    right: Vec<f64>,
    down: Vec<f64>,
    buddy: Vec<[Option<usize>; 4]>,
}

impl Compatibility {
    pub fn new(tiles: &[Tile]) -> Self {
        let n = tiles.len();
        let pair = |f: fn(&Tile, &Tile) -> f64| -> Vec<f64> {
            (0..n * n).into_par_iter().map(|i| f(&tiles[i / n], &tiles[i % n])).collect()
        };
        let right = pair(|a, b| {
            (0..a.height).map(|y| sq(a.at(a.width - 1, y) - b.at(0, y))).sum()
        });
        let down = pair(|a, b| {
            (0..a.width).map(|x| sq(a.at(x, a.height - 1) - b.at(x, 0))).sum()
        });
        let mut c = Compatibility { n, right, down, buddy: Vec::new() };
        let best: Vec<[Option<usize>; 4]> = (0..n)
            .map(|a| {
                DIRS.map(|d| {
                    (0..n).filter(|b| *b != a).min_by(|x, y| c.cost(a, *x, d).total_cmp(&c.cost(a, *y, d)))
                })
            })
            .collect();
        c.buddy = (0..n)
            .map(|a| {
                DIRS.map(|d| {
                    best[a][d as usize].filter(|b| best[*b][d.opposite() as usize] == Some(a))
                })
            })
            .collect();
        c
    }

    /// Dissimilarity of `b` placed on side `d` of `a`.
    fn cost(&self, a: usize, b: usize, d: Dir) -> f64 {
        match d {
            Dir::Right => self.right[a * self.n + b],
            Dir::Left => self.right[b * self.n + a],
            Dir::Down => self.down[a * self.n + b],
            Dir::Up => self.down[b * self.n + a],
        }
    }

    /// Sum of edge dissimilarities over all horizontally and vertically
    /// adjacent cells.
    pub fn fitness(&self, arrangement: &[usize], grid_w: usize) -> f64 {
        let mut sum = 0.0;
        for (i, a) in arrangement.iter().enumerate() {
            if (i + 1) % grid_w != 0 {
                sum += self.right[a * self.n + arrangement[i + 1]];
            }
            if i + grid_w < arrangement.len() {
                sum += self.down[a * self.n + arrangement[i + grid_w]];
            }
        }
        sum
    }
}

fn sq(v: f32) -> f64 {
    f64::from(v) * f64::from(v)
}

/// Places the tiles on a `grid_w × grid_h` grid, minimizing edge dissimilarity.
///
/// Panics when `tiles.len() != grid_w * grid_h`.
pub fn jigsaw_solve(tiles: &[Tile], grid_w: usize, grid_h: usize, params: &GaParams) -> Solution {
    let n = tiles.len();
    assert_eq!(n, grid_w * grid_h, "tile count must fill the grid");
    if n <= 1 {
        return Solution { arrangement: (0..n).collect(), fitness: 0.0, history: vec![0.0] };
    }
    let compat = Compatibility::new(tiles);
    let pop_size = params.population.max(2);
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut population: Vec<Vec<usize>> = (0..pop_size)
        .map(|_| {
            let mut p: Vec<usize> = (0..n).collect();
            p.shuffle(&mut rng);
            p
        })
        .collect();
    let mut scored = rank(population, &compat, grid_w);
    let mut history = vec![scored[0].1];
    let elite = params.elite().min(pop_size);

    for generation in 0..params.generations {
        let children: Vec<Vec<usize>> = (elite..pop_size)
            .into_par_iter()
            .map(|child| {
                let seed = params.seed ^ ((generation as u64) << 32 | child as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let a = &scored[tournament(&scored, &mut rng)].0;
                let b = &scored[tournament(&scored, &mut rng)].0;
                let mut kid = crossover(a, b, &compat, grid_w, grid_h, &mut rng);
                if rng.gen_bool(params.mutation_rate.clamp(0.0, 1.0)) {
                    let (i, j) = (rng.gen_range(0..n), rng.gen_range(0..n));
                    kid.swap(i, j);
                }
                kid
            })
            .collect();
        population = scored.iter().take(elite).map(|(p, _)| p.clone()).collect();
        population.extend(children);
        scored = rank(population, &compat, grid_w);
        history.push(scored[0].1);
    }
    let (arrangement, fitness) = scored.swap_remove(0);
    Solution { arrangement, fitness, history }
}

/// Scores in parallel and sorts best first; the sort is stable, so equal
/// scores keep their population order.
fn rank(population: Vec<Vec<usize>>, compat: &Compatibility, grid_w: usize) -> Vec<(Vec<usize>, f64)> {
    let mut scored: Vec<(Vec<usize>, f64)> = population
        .into_par_iter()
        .map(|p| {
            let f = compat.fitness(&p, grid_w);
            (p, f)
        })
        .collect();
    scored.sort_by(|a, b| a.1.total_cmp(&b.1));
    scored
}

fn tournament(scored: &[(Vec<usize>, f64)], rng: &mut ChaCha8Rng) -> usize {
    // `scored` is sorted, so the smallest index wins
    (0..3).map(|_| rng.gen_range(0..scored.len())).min().unwrap()
}

struct Canvas {
    w: i32,
    h: i32,
    span_w: i32,
    cells: Vec<Option<usize>>,
    bounds: (i32, i32, i32, i32),
}

impl Canvas {
    fn new(w: usize, h: usize) -> Self {
        let (w, h) = (w as i32, h as i32);
        let span_w = 2 * w + 1;
        Canvas { w, h, span_w, cells: vec![None; (span_w * (2 * h + 1)) as usize], bounds: (w, w, h, h) }
    }

    fn index(&self, x: i32, y: i32) -> Option<usize> {
        (x >= 0 && y >= 0 && x < self.span_w && y < 2 * self.h + 1).then(|| (y * self.span_w + x) as usize)
    }

    fn get(&self, x: i32, y: i32) -> Option<usize> {
        self.index(x, y).and_then(|i| self.cells[i])
    }

    fn free(&self, x: i32, y: i32) -> bool {
        let Some(i) = self.index(x, y) else { return false };
        let (x0, x1, y0, y1) = self.bounds;
        self.cells[i].is_none() && x1.max(x) - x0.min(x) < self.w && y1.max(y) - y0.min(y) < self.h
    }

    fn put(&mut self, x: i32, y: i32, tile: usize) {
        let i = self.index(x, y).expect("placement inside canvas");
        self.cells[i] = Some(tile);
        let (x0, x1, y0, y1) = self.bounds;
        self.bounds = (x0.min(x), x1.max(x), y0.min(y), y1.max(y));
    }
}

fn neighbor(parent: &[usize], pos: &[usize], grid_w: usize, grid_h: usize, tile: usize, d: Dir) -> Option<usize> {
    let (x, y) = ((pos[tile] % grid_w) as i32, (pos[tile] / grid_w) as i32);
    let (dx, dy) = d.step();
    let (nx, ny) = (x + dx, y + dy);
    (nx >= 0 && ny >= 0 && (nx as usize) < grid_w && (ny as usize) < grid_h)
        .then(|| parent[ny as usize * grid_w + nx as usize])
}

fn positions(p: &[usize]) -> Vec<usize> {
    let mut pos = vec![0; p.len()];
    for (cell, t) in p.iter().enumerate() {
        pos[*t] = cell;
    }
    pos
}

fn crossover(
    a: &[usize],
    b: &[usize],
    compat: &Compatibility,
    grid_w: usize,
    grid_h: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let n = a.len();
    let (pos_a, pos_b) = (positions(a), positions(b));
    let mut canvas = Canvas::new(grid_w, grid_h);
    let mut used = vec![false; n];
    let first = rng.gen_range(0..n);
    canvas.put(grid_w as i32, grid_h as i32, first);
    used[first] = true;
    let mut frontier: Vec<(i32, i32)> = Vec::new();
    let push_frontier = |canvas: &Canvas, frontier: &mut Vec<(i32, i32)>, x: i32, y: i32| {
        for d in DIRS {
            let (dx, dy) = d.step();
            let c = (x + dx, y + dy);
            if canvas.get(c.0, c.1).is_none() && !frontier.contains(&c) {
                frontier.push(c);
            }
        }
    };
    push_frontier(&canvas, &mut frontier, grid_w as i32, grid_h as i32);

    for _ in 1..n {
        frontier.retain(|&(x, y)| canvas.free(x, y));
        let mut agreed = Vec::new();
        let mut buddies = Vec::new();
        for &(x, y) in &frontier {
            for d in DIRS {
                // `d` points from the free cell to a placed neighbour
                let (dx, dy) = d.step();
                let Some(t) = canvas.get(x + dx, y + dy) else { continue };
                let back = d.opposite();
                let na = neighbor(a, &pos_a, grid_w, grid_h, t, back);
                let nb = neighbor(b, &pos_b, grid_w, grid_h, t, back);
                match (na, nb) {
                    (Some(p), Some(q)) if p == q && !used[p] => agreed.push((x, y, p)),
                    _ => {
                        for c in [na, nb].into_iter().flatten() {
                            if !used[c] && compat.buddy[t][back as usize] == Some(c) {
                                buddies.push((x, y, c));
                            }
                        }
                    }
                }
            }
        }
        let (x, y, tile) = if !agreed.is_empty() {
            agreed[rng.gen_range(0..agreed.len())]
        } else if !buddies.is_empty() {
            buddies[rng.gen_range(0..buddies.len())]
        } else {
            best_fit(&canvas, &frontier, &used, compat)
        };
        canvas.put(x, y, tile);
        used[tile] = true;
        push_frontier(&canvas, &mut frontier, x, y);
    }

    let (x0, _, y0, _) = canvas.bounds;
    let mut out = Vec::with_capacity(n);
    for y in 0..grid_h as i32 {
        for x in 0..grid_w as i32 {
            out.push(canvas.get(x0 + x, y0 + y).expect("child fills the grid"));
        }
    }
    out
}

fn best_fit(canvas: &Canvas, frontier: &[(i32, i32)], used: &[bool], compat: &Compatibility) -> (i32, i32, usize) {
    let mut best = (f64::INFINITY, (0, 0, 0));
    for &(x, y) in frontier {
        let placed: Vec<(usize, Dir)> = DIRS
            .iter()
            .filter_map(|d| {
                let (dx, dy) = d.step();
                canvas.get(x + dx, y + dy).map(|t| (t, d.opposite()))
            })
            .collect();
        for (tile, _) in used.iter().enumerate().filter(|(_, u)| !**u) {
            let cost = placed.iter().map(|(t, d)| compat.cost(*t, tile, *d)).sum::<f64>() / placed.len() as f64;
            if cost < best.0 {
                best = (cost, (x, y, tile));
            }
        }
    }
    best.1
}

/// Share of right and down neighbour pairs in `arrangement` that are also
/// right and down neighbours in the source. `source[t]` is the true cell of
/// tile `t`.
pub fn neighbor_accuracy(arrangement: &[usize], source: &[usize], grid_w: usize) -> f64 {
    let n = arrangement.len();
    if n <= 1 {
        return 1.0;
    }
    let grid_h = n / grid_w;
    let (mut good, mut total) = (0usize, 0usize);
    for (cell, a) in arrangement.iter().enumerate() {
        let sa = source[*a];
        if (cell + 1) % grid_w != 0 {
            total += 1;
            let sb = source[arrangement[cell + 1]];
            good += usize::from(sb == sa + 1 && sa % grid_w + 1 < grid_w);
        }
        if cell + grid_w < n {
            total += 1;
            good += usize::from(source[arrangement[cell + grid_w]] == sa + grid_w);
        }
    }
    debug_assert_eq!(total, 2 * n - grid_w - grid_h);
    good as f64 / total as f64
}
