//! Regular cell grids, directional adjacency and the learnable neighborhood
//! matrices `P_c`.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Neighborhood direction. The discriminant is the direction's index in
/// every per-direction collection of the crate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Up = 0,
    Down = 1,
    Left = 2,
    Right = 3,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::Up, Direction::Down, Direction::Left, Direction::Right];

    pub const COUNT: usize = 4;

    pub fn index(self) -> usize {
        self as usize
    }

    /// `(row, col)` step.
    pub fn offset(self) -> (isize, isize) {
        match self {
            Direction::Up => (-1, 0),
            Direction::Down => (1, 0),
            Direction::Left => (0, -1),
            Direction::Right => (0, 1),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Direction::Up => "up",
            Direction::Down => "down",
            Direction::Left => "left",
            Direction::Right => "right",
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Direction::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown direction {s:?}")))
    }
}

/// A `rows × cols` grid; cell `i` sits at `(i / cols, i % cols)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridSpec {
    rows: usize,
    cols: usize,
}

impl GridSpec {
    pub fn new(rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::invalid(format!(
                "grid dimensions must be positive, got {rows}x{cols}"
            )));
        }
        Ok(GridSpec { rows, cols })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Cell count.
    pub fn n(&self) -> usize {
        self.rows * self.cols
    }

    pub fn coords(&self, cell: usize) -> (usize, usize) {
        (cell / self.cols, cell % self.cols)
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.cols + col
    }

    /// Immediate neighbor of `cell` in `dir`, if it lies on the grid.
    pub fn neighbor(&self, cell: usize, dir: Direction) -> Option<usize> {
        let (r, c) = self.coords(cell);
        let (dr, dc) = dir.offset();
        let nr = r.checked_add_signed(dr)?;
        let nc = c.checked_add_signed(dc)?;
        (nr < self.rows && nc < self.cols).then(|| self.index(nr, nc))
    }

    /// Per-cell neighbor in `dir`.
    pub fn neighbor_map(&self, dir: Direction) -> Vec<Option<usize>> {
        (0..self.n()).map(|i| self.neighbor(i, dir)).collect()
    }

    /// First-order neighbor sets in `dir` (each of size 0 or 1).
    pub fn first_order_sets(&self, dir: Direction) -> Vec<Vec<usize>> {
        (0..self.n())
            .map(|i| self.neighbor(i, dir).into_iter().collect())
            .collect()
    }
}

impl fmt::Display for GridSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.rows, self.cols)
    }
}

pub fn build_grid(rows: usize, cols: usize) -> Result<GridSpec> {
    GridSpec::new(rows, cols)
}

/// Binary `n×n` mask with a 1 at `(x, x')` iff `x'` is the immediate
/// neighbor of `x` in direction `dir`. No wraparound.
pub fn build_adjacency(grid: &GridSpec, dir: Direction) -> Tensor {
    let n = grid.n();
    let mut mask = Array2::zeros((n, n));
    for x in 0..n {
        if let Some(y) = grid.neighbor(x, dir) {
            mask[[x, y]] = 1.0;
        }
    }
    mask
}

/// Recursive order-`p` neighborhoods over arbitrary first-order sets:
/// `N^(p)(x) = ∪_{x' ∈ N^(1)(x)} N^(p−1)(x')`, excluding `x` itself.
pub fn recursive_neighbors(first: &[Vec<usize>], order: usize) -> Result<Vec<BTreeSet<usize>>> {
    if order == 0 {
        return Err(Error::invalid("neighborhood order must be at least 1"));
    }
    let mut current: Vec<BTreeSet<usize>> = first.iter().map(|s| s.iter().copied().collect()).collect();
    for _ in 1..order {
        current = (0..first.len())
            .map(|x| {
                first[x]
                    .iter()
                    .filter(|&&y| y != x)
                    .flat_map(|&y| current[y].iter().copied())
                    .filter(|&z| z != x)
                    .collect()
            })
            .collect();
    }
    Ok(current)
}

/// Order-`p` neighborhoods `N_c^(p)(x)` of every cell of the grid.
pub fn higher_order_neighbors(grid: &GridSpec, dir: Direction, order: usize) -> Result<Vec<BTreeSet<usize>>> {
    recursive_neighbors(&grid.first_order_sets(dir), order)
}

/// The matrices `{P_c}`.
///
/// Each mask row holds at most one nonzero, so `P_c` is stored as its
/// support values: `weights[c][x]` is the weight of the link from `x` to
/// its neighbor in direction `c`, and zero when that neighbor is off-grid.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborhoodSystem {
    grid: GridSpec,
    links: Vec<Vec<Option<usize>>>,
    weights: Vec<Tensor>,
}

impl NeighborhoodSystem {
    /// Every existing neighbor link starts with weight 1.
    pub fn init(grid: &GridSpec) -> Self {
        let links: Vec<_> = Direction::ALL.iter().map(|&d| grid.neighbor_map(d)).collect();
        let weights = links
            .iter()
            .map(|l| Array2::from_shape_fn((l.len(), 1), |(i, _)| f64::from(l[i].is_some() as u8)))
            .collect();
        NeighborhoodSystem {
            grid: *grid,
            links,
            weights,
        }
    }

    /// Replaces the support weights; off-support entries are zeroed.
    pub fn with_weights(grid: &GridSpec, weights: Vec<Tensor>) -> Result<Self> {
        let mut ns = Self::init(grid);
        if weights.len() != Direction::COUNT {
            return Err(Error::invalid(format!(
                "expected {} direction weight vectors, got {}",
                Direction::COUNT,
                weights.len()
            )));
        }
        for w in &weights {
            if w.dim() != (grid.n(), 1) {
                return Err(Error::Shape {
                    op: "neighborhood weights",
                    lhs: w.dim(),
                    rhs: (grid.n(), 1),
                });
            }
        }
        ns.weights = weights;
        ns.reproject();
        Ok(ns)
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn links(&self, dir: Direction) -> &[Option<usize>] {
        &self.links[dir.index()]
    }

    /// Support weights of `P_dir` as an `n×1` column.
    pub fn weights(&self, dir: Direction) -> &Tensor {
        &self.weights[dir.index()]
    }

    pub fn weights_mut(&mut self, dir: Direction) -> &mut Tensor {
        &mut self.weights[dir.index()]
    }

    pub fn all_weights(&self) -> &[Tensor] {
        &self.weights
    }

    /// Zeroes every weight whose link leaves the grid.
    pub fn reproject(&mut self) {
        for (w, links) in self.weights.iter_mut().zip(&self.links) {
            for (x, link) in links.iter().enumerate() {
                if link.is_none() {
                    w[[x, 0]] = 0.0;
                }
            }
        }
    }

    /// Dense `n×n` view of `P_dir`.
    pub fn matrix(&self, dir: Direction) -> Tensor {
        let n = self.grid.n();
        let w = self.weights(dir);
        let mut m = Array2::zeros((n, n));
        for (x, link) in self.links(dir).iter().enumerate() {
            if let Some(y) = link {
                m[[x, *y]] = w[[x, 0]];
            }
        }
        m
    }

    /// Block-diagonal `P_dir` over `images` stacked copies of the grid.
    pub fn block_matrix(&self, dir: Direction, images: usize) -> Tensor {
        let n = self.grid.n();
        let single = self.matrix(dir);
        let mut m = Array2::zeros((n * images, n * images));
        for b in 0..images {
            m.slice_mut(ndarray::s![b * n..(b + 1) * n, b * n..(b + 1) * n])
                .assign(&single);
        }
        m
    }

    /// `‖P_dir‖₂`. Each row and each column of `P_dir` holds at most one
    /// nonzero (a weighted partial permutation), so the spectral norm is
    /// the largest absolute support weight.
    pub fn spectral_norm(&self, dir: Direction) -> f64 {
        self.weights(dir).iter().fold(0.0f64, |acc, w| acc.max(w.abs()))
    }

    /// `γ·Σ_c ‖P_c‖₂²`, an upper bound on the Frobenius-norm gain of the
    /// map `K ↦ γ Σ_c P_c K P_cᵀ`.
    pub fn contraction_factor(&self, gamma: f64) -> f64 {
        gamma
            * Direction::ALL
                .iter()
                .map(|&d| self.spectral_norm(d).powi(2))
                .sum::<f64>()
    }

    /// Multiplies every support weight by `factor`.
    pub fn scale(&mut self, factor: f64) {
        for w in &mut self.weights {
            *w *= factor;
        }
    }
}

/// Deterministic per-cell positional features.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionalEncoding {
    pub dim: usize,
    pub table: Tensor,
}

/// Columns 0 and 1 are `(row/rows, col/cols)`; the remaining `dim − 2`
/// columns come in pairs `(f(ωu), f(ωv))` with `ω = π·2^⌊j/2⌋` and `f`
/// alternating between `sin` and `cos`.
pub fn positional_encoding(grid: &GridSpec, dim: usize) -> Result<PositionalEncoding> {
    if dim < 2 || !dim.is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "positional encoding width must be even and at least 2, got {dim}"
        )));
    }
    let n = grid.n();
    let mut table = Array2::zeros((n, dim));
    for cell in 0..n {
        let (r, c) = grid.coords(cell);
        let u = r as f64 / grid.rows() as f64;
        let v = c as f64 / grid.cols() as f64;
        table[[cell, 0]] = u;
        table[[cell, 1]] = v;
        for j in 0..(dim - 2) / 2 {
            let omega = std::f64::consts::PI * f64::from(1u32 << (j / 2).min(30));
            let f = if j % 2 == 0 { f64::sin } else { f64::cos };
            table[[cell, 2 + 2 * j]] = f(omega * u);
            table[[cell, 3 + 2 * j]] = f(omega * v);
        }
    }
    Ok(PositionalEncoding { dim, table })
}
