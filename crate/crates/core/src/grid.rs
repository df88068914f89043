//! Axis-aligned boxes, uniform evaluation grids, and bitset cell sets.
//!
//! Grids are cell-centered: a `GridSpec` with resolution `r` along an axis
//! splits that axis into `r` cells and evaluates fields at cell centers.
//! Flat cell indices run with axis 0 fastest.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Axis-aligned box `[lo_1, hi_1] x ... x [lo_n, hi_n]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl GridBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() || lo.is_empty() {
            return Err(invalid("box bounds must be non-empty and equal length"));
        }
        for (l, h) in lo.iter().zip(&hi) {
            if !(l < h) {
                return Err(invalid(format!("box bounds out of order: {l} >= {h}")));
            }
        }
        Ok(GridBox { lo, hi })
    }

    pub fn unit(dim: usize) -> Self {
        GridBox {
            lo: vec![0.0; dim],
            hi: vec![1.0; dim],
        }
    }

    /// `[-r, r]^n`.
    pub fn symmetric(dim: usize, r: f64) -> Self {
        GridBox {
            lo: vec![-r; dim],
            hi: vec![r; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn contains(&self, x: &[f64], tol: f64) -> bool {
        x.len() == self.dim()
            && x.iter()
                .zip(self.lo.iter().zip(&self.hi))
                .all(|(xi, (l, h))| *xi >= l - tol && *xi <= h + tol)
    }

    pub fn center(&self) -> Vec<f64> {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(l, h)| 0.5 * (l + h))
            .collect()
    }

    pub fn diameter(&self) -> f64 {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(l, h)| (h - l) * (h - l))
            .sum::<f64>()
            .sqrt()
    }

    pub fn volume(&self) -> f64 {
        self.lo.iter().zip(&self.hi).map(|(l, h)| h - l).product()
    }
}

/// Region a scenario transports from or into. Boxes carry the grid; balls
/// restrict it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Domain {
    Box { lo: Vec<f64>, hi: Vec<f64> },
    Ball { center: Vec<f64>, radius: f64 },
}

impl Domain {
    pub fn dim(&self) -> usize {
        match self {
            Domain::Box { lo, .. } => lo.len(),
            Domain::Ball { center, .. } => center.len(),
        }
    }

    pub fn contains(&self, x: &[f64], tol: f64) -> bool {
        match self {
            Domain::Box { lo, hi } => x
                .iter()
                .zip(lo.iter().zip(hi))
                .all(|(xi, (l, h))| *xi >= l - tol && *xi <= h + tol),
            Domain::Ball { center, radius } => crate::linalg::dist(x, center) <= radius + tol,
        }
    }

    /// Smallest box containing the domain.
    pub fn bounding_box(&self) -> GridBox {
        match self {
            Domain::Box { lo, hi } => GridBox {
                lo: lo.clone(),
                hi: hi.clone(),
            },
            Domain::Ball { center, radius } => GridBox {
                lo: center.iter().map(|c| c - radius).collect(),
                hi: center.iter().map(|c| c + radius).collect(),
            },
        }
    }
}

/// Uniform cell-centered grid over a box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub bbox: GridBox,
    pub res: Vec<usize>,
}

impl GridSpec {
    pub fn new(bbox: GridBox, res: Vec<usize>) -> Result<Self> {
        if res.len() != bbox.dim() {
            return Err(invalid("grid resolution and box dimension differ"));
        }
        if res.iter().any(|&r| r == 0) {
            return Err(invalid("grid resolution must be positive on every axis"));
        }
        Ok(GridSpec { bbox, res })
    }

    /// Same resolution on every axis.
    pub fn square(bbox: GridBox, res: usize) -> Result<Self> {
        let dim = bbox.dim();
        GridSpec::new(bbox, vec![res; dim])
    }

    pub fn dim(&self) -> usize {
        self.res.len()
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        (self.bbox.hi[axis] - self.bbox.lo[axis]) / self.res[axis] as f64
    }

    /// Largest cell extent over all axes; the "spacing" quoted in
    /// tolerances.
    pub fn max_spacing(&self) -> f64 {
        (0..self.dim()).map(|a| self.spacing(a)).fold(0.0, f64::max)
    }

    pub fn cell_count(&self) -> usize {
        self.res.iter().product()
    }

    pub fn cell_volume(&self) -> f64 {
        (0..self.dim()).map(|a| self.spacing(a)).product()
    }

    pub fn multi(&self, flat: usize) -> Vec<usize> {
        let mut rest = flat;
        self.res
            .iter()
            .map(|&r| {
                let i = rest % r;
                rest /= r;
                i
            })
            .collect()
    }

    pub fn flat(&self, multi: &[usize]) -> usize {
        debug_assert_eq!(multi.len(), self.dim());
        let mut flat = 0;
        for axis in (0..self.dim()).rev() {
            flat = flat * self.res[axis] + multi[axis];
        }
        flat
    }

    pub fn center(&self, flat: usize) -> Vec<f64> {
        let multi = self.multi(flat);
        (0..self.dim())
            .map(|a| self.bbox.lo[a] + (multi[a] as f64 + 0.5) * self.spacing(a))
            .collect()
    }

    /// Cell containing `x`, with points on the far boundary assigned to
    /// the last cell. `None` outside the box.
    pub fn cell_of(&self, x: &[f64]) -> Option<usize> {
        if x.len() != self.dim() {
            return None;
        }
        let mut multi = Vec::with_capacity(self.dim());
        for a in 0..self.dim() {
            let (lo, hi) = (self.bbox.lo[a], self.bbox.hi[a]);
            if x[a] < lo || x[a] > hi {
                return None;
            }
            let i = ((x[a] - lo) / self.spacing(a)).floor() as usize;
            multi.push(i.min(self.res[a] - 1));
        }
        Some(self.flat(&multi))
    }

    pub fn centers(&self) -> impl Iterator<Item = Vec<f64>> + '_ {
        (0..self.cell_count()).map(|i| self.center(i))
    }

    /// Flat indices of face neighbors of `flat` (up to `2n` of them).
    pub fn face_neighbors(&self, flat: usize, out: &mut Vec<usize>) {
        out.clear();
        let multi = self.multi(flat);
        for a in 0..self.dim() {
            if multi[a] > 0 {
                let mut m = multi.clone();
                m[a] -= 1;
                out.push(self.flat(&m));
            }
            if multi[a] + 1 < self.res[a] {
                let mut m = multi.clone();
                m[a] += 1;
                out.push(self.flat(&m));
            }
        }
    }

    /// True when every lattice point `x + t*offset` used by a symmetric
    /// stencil of reach `reach` cells stays inside the grid.
    pub fn interior_multi(&self, multi: &[usize], reach: usize) -> bool {
        multi
            .iter()
            .zip(&self.res)
            .all(|(&i, &r)| i >= reach && i + reach < r)
    }
}

/// Set of grid cells, stored as a bitset over flat indices.
#[derive(Debug, Clone, PartialEq)]
pub struct CellSet {
    pub grid: GridSpec,
    words: Vec<u64>,
    len: usize,
}

impl CellSet {
    pub fn new(grid: GridSpec) -> Self {
        let n = grid.cell_count();
        CellSet {
            grid,
            words: vec![0; n.div_ceil(64)],
            len: 0,
        }
    }

    pub fn from_indices(grid: GridSpec, indices: impl IntoIterator<Item = usize>) -> Self {
        let mut set = CellSet::new(grid);
        for i in indices {
            set.insert(i);
        }
        set
    }

    pub fn insert(&mut self, flat: usize) {
        let (w, b) = (flat / 64, flat % 64);
        if self.words[w] & (1 << b) == 0 {
            self.words[w] |= 1 << b;
            self.len += 1;
        }
    }

    pub fn contains(&self, flat: usize) -> bool {
        let (w, b) = (flat / 64, flat % 64);
        self.words[w] & (1 << b) != 0
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn volume(&self) -> f64 {
        self.len as f64 * self.grid.cell_volume()
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.words.iter().enumerate().flat_map(|(w, &bits)| {
            let mut bits = bits;
            std::iter::from_fn(move || {
                if bits == 0 {
                    return None;
                }
                let b = bits.trailing_zeros() as usize;
                bits &= bits - 1;
                Some(w * 64 + b)
            })
        })
    }

    pub fn is_disjoint(&self, other: &CellSet) -> bool {
        debug_assert_eq!(self.grid, other.grid);
        self.words
            .iter()
            .zip(&other.words)
            .all(|(a, b)| a & b == 0)
    }

    pub fn is_subset(&self, other: &CellSet) -> bool {
        debug_assert_eq!(self.grid, other.grid);
        self.words
            .iter()
            .zip(&other.words)
            .all(|(a, b)| a & !b == 0)
    }

    pub fn intersection_len(&self, other: &CellSet) -> usize {
        debug_assert_eq!(self.grid, other.grid);
        self.words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a & b).count_ones() as usize)
            .sum()
    }

    pub fn union_with(&mut self, other: &CellSet) {
        debug_assert_eq!(self.grid, other.grid);
        for (a, b) in self.words.iter_mut().zip(&other.words) {
            *a |= b;
        }
        self.len = self.words.iter().map(|w| w.count_ones() as usize).sum();
    }

    /// True when the set is face-connected (empty sets count as connected).
    pub fn is_connected(&self) -> bool {
        let Some(start) = self.iter().next() else {
            return true;
        };
        let mut seen = vec![false; self.grid.cell_count()];
        let mut stack = vec![start];
        seen[start] = true;
        let mut reached = 0usize;
        let mut nbrs = Vec::new();
        while let Some(cell) = stack.pop() {
            reached += 1;
            self.grid.face_neighbors(cell, &mut nbrs);
            for &nb in &nbrs {
                if !seen[nb] && self.contains(nb) {
                    seen[nb] = true;
                    stack.push(nb);
                }
            }
        }
        reached == self.len
    }

    /// Set grown by `layers` rings of face neighbors.
    pub fn dilate(&self, layers: usize) -> CellSet {
        let mut current = self.clone();
        let mut nbrs = Vec::new();
        for _ in 0..layers {
            let mut next = current.clone();
            for cell in current.iter() {
                current.grid.face_neighbors(cell, &mut nbrs);
                for &nb in &nbrs {
                    next.insert(nb);
                }
            }
            current = next;
        }
        current
    }
}

/// `index`-th element of the Halton sequence in the given prime base,
/// in `(0, 1)`. Deterministic low-discrepancy samples for condition checks.
pub fn halton(index: usize, base: usize) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    let mut i = index + 1;
    while i > 0 {
        f /= base as f64;
        r += f * (i % base) as f64;
        i /= base;
    }
    r
}

/// First `count` Halton points in the box, axis `a` using the `a`-th prime.
pub fn halton_points(bbox: &GridBox, count: usize) -> Vec<Vec<f64>> {
    const PRIMES: [usize; 8] = [2, 3, 5, 7, 11, 13, 17, 19];
    assert!(bbox.dim() <= PRIMES.len());
    (0..count)
        .map(|i| {
            (0..bbox.dim())
                .map(|a| {
                    let t = halton(i, PRIMES[a]);
                    bbox.lo[a] + t * (bbox.hi[a] - bbox.lo[a])
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid_2d() -> GridSpec {
        GridSpec::square(GridBox::unit(2), 4).unwrap()
    }

    #[test]
    fn spacing_and_centers() {
        let g = grid_2d();
        assert_eq!(g.spacing(0), 0.25);
        assert_eq!(g.cell_count(), 16);
        assert_eq!(g.center(0), vec![0.125, 0.125]);
        // Axis 0 varies fastest.
        assert_eq!(g.center(1), vec![0.375, 0.125]);
        assert_eq!(g.center(4), vec![0.125, 0.375]);
    }

    #[test]
    fn flat_multi_roundtrip() {
        let g = GridSpec::new(GridBox::unit(3), vec![3, 4, 5]).unwrap();
        for flat in 0..g.cell_count() {
            assert_eq!(g.flat(&g.multi(flat)), flat);
        }
    }

    #[test]
    fn cell_of_handles_boundaries() {
        let g = grid_2d();
        assert_eq!(g.cell_of(&[0.0, 0.0]), Some(0));
        // The far boundary belongs to the last cell.
        assert_eq!(g.cell_of(&[1.0, 1.0]), Some(15));
        assert_eq!(g.cell_of(&[1.1, 0.5]), None);
        let c = g.center(7);
        assert_eq!(g.cell_of(&c), Some(7));
    }

    #[test]
    fn cellset_ops() {
        let g = grid_2d();
        let a = CellSet::from_indices(g.clone(), [0, 1, 5]);
        let b = CellSet::from_indices(g.clone(), [5, 6]);
        assert_eq!(a.len(), 3);
        assert!(!a.is_disjoint(&b));
        assert_eq!(a.intersection_len(&b), 1);
        let c = CellSet::from_indices(g.clone(), [0, 1]);
        assert!(c.is_subset(&a));
        assert!(!a.is_subset(&c));
        assert_eq!(a.iter().collect::<Vec<_>>(), vec![0, 1, 5]);
        assert!((a.volume() - 3.0 / 16.0).abs() < 1e-15);
    }

    #[test]
    fn connectivity_and_dilation() {
        let g = grid_2d();
        // Cells 0 and 1 share a face; 15 is far away.
        let disconnected = CellSet::from_indices(g.clone(), [0, 1, 15]);
        assert!(!disconnected.is_connected());
        let connected = CellSet::from_indices(g.clone(), [0, 1, 2]);
        assert!(connected.is_connected());

        let single = CellSet::from_indices(g.clone(), [5]);
        let grown = single.dilate(1);
        // Interior cell gains its four face neighbors.
        assert_eq!(grown.len(), 5);
        assert!(grown.contains(5) && grown.contains(1) && grown.contains(9));
    }

    #[test]
    fn halton_is_low_discrepancy_in_unit_box() {
        let pts = halton_points(&GridBox::unit(2), 1000);
        // Mean of a low-discrepancy sequence is close to the box center.
        let mean0 = pts.iter().map(|p| p[0]).sum::<f64>() / 1000.0;
        let mean1 = pts.iter().map(|p| p[1]).sum::<f64>() / 1000.0;
        assert!((mean0 - 0.5).abs() < 0.01);
        assert!((mean1 - 0.5).abs() < 0.01);
        assert!(pts.iter().all(|p| p[0] > 0.0 && p[0] < 1.0));
    }

    #[test]
    fn domain_membership() {
        let ball = Domain::Ball {
            center: vec![0.0, 0.0],
            radius: 1.0,
        };
        assert!(ball.contains(&[0.6, 0.6], 0.0));
        assert!(!ball.contains(&[0.8, 0.8], 0.0));
        // A point exactly on the sphere needs only a tiny tolerance.
        assert!(ball.contains(&[0.6, 0.8], 1e-12));
        let bb = ball.bounding_box();
        assert_eq!(bb.lo, vec![-1.0, -1.0]);
    }
}
