//! Centered second differences of a potential at a chosen multiple of the
//! grid spacing. The stencil reads the cached cell-center values, so every
//! stencil point is exactly another cell center.

use crate::grid::{CellSet, GridSpec};
use crate::linalg::Mat;
use crate::par;
use crate::transport::{kink_gap_tol, PotentialField};

/// Discrete Hessian data for every cell a symmetric stencil fits around.
pub struct HessianField {
    pub grid: GridSpec,
    /// Differencing step per axis: `multiplier * spacing(axis)`.
    pub steps: Vec<f64>,
    /// Symmetric matrix per cell; `None` where the stencil does not fit.
    pub hessians: Vec<Option<Mat>>,
    /// Spectral norm per cell, NaN outside the margin. Kink cells keep
    /// their (large) value: level-set scans must see them.
    pub op_norms: Vec<f64>,
    /// Frobenius norm per cell, NaN outside the margin. Diagnostics only;
    /// nothing downstream thresholds on it.
    pub frobenius_norms: Vec<f64>,
    /// Margin-interior cells that are not kinks.
    pub valid: CellSet,
    /// Cells where some axis has a one-sided slope gap beyond the
    /// semiconvexity budget.
    pub kinks: CellSet,
    /// The potential's semiconvexity bound, echoed for downstream checks.
    pub k_floor: f64,
    /// Smallest directional second-difference quotient over valid cells;
    /// semiconvexity demands it stay above `-2 k_floor` up to noise.
    pub min_quotient: f64,
}

struct CellRecord {
    hessian: Mat,
    op_norm: f64,
    frobenius: f64,
    kink: bool,
    min_quotient: f64,
}

/// Differences the value cache of `u` with step `step_multiplier` cells.
/// Cells whose stencil leaves the grid are masked; cells with a detected
/// slope kink are flagged and excluded from `valid` but still carry their
/// Hessian and norms.
pub fn hessian_field(u: &PotentialField, step_multiplier: usize) -> HessianField {
    let grid = u.grid.clone();
    let dim = grid.dim();
    let m = step_multiplier.max(1);
    let steps: Vec<f64> = (0..dim).map(|a| m as f64 * grid.spacing(a)).collect();
    let values = &u.values;
    let k = u.k_semiconvex;

    // Offsets are in cells along flat order: moving one cell along axis a
    // changes the flat index by the product of resolutions below a.
    let mut axis_stride = vec![0isize; dim];
    let mut s = 1isize;
    for a in 0..dim {
        axis_stride[a] = s;
        s *= grid.res[a] as isize;
    }

    let records = par::map_collect(grid.cell_count(), |c| -> Option<CellRecord> {
        let multi = grid.multi(c);
        if !grid.interior_multi(&multi, m) {
            return None;
        }
        let at = |offsets: &[(usize, isize)]| -> f64 {
            let mut flat = c as isize;
            for &(axis, cells) in offsets {
                flat += axis_stride[axis] * cells;
            }
            values[flat as usize]
        };
        let v0 = values[c];
        let mi = m as isize;

        let mut h = Mat::zeros(dim, dim);
        let mut kink = false;
        let mut min_q = f64::INFINITY;
        for a in 0..dim {
            let vp = at(&[(a, mi)]);
            let vm = at(&[(a, -mi)]);
            let t = steps[a];
            let second = (vp - 2.0 * v0 + vm) / (t * t);
            h[(a, a)] = second;
            min_q = min_q.min(second);
            // One-sided slopes (vp - v0)/t and (v0 - vm)/t differ by
            // t * second; a genuine kink keeps the gap of order one.
            if (vp - 2.0 * v0 + vm).abs() / t > kink_gap_tol(t, k) {
                kink = true;
            }
        }
        for a in 0..dim {
            for b in (a + 1)..dim {
                let vpp = at(&[(a, mi), (b, mi)]);
                let vpm = at(&[(a, mi), (b, -mi)]);
                let vmp = at(&[(a, -mi), (b, mi)]);
                let vmm = at(&[(a, -mi), (b, -mi)]);
                let mixed = (vpp - vpm - vmp + vmm) / (4.0 * steps[a] * steps[b]);
                h[(a, b)] = mixed;
                h[(b, a)] = mixed;
                // Second differences along both diagonal directions; the
                // semiconvexity floor applies to every direction, not just
                // the axes.
                let t2 = steps[a] * steps[a] + steps[b] * steps[b];
                min_q = min_q.min((vpp - 2.0 * v0 + vmm) / t2);
                min_q = min_q.min((vpm - 2.0 * v0 + vmp) / t2);
            }
        }
        Some(CellRecord {
            op_norm: h.op_norm(),
            frobenius: h.frobenius_norm(),
            hessian: h,
            kink,
            min_quotient: min_q,
        })
    });

    let cells = grid.cell_count();
    let mut hessians: Vec<Option<Mat>> = Vec::with_capacity(cells);
    let mut op_norms = vec![f64::NAN; cells];
    let mut frobenius_norms = vec![f64::NAN; cells];
    let mut valid = CellSet::new(grid.clone());
    let mut kinks = CellSet::new(grid.clone());
    let mut min_quotient = f64::INFINITY;
    for (c, rec) in records.into_iter().enumerate() {
        match rec {
            Some(rec) => {
                op_norms[c] = rec.op_norm;
                frobenius_norms[c] = rec.frobenius;
                hessians.push(Some(rec.hessian));
                if rec.kink {
                    kinks.insert(c);
                } else {
                    valid.insert(c);
                    min_quotient = min_quotient.min(rec.min_quotient);
                }
            }
            None => hessians.push(None),
        }
    }

    HessianField {
        grid,
        steps,
        hessians,
        op_norms,
        frobenius_norms,
        valid,
        kinks,
        k_floor: k,
        min_quotient,
    }
}
