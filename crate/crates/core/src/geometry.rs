//! Convex geometry behind the section analysis: hulls, minimum-volume
//! enclosing ellipsoids, det-1 affine normalization with sandwich radii,
//! convex envelopes with contact sets, and greedy Vitali selection.
//!
//! The normalization convention: a section is straightened by an affine
//! map `x = A z + t` with `det A = 1`, so Lebesgue measure is preserved
//! and the section's eccentricity moves entirely into `A`. The measured
//! size of a section is then `norm_size = |A^{-1}|^2`.

use std::f64::consts::TAU;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::cconvex::Section;
use crate::error::{invalid, LabError, Result};
use crate::grid::{CellSet, GridSpec};
use crate::linalg::{dot, norm, sub, Mat};
use crate::par;

/// Convex hull of a point set in dimension 1 or 2. Vertices are a
/// subset of the input; in 2D they run counterclockwise.
#[derive(Debug, Clone)]
pub struct Polytope {
    pub dim: usize,
    pub vertices: Vec<Vec<f64>>,
    /// Vertex index lists: edges in 2D, endpoints in 1D.
    pub facets: Vec<Vec<usize>>,
    /// True when the hull spans less than the ambient dimension.
    pub degenerate: bool,
}

impl Polytope {
    /// Signed containment with slack `tol` in length units; a negative
    /// `tol` demands the point lie that far inside.
    pub fn contains(&self, p: &[f64], tol: f64) -> bool {
        match (self.dim, self.vertices.len()) {
            (_, 0) => false,
            (1, 1) => (p[0] - self.vertices[0][0]).abs() <= tol,
            (1, _) => {
                let lo = self.vertices[0][0].min(self.vertices[1][0]);
                let hi = self.vertices[0][0].max(self.vertices[1][0]);
                p[0] >= lo - tol && p[0] <= hi + tol
            }
            (2, 1) => crate::linalg::dist(p, &self.vertices[0]) <= tol,
            (2, 2) => segment_distance(&self.vertices[0], &self.vertices[1], p) <= tol,
            (2, k) => {
                for i in 0..k {
                    let a = &self.vertices[i];
                    let b = &self.vertices[(i + 1) % k];
                    let e = [b[0] - a[0], b[1] - a[1]];
                    let len = (e[0] * e[0] + e[1] * e[1]).sqrt();
                    let cross = e[0] * (p[1] - a[1]) - e[1] * (p[0] - a[0]);
                    if cross / len < -tol {
                        return false;
                    }
                }
                true
            }
            _ => false,
        }
    }

    /// Enclosed area in 2D, segment length in 1D, zero when degenerate.
    pub fn measure(&self) -> f64 {
        match (self.dim, self.vertices.len()) {
            (1, 2) => (self.vertices[1][0] - self.vertices[0][0]).abs(),
            (2, k) if k >= 3 => {
                let mut s = 0.0;
                for i in 0..k {
                    let a = &self.vertices[i];
                    let b = &self.vertices[(i + 1) % k];
                    s += a[0] * b[1] - b[0] * a[1];
                }
                0.5 * s
            }
            _ => 0.0,
        }
    }
}

fn segment_distance(a: &[f64], b: &[f64], p: &[f64]) -> f64 {
    let e = sub(b, a);
    let w = sub(p, a);
    let ee = dot(&e, &e);
    let t = if ee > 0.0 { (dot(&w, &e) / ee).clamp(0.0, 1.0) } else { 0.0 };
    let q: Vec<f64> = a.iter().zip(&e).map(|(ai, ei)| ai + t * ei).collect();
    crate::linalg::dist(p, &q)
}

pub fn convex_hull(points: &[Vec<f64>]) -> Result<Polytope> {
    if points.is_empty() {
        return Err(invalid("convex hull of an empty point set"));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(invalid("convex hull points must share a dimension"));
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(invalid("convex hull points must be finite"));
    }
    if dim == 0 || dim > 2 {
        return Err(LabError::UnsupportedDimension {
            what: "convex_hull",
            dim,
            max: 2,
        });
    }
    if dim == 1 {
        let lo = points.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min);
        let hi = points.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max);
        if hi <= lo {
            return Ok(Polytope {
                dim,
                vertices: vec![vec![lo]],
                facets: vec![],
                degenerate: true,
            });
        }
        return Ok(Polytope {
            dim,
            vertices: vec![vec![lo], vec![hi]],
            facets: vec![vec![0], vec![1]],
            degenerate: false,
        });
    }
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| {
        a[0].partial_cmp(&b[0])
            .unwrap()
            .then(a[1].partial_cmp(&b[1]).unwrap())
    });
    pts.dedup();
    let scale = pts
        .iter()
        .flatten()
        .fold(1.0f64, |m, v| m.max(v.abs()));
    let eps = 1e-12 * scale * scale;
    let cross = |o: &[f64], a: &[f64], b: &[f64]| {
        (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
    };
    let chain = |iter: &mut dyn Iterator<Item = &Vec<f64>>| {
        let mut out: Vec<Vec<f64>> = Vec::new();
        for p in iter {
            while out.len() >= 2 && cross(&out[out.len() - 2], &out[out.len() - 1], p) <= eps {
                out.pop();
            }
            out.push(p.clone());
        }
        out
    };
    let mut lower = chain(&mut pts.iter());
    let mut upper = chain(&mut pts.iter().rev());
    lower.pop();
    upper.pop();
    let mut vertices = lower;
    vertices.extend(upper);
    if vertices.is_empty() {
        // all points identical
        vertices.push(pts[0].clone());
    }
    let k = vertices.len();
    let degenerate = k < 3;
    let facets = if k >= 3 {
        (0..k).map(|i| vec![i, (i + 1) % k]).collect()
    } else if k == 2 {
        vec![vec![0], vec![1]]
    } else {
        vec![]
    };
    Ok(Polytope {
        dim,
        vertices,
        facets,
        degenerate,
    })
}

/// Minimum-volume enclosing ellipsoid `{ c + S z : |z| <= 1 }` of a
/// full-dimensional point set, by coordinate ascent on the log-det
/// objective with away steps. Relative tolerance 1e-7 in the optimality
/// gap, which bounds the volume error well below 1e-6.
pub fn mvee(points: &[Vec<f64>]) -> Result<(Vec<f64>, Mat)> {
    let m = points.len();
    if m == 0 {
        return Err(invalid("ellipsoid fit needs points"));
    }
    let n = points[0].len();
    if m < n + 1 {
        return Err(LabError::DegenerateSection {
            detail: format!("ellipsoid fit has {m} points, dimension {n} needs {}", n + 1),
        });
    }
    let d = n + 1;
    let lifted: Vec<Vec<f64>> = points
        .iter()
        .map(|p| {
            let mut q = p.clone();
            q.push(1.0);
            q
        })
        .collect();
    let mut u = vec![1.0 / m as f64; m];
    let eps = 1e-7;
    let max_iter = 200_000;
    let mut converged = false;
    let mut residual = f64::INFINITY;
    for _ in 0..max_iter {
        let mut x = Mat::zeros(d, d);
        for (q, &w) in lifted.iter().zip(&u) {
            if w > 0.0 {
                x.add_outer(q, w);
            }
        }
        let xinv = x.inverse().map_err(|_| LabError::DegenerateSection {
            detail: "ellipsoid fit hit a singular moment matrix; the points do not span".into(),
        })?;
        let w: Vec<f64> = lifted
            .iter()
            .map(|q| {
                let y = xinv.mat_vec(q);
                dot(q, &y)
            })
            .collect();
        let jmax = (0..m)
            .max_by(|&a, &b| w[a].partial_cmp(&w[b]).unwrap())
            .unwrap();
        let jmin = (0..m)
            .filter(|&j| u[j] > 1e-12)
            .min_by(|&a, &b| w[a].partial_cmp(&w[b]).unwrap())
            .unwrap();
        let up = w[jmax] / d as f64 - 1.0;
        let down = 1.0 - w[jmin] / d as f64;
        residual = up.max(down);
        if residual <= eps {
            converged = true;
            break;
        }
        let (j, beta) = if up >= down {
            let wj = w[jmax];
            (jmax, (wj - d as f64) / (d as f64 * (wj - 1.0)))
        } else {
            let wj = w[jmin];
            let unc = if wj > 1.0 + 1e-12 {
                (wj - d as f64) / (d as f64 * (wj - 1.0))
            } else {
                -1.0
            };
            (jmin, unc.max(-u[jmin] / (1.0 - u[jmin])))
        };
        for v in u.iter_mut() {
            *v *= 1.0 - beta;
        }
        u[j] += beta;
        if u[j] < 0.0 {
            u[j] = 0.0;
        }
    }
    if !converged {
        return Err(LabError::IterationLimit {
            what: "enclosing ellipsoid",
            iters: max_iter,
            residual,
        });
    }
    let mut center = vec![0.0; n];
    for (p, &w) in points.iter().zip(&u) {
        for k in 0..n {
            center[k] += w * p[k];
        }
    }
    let mut cov = Mat::zeros(n, n);
    for (p, &w) in points.iter().zip(&u) {
        if w > 0.0 {
            cov.add_outer(&sub(p, &center), w);
        }
    }
    let shape = spd_sqrt(&cov, n as f64)?;
    Ok((center, shape))
}

/// `sqrt(factor * m)` for symmetric positive definite `m`.
fn spd_sqrt(m: &Mat, factor: f64) -> Result<Mat> {
    let n = m.rows();
    let (vals, vecs) = m.sym_eigen();
    let top = vals.iter().fold(0.0f64, |a, &v| a.max(v.abs())).max(1e-300);
    let mut out = Mat::zeros(n, n);
    for k in 0..n {
        if vals[k] <= 1e-12 * top {
            return Err(LabError::DegenerateSection {
                detail: format!("ellipsoid is flat (eigenvalue {:.3e})", vals[k]),
            });
        }
        let col: Vec<f64> = (0..n).map(|i| vecs[(i, k)]).collect();
        out.add_outer(&col, (factor * vals[k]).sqrt());
    }
    Ok(out)
}

/// Volume-preserving affine frame `x = A z + t` with `det A = 1`.
#[derive(Debug, Clone)]
pub struct AffineMap {
    pub matrix: Mat,
    pub translation: Vec<f64>,
    inverse: Mat,
    pub norm_a: f64,
    pub norm_ainv: f64,
}

impl AffineMap {
    pub fn new(matrix: Mat, translation: Vec<f64>) -> Result<Self> {
        let n = matrix.rows();
        if matrix.cols() != n || translation.len() != n {
            return Err(LabError::DimensionMismatch {
                what: "affine map",
                expected: n,
                got: translation.len(),
            });
        }
        let det = matrix.det();
        if (det - 1.0).abs() > 1e-9 {
            return Err(invalid(format!(
                "affine map must preserve volume, got det {det}"
            )));
        }
        let inverse = matrix.inverse()?;
        let check = matrix.mat_mul(&inverse);
        let mut drift = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                let want = if i == j { 1.0 } else { 0.0 };
                drift = drift.max((check[(i, j)] - want).abs());
            }
        }
        if drift > 1e-9 {
            return Err(invalid(format!(
                "affine map inverse drifts by {drift:.3e}"
            )));
        }
        let norm_a = matrix.op_norm();
        let norm_ainv = inverse.op_norm();
        Ok(AffineMap {
            matrix,
            translation,
            inverse,
            norm_a,
            norm_ainv,
        })
    }

    pub fn inverse(&self) -> &Mat {
        &self.inverse
    }

    /// `A z + t`.
    pub fn apply(&self, z: &[f64]) -> Vec<f64> {
        let mut out = self.matrix.mat_vec(z);
        for (o, t) in out.iter_mut().zip(&self.translation) {
            *o += t;
        }
        out
    }

    /// `A^{-1}(x - t)`.
    pub fn apply_inv(&self, x: &[f64]) -> Vec<f64> {
        self.inverse.mat_vec(&sub(x, &self.translation))
    }
}

/// Outcome of normalizing one section: the det-1 frame, the inclusion
/// radii measured on the cell-center lattice, and the size in the
/// normalized frame.
#[derive(Debug, Clone)]
pub struct JohnReport {
    pub map: AffineMap,
    /// Smallest `r` with every section cell center in `A(B_r) + t`.
    pub r_out: f64,
    /// Largest `r` with `A(B_r) + t` clear of complement cell centers
    /// and of the grid boundary.
    pub r_in: f64,
    pub sandwich_ratio: f64,
    /// `|A^{-1}|^2`, the normalized size of the section.
    pub norm_size: f64,
    pub h: f64,
    /// Enclosing-ellipsoid check: hull inside `E`, `E` shrunk by the
    /// dimension inside the hull, both with one cell layer of slack.
    pub john_ok: bool,
}

/// Fits the minimum-volume enclosing ellipsoid of the section's cell
/// centers, splits it into a det-1 frame and a scale, and measures how
/// tightly balls in that frame sandwich the section. The frame and the
/// sandwich ratio are written back onto the section.
pub fn john_normalize(section: &mut Section) -> Result<JohnReport> {
    let grid = section.grid.clone();
    let n = grid.dim();
    let m = section.cells.len();
    if m < n + 1 {
        return Err(LabError::DegenerateSection {
            detail: format!(
                "section has {m} cells, a {n}-dimensional frame needs at least {}",
                n + 1
            ),
        });
    }
    let centers: Vec<Vec<f64>> = section.cells.iter().map(|c| grid.center(c)).collect();
    let mut hull_opt = None;
    let (center, shape) = if n == 1 {
        let lo = centers.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min);
        let hi = centers.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max);
        if hi <= lo {
            return Err(LabError::DegenerateSection {
                detail: "section cells share one coordinate".into(),
            });
        }
        (vec![0.5 * (lo + hi)], Mat::from_rows(&[&[0.5 * (hi - lo)]]))
    } else if n == 2 {
        let hull = convex_hull(&centers)?;
        if hull.degenerate {
            return Err(LabError::DegenerateSection {
                detail: format!(
                    "section spans a lower-dimensional hull with vertices {:?}",
                    hull.vertices
                ),
            });
        }
        let fit = mvee(&hull.vertices)?;
        hull_opt = Some(hull);
        fit
    } else {
        mvee(&centers)?
    };
    let r_scale = shape.det().powf(1.0 / n as f64);
    let map = AffineMap::new(shape.scale(1.0 / r_scale), center.clone())?;
    let mut r_out = 0.0f64;
    for p in &centers {
        r_out = r_out.max(norm(&map.apply_inv(p)));
    }
    let mut r_in = f64::INFINITY;
    for c in 0..grid.cell_count() {
        if !section.cells.contains(c) {
            r_in = r_in.min(norm(&map.apply_inv(&grid.center(c))));
        }
    }
    for k in 0..n {
        let row: f64 = (0..n)
            .map(|j| map.matrix[(k, j)] * map.matrix[(k, j)])
            .sum::<f64>()
            .sqrt();
        r_in = r_in.min((center[k] - grid.bbox.lo[k]).abs() / row);
        r_in = r_in.min((grid.bbox.hi[k] - center[k]).abs() / row);
    }
    if !(r_in > 0.0) {
        return Err(LabError::DegenerateSection {
            detail: "normalized frame touches the section complement at its center".into(),
        });
    }
    let sp = grid.max_spacing();
    let mut john_ok = r_out <= r_scale * (1.0 + 1e-5) + 1e-12;
    if let Some(hull) = &hull_opt {
        for t in 0..64 {
            let ang = TAU * t as f64 / 64.0;
            let z = [
                ang.cos() * r_scale / n as f64,
                ang.sin() * r_scale / n as f64,
            ];
            john_ok &= hull.contains(&map.apply(&z), 1.5 * sp);
        }
    }
    let sandwich_ratio = r_out / r_in;
    let norm_size = map.norm_ainv * map.norm_ainv;
    section.affine = Some(map.clone());
    section.sandwich_ratio = Some(sandwich_ratio);
    Ok(JohnReport {
        map,
        r_out,
        r_in,
        sandwich_ratio,
        norm_size,
        h: section.h,
        john_ok,
    })
}

/// Largest convex minorant of a grid function over a convex cell set,
/// with the cells where it touches the function.
#[derive(Debug, Clone)]
pub struct EnvelopeResult {
    pub grid: GridSpec,
    /// Domain cells in ascending flat order.
    pub cells: Vec<usize>,
    /// Envelope value per domain cell, parallel to `cells`.
    pub values: Vec<f64>,
    pub contact: CellSet,
    pub tol: f64,
}

impl EnvelopeResult {
    pub fn value(&self, flat: usize) -> Option<f64> {
        self.cells
            .binary_search(&flat)
            .ok()
            .map(|k| self.values[k])
    }
}

/// Computes the convex envelope of `phi` restricted to `domain` exactly
/// at cell centers: per cell, the best affine minorant is found as a
/// small linear program over the supporting-plane constraints. Cost is
/// quadratic in the domain size.
pub fn convex_envelope(grid: &GridSpec, phi: &[f64], domain: &CellSet) -> Result<EnvelopeResult> {
    if phi.len() != grid.cell_count() {
        return Err(LabError::DimensionMismatch {
            what: "envelope field",
            expected: grid.cell_count(),
            got: phi.len(),
        });
    }
    if domain.grid != *grid {
        return Err(invalid("envelope domain lives on a different grid"));
    }
    let n = grid.dim();
    if n > 3 {
        return Err(LabError::UnsupportedDimension {
            what: "convex_envelope",
            dim: n,
            max: 3,
        });
    }
    let cells: Vec<usize> = domain.iter().collect();
    let m = cells.len();
    if m < n + 2 {
        return Err(LabError::DegenerateSection {
            detail: format!("envelope domain has {m} cells, needs at least {}", n + 2),
        });
    }
    if n == 3 && m > 100_000 {
        return Err(LabError::TooLarge {
            size: m,
            limit: 100_000,
        });
    }
    if cells.iter().any(|&c| !phi[c].is_finite()) {
        return Err(invalid("envelope field must be finite on its domain"));
    }
    let lo = cells.iter().map(|&c| phi[c]).fold(f64::INFINITY, f64::min);
    let hi = cells
        .iter()
        .map(|&c| phi[c])
        .fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    let max_abs = hi.abs().max(lo.abs());
    let values = if n == 1 {
        if cells[m - 1] - cells[0] + 1 != m {
            return Err(invalid(
                "a one-dimensional envelope domain must be an interval of cells",
            ));
        }
        envelope_lower_hull(grid, phi, &cells)
    } else {
        let centers: Vec<Vec<f64>> = cells.iter().map(|&c| grid.center(c)).collect();
        if n == 2 {
            let hull = convex_hull(&centers)?;
            if hull.degenerate {
                return Err(LabError::DegenerateSection {
                    detail: "envelope domain is lower-dimensional".into(),
                });
            }
            let margin = 1.5 * grid.max_spacing();
            for c in 0..grid.cell_count() {
                if !domain.contains(c) && hull.contains(&grid.center(c), -margin) {
                    return Err(invalid(format!(
                        "envelope domain is not convex: cell {c} is missing from its hull"
                    )));
                }
            }
        }
        envelope_by_lp(grid, phi, &cells, &centers, range, max_abs)
    };
    let tol = 1e-9 * range + 1e-10 * (1.0 + max_abs);
    let mut contact = CellSet::new(grid.clone());
    for (k, &c) in cells.iter().enumerate() {
        if phi[c] - values[k] <= tol {
            contact.insert(c);
        }
    }
    Ok(EnvelopeResult {
        grid: grid.clone(),
        cells,
        values,
        contact,
        tol,
    })
}

fn envelope_lower_hull(grid: &GridSpec, phi: &[f64], cells: &[usize]) -> Vec<f64> {
    let m = cells.len();
    let xs: Vec<f64> = cells.iter().map(|&c| grid.center(c)[0]).collect();
    let vs: Vec<f64> = cells.iter().map(|&c| phi[c]).collect();
    let mut hull: Vec<usize> = Vec::new();
    for i in 0..m {
        while hull.len() >= 2 {
            let a = hull[hull.len() - 2];
            let b = hull[hull.len() - 1];
            let cross = (xs[b] - xs[a]) * (vs[i] - vs[a]) - (vs[b] - vs[a]) * (xs[i] - xs[a]);
            if cross <= 0.0 {
                hull.pop();
            } else {
                break;
            }
        }
        hull.push(i);
    }
    let mut out = vec![0.0; m];
    let mut seg = 0;
    for i in 0..m {
        while seg + 2 < hull.len() && xs[hull[seg + 1]] < xs[i] {
            seg += 1;
        }
        let (a, b) = (hull[seg], hull[seg + 1]);
        let t = (xs[i] - xs[a]) / (xs[b] - xs[a]);
        out[i] = vs[a] + t * (vs[b] - vs[a]);
    }
    out
}

fn envelope_by_lp(
    grid: &GridSpec,
    phi: &[f64],
    cells: &[usize],
    centers: &[Vec<f64>],
    range: f64,
    max_abs: f64,
) -> Vec<f64> {
    let n = grid.dim();
    let m = cells.len();
    let min_sp = (0..n).map(|a| grid.spacing(a)).fold(f64::INFINITY, f64::min);
    // Any supporting slope is bounded by the function range over one
    // cell step; the offset then by slope times diameter.
    let slope_cap = 4.0 * range / min_sp + 1.0;
    let bound = slope_cap * (1.0 + grid.bbox.diameter()) + max_abs + 1.0;
    par::map_collect(m, |idx| {
        let mut rng = ChaCha8Rng::seed_from_u64(0x0eed_5eed ^ cells[idx] as u64);
        let mut order: Vec<usize> = (0..m).collect();
        for i in (1..m).rev() {
            let j = (rng.next_u64() % (i as u64 + 1)) as usize;
            order.swap(i, j);
        }
        let d = n + 1;
        let mut cons: Vec<(Vec<f64>, f64)> = Vec::with_capacity(m + 2 * d);
        for k in 0..d {
            let mut row = vec![0.0; d];
            row[k] = 1.0;
            cons.push((row.clone(), bound));
            row[k] = -1.0;
            cons.push((row, bound));
        }
        for &j in &order {
            let mut row = centers[j].clone();
            row.push(1.0);
            cons.push((row, phi[cells[j]]));
        }
        let mut obj = centers[idx].clone();
        obj.push(1.0);
        let z = seidel_max(d, &obj, &cons, bound);
        let v = dot(&obj, &z);
        let cap = phi[cells[idx]];
        debug_assert!(
            v <= cap + 1e-7 * (1.0 + range),
            "envelope exceeded its function: {v} vs {cap}"
        );
        v.min(cap)
    })
}

/// Maximizes `obj . z` over `cons` (rows `c . z <= r`) inside the box
/// `[-bound, bound]^d`, by Seidel's incremental method: walk the rows,
/// and when one is violated the optimum lies on its plane, so eliminate
/// one variable and recurse on the prefix.
fn seidel_max(d: usize, obj: &[f64], cons: &[(Vec<f64>, f64)], bound: f64) -> Vec<f64> {
    if d == 1 {
        let (mut lo, mut hi) = (-bound, bound);
        for (c, r) in cons {
            let c0 = c[0];
            let scale = 1.0 + r.abs() + c0.abs() * bound;
            if c0.abs() * bound <= 1e-13 * scale {
                continue;
            }
            if c0 > 0.0 {
                hi = hi.min(r / c0);
            } else {
                lo = lo.max(r / c0);
            }
        }
        if lo > hi {
            // feasibility is the caller's invariant; collapse fp slivers
            let mid = 0.5 * (lo + hi);
            lo = mid;
            hi = mid;
        }
        return vec![if obj[0] >= 0.0 { hi } else { lo }];
    }
    let mut z: Vec<f64> = obj
        .iter()
        .map(|&o| if o >= 0.0 { bound } else { -bound })
        .collect();
    for i in 0..cons.len() {
        let (ci, ri) = &cons[i];
        let lhs = dot(ci, &z);
        let scale = 1.0
            + ri.abs()
            + ci.iter().zip(&z).map(|(a, b)| (a * b).abs()).sum::<f64>();
        if lhs - ri <= 1e-12 * scale {
            continue;
        }
        let k = (0..d)
            .max_by(|&a, &b| ci[a].abs().partial_cmp(&ci[b].abs()).unwrap())
            .unwrap();
        let ck = ci[k];
        if ck == 0.0 {
            continue;
        }
        // z_k = beta + alpha . z_rest on this row's plane
        let alpha: Vec<f64> = (0..d).filter(|&j| j != k).map(|j| -ci[j] / ck).collect();
        let beta = ri / ck;
        let mut sub_obj: Vec<f64> = (0..d).filter(|&j| j != k).map(|j| obj[j]).collect();
        for (so, a) in sub_obj.iter_mut().zip(&alpha) {
            *so += obj[k] * a;
        }
        let mut sub_cons: Vec<(Vec<f64>, f64)> = Vec::with_capacity(i + 2);
        for (cp, rp) in cons.iter().take(i) {
            let cpk = cp[k];
            let mut row: Vec<f64> = (0..d).filter(|&j| j != k).map(|j| cp[j]).collect();
            for (cj, a) in row.iter_mut().zip(&alpha) {
                *cj += cpk * a;
            }
            sub_cons.push((row, rp - cpk * beta));
        }
        sub_cons.push((alpha.clone(), bound - beta));
        sub_cons.push((alpha.iter().map(|a| -a).collect(), bound + beta));
        let zs = seidel_max(d - 1, &sub_obj, &sub_cons, bound);
        let mut full = Vec::with_capacity(d);
        let mut zk = beta;
        for (a, v) in alpha.iter().zip(&zs) {
            zk += a * v;
        }
        let mut it = zs.into_iter();
        for j in 0..d {
            if j == k {
                full.push(zk);
            } else {
                full.push(it.next().unwrap());
            }
        }
        z = full;
    }
    z
}

/// Outcome of one greedy Vitali pass, ready to serialize.
#[derive(Debug, Clone, Serialize)]
pub struct VitaliReport {
    /// Candidate indices in selection order (decreasing height).
    pub selected: Vec<usize>,
    pub sigma: f64,
    #[serde(rename = "C_prime")]
    pub c_prime: f64,
    /// Shrunk selected sections are pairwise cell-disjoint.
    pub disjoint_ok: bool,
    /// Every candidate center lands in some selected section enlarged
    /// to height `C_prime` times its own.
    pub cover_ok: bool,
    pub uncovered: Vec<usize>,
}

/// Greedy Vitali selection over candidate sections, in decreasing
/// height: a candidate enters iff its sigma-shrunk section is disjoint
/// from every previously selected shrunk section. `resect(i, h)` must
/// rebuild candidate `i`'s section at height `h`; shrinking and
/// enlarging both go through it. Coverage failures are reported, never
/// silently passed.
pub fn vitali_cover<F>(
    sections: &[Section],
    sigma: f64,
    c_prime: f64,
    r1_cap: f64,
    mut resect: F,
) -> Result<VitaliReport>
where
    F: FnMut(usize, f64) -> Result<Section>,
{
    if sections.is_empty() {
        return Err(invalid("vitali selection needs candidates"));
    }
    if !(sigma > 0.0 && sigma < 1.0) {
        return Err(invalid(format!("shrink factor must be in (0,1), got {sigma}")));
    }
    if !(c_prime >= 1.0) {
        return Err(invalid(format!("enlargement must be at least 1, got {c_prime}")));
    }
    let grid = &sections[0].grid;
    for (i, s) in sections.iter().enumerate() {
        if s.grid != *grid {
            return Err(invalid("vitali candidates must share a grid"));
        }
        if s.h > r1_cap {
            return Err(invalid(format!(
                "candidate {i} has height {} above the cap {r1_cap}",
                s.h
            )));
        }
    }
    let mut order: Vec<usize> = (0..sections.len()).collect();
    order.sort_by(|&a, &b| {
        sections[b]
            .h
            .partial_cmp(&sections[a].h)
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut selected: Vec<usize> = Vec::new();
    let mut shrunk: Vec<CellSet> = Vec::new();
    for &i in &order {
        let s = resect(i, sigma * sections[i].h)?;
        debug_assert_eq!(s.grid, *grid);
        if shrunk.iter().all(|t| t.is_disjoint(&s.cells)) {
            selected.push(i);
            shrunk.push(s.cells);
        }
    }
    let mut disjoint_ok = true;
    for a in 0..shrunk.len() {
        for b in a + 1..shrunk.len() {
            disjoint_ok &= shrunk[a].is_disjoint(&shrunk[b]);
        }
    }
    let mut enlarged: Vec<CellSet> = Vec::with_capacity(selected.len());
    for &i in &selected {
        enlarged.push(resect(i, c_prime * sections[i].h)?.cells);
    }
    let mut uncovered = Vec::new();
    for (j, s) in sections.iter().enumerate() {
        let cell = grid
            .cell_of(&s.x0)
            .ok_or_else(|| invalid(format!("candidate {j} center left the grid")))?;
        if !enlarged.iter().any(|e| e.contains(cell)) {
            uncovered.push(j);
        }
    }
    let cover_ok = uncovered.is_empty();
    Ok(VitaliReport {
        selected,
        sigma,
        c_prime,
        disjoint_ok,
        cover_ok,
        uncovered,
    })
}

/// Scans sigma over {0.05, 0.10, ..., 0.95} and returns the smallest
/// value whose selection both stays disjoint and covers every center.
pub fn smallest_viable_sigma<F>(
    sections: &[Section],
    c_prime: f64,
    r1_cap: f64,
    mut resect: F,
) -> Result<Option<f64>>
where
    F: FnMut(usize, f64) -> Result<Section>,
{
    for k in 1..=19 {
        let sigma = 0.05 * k as f64;
        let report = vitali_cover(sections, sigma, c_prime, r1_cap, &mut resect)?;
        if report.disjoint_ok && report.cover_ok {
            return Ok(Some(sigma));
        }
    }
    Ok(None)
}
