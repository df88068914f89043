//! c-convexity probes on potentials: the c-transform, both notions of
//! subdifferential, sections, and a measured semiconvexity constant.
//!
//! A section is the sublevel set `S_h(x0, y0) = {x : u(x) - u(x0) +
//! c(x, y0) - c(x0, y0) <= h}`, defined whenever `y0` supports `u` at
//! `x0`, meaning that defect is nonnegative everywhere. Sections carry
//! the local geometry of `u`; the estimates in the regularity module are
//! built from them.

use std::io::Write;

use crate::error::{invalid, LabError, Result};
use crate::geometry::AffineMap;
use crate::grid::{CellSet, GridSpec};
use crate::par;
use crate::transport::{kink_gap_tol, PotentialField};

/// `u^c(y) = max_x(-c(x, y) - u(x))` over the source grid centers, as a
/// potential on the transposed cost, plus the attaining cell per target
/// cell.
pub struct CTransform {
    pub field: PotentialField,
    /// Source cell attaining the max for each target cell; ties go to the
    /// lowest flat index.
    pub argmax: Vec<usize>,
}

pub fn c_transform(
    u: &PotentialField,
    target_grid: &GridSpec,
    anchor: &[f64],
) -> Result<CTransform> {
    let dim = u.grid.dim();
    if target_grid.dim() != dim {
        return Err(LabError::DimensionMismatch {
            what: "c_transform grid",
            expected: dim,
            got: target_grid.dim(),
        });
    }
    let mut atoms = Vec::with_capacity(u.grid.cell_count() * dim);
    for x in u.grid.centers() {
        atoms.extend_from_slice(&x);
    }
    let lambdas: Vec<f64> = u.values.iter().map(|v| -v).collect();
    let field = PotentialField::from_atoms(
        u.cost.transposed(),
        atoms.clone(),
        lambdas.clone(),
        target_grid.clone(),
        anchor,
    )?;

    let n_atoms = lambdas.len();
    let argmax = par::map_collect(target_grid.cell_count(), |c| {
        let y = target_grid.center(c);
        let mut best = (f64::NEG_INFINITY, 0usize);
        for i in 0..n_atoms {
            let v = lambdas[i] - u.cost.eval_unchecked(&atoms[i * dim..(i + 1) * dim], &y);
            if v > best.0 {
                best = (v, i);
            }
        }
        best.1
    });
    Ok(CTransform { field, argmax })
}

/// Per-axis one-sided slope intervals of `u` at `x`. The box
/// `[lower, upper]` per axis contains the Frechet subdifferential;
/// `multivalued` means some axis gap exceeds the kink threshold at the
/// grid step.
#[derive(Debug, Clone, PartialEq)]
pub struct Subdifferential {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub multivalued: bool,
}

pub fn frechet_subdiff(u: &PotentialField, x: &[f64]) -> Result<Subdifferential> {
    let dim = u.grid.dim();
    if x.len() != dim {
        return Err(LabError::DimensionMismatch {
            what: "frechet_subdiff point",
            expected: dim,
            got: x.len(),
        });
    }
    let u0 = u.eval(x);
    let mut lower = vec![0.0; dim];
    let mut upper = vec![0.0; dim];
    let mut multivalued = false;
    let mut probe = x.to_vec();
    for k in 0..dim {
        let h = u.grid.spacing(k);
        probe[k] = x[k] + h;
        let fwd = (u.eval(&probe) - u0) / h;
        probe[k] = x[k] - h;
        let bwd = (u0 - u.eval(&probe)) / h;
        probe[k] = x[k];
        lower[k] = bwd.min(fwd);
        upper[k] = bwd.max(fwd);
        if (fwd - bwd).abs() > kink_gap_tol(h, u.k_semiconvex) {
            multivalued = true;
        }
    }
    Ok(Subdifferential {
        lower,
        upper,
        multivalued,
    })
}

/// Atom indices attaining the envelope at `x`, within the cost-scaled
/// slack. Only atom-backed potentials know their branches.
pub fn c_subdiff(u: &PotentialField, x: &[f64]) -> Result<Vec<usize>> {
    let (positions, lambdas) = u.atoms().ok_or(LabError::NotApplicable {
        what: "c_subdiff",
        detail: String::from("analytic potential has no atom branches"),
    })?;
    let dim = u.grid.dim();
    if x.len() != dim {
        return Err(LabError::DimensionMismatch {
            what: "c_subdiff point",
            expected: dim,
            got: x.len(),
        });
    }
    let branch: Vec<f64> = positions
        .chunks(dim)
        .zip(lambdas)
        .map(|(y, l)| l - u.cost.eval_unchecked(x, y))
        .collect();
    let top = branch.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let slack = 1e-9 * u.cost.scale();
    Ok((0..branch.len())
        .filter(|&j| top - branch[j] <= slack)
        .collect())
}

/// A sublevel set of the support defect of `(x0, y0)`, as grid cells.
/// `affine` and `sandwich_ratio` start empty and are filled in by the
/// det-1 normalization in the geometry module.
#[derive(Debug, Clone)]
pub struct Section {
    pub grid: GridSpec,
    pub x0: Vec<f64>,
    pub y0: Vec<f64>,
    pub h: f64,
    pub cells: CellSet,
    pub connected: bool,
    pub affine: Option<AffineMap>,
    pub sandwich_ratio: Option<f64>,
}

/// Cuts the section of `u` at `(x0, y0)` at height `h`. Fails if `x0`
/// leaves the grid, `h` is negative, or `y0` does not support `u` at
/// `x0` (negative defect somewhere on the grid). The cell of `x0` is
/// always part of the section.
pub fn section_extract(
    u: &PotentialField,
    x0: &[f64],
    y0: &[f64],
    h: f64,
) -> Result<Section> {
    let dim = u.grid.dim();
    if x0.len() != dim || y0.len() != dim {
        return Err(LabError::DimensionMismatch {
            what: "section base point",
            expected: dim,
            got: if x0.len() != dim { x0.len() } else { y0.len() },
        });
    }
    if !(h >= 0.0) {
        return Err(LabError::InvalidSection {
            detail: format!("section height {h} is negative"),
        });
    }
    let Some(base_cell) = u.grid.cell_of(x0) else {
        return Err(LabError::InvalidSection {
            detail: format!("base point {x0:?} is outside the grid"),
        });
    };

    let u0 = u.eval(x0);
    let c0 = u.cost.eval_unchecked(x0, y0);
    let defect = par::map_collect(u.grid.cell_count(), |c| {
        let x = u.grid.center(c);
        (u.values[c] - u0) + (u.cost.eval_unchecked(&x, y0) - c0)
    });

    let support_tol = 1e-9 * u.cost.scale();
    let min_defect = defect.iter().fold(f64::INFINITY, |m, &v| m.min(v));
    if min_defect < -support_tol {
        return Err(LabError::InvalidSection {
            detail: format!(
                "y0 {y0:?} does not support u at {x0:?}: defect reaches {min_defect:.3e}"
            ),
        });
    }

    let mut cells = CellSet::new(u.grid.clone());
    for (c, &d) in defect.iter().enumerate() {
        if d <= h + 1e-9 {
            cells.insert(c);
        }
    }
    cells.insert(base_cell);
    let connected = cells.is_connected();
    Ok(Section {
        grid: u.grid.clone(),
        x0: x0.to_vec(),
        y0: y0.to_vec(),
        h,
        cells,
        connected,
        affine: None,
        sandwich_ratio: None,
    })
}

/// Largest `K` demanded by any directional second-difference quotient:
/// `u + K|x|^2` convex requires every quotient to be at least `-2K`.
/// Scanned over all one-step interior cells, kinks included (a concave
/// kink is exactly what this must catch).
pub fn semiconvexity_constant(u: &PotentialField) -> f64 {
    let grid = &u.grid;
    let dim = grid.dim();
    let mut axis_stride = vec![0isize; dim];
    let mut s = 1isize;
    for a in 0..dim {
        axis_stride[a] = s;
        s *= grid.res[a] as isize;
    }
    let quotients = par::map_collect(grid.cell_count(), |c| -> f64 {
        let multi = grid.multi(c);
        if !grid.interior_multi(&multi, 1) {
            return f64::INFINITY;
        }
        let v0 = u.values[c];
        let at = |off: isize| u.values[(c as isize + off) as usize];
        let mut min_q = f64::INFINITY;
        for a in 0..dim {
            let t = grid.spacing(a);
            let q = (at(axis_stride[a]) - 2.0 * v0 + at(-axis_stride[a])) / (t * t);
            min_q = min_q.min(q);
        }
        for a in 0..dim {
            for b in (a + 1)..dim {
                let (sa, sb) = (axis_stride[a], axis_stride[b]);
                let t2 = grid.spacing(a).powi(2) + grid.spacing(b).powi(2);
                min_q = min_q.min((at(sa + sb) - 2.0 * v0 + at(-sa - sb)) / t2);
                min_q = min_q.min((at(sa - sb) - 2.0 * v0 + at(sb - sa)) / t2);
            }
        }
        min_q
    });
    let min_q = quotients.iter().fold(f64::INFINITY, |m, &v| m.min(v));
    (-0.5 * min_q).max(0.0)
}

/// One section summary line for the CSV export; geometry fields come from
/// the caller's normalization pass.
#[derive(Debug, Clone)]
pub struct SectionRow {
    pub x0: Vec<f64>,
    pub y0: Vec<f64>,
    pub h: f64,
    pub cell_count: usize,
    pub volume: f64,
    pub connected: bool,
    pub sandwich_ratio: f64,
    pub norm_size: f64,
}

pub fn write_sections_csv<W: Write>(mut w: W, dim: usize, rows: &[SectionRow]) -> Result<()> {
    let mut header = String::new();
    for k in 0..dim {
        header.push_str(&format!("x0_{k},"));
    }
    for k in 0..dim {
        header.push_str(&format!("y0_{k},"));
    }
    header.push_str("h,cell_count,volume,connected,sandwich_ratio,norm_size");
    writeln!(w, "{header}")?;
    for row in rows {
        if row.x0.len() != dim || row.y0.len() != dim {
            return Err(invalid("section row dimension mismatch"));
        }
        for v in row.x0.iter().chain(&row.y0) {
            write!(w, "{v},")?;
        }
        writeln!(
            w,
            "{},{},{},{},{},{}",
            row.h,
            row.cell_count,
            row.volume,
            row.connected as u8,
            row.sandwich_ratio,
            row.norm_size
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::{Bump, CostKind, CostModel};
    use crate::grid::{GridBox, GridSpec};
    use crate::linalg;
    use crate::transport::{sample_density, solve_discrete, DensitySpec, SolveMethod};

    fn analytic_on(
        res: usize,
        f: fn(&[f64]) -> f64,
        k: f64,
    ) -> PotentialField {
        let bbox = GridBox::symmetric(2, 1.0);
        let cost = CostModel::bilinear(2, 1.0);
        let grid = GridSpec::square(bbox, res).unwrap();
        PotentialField::analytic("probe", f, cost, grid, &[0.0, 0.0], k).unwrap()
    }

    #[test]
    fn legendre_of_half_square() {
        let u = analytic_on(48, |x| 0.5 * (x[0] * x[0] + x[1] * x[1]), 0.0);
        let grid = GridSpec::square(GridBox::symmetric(2, 1.0), 48).unwrap();
        let t = c_transform(&u, &grid, &[0.0, 0.0]).unwrap();
        let sp = grid.spacing(0);
        let lip = 2.0f64.sqrt();
        for c in 0..grid.cell_count() {
            let y = grid.center(c);
            let expect = 0.5 * (y[0] * y[0] + y[1] * y[1]);
            assert!(
                (t.field.values[c] - expect).abs() <= lip * sp,
                "u^c({y:?}) = {} vs {expect}",
                t.field.values[c]
            );
        }
    }

    #[test]
    fn zero_potential_transforms_to_l1_norm() {
        let u = analytic_on(64, |_| 0.0, 0.0);
        let grid = GridSpec::square(GridBox::symmetric(2, 1.0), 64).unwrap();
        let t = c_transform(&u, &grid, &[0.0, 0.0]).unwrap();
        let sp = grid.spacing(0);
        for c in 0..grid.cell_count() {
            let y = grid.center(c);
            let expect = y[0].abs() + y[1].abs();
            assert!((t.field.values[c] - expect).abs() <= 1.5 * sp);
        }
    }

    #[test]
    fn transform_reverses_order() {
        // Odd resolution puts a cell center at the origin, where both
        // potentials vanish; the transforms then anchor with zero offset
        // and stay comparable pointwise.
        let grid = GridSpec::square(GridBox::symmetric(2, 1.0), 25).unwrap();
        let u = analytic_on(25, |x| 0.5 * (x[0] * x[0] + x[1] * x[1]), 0.0);
        let v = analytic_on(25, |x| 0.6 * (x[0] * x[0] + x[1] * x[1]), 0.0);
        let tu = c_transform(&u, &grid, &[0.0, 0.0]).unwrap();
        let tv = c_transform(&v, &grid, &[0.0, 0.0]).unwrap();
        // u <= v pointwise forces u^c >= v^c pointwise.
        for c in 0..grid.cell_count() {
            assert!(tv.field.values[c] <= tu.field.values[c] + 1e-12);
        }
        // An additive constant never survives: anchoring removes it at
        // construction, so the transforms coincide cell by cell.
        let shifted = analytic_on(25, |x| 0.5 * (x[0] * x[0] + x[1] * x[1]) + 0.1, 0.0);
        let ts = c_transform(&shifted, &grid, &[0.0, 0.0]).unwrap();
        for c in 0..grid.cell_count() {
            assert!((ts.field.values[c] - tu.field.values[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn perturbed_transform_matches_brute_force() {
        let bbox = GridBox::symmetric(2, 1.0);
        let cost = CostModel::new(
            CostKind::PerturbedBilinear {
                delta: 0.05,
                bump: Bump::ExpNegSq,
            },
            bbox.clone(),
            bbox.clone(),
        )
        .unwrap();
        let src_grid = GridSpec::square(bbox.clone(), 20).unwrap();
        let u = PotentialField::analytic(
            "probe",
            |x| 0.3 * (x[0] * x[0] + x[1] * x[1]),
            cost.clone(),
            src_grid.clone(),
            &[0.0, 0.0],
            0.0,
        )
        .unwrap();
        let tgt_grid = GridSpec::square(bbox, 17).unwrap();
        let anchor = [0.0, 0.0];
        let t = c_transform(&u, &tgt_grid, &anchor).unwrap();

        // Independent evaluation straight from the definition.
        let offset = {
            let mut best = f64::NEG_INFINITY;
            for (i, x) in src_grid.centers().enumerate() {
                best = best.max(-cost.eval_unchecked(&x, &anchor) - u.values[i]);
            }
            best
        };
        for (c, y) in tgt_grid.centers().enumerate() {
            let mut best = (f64::NEG_INFINITY, 0usize);
            for (i, x) in src_grid.centers().enumerate() {
                let v = -cost.eval_unchecked(&x, &y) - u.values[i];
                if v > best.0 {
                    best = (v, i);
                }
            }
            assert!((t.field.values[c] - (best.0 - offset)).abs() < 1e-12);
            assert_eq!(t.argmax[c], best.1);
        }
    }

    #[test]
    fn double_transform_restores_c_convex_input() {
        let bbox = GridBox::symmetric(1, 1.0);
        let cost = CostModel::bilinear(1, 1.0);
        let src_grid = GridSpec::square(bbox.clone(), 64).unwrap();
        // Both slopes sit exactly on centers of the 256-cell target grid,
        // so the transform resolves them without rounding.
        let u = PotentialField::from_atoms(
            cost,
            vec![-0.50390625, 0.69921875],
            vec![0.1, -0.2],
            src_grid.clone(),
            &[0.0],
        )
        .unwrap();
        let tgt_grid = GridSpec::square(bbox, 256).unwrap();
        let v = c_transform(&u, &tgt_grid, &[0.0]).unwrap();
        let w = c_transform(&v.field, &src_grid, &[0.0]).unwrap();
        // u is c-convex, so the double transform returns it up to the
        // grid's resolution of the slopes (and both anchors at 0).
        let sp = tgt_grid.spacing(0);
        let lip = 0.7;
        for c in 0..src_grid.cell_count() {
            assert!(
                (w.field.values[c] - u.values[c]).abs() <= 1e-9 + lip * sp,
                "cell {c}: {} vs {}",
                w.field.values[c],
                u.values[c]
            );
        }
    }

    #[test]
    fn subdifferentials_agree_at_smooth_and_kink_points() {
        let bbox = GridBox::symmetric(2, 1.0);
        let cost = CostModel::bilinear(2, 1.0);
        let grid = GridSpec::square(bbox, 80).unwrap();
        // Branch values 0.2 x_0 + 0.4 x_1 and 0.6 x_0 + 0.4 x_1 - 0.06
        // tie along x_0 = 0.15.
        let u = PotentialField::from_atoms(
            cost,
            vec![0.2, 0.4, 0.6, 0.4],
            vec![0.0, -0.06],
            grid.clone(),
            &[0.0, 0.0],
        )
        .unwrap();
        let sp = grid.spacing(0);

        let smooth = [-0.4, 0.1];
        let sub = frechet_subdiff(&u, &smooth).unwrap();
        assert!(!sub.multivalued);
        let active = c_subdiff(&u, &smooth).unwrap();
        assert_eq!(active, vec![0]);
        // For the bilinear cost, -D_x c(x, y) = y: the active atom's
        // position must land in the (slightly inflated) slope box.
        let y = &[0.2f64, 0.4];
        for k in 0..2 {
            assert!(y[k] >= sub.lower[k] - 10.0 * sp);
            assert!(y[k] <= sub.upper[k] + 10.0 * sp);
        }

        let kink = [0.15, 0.3];
        let sub = frechet_subdiff(&u, &kink).unwrap();
        assert!(sub.multivalued);
        let active = c_subdiff(&u, &kink).unwrap();
        assert_eq!(active, vec![0, 1]);
        // The slope interval on axis 0 brackets both branch slopes.
        assert!(sub.lower[0] <= 0.2 + 1e-9 && sub.upper[0] >= 0.6 - 1e-9);
    }

    #[test]
    fn sections_nest_and_ignore_additive_constants() {
        let bbox = GridBox::symmetric(1, 1.0);
        let cost = CostModel::bilinear(1, 1.0);
        let grid = GridSpec::square(bbox, 200).unwrap();
        let build = |shift: f64| {
            PotentialField::from_atoms(
                cost.clone(),
                vec![-0.3, 0.5],
                vec![0.1 + shift, -0.05 + shift],
                grid.clone(),
                &[0.0],
            )
            .unwrap()
        };
        let u = build(0.0);
        let x0 = [-0.6];
        let y0 = [-0.3];
        let heights = [0.0, 0.01, 0.05, 0.1];
        let mut prev: Option<Section> = None;
        for &h in &heights {
            let s = section_extract(&u, &x0, &y0, h).unwrap();
            assert!(s.cells.contains(grid.cell_of(&x0).unwrap()));
            if let Some(p) = &prev {
                assert!(p.cells.is_subset(&s.cells), "h = {h}");
            }
            prev = Some(s);
        }
        // Constant shifts of u leave every section untouched.
        let v = build(7.5);
        for &h in &heights {
            let a = section_extract(&u, &x0, &y0, h).unwrap();
            let b = section_extract(&v, &x0, &y0, h).unwrap();
            assert_eq!(a.cells.iter().collect::<Vec<_>>(), b.cells.iter().collect::<Vec<_>>());
        }
    }

    #[test]
    fn sections_survive_cost_renormalization() {
        // Squared distance is the bilinear cost plus a(x) + b(y); with
        // duals shifted by b(y_j) the defects, and so the sections, are
        // identical.
        let bbox = GridBox::symmetric(2, 1.0);
        let grid = GridSpec::square(bbox.clone(), 40).unwrap();
        let atoms = vec![0.2, 0.4, -0.5, 0.1, 0.3, -0.6];
        let lambdas = vec![0.0, 0.12, -0.07];
        let cost_b = CostModel::bilinear(2, 1.0);
        let cost_q =
            CostModel::new(CostKind::SquaredDistance, bbox.clone(), bbox).unwrap();
        let u_b = PotentialField::from_atoms(
            cost_b,
            atoms.clone(),
            lambdas.clone(),
            grid.clone(),
            &[0.0, 0.0],
        )
        .unwrap();
        let shifted: Vec<f64> = atoms
            .chunks(2)
            .zip(&lambdas)
            .map(|(y, l)| l + 0.5 * (y[0] * y[0] + y[1] * y[1]))
            .collect();
        let u_q =
            PotentialField::from_atoms(cost_q, atoms.clone(), shifted, grid, &[0.0, 0.0])
                .unwrap();
        let x0 = [0.21, 0.38];
        let y0 = [0.2, 0.4];
        for h in [0.002, 0.02, 0.08] {
            let a = section_extract(&u_b, &x0, &y0, h).unwrap();
            let b = section_extract(&u_q, &x0, &y0, h).unwrap();
            assert_eq!(
                a.cells.iter().collect::<Vec<_>>(),
                b.cells.iter().collect::<Vec<_>>(),
                "h = {h}"
            );
        }
    }

    #[test]
    fn quadratic_sections_are_balls() {
        let u = analytic_on(128, |x| 0.5 * (x[0] * x[0] + x[1] * x[1]), 0.0);
        let x0 = [0.1, -0.05];
        let y0 = x0; // gradient of |x|^2/2
        let h = 0.02;
        let s = section_extract(&u, &x0, &y0, h).unwrap();
        assert!(s.connected);
        let r = (2.0 * h).sqrt();
        let sp = u.grid.spacing(0);
        for c in s.cells.iter() {
            let x = u.grid.center(c);
            assert!(linalg::dist(&x, &x0) <= r + 2.0 * sp);
        }
        for (c, x) in u.grid.centers().enumerate() {
            if linalg::dist(&x, &x0) <= r - 2.0 * sp {
                assert!(s.cells.contains(c));
            }
        }
    }

    #[test]
    fn anisotropic_sections_are_ellipses() {
        let u = analytic_on(128, |x| 0.5 * (4.0 * x[0] * x[0] + 0.25 * x[1] * x[1]), 0.0);
        let x0 = [0.05, -0.1];
        let y0 = [4.0 * x0[0], 0.25 * x0[1]];
        let h = 0.02;
        let s = section_extract(&u, &x0, &y0, h).unwrap();
        let sp = u.grid.spacing(0);
        let mut ext = [0.0f64; 2];
        for c in s.cells.iter() {
            let x = u.grid.center(c);
            ext[0] = ext[0].max((x[0] - x0[0]).abs());
            ext[1] = ext[1].max((x[1] - x0[1]).abs());
        }
        let r = (2.0 * h).sqrt();
        assert!((ext[0] - 0.5 * r).abs() <= 2.5 * sp, "minor axis {}", ext[0]);
        assert!((ext[1] - 2.0 * r).abs() <= 2.5 * sp, "major axis {}", ext[1]);
    }

    #[test]
    fn zero_height_section_is_the_base_cell() {
        let u = analytic_on(64, |x| 0.5 * (x[0] * x[0] + x[1] * x[1]), 0.0);
        let x0 = [0.140625, -0.046875]; // two cell centers at res 64
        let s = section_extract(&u, &x0, &x0, 0.0).unwrap();
        assert_eq!(s.cells.len(), 1);
        assert!(s.cells.contains(u.grid.cell_of(&x0).unwrap()));
        assert!(s.connected);
    }

    #[test]
    fn bad_section_inputs_are_rejected() {
        let u = analytic_on(32, |x| 0.5 * (x[0] * x[0] + x[1] * x[1]), 0.0);
        let x0 = [0.1, 0.1];
        // A slope that supports u nowhere near x0.
        let err = section_extract(&u, &x0, &[0.6, 0.1], 0.01).unwrap_err();
        assert!(matches!(err, LabError::InvalidSection { .. }));
        let err = section_extract(&u, &[3.0, 0.0], &x0, 0.01).unwrap_err();
        assert!(matches!(err, LabError::InvalidSection { .. }));
        let err = section_extract(&u, &x0, &x0, -0.5).unwrap_err();
        assert!(matches!(err, LabError::InvalidSection { .. }));
    }

    #[test]
    fn semiconvexity_constants_match_curvature() {
        let convex = analytic_on(40, |x| 0.5 * (x[0] * x[0] + x[1] * x[1]), 0.0);
        assert_eq!(semiconvexity_constant(&convex), 0.0);
        let concave = analytic_on(40, |x| -0.5 * (x[0] * x[0] + x[1] * x[1]), 0.5);
        let k = semiconvexity_constant(&concave);
        assert!((k - 0.5).abs() < 1e-6, "K = {k}");

        // Solved potentials respect their sampled bound.
        let bbox = GridBox::unit(2);
        let cost = CostModel::new(
            CostKind::SquaredDistance,
            bbox.clone(),
            bbox.clone(),
        )
        .unwrap();
        let cloud = sample_density(
            &DensitySpec::UniformOnBox { bbox: bbox.clone() },
            64,
            0,
        )
        .unwrap();
        let plan = solve_discrete(&cost, &cloud, &cloud, SolveMethod::Exact).unwrap();
        let grid = GridSpec::square(bbox, 16).unwrap();
        let u = crate::transport::reconstruct_potential(&plan, &cost, &cloud, &grid, &[0.5, 0.5])
            .unwrap();
        let k = semiconvexity_constant(&u);
        assert!(k <= u.k_semiconvex + 1e-6, "K = {k} vs bound {}", u.k_semiconvex);
    }

    #[test]
    fn section_csv_is_stable() {
        let rows = vec![
            SectionRow {
                x0: vec![0.1, 0.2],
                y0: vec![0.3, 0.4],
                h: 0.01,
                cell_count: 12,
                volume: 0.0075,
                connected: true,
                sandwich_ratio: 1.5,
                norm_size: 1.02,
            },
            SectionRow {
                x0: vec![0.5, -0.5],
                y0: vec![0.25, 0.125],
                h: 0.02,
                cell_count: 40,
                volume: 0.025,
                connected: false,
                sandwich_ratio: 2.25,
                norm_size: 4.5,
            },
        ];
        let mut buf = Vec::new();
        write_sections_csv(&mut buf, 2, &rows).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "x0_0,x0_1,y0_0,y0_1,h,cell_count,volume,connected,sandwich_ratio,norm_size"
        );
        assert_eq!(lines.next().unwrap(), "0.1,0.2,0.3,0.4,0.01,12,0.0075,1,1.5,1.02");
        // Writing the same rows twice is byte-identical.
        let mut again = Vec::new();
        write_sections_csv(&mut again, 2, &rows).unwrap();
        assert_eq!(buf, again);
    }
}
