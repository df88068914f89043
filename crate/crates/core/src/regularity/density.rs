//! Density estimate on a normalized section: how much of the section
//! carries a Hessian norm far from the section's own size a(S).

use serde::Serialize;

use crate::cconvex::Section;
use crate::error::{invalid, LabError, Result};
use crate::regularity::HessianField;

/// A section needs this many cells before fractions mean anything.
const MIN_CELLS: usize = 10;

#[derive(Debug, Clone, Serialize)]
pub struct DensityReport {
    pub n_threshold: f64,
    /// Normalized size a(S) of the section, read off its affine frame.
    pub a_section: f64,
    /// Fraction of counted cells with `norm >= N * a(S)`.
    pub bad_fraction: f64,
    /// Fraction of counted cells with `a(S)/N <= norm <= N * a(S)`.
    pub band_fraction: f64,
    /// Cells that carried a Hessian value; kink cells count, margin
    /// cells do not.
    pub cells_counted: usize,
}

/// Measures how the Hessian field distributes over one section. `a(S)`
/// comes from the section's normalizing frame, so the section must have
/// been through `john_normalize` first.
pub fn section_density_estimate(
    hess: &HessianField,
    section: &Section,
    n_threshold: f64,
) -> Result<DensityReport> {
    if !(n_threshold > 1.0) {
        return Err(invalid("density threshold N must exceed 1"));
    }
    if section.grid != hess.grid {
        return Err(invalid(
            "section and Hessian field live on different grids",
        ));
    }
    let Some(frame) = section.affine.as_ref() else {
        return Err(invalid(
            "section must be normalized before density estimation",
        ));
    };
    if section.cells.len() < MIN_CELLS {
        return Err(LabError::InsufficientResolution {
            cells: section.cells.len(),
            needed: MIN_CELLS,
        });
    }
    let a = frame.norm_ainv * frame.norm_ainv;
    let mut counted = 0usize;
    let mut bad = 0usize;
    let mut band = 0usize;
    for cell in section.cells.iter() {
        let norm = hess.op_norms[cell];
        if !norm.is_finite() {
            continue;
        }
        counted += 1;
        if norm >= n_threshold * a {
            bad += 1;
        }
        if norm >= a / n_threshold && norm <= n_threshold * a {
            band += 1;
        }
    }
    if counted == 0 {
        return Err(LabError::InsufficientResolution {
            cells: 0,
            needed: MIN_CELLS,
        });
    }
    Ok(DensityReport {
        n_threshold,
        a_section: a,
        bad_fraction: bad as f64 / counted as f64,
        band_fraction: band as f64 / counted as f64,
        cells_counted: counted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cconvex::section_extract;
    use crate::cost::CostModel;
    use crate::geometry::john_normalize;
    use crate::grid::{GridBox, GridSpec};
    use crate::regularity::hessian_field;
    use crate::transport::{transport_map, PotentialField};

    fn analytic_field(f: fn(&[f64]) -> f64, res: usize) -> PotentialField {
        let cost = CostModel::bilinear(2, 1.0);
        let grid = GridSpec::new(GridBox::symmetric(2, 1.0), vec![res, res]).unwrap();
        PotentialField::analytic("test", f, cost, grid, &[0.0, 0.0], 0.0).unwrap()
    }

    fn normalized_section(u: &PotentialField, x0: &[f64], h: f64) -> Section {
        let y0 = transport_map(u, x0).unwrap();
        let mut sec = section_extract(u, x0, &y0, h).unwrap();
        john_normalize(&mut sec).unwrap();
        sec
    }

    #[test]
    fn identity_sections_sit_entirely_in_band() {
        let u = analytic_field(|x| 0.5 * (x[0] * x[0] + x[1] * x[1]), 96);
        let hess = hessian_field(&u, 1);
        let sec = normalized_section(&u, &[0.1, -0.05], 0.08);
        let report = section_density_estimate(&hess, &sec, 2.0).unwrap();
        assert!((report.a_section - 1.0).abs() <= 0.05, "a = {}", report.a_section);
        assert_eq!(report.bad_fraction, 0.0);
        assert_eq!(report.band_fraction, 1.0);
        assert_eq!(report.cells_counted, sec.cells.len());
    }

    #[test]
    fn anisotropic_size_matches_the_axis_oracle() {
        // Eigenvalues 4 and 1/4: the det-normalized frame has
        // |A^{-1}|^2 = sqrt(4 / 0.25) = 4, and the Hessian norm is 4
        // everywhere, so N = 2 brackets the whole section.
        let u = analytic_field(|x| 0.5 * (4.0 * x[0] * x[0] + 0.25 * x[1] * x[1]), 256);
        let hess = hessian_field(&u, 1);
        let sec = normalized_section(&u, &[0.0, 0.0], 0.045);
        let report = section_density_estimate(&hess, &sec, 2.0).unwrap();
        assert!((report.a_section - 4.0).abs() <= 0.2, "a = {}", report.a_section);
        assert_eq!(report.bad_fraction, 0.0);
        assert_eq!(report.band_fraction, 1.0);
    }

    #[test]
    fn bad_fraction_is_monotone_in_the_threshold() {
        // Atom-built potential: flat Laguerre cells with crease lines
        // whose second differences blow up like spacing^{-1}. The
        // section around an atom picks up its crease collar, so the
        // bad fraction is positive at small N and dies at large N.
        let cost = CostModel::bilinear(2, 1.0);
        let mut atoms = Vec::new();
        let mut lambdas = Vec::new();
        for i in 0..5 {
            for j in 0..5 {
                let (a, b) = (-0.5 + 0.25 * i as f64, -0.5 + 0.25 * j as f64);
                atoms.push(a);
                atoms.push(b);
                // duals of the identity map: the branch lambda + <x, y>
                // peaks on the atom's own Voronoi cell
                lambdas.push(-0.5 * (a * a + b * b));
            }
        }
        let grid = GridSpec::new(GridBox::symmetric(2, 1.0), vec![96, 96]).unwrap();
        let u = PotentialField::from_atoms(cost, atoms, lambdas, grid, &[0.0, 0.0]).unwrap();
        let hess = hessian_field(&u, 1);
        let y0 = transport_map(&u, &[0.0, 0.0]).unwrap();
        let mut sec = section_extract(&u, &[0.0, 0.0], &y0, 0.02).unwrap();
        john_normalize(&mut sec).unwrap();
        let fractions: Vec<f64> = [2.0, 6.0, 16.0]
            .iter()
            .map(|&n| {
                section_density_estimate(&hess, &sec, n)
                    .unwrap()
                    .bad_fraction
            })
            .collect();
        assert!(fractions[0] > 0.0, "expected crease cells in {fractions:?}");
        assert!(fractions[0] >= fractions[1] && fractions[1] >= fractions[2]);
        assert!(fractions[2] < fractions[0]);
    }

    #[test]
    fn unnormalized_and_tiny_sections_are_rejected() {
        let u = analytic_field(|x| 0.5 * (x[0] * x[0] + x[1] * x[1]), 64);
        let hess = hessian_field(&u, 1);
        let y0 = transport_map(&u, &[0.0, 0.0]).unwrap();
        let raw = section_extract(&u, &[0.0, 0.0], &y0, 0.05).unwrap();
        assert!(section_density_estimate(&hess, &raw, 2.0).is_err());

        let mut tiny = section_extract(&u, &[0.0, 0.0], &y0, 1e-9).unwrap();
        tiny.affine = Some(
            crate::geometry::AffineMap::new(crate::linalg::Mat::identity(2), vec![0.0, 0.0])
                .unwrap(),
        );
        match section_density_estimate(&hess, &tiny, 2.0) {
            Err(LabError::InsufficientResolution { cells, needed }) => {
                assert!(cells < needed);
            }
            other => panic!("expected insufficient resolution, got {other:?}"),
        }
    }
}
