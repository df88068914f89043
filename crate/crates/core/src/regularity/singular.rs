//! Singular-candidate scan: cells where the map kinks or where no
//! section on a dyadic height ladder normalizes with a sane sandwich.

use std::io::Write;

use serde::Serialize;

use crate::cconvex::section_extract;
use crate::error::{invalid, Result};
use crate::geometry::john_normalize;
use crate::grid::{CellSet, GridSpec};
use crate::par;
use crate::transport::{kink_gap_tol, transport_map, PotentialField};

/// Heights tried per cell: `h0, h0/2, ..., h0/256`.
const LADDER_STEPS: usize = 9;

#[derive(Debug, Clone)]
pub struct SingularMask {
    pub grid: GridSpec,
    /// Failing cells dilated by one layer; what downstream excludes.
    pub excluded: CellSet,
    /// Cells that failed the ladder, before dilation.
    pub failing: CellSet,
    /// Gradient-gap tolerance the kink test used.
    pub kink_gap: f64,
    pub ratio_cap: f64,
    pub h0: f64,
    /// Volume of the excluded set.
    pub measure: f64,
}

impl SingularMask {
    pub fn is_excluded(&self, cell: usize) -> bool {
        self.excluded.contains(cell)
    }

    /// Same mask with `extra` more dilation layers, for stability
    /// studies that compare exclusions of different widths.
    pub fn dilated(&self, extra: usize) -> SingularMask {
        let excluded = self.excluded.dilate(extra);
        let measure = excluded.volume();
        SingularMask {
            grid: self.grid.clone(),
            excluded,
            failing: self.failing.clone(),
            kink_gap: self.kink_gap,
            ratio_cap: self.ratio_cap,
            h0: self.h0,
            measure,
        }
    }

    /// Text rendering: one JSON header line with the box and spacing,
    /// then a 0/1 row per line, axis 0 fastest and last axis outermost.
    pub fn write_text<W: Write>(&self, mut w: W) -> Result<()> {
        #[derive(Serialize)]
        struct Header<'a> {
            #[serde(rename = "box")]
            bbox: &'a crate::grid::GridBox,
            spacing: Vec<f64>,
        }
        let header = Header {
            bbox: &self.grid.bbox,
            spacing: (0..self.grid.dim()).map(|a| self.grid.spacing(a)).collect(),
        };
        let header_line =
            serde_json::to_string(&header).map_err(|e| invalid(e.to_string()))?;
        writeln!(w, "{header_line}")?;
        let row_len = self.grid.res[0];
        let mut line = String::with_capacity(row_len);
        for row_start in (0..self.grid.cell_count()).step_by(row_len) {
            line.clear();
            for c in row_start..row_start + row_len {
                line.push(if self.excluded.contains(c) { '1' } else { '0' });
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }
}

/// Flags every cell whose center either sits on a kink of the map or
/// admits no section of acceptable sandwich ratio at any ladder height.
pub fn singular_detect(u: &PotentialField, h0: f64, ratio_cap: f64) -> Result<SingularMask> {
    if !(h0 > 0.0) || !h0.is_finite() {
        return Err(invalid("singular scan height must be positive and finite"));
    }
    if !(ratio_cap >= 1.0) {
        return Err(invalid("sandwich ratio cap must be at least 1"));
    }
    let grid = u.grid.clone();
    let flags = par::map_collect(grid.cell_count(), |c| {
        let x = grid.center(c);
        // The differenced map is the kink detector; between two nearly
        // tied envelope branches its gradient is not a supporting
        // slope, so atom potentials probe sections with the exact
        // winning branch instead.
        let y = match (transport_map(u, &x), u.supporting_atom(&x)) {
            (Err(_), _) => return true,
            (Ok(_), Some(atom)) => atom,
            (Ok(y), None) => y,
        };
        for j in 0..LADDER_STEPS {
            let h = h0 / (1u64 << j) as f64;
            let Ok(mut sec) = section_extract(u, &x, &y, h) else {
                continue;
            };
            let Ok(report) = john_normalize(&mut sec) else {
                continue;
            };
            if report.john_ok && report.sandwich_ratio <= ratio_cap {
                return false;
            }
        }
        true
    });
    let mut failing = CellSet::new(grid.clone());
    for (c, &bad) in flags.iter().enumerate() {
        if bad {
            failing.insert(c);
        }
    }
    let excluded = failing.dilate(1);
    let measure = excluded.volume();
    let kink_gap = kink_gap_tol(grid.max_spacing(), u.k_semiconvex);
    Ok(SingularMask {
        grid,
        excluded,
        failing,
        kink_gap,
        ratio_cap,
        h0,
        measure,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::CostModel;
    use crate::grid::{GridBox, GridSpec};
    use crate::transport::{
        reconstruct_potential, sample_density, solve_discrete, DensitySpec, SolveMethod,
    };

    fn analytic_field(f: fn(&[f64]) -> f64, res: usize) -> PotentialField {
        let cost = CostModel::bilinear(2, 1.0);
        let grid = GridSpec::new(GridBox::symmetric(2, 1.0), vec![res, res]).unwrap();
        PotentialField::analytic("test", f, cost, grid, &[0.0, 0.0], 0.0).unwrap()
    }

    #[test]
    fn smooth_fields_yield_empty_masks() {
        let identity = analytic_field(|x| 0.5 * (x[0] * x[0] + x[1] * x[1]), 48);
        let mask = singular_detect(&identity, 0.05, 3.0).unwrap();
        assert!(mask.excluded.is_empty(), "identity flagged {} cells", mask.excluded.len());
        assert_eq!(mask.measure, 0.0);

        for res in [32usize, 48, 64] {
            let aniso =
                analytic_field(|x| 0.5 * (4.0 * x[0] * x[0] + 0.25 * x[1] * x[1]), res);
            let mask = singular_detect(&aniso, 0.05, 3.0).unwrap();
            assert!(
                mask.excluded.is_empty(),
                "smooth anisotropic field flagged {} cells at {res}^2",
                mask.excluded.len()
            );
        }
    }

    #[test]
    fn kink_line_is_masked_and_nothing_else() {
        let u = analytic_field(|x| x[0].abs(), 49);
        let mask = singular_detect(&u, 0.05, 3.0).unwrap();
        let sp = u.grid.max_spacing();
        assert!(!mask.excluded.is_empty());
        for cell in mask.excluded.iter() {
            let ctr = u.grid.center(cell);
            assert!(
                ctr[0].abs() <= 1.5 * sp + 1e-12,
                "cell at {ctr:?} is far from the crease"
            );
        }
        // The crease column itself must be flagged before dilation.
        for cell in 0..u.grid.cell_count() {
            let ctr = u.grid.center(cell);
            if ctr[0].abs() <= 0.4 * sp {
                assert!(mask.failing.contains(cell), "missed crease cell {ctr:?}");
            }
        }
        assert!((mask.measure - mask.excluded.volume()).abs() < 1e-15);
    }

    #[test]
    fn split_target_reveals_the_interface() {
        // Mass from one ball into two separated balls: the optimal map
        // tears along a vertical interface through the source, and the
        // scan must find that line and little else.
        let cost = CostModel::bilinear(2, 1.0);
        let source = sample_density(
            &DensitySpec::UniformOnBall {
                center: vec![0.0, 0.0],
                radius: 0.7,
            },
            256,
            11,
        )
        .unwrap();
        let target = sample_density(
            &DensitySpec::UnionOfBalls {
                balls: vec![
                    crate::transport::BallSpec {
                        center: vec![-0.55, 0.0],
                        radius: 0.25,
                    },
                    crate::transport::BallSpec {
                        center: vec![0.55, 0.0],
                        radius: 0.25,
                    },
                ],
            },
            256,
            12,
        )
        .unwrap();
        let plan = solve_discrete(&cost, &source, &target, SolveMethod::Exact).unwrap();
        let grid = GridSpec::new(GridBox::symmetric(2, 1.0), vec![64, 64]).unwrap();
        let u = reconstruct_potential(&plan, &cost, &target, &grid, &[0.0, 0.0]).unwrap();
        let mask = singular_detect(&u, 0.05, 3.0).unwrap();
        let sp = grid.max_spacing();

        let mut in_ball = 0usize;
        let mut ball_cells = 0usize;
        let mut on_line = false;
        for cell in 0..grid.cell_count() {
            let ctr = grid.center(cell);
            let r = (ctr[0] * ctr[0] + ctr[1] * ctr[1]).sqrt();
            if r <= 0.7 {
                ball_cells += 1;
            }
            if mask.excluded.contains(cell) {
                if r <= 0.55 {
                    in_ball += 1;
                    assert!(
                        ctr[0].abs() <= 5.0 * sp,
                        "interface cell strayed to {ctr:?}"
                    );
                }
                if ctr[0].abs() <= sp && ctr[1].abs() <= 0.3 {
                    on_line = true;
                }
            }
        }
        assert!(on_line, "no excluded cell found on the splitting line");
        let in_ball_fraction = in_ball as f64 / ball_cells as f64;
        assert!(
            in_ball_fraction <= 8.0 * sp / 1.4,
            "interface band too wide: {in_ball_fraction}"
        );
    }

    #[test]
    fn text_export_has_header_and_bit_rows() {
        let u = analytic_field(|x| x[0].abs(), 33);
        let mask = singular_detect(&u, 0.05, 3.0).unwrap();
        let mut buf = Vec::new();
        mask.write_text(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        let mut lines = text.lines();
        let header: serde_json::Value = serde_json::from_str(lines.next().unwrap()).unwrap();
        assert!(header.get("box").is_some() && header.get("spacing").is_some());
        let rows: Vec<&str> = lines.collect();
        assert_eq!(rows.len(), 33);
        assert!(rows
            .iter()
            .all(|r| r.len() == 33 && r.chars().all(|ch| ch == '0' || ch == '1')));
        let mut again = Vec::new();
        mask.write_text(&mut again).unwrap();
        assert_eq!(buf, again);
    }
}
