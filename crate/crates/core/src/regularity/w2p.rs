//! Discrete W^{2,p} energy over a cell region, with a dyadic layer-cake
//! majorant read off the same Hessian field.

use serde::Serialize;

use crate::error::{invalid, Result};
use crate::grid::CellSet;
use crate::regularity::{HessianField, SingularMask};

#[derive(Debug, Clone, Serialize)]
pub struct W2pReport {
    pub p: f64,
    pub m_base: f64,
    /// Sum of `norm^p` over counted cells, times cell volume.
    pub direct: f64,
    /// Layer-cake bound `(|R| + p * sum_k M^{(k+1)p} |{norm >= M^k}|) * vol`;
    /// levels run to the data's own depth, so it dominates `direct`.
    pub layer_cake_bound: f64,
    pub levels_used: usize,
    pub cells_counted: usize,
}

/// Integrates `‖D²u‖^p` over `region`, skipping cells an optional
/// singular mask excludes. Every remaining cell must carry Hessian data;
/// a margin or out-of-range cell in the region is the caller's mistake.
pub fn w2p_norm(
    hess: &HessianField,
    region: &CellSet,
    p: f64,
    exclude: Option<&SingularMask>,
    m_base: f64,
) -> Result<W2pReport> {
    if !(p >= 1.0) || !p.is_finite() {
        return Err(invalid("Sobolev exponent p must be at least 1"));
    }
    if !(m_base > 1.0) || !m_base.is_finite() {
        return Err(invalid("layer-cake base must exceed 1"));
    }
    if region.grid != hess.grid {
        return Err(invalid("region and Hessian field live on different grids"));
    }
    if let Some(mask) = exclude {
        if mask.grid != hess.grid {
            return Err(invalid("singular mask lives on a different grid"));
        }
    }
    let mut norms = Vec::new();
    for cell in region.iter() {
        if exclude.is_some_and(|m| m.excluded.contains(cell)) {
            continue;
        }
        let norm = hess.op_norms[cell];
        if !norm.is_finite() {
            return Err(invalid(
                "region contains a cell without Hessian data; shrink the region or exclude the cell",
            ));
        }
        norms.push(norm);
    }
    let vol = hess.grid.cell_volume();
    let cells_counted = norms.len();
    let direct: f64 = norms.iter().map(|n| n.powf(p)).sum::<f64>() * vol;
    let max_norm = norms.iter().cloned().fold(0.0f64, f64::max);
    let mut levels_used = 0usize;
    let mut tail = 0.0f64;
    if max_norm >= 1.0 {
        // M^{k_max} <= max < M^{k_max + 1}: deep enough that every cell
        // with norm >= 1 is majorized by its own dyadic level.
        let k_max = max_norm.log(m_base).floor() as usize;
        for k in 0..=k_max {
            let level = m_base.powi(k as i32);
            let count = norms.iter().filter(|&&n| n >= level).count();
            tail += m_base.powf((k as f64 + 1.0) * p) * count as f64;
        }
        levels_used = k_max + 1;
    }
    let layer_cake_bound = (cells_counted as f64 + p * tail) * vol;
    debug_assert!(direct <= layer_cake_bound * (1.0 + 1e-12) + 1e-12);
    Ok(W2pReport {
        p,
        m_base,
        direct,
        layer_cake_bound,
        levels_used,
        cells_counted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::CostModel;
    use crate::grid::{GridBox, GridSpec};
    use crate::regularity::{hessian_field, singular_detect};
    use crate::transport::PotentialField;

    fn analytic_field(
        f: fn(&[f64]) -> f64,
        half_width: f64,
        res: usize,
    ) -> PotentialField {
        let cost = CostModel::bilinear(2, 1.0);
        let grid = GridSpec::new(GridBox::symmetric(2, half_width), vec![res, res]).unwrap();
        PotentialField::analytic("test", f, cost, grid, &[0.0, 0.0], 0.0).unwrap()
    }

    fn cells_where(grid: &GridSpec, pred: impl Fn(&[f64]) -> bool) -> CellSet {
        let mut set = CellSet::new(grid.clone());
        for c in 0..grid.cell_count() {
            if pred(&grid.center(c)) {
                set.insert(c);
            }
        }
        set
    }

    #[test]
    fn unit_disc_identity_integrates_to_pi() {
        let u = analytic_field(|x| 0.5 * (x[0] * x[0] + x[1] * x[1]), 1.2, 160);
        let hess = hessian_field(&u, 1);
        let region = cells_where(&u.grid, |x| (x[0] * x[0] + x[1] * x[1]).sqrt() <= 1.0);
        for p in [1.0, 2.0, 4.0] {
            let report = w2p_norm(&hess, &region, p, None, 4.0).unwrap();
            let pi = std::f64::consts::PI;
            assert!(
                (report.direct - pi).abs() <= 0.03 * pi,
                "p = {p}: direct = {}",
                report.direct
            );
            assert!(report.layer_cake_bound >= report.direct);
        }
    }

    #[test]
    fn anisotropic_square_matches_the_closed_form() {
        // Norm is 4 on every cell; the centered unit square holds
        // exactly 64x64 cell centers at this resolution, so the p = 2
        // integral is 16 on the nose.
        let u = analytic_field(
            |x| 0.5 * (4.0 * x[0] * x[0] + 0.25 * x[1] * x[1]),
            1.0,
            128,
        );
        let hess = hessian_field(&u, 1);
        let region = cells_where(&u.grid, |x| x[0].abs() <= 0.5 && x[1].abs() <= 0.5);
        let report = w2p_norm(&hess, &region, 2.0, None, 4.0).unwrap();
        assert!((report.direct - 16.0).abs() <= 0.03 * 16.0, "direct = {}", report.direct);
        assert!(report.layer_cake_bound >= report.direct);
    }

    #[test]
    fn crease_energy_scales_like_inverse_spacing() {
        // u = |x1| has a second-difference spike 2/t on the center
        // column. Over the strip |x| <= 0.8: p = 1 integrates to about
        // 2 * 1.6 independent of resolution, while p = 2 doubles as the
        // spacing halves.
        let mut p1 = Vec::new();
        let mut p2 = Vec::new();
        for res in [65usize, 129] {
            let u = analytic_field(|x| x[0].abs(), 1.0, res);
            let hess = hessian_field(&u, 1);
            let region = cells_where(&u.grid, |x| x[0].abs() <= 0.8 && x[1].abs() <= 0.8);
            p1.push(w2p_norm(&hess, &region, 1.0, None, 4.0).unwrap().direct);
            p2.push(w2p_norm(&hess, &region, 2.0, None, 4.0).unwrap().direct);
        }
        for v in &p1 {
            assert!((v - 3.2).abs() <= 0.8, "p=1 drifted: {p1:?}");
        }
        let ratio = p2[1] / p2[0];
        assert!((1.6..=2.4).contains(&ratio), "p=2 ratio = {ratio}, {p2:?}");
    }

    #[test]
    fn excluding_the_crease_removes_the_energy() {
        let u = analytic_field(|x| x[0].abs(), 1.0, 65);
        let hess = hessian_field(&u, 1);
        let mask = singular_detect(&u, 0.05, 3.0).unwrap();
        assert!(!mask.excluded.is_empty());
        let region = cells_where(&u.grid, |x| x[0].abs() <= 0.8 && x[1].abs() <= 0.8);
        let report = w2p_norm(&hess, &region, 2.0, Some(&mask), 4.0).unwrap();
        assert!(report.direct <= 1e-6, "off-crease energy = {}", report.direct);
        assert!(report.cells_counted < region.len());
    }

    #[test]
    fn bad_exponents_and_dirty_regions_are_rejected() {
        let u = analytic_field(|x| 0.5 * (x[0] * x[0] + x[1] * x[1]), 1.0, 32);
        let hess = hessian_field(&u, 1);
        let interior = cells_where(&u.grid, |x| x[0].abs() <= 0.5 && x[1].abs() <= 0.5);
        assert!(w2p_norm(&hess, &interior, 0.5, None, 4.0).is_err());
        assert!(w2p_norm(&hess, &interior, 2.0, None, 1.0).is_err());
        // The full grid includes margin cells with no Hessian value.
        let everything = cells_where(&u.grid, |_| true);
        assert!(w2p_norm(&hess, &everything, 2.0, None, 4.0).is_err());
    }
}
