//! Dyadic level-set ladder: measures how the sets where the Hessian
//! norm exceeds M^k shrink inside a slowly deflating ball, with a
//! section cover and density estimate at every level.

use std::f64::consts::TAU;
use std::io::Write;

use serde::Serialize;

use crate::cconvex::{section_extract, Section};
use crate::error::{invalid, Result};
use crate::geometry::{john_normalize, vitali_cover};
use crate::grid::{CellSet, GridSpec};
use crate::par;
use crate::regularity::{hessian_field, section_density_estimate, HessianField};
use crate::transport::{transport_map, PotentialField};

/// Multiplicative tolerance of the size band a section must hit.
const TAU_BAND: f64 = 2.0;
/// Geometric height ladder length for the initial scan.
const LADDER_J: usize = 10;
const BISECT_ITERS: usize = 20;
/// Exponent cap; beta saturates here when the measured theta is tiny.
const BETA_CAP: f64 = 12.0;

#[derive(Debug, Clone, Serialize)]
pub struct LevelRow {
    pub k: usize,
    pub rho: f64,
    /// Volume of `D_k`, the level-`M^k` cells inside the radius-`rho` ball.
    pub measure: f64,
    /// `|D_k| / |D_{k-1}|`; NaN at k = 0 or under an empty predecessor.
    pub ratio: f64,
    pub sections_selected: usize,
    pub mean_bad_fraction: f64,
    /// Sum of bad fraction times enlarged-section volume over the cover.
    pub covering_bound: f64,
    /// Level cells whose section search found no size-matched height.
    pub bisect_failures: usize,
}

#[derive(Debug, Clone)]
pub struct LevelSetTable {
    pub m_base: f64,
    pub n_threshold: f64,
    /// Measured size exponent: max of log ‖A‖ / log(1/h) over probes.
    pub theta: f64,
    /// `1/(4 theta) - 1/2`, capped; drives the radius deflation.
    pub beta: f64,
    /// Largest observed `diam(S_h) / sqrt(h)` over the probes.
    pub c_hat: f64,
    pub rows: Vec<LevelRow>,
    pub d_sets: Vec<CellSet>,
    pub max_ratio: f64,
    /// Level at which the radius floor `rho0 / 2` stopped the ladder.
    pub aborted_at: Option<usize>,
}

impl LevelSetTable {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "k,rho_k,measure,ratio,sections_selected,mean_bad_fraction")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                r.k, r.rho, r.measure, r.ratio, r.sections_selected, r.mean_bad_fraction
            )?;
        }
        Ok(())
    }
}

fn section_diameter(grid: &GridSpec, sec: &Section) -> f64 {
    let dim = grid.dim();
    let mut lo = vec![f64::INFINITY; dim];
    let mut hi = vec![f64::NEG_INFINITY; dim];
    for c in sec.cells.iter() {
        let ctr = grid.center(c);
        for a in 0..dim {
            lo[a] = lo[a].min(ctr[a]);
            hi[a] = hi[a].max(ctr[a]);
        }
    }
    (0..dim)
        .map(|a| {
            let w = hi[a] - lo[a] + grid.spacing(a);
            w * w
        })
        .sum::<f64>()
        .sqrt()
}

struct Candidate {
    x: Vec<f64>,
    y: Vec<f64>,
    h: f64,
    sec: Section,
}

/// Finds a section at `x` whose normalized size lands in the target
/// band, scanning a geometric height ladder and then bisecting the
/// first bracketing pair. The size is not monotone in h, so a missed
/// bracket is reported as a failure rather than retried.
fn size_matched_section(
    u: &PotentialField,
    x: Vec<f64>,
    a_target: f64,
    h_max: f64,
) -> Option<Candidate> {
    let y = transport_map(u, &x).ok()?;
    let lo_band = a_target / TAU_BAND;
    let hi_band = a_target * TAU_BAND;
    let measure = |h: f64| -> Option<(f64, Section)> {
        let mut sec = section_extract(u, &x, &y, h).ok()?;
        let report = john_normalize(&mut sec).ok()?;
        Some((report.norm_size, sec))
    };
    let mut probes: Vec<(f64, f64)> = Vec::new();
    for j in 0..=LADDER_J {
        let h = h_max * 0.5f64.powi(j as i32);
        if let Some((a, sec)) = measure(h) {
            if a >= lo_band && a <= hi_band {
                return Some(Candidate { x, y, h, sec });
            }
            probes.push((h, a));
        }
    }
    let side = |a: f64| if a < lo_band { -1 } else { 1 };
    for w in probes.windows(2) {
        let (h1, a1) = w[0];
        let (h2, a2) = w[1];
        if side(a1) == side(a2) {
            continue;
        }
        let sa = side(a1);
        let (mut ha, mut hb) = (h1, h2);
        for _ in 0..BISECT_ITERS {
            let hm = 0.5 * (ha + hb);
            let Some((am, secm)) = measure(hm) else {
                break;
            };
            if am >= lo_band && am <= hi_band {
                return Some(Candidate { x, y, h: hm, sec: secm });
            }
            if side(am) == sa {
                ha = hm;
            } else {
                hb = hm;
            }
        }
        break;
    }
    None
}

/// Covers one level set with size-matched sections and aggregates the
/// density estimate over the Vitali selection.
#[allow(clippy::too_many_arguments)]
fn cover_level(
    u: &PotentialField,
    hess: &HessianField,
    dk: &CellSet,
    a_target: f64,
    n_threshold: f64,
    rho0: f64,
    sigma: f64,
    c_prime: f64,
) -> Result<(usize, f64, f64, usize)> {
    let grid = &u.grid;
    let h_max = rho0 * rho0 / 2.0;
    let cells: Vec<usize> = dk.iter().collect();
    let found = par::map_collect(cells.len(), |i| {
        size_matched_section(u, grid.center(cells[i]), a_target, h_max)
    });
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut hs = Vec::new();
    let mut sections = Vec::new();
    for cand in found.into_iter().flatten() {
        xs.push(cand.x);
        ys.push(cand.y);
        hs.push(cand.h);
        sections.push(cand.sec);
    }
    let bisect_failures = cells.len() - sections.len();
    if sections.is_empty() {
        return Ok((0, f64::NAN, 0.0, bisect_failures));
    }
    let report = vitali_cover(
        &sections,
        sigma,
        c_prime,
        h_max * (1.0 + 1e-9),
        |i, h| section_extract(u, &xs[i], &ys[i], h),
    )?;
    let mut fractions = Vec::new();
    let mut covering = 0.0f64;
    for &i in &report.selected {
        let Ok(dens) = section_density_estimate(hess, &sections[i], n_threshold) else {
            continue;
        };
        fractions.push(dens.bad_fraction);
        let enlarged_vol = section_extract(u, &xs[i], &ys[i], c_prime * hs[i])
            .map(|s| s.cells.volume())
            .unwrap_or_else(|_| sections[i].cells.volume());
        covering += dens.bad_fraction * enlarged_vol;
    }
    let mean_bad = if fractions.is_empty() {
        f64::NAN
    } else {
        fractions.iter().sum::<f64>() / fractions.len() as f64
    };
    Ok((report.selected.len(), mean_bad, covering, bisect_failures))
}

/// Runs the level ladder: measures theta and the diameter constant on
/// probe sections, deflates the ball radius by `c_hat * M^{-k beta}`
/// per level with a hard floor at `rho0 / 2`, and records measure,
/// ratio, and a section cover for every level that survives.
#[allow(clippy::too_many_arguments)]
pub fn levelset_decay(
    u: &PotentialField,
    m_base: f64,
    n_threshold: f64,
    k_levels: usize,
    rho0: f64,
    sigma: f64,
    c_prime: f64,
) -> Result<LevelSetTable> {
    if !(n_threshold > 1.0) {
        return Err(invalid("density threshold N must exceed 1"));
    }
    if !(m_base >= n_threshold * n_threshold) || !m_base.is_finite() {
        return Err(invalid("level base M must be at least N^2"));
    }
    if k_levels == 0 {
        return Err(invalid("the ladder needs at least one level"));
    }
    if (k_levels as f64 + 1.0) * m_base.ln() > 700.0 {
        return Err(invalid("level ladder overflows the floating-point range"));
    }
    if !(rho0 > 0.0) || !rho0.is_finite() {
        return Err(invalid("initial radius must be positive"));
    }
    if !(sigma > 0.0 && sigma < 1.0) {
        return Err(invalid("shrink factor sigma must lie in (0, 1)"));
    }
    if !(c_prime >= 1.0) {
        return Err(invalid("enlargement factor must be at least 1"));
    }
    let grid = u.grid.clone();
    let dim = grid.dim();
    let mid = grid.bbox.center();
    for a in 0..dim {
        if mid[a] - rho0 < grid.bbox.lo[a] - 1e-12 || mid[a] + rho0 > grid.bbox.hi[a] + 1e-12 {
            return Err(invalid("the radius-rho0 ball leaves the grid box"));
        }
    }

    let hess = hessian_field(u, 1);

    // Probe sections around the center fix the size exponent theta and
    // the diameter constant; probes that kink or fail to normalize are
    // skipped, and a fully silent probe set falls back to the smooth
    // defaults.
    let h_probes = [rho0 * rho0 / 8.0, rho0 * rho0 / 32.0];
    let mut probe_pts = vec![mid.clone()];
    if dim >= 2 {
        for ring in [0.3f64, 0.6] {
            for i in 0..8 {
                let ang = TAU * i as f64 / 8.0;
                let mut pnt = mid.clone();
                pnt[0] += ring * rho0 * ang.cos();
                pnt[1] += ring * rho0 * ang.sin();
                probe_pts.push(pnt);
            }
        }
    } else {
        for off in [-0.6f64, -0.3, 0.3, 0.6] {
            let mut pnt = mid.clone();
            pnt[0] += off * rho0;
            probe_pts.push(pnt);
        }
    }
    let mut theta = 0.0f64;
    let mut c_hat = 0.0f64;
    let mut probes_used = 0usize;
    for pnt in &probe_pts {
        let Ok(y) = transport_map(u, pnt) else {
            continue;
        };
        for &h in &h_probes {
            if h >= 0.5 {
                continue;
            }
            let Ok(mut sec) = section_extract(u, pnt, &y, h) else {
                continue;
            };
            let Ok(report) = john_normalize(&mut sec) else {
                continue;
            };
            theta = theta.max(report.map.norm_a.ln() / (1.0 / h).ln());
            c_hat = c_hat.max(section_diameter(&grid, &sec) / h.sqrt());
            probes_used += 1;
        }
    }
    let theta = theta.clamp(0.01, 0.45);
    let beta = (1.0 / (4.0 * theta) - 0.5).min(BETA_CAP);
    let c_hat = if probes_used == 0 { 1.0 } else { c_hat.max(0.1) };

    let mut rows: Vec<LevelRow> = Vec::new();
    let mut d_sets: Vec<CellSet> = Vec::new();
    let mut aborted_at = None;
    let mut rho = rho0;
    for k in 0..=k_levels {
        if k > 0 {
            let next = rho - c_hat * m_base.powf(-(k as f64) * beta);
            if next < 0.5 * rho0 {
                aborted_at = Some(k);
                break;
            }
            rho = next;
        }
        let level = m_base.powi(k as i32);
        let mut dk = CellSet::new(grid.clone());
        for c in 0..grid.cell_count() {
            let norm = hess.op_norms[c];
            if !norm.is_finite() || norm < level {
                continue;
            }
            let ctr = grid.center(c);
            let r2: f64 = ctr.iter().zip(&mid).map(|(a, b)| (a - b) * (a - b)).sum();
            if r2 <= rho * rho {
                dk.insert(c);
            }
        }
        if let Some(prev) = d_sets.last() {
            debug_assert!(dk.is_subset(prev), "level sets must nest");
        }
        let ratio = match d_sets.last() {
            Some(prev) if !prev.is_empty() => dk.len() as f64 / prev.len() as f64,
            _ => f64::NAN,
        };
        let (sections_selected, mean_bad_fraction, covering_bound, bisect_failures) = if k == 0 {
            (0, f64::NAN, f64::NAN, 0)
        } else {
            cover_level(
                u,
                &hess,
                &dk,
                n_threshold * m_base.powi(k as i32 - 1),
                n_threshold,
                rho0,
                sigma,
                c_prime,
            )?
        };
        rows.push(LevelRow {
            k,
            rho,
            measure: dk.volume(),
            ratio,
            sections_selected,
            mean_bad_fraction,
            covering_bound,
            bisect_failures,
        });
        d_sets.push(dk);
    }
    let max_ratio = rows
        .iter()
        .map(|r| r.ratio)
        .filter(|r| r.is_finite())
        .fold(f64::NAN, f64::max);
    Ok(LevelSetTable {
        m_base,
        n_threshold,
        theta,
        beta,
        c_hat,
        rows,
        d_sets,
        max_ratio,
        aborted_at,
    })
}
