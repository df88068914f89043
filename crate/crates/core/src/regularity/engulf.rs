//! Engulfing measurement: how much a section's height must be dilated
//! before it swallows the section of a nearby point.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::cconvex::{section_extract, Section};
use crate::error::{invalid, LabError, Result};
use crate::transport::{transport_map, PotentialField};

/// Search cap; a pair needing more than this counts as saturated.
const C_CAP: f64 = 64.0;
/// Bisection stops once the bracket is this tight.
const C_RESOLUTION: f64 = 0.05;

#[derive(Debug, Clone, Serialize)]
pub struct EngulfingRow {
    pub h: f64,
    /// Pairs that produced a finite constant.
    pub samples: usize,
    /// Draws dropped because the map or a section failed somewhere.
    pub skipped: usize,
    /// Pairs where even the cap did not engulf the base section.
    pub saturated: usize,
    pub max_c: f64,
    pub q50: f64,
    pub q90: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EngulfingTable {
    pub rows: Vec<EngulfingRow>,
    /// Largest finite constant over all rows.
    pub max_c: f64,
    /// Squared max; the dilation the covering argument feeds on.
    pub c_prime: f64,
}

/// Minimal dilation of the section at `x1` that engulfs `base`, or None
/// past the cap. Sections grow with height, so the predicate is monotone
/// in `c` and bisection is sound.
fn minimal_c(u: &PotentialField, base: &Section, x1: &[f64]) -> Result<Option<f64>> {
    let y1 = transport_map(u, x1)?;
    let engulfs = |c: f64| -> Result<bool> {
        let big = section_extract(u, x1, &y1, c * base.h)?;
        Ok(base.cells.is_subset(&big.cells))
    };
    if engulfs(1.0)? {
        return Ok(Some(1.0));
    }
    if !engulfs(C_CAP)? {
        return Ok(None);
    }
    let (mut lo, mut hi) = (1.0f64, C_CAP);
    while hi - lo > C_RESOLUTION {
        let mid = 0.5 * (lo + hi);
        if engulfs(mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(Some(hi))
}

/// Smallest `C` in `[1, 64]` with `S_h(x0)` inside `S_{Ch}(x1)`, located
/// to within 0.05. `x1` must lie in the section at `x0`; `None` means
/// the cap was not enough.
pub fn engulfing_c(
    u: &PotentialField,
    x0: &[f64],
    x1: &[f64],
    h: f64,
) -> Result<Option<f64>> {
    let y0 = transport_map(u, x0)?;
    let base = section_extract(u, x0, &y0, h)?;
    let Some(cell1) = u.grid.cell_of(x1) else {
        return Err(LabError::OutsideDomain {
            what: "engulfing probe",
            point: x1.to_vec(),
        });
    };
    if !base.cells.contains(cell1) {
        return Err(invalid("engulfing probe must lie in the section at x0"));
    }
    minimal_c(u, &base, x1)
}

/// Samples engulfing constants at each height in `h_list`. Base points
/// are drawn from the ball of `interior_radius` around the grid box
/// center; the partner point is a uniformly drawn cell of the base
/// section. Serial and fully determined by `seed`.
pub fn engulfing_estimate(
    u: &PotentialField,
    samples: usize,
    h_list: &[f64],
    r0_cap: f64,
    interior_radius: f64,
    seed: u64,
) -> Result<EngulfingTable> {
    if samples == 0 {
        return Err(invalid("engulfing estimate needs at least one sample"));
    }
    if h_list.is_empty() {
        return Err(invalid("engulfing estimate needs at least one height"));
    }
    if h_list.iter().any(|&h| !(h > 0.0) || h > r0_cap) {
        return Err(invalid("section heights must lie in (0, r0_cap]"));
    }
    if !(interior_radius > 0.0) {
        return Err(invalid("interior sampling radius must be positive"));
    }
    let mid = u.grid.bbox.center();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(h_list.len());
    for &h in h_list {
        let mut cs: Vec<f64> = Vec::with_capacity(samples);
        let mut skipped = 0usize;
        let mut saturated = 0usize;
        let budget = samples.saturating_mul(20);
        let mut attempts = 0usize;
        while cs.len() < samples && attempts < budget {
            attempts += 1;
            let x0: Vec<f64> = loop {
                let cand: Vec<f64> = mid
                    .iter()
                    .map(|&m| m + rng.gen_range(-interior_radius..=interior_radius))
                    .collect();
                let r2: f64 = cand
                    .iter()
                    .zip(&mid)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                if r2 <= interior_radius * interior_radius {
                    break cand;
                }
            };
            let Ok(y0) = transport_map(u, &x0) else {
                skipped += 1;
                continue;
            };
            let Ok(base) = section_extract(u, &x0, &y0, h) else {
                skipped += 1;
                continue;
            };
            let pick = rng.gen_range(0..base.cells.len());
            let cell = base.cells.iter().nth(pick).expect("pick < len");
            let x1 = u.grid.center(cell);
            match minimal_c(u, &base, &x1) {
                Ok(Some(c)) => cs.push(c),
                Ok(None) => saturated += 1,
                Err(_) => skipped += 1,
            }
        }
        cs.sort_by(|a, b| a.partial_cmp(b).expect("constants are finite"));
        let quantile = |q: f64| -> f64 {
            if cs.is_empty() {
                f64::NAN
            } else {
                cs[(q * (cs.len() - 1) as f64).round() as usize]
            }
        };
        rows.push(EngulfingRow {
            h,
            samples: cs.len(),
            skipped,
            saturated,
            max_c: cs.last().copied().unwrap_or(f64::NAN),
            q50: quantile(0.5),
            q90: quantile(0.9),
        });
    }
    let max_c = rows
        .iter()
        .map(|r| r.max_c)
        .filter(|c| c.is_finite())
        .fold(f64::NAN, f64::max);
    Ok(EngulfingTable {
        rows,
        max_c,
        c_prime: max_c * max_c,
    })
}
