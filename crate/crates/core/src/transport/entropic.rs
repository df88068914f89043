//! Log-domain Sinkhorn iteration with rounding to exact marginals.
//!
//! Dual ascent alternates closed-form updates of the source and target
//! potentials; everything runs in log space so small regularization is
//! usable. The converged plan is then rounded (row scaling, column
//! scaling, rank-one repair) so its marginals match the inputs to machine
//! precision.

use crate::error::{invalid, LabError, Result};

use super::simplex::CostMatrix;

#[derive(Debug)]
pub struct EntropicSolution {
    /// Couplings of the rounded plan, sorted by (i, j).
    pub flows: Vec<(usize, usize, f64)>,
    /// Regularized dual potentials (source side).
    pub f: Vec<f64>,
    /// Regularized dual potentials (target side).
    pub g: Vec<f64>,
    /// Cost of the rounded plan.
    pub objective: f64,
    pub iterations: usize,
    /// Largest marginal violation before rounding.
    pub marginal_error: f64,
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + values.map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub fn solve(
    a: &[f64],
    b: &[f64],
    cost: &CostMatrix,
    epsilon: f64,
    max_iter: usize,
    tol: f64,
) -> Result<EntropicSolution> {
    let (ns, nt) = (a.len(), b.len());
    if !(epsilon > 0.0) || !(tol > 0.0) {
        return Err(invalid("entropic solve needs epsilon > 0 and tol > 0"));
    }
    if a.iter().chain(b).any(|&w| w <= 0.0) {
        return Err(invalid("entropic solve needs strictly positive weights"));
    }

    let log_a: Vec<f64> = a.iter().map(|w| w.ln()).collect();
    let log_b: Vec<f64> = b.iter().map(|w| w.ln()).collect();
    let mut f = vec![0.0f64; ns];
    let mut g = vec![0.0f64; nt];
    let mut err = f64::INFINITY;
    let mut iterations = 0usize;

    while iterations < max_iter {
        for i in 0..ns {
            f[i] = epsilon * log_a[i]
                - epsilon * log_sum_exp((0..nt).map(|j| (g[j] - cost.at(i, j)) / epsilon));
        }
        for j in 0..nt {
            g[j] = epsilon * log_b[j]
                - epsilon * log_sum_exp((0..ns).map(|i| (f[i] - cost.at(i, j)) / epsilon));
        }
        iterations += 1;

        // After a g-update the column sums are exact; the row defect is
        // the convergence measure.
        err = 0.0;
        for i in 0..ns {
            let row: f64 = (0..nt)
                .map(|j| ((f[i] + g[j] - cost.at(i, j)) / epsilon).exp())
                .sum();
            err = err.max((row - a[i]).abs());
        }
        if err <= tol {
            break;
        }
    }
    if err > tol {
        return Err(LabError::IterationLimit {
            what: "sinkhorn",
            iters: iterations,
            residual: err,
        });
    }

    // Rounding: scale rows down to their targets, then columns, then
    // repair the leftover mass with a rank-one update. Marginals become
    // exact up to floating point.
    let mut plan = vec![0.0f64; ns * nt];
    for i in 0..ns {
        for j in 0..nt {
            plan[i * nt + j] = ((f[i] + g[j] - cost.at(i, j)) / epsilon).exp();
        }
    }
    for i in 0..ns {
        let row: f64 = plan[i * nt..(i + 1) * nt].iter().sum();
        let s = (a[i] / row).min(1.0);
        for v in &mut plan[i * nt..(i + 1) * nt] {
            *v *= s;
        }
    }
    for j in 0..nt {
        let col: f64 = (0..ns).map(|i| plan[i * nt + j]).sum();
        let s = (b[j] / col).min(1.0);
        if s < 1.0 {
            for i in 0..ns {
                plan[i * nt + j] *= s;
            }
        }
    }
    let da: Vec<f64> = (0..ns)
        .map(|i| (a[i] - plan[i * nt..(i + 1) * nt].iter().sum::<f64>()).max(0.0))
        .collect();
    let db: Vec<f64> = (0..nt)
        .map(|j| (b[j] - (0..ns).map(|i| plan[i * nt + j]).sum::<f64>()).max(0.0))
        .collect();
    let defect: f64 = da.iter().sum();
    if defect > 0.0 {
        for i in 0..ns {
            if da[i] == 0.0 {
                continue;
            }
            for j in 0..nt {
                plan[i * nt + j] += da[i] * db[j] / defect;
            }
        }
    }

    let mut flows = Vec::new();
    let mut objective = 0.0;
    for i in 0..ns {
        for j in 0..nt {
            let m = plan[i * nt + j];
            if m > 0.0 {
                flows.push((i, j, m));
                objective += m * cost.at(i, j);
            }
        }
    }

    Ok(EntropicSolution {
        flows,
        f,
        g,
        objective,
        iterations,
        marginal_error: err,
    })
}
