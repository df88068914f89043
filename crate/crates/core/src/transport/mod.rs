//! Discrete Kantorovich problems: atom clouds, exact and entropic solves,
//! dual potentials, transport maps, and residuals of the prescribing
//! equation.
//!
//! The chain of custody for a solve: [`sample_density`] turns a reference
//! density into an [`AtomCloud`]; [`solve_discrete`] couples two clouds and
//! reports dual potentials; [`reconstruct_potential`] turns the target-side
//! duals into a [`PotentialField`] `u(x) = max_j(-c(x, y_j) + lambda_j)`;
//! [`transport_map`] and [`ma_residual`] then probe `u` pointwise.

pub mod artifact;
mod entropic;
mod simplex;

use serde::{Deserialize, Serialize};

use crate::cost::CostModel;
use crate::error::{invalid, LabError, Result};
use crate::grid::{halton_points, CellSet, GridBox, GridSpec};
use crate::par;

use simplex::CostMatrix;

/// Exact solves build a dense cost matrix; this caps its entry count.
pub const SOLVE_SIZE_LIMIT: usize = 4_000_000;

/// Weighted point masses inside a box. Weights are normalized to total
/// mass one on construction, so any two clouds are balanced.
#[derive(Debug, Clone, PartialEq)]
pub struct AtomCloud {
    positions: Vec<f64>,
    weights: Vec<f64>,
    domain_box: GridBox,
}

impl AtomCloud {
    pub fn new(positions: Vec<f64>, weights: Vec<f64>, domain_box: GridBox) -> Result<Self> {
        let dim = domain_box.dim();
        if positions.len() != weights.len() * dim {
            return Err(LabError::DimensionMismatch {
                what: "atom positions",
                expected: weights.len() * dim,
                got: positions.len(),
            });
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(invalid("atom weights must be finite and nonnegative"));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(invalid("atom weights must carry positive total mass"));
        }
        let tol = 1e-9 * (1.0 + domain_box.diameter());
        for p in positions.chunks(dim) {
            if !domain_box.contains(p, tol) {
                return Err(LabError::OutsideDomain {
                    what: "atom",
                    point: p.to_vec(),
                });
            }
        }
        let weights = weights.iter().map(|w| w / total).collect();
        Ok(AtomCloud {
            positions,
            weights,
            domain_box,
        })
    }

    /// Cloud with equal masses at the given positions.
    pub fn equal_weights(positions: Vec<f64>, domain_box: GridBox) -> Result<Self> {
        let n = positions.len() / domain_box.dim();
        AtomCloud::new(positions, vec![1.0; n], domain_box)
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.domain_box.dim()
    }

    pub fn position(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.positions[i * d..(i + 1) * d]
    }

    pub fn positions_flat(&self) -> &[f64] {
        &self.positions
    }

    pub fn weight(&self, i: usize) -> f64 {
        self.weights[i]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn domain_box(&self) -> &GridBox {
        &self.domain_box
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BallSpec {
    pub center: Vec<f64>,
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianComponent {
    pub mean: Vec<f64>,
    pub sigma: f64,
    pub weight: f64,
}

/// Reference densities that atom clouds discretize.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DensitySpec {
    UniformOnBox {
        bbox: GridBox,
    },
    UniformOnBall {
        center: Vec<f64>,
        radius: f64,
    },
    /// Mixture of isotropic Gaussians, truncated to `bbox`.
    GaussianMixture {
        bbox: GridBox,
        components: Vec<GaussianComponent>,
    },
    UnionOfBalls {
        balls: Vec<BallSpec>,
    },
    /// Piecewise-constant density given cell by cell on a grid over
    /// `[lo, hi]`; axis 0 fastest, matching [`GridSpec`] flat order.
    CsvGrid {
        lo: Vec<f64>,
        hi: Vec<f64>,
        res: Vec<usize>,
        values: Vec<f64>,
    },
}

impl DensitySpec {
    fn validate(&self) -> Result<()> {
        match self {
            DensitySpec::UniformOnBox { .. } => Ok(()),
            DensitySpec::UniformOnBall { center, radius } => {
                if center.is_empty() || !radius.is_finite() || *radius <= 0.0 {
                    return Err(invalid("ball density needs a center and radius > 0"));
                }
                Ok(())
            }
            DensitySpec::GaussianMixture { bbox, components } => {
                if components.is_empty() {
                    return Err(invalid("gaussian mixture needs at least one component"));
                }
                for c in components {
                    if c.mean.len() != bbox.dim() {
                        return Err(LabError::DimensionMismatch {
                            what: "mixture component mean",
                            expected: bbox.dim(),
                            got: c.mean.len(),
                        });
                    }
                    if !(c.sigma > 0.0) || !(c.weight >= 0.0) || !c.weight.is_finite() {
                        return Err(invalid("mixture components need sigma > 0, weight >= 0"));
                    }
                }
                if components.iter().map(|c| c.weight).sum::<f64>() <= 0.0 {
                    return Err(invalid("mixture weights must not all vanish"));
                }
                Ok(())
            }
            DensitySpec::UnionOfBalls { balls } => {
                if balls.is_empty() {
                    return Err(invalid("union-of-balls density needs at least one ball"));
                }
                let dim = balls[0].center.len();
                for b in balls {
                    if b.center.len() != dim || !(b.radius > 0.0) {
                        return Err(invalid("balls need equal dimensions and radius > 0"));
                    }
                }
                Ok(())
            }
            DensitySpec::CsvGrid {
                lo,
                hi,
                res,
                values,
            } => {
                let cells: usize = res.iter().product();
                if lo.len() != hi.len() || res.len() != lo.len() || cells != values.len() {
                    return Err(invalid("csv-grid density has inconsistent shape"));
                }
                if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
                    return Err(invalid("csv-grid density values must be finite and >= 0"));
                }
                GridBox::new(lo.clone(), hi.clone())?;
                Ok(())
            }
        }
    }

    pub fn bounding_box(&self) -> Result<GridBox> {
        self.validate()?;
        match self {
            DensitySpec::UniformOnBox { bbox } | DensitySpec::GaussianMixture { bbox, .. } => {
                Ok(bbox.clone())
            }
            DensitySpec::UniformOnBall { center, radius } => GridBox::new(
                center.iter().map(|c| c - radius).collect(),
                center.iter().map(|c| c + radius).collect(),
            ),
            DensitySpec::UnionOfBalls { balls } => {
                let dim = balls[0].center.len();
                let mut lo = vec![f64::INFINITY; dim];
                let mut hi = vec![f64::NEG_INFINITY; dim];
                for b in balls {
                    for k in 0..dim {
                        lo[k] = lo[k].min(b.center[k] - b.radius);
                        hi[k] = hi[k].max(b.center[k] + b.radius);
                    }
                }
                GridBox::new(lo, hi)
            }
            DensitySpec::CsvGrid { lo, hi, .. } => GridBox::new(lo.clone(), hi.clone()),
        }
    }

    /// Density value at `x`, up to a normalization constant.
    pub fn density(&self, x: &[f64]) -> f64 {
        match self {
            DensitySpec::UniformOnBox { bbox } => {
                if bbox.contains(x, 0.0) {
                    1.0
                } else {
                    0.0
                }
            }
            DensitySpec::UniformOnBall { center, radius } => {
                let d2: f64 = x.iter().zip(center).map(|(a, b)| (a - b) * (a - b)).sum();
                if d2 <= radius * radius {
                    1.0
                } else {
                    0.0
                }
            }
            DensitySpec::GaussianMixture { bbox, components } => {
                if !bbox.contains(x, 0.0) {
                    return 0.0;
                }
                components
                    .iter()
                    .map(|c| {
                        let d2: f64 =
                            x.iter().zip(&c.mean).map(|(a, b)| (a - b) * (a - b)).sum();
                        c.weight * (-d2 / (2.0 * c.sigma * c.sigma)).exp()
                    })
                    .sum()
            }
            DensitySpec::UnionOfBalls { balls } => {
                for b in balls {
                    let d2: f64 = x
                        .iter()
                        .zip(&b.center)
                        .map(|(a, c)| (a - c) * (a - c))
                        .sum();
                    if d2 <= b.radius * b.radius {
                        return 1.0;
                    }
                }
                0.0
            }
            DensitySpec::CsvGrid {
                lo,
                hi,
                res,
                values,
            } => {
                let bbox = GridBox::new(lo.clone(), hi.clone()).expect("validated");
                let grid = GridSpec::new(bbox, res.clone()).expect("validated");
                match grid.cell_of(x) {
                    Some(c) => values[c],
                    None => 0.0,
                }
            }
        }
    }
}

/// Discretizes `spec` into atoms at stratified sample points: the cell
/// centers of a near-isotropic grid over the spec's bounding box, with
/// weights proportional to the density there. Zero-density strata are
/// dropped. Stratified midpoint sampling is deterministic; `seed` is part
/// of the interface for jittered strata but currently unused.
pub fn sample_density(spec: &DensitySpec, n_atoms: usize, seed: u64) -> Result<AtomCloud> {
    let _ = seed;
    if n_atoms == 0 {
        return Err(invalid("n_atoms must be positive"));
    }
    let bbox = spec.bounding_box()?;
    let dim = bbox.dim();
    let per_axis = ((n_atoms as f64).powf(1.0 / dim as f64).round() as usize).max(1);
    let strata = GridSpec::new(bbox.clone(), vec![per_axis; dim])?;
    let mut positions = Vec::new();
    let mut weights = Vec::new();
    for center in strata.centers() {
        let w = spec.density(&center);
        if w > 0.0 {
            positions.extend_from_slice(&center);
            weights.push(w);
        }
    }
    if weights.is_empty() {
        return Err(invalid("density vanishes at every stratified sample point"));
    }
    AtomCloud::new(positions, weights, bbox)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SolveMethod {
    Exact,
    Entropic {
        epsilon: f64,
        max_iter: usize,
        tol: f64,
    },
}

/// A coupling of two atom clouds with its dual potentials. The duals are
/// kept in c-convex form: `source_duals[i] = max_j(-c(x_i, y_j) +
/// target_duals[j])`, with equality attained on the support.
#[derive(Debug, Clone)]
pub struct TransportPlan {
    /// Positive-mass couplings, sorted by (i, j).
    pub couplings: Vec<(usize, usize, f64)>,
    pub source_duals: Vec<f64>,
    pub target_duals: Vec<f64>,
    pub objective: f64,
    /// Primal objective minus the dual objective of the stored potentials.
    pub gap: f64,
    pub method: SolveMethod,
}

fn check_cloud_against_cost(
    cost: &CostModel,
    cloud: &AtomCloud,
    bbox: &GridBox,
    what: &'static str,
) -> Result<()> {
    if cloud.dim() != cost.dim() {
        return Err(LabError::DimensionMismatch {
            what: "atom cloud",
            expected: cost.dim(),
            got: cloud.dim(),
        });
    }
    let tol = 1e-9 * (1.0 + bbox.diameter());
    for i in 0..cloud.len() {
        if !bbox.contains(cloud.position(i), tol) {
            return Err(LabError::OutsideDomain {
                what,
                point: cloud.position(i).to_vec(),
            });
        }
    }
    Ok(())
}

/// Rebuilds dual potentials from the support of an optimal coupling.
///
/// Complementary slackness fixes the duals along each connected component
/// of the support (a forest for basic solutions); the free additive
/// constant of every further component is pinned to the midpoint of its
/// feasible window against the atoms already processed. Midpoint
/// anchoring matters: tree duals straight from the simplex drift by
/// O(atom spacing) along degenerate tight-arc chains, while the window
/// midpoint tracks the continuum potential to second order.
fn canonical_duals(
    ns: usize,
    nt: usize,
    couplings: &[(usize, usize, f64)],
    c: impl Fn(usize, usize) -> f64,
) -> (Vec<f64>, Vec<f64>) {
    let mut psi = vec![f64::NAN; ns];
    let mut lam = vec![f64::NAN; nt];
    let mut src_arcs: Vec<Vec<usize>> = vec![Vec::new(); ns];
    let mut tgt_arcs: Vec<Vec<usize>> = vec![Vec::new(); nt];
    for (k, &(i, j, _)) in couplings.iter().enumerate() {
        src_arcs[i].push(k);
        tgt_arcs[j].push(k);
    }

    let mut done_src: Vec<usize> = Vec::new();
    let mut done_tgt: Vec<usize> = Vec::new();
    for &(i0, j0, _) in couplings {
        if !psi[i0].is_nan() || !lam[j0].is_nan() {
            continue;
        }
        // Walk the component, propagating equality on support arcs.
        let mut comp_src = Vec::new();
        let mut comp_tgt = vec![j0];
        lam[j0] = 0.0;
        let mut frontier = vec![(false, j0)]; // (is_source, node)
        while let Some((is_source, node)) = frontier.pop() {
            let arcs = if is_source {
                &src_arcs[node]
            } else {
                &tgt_arcs[node]
            };
            for &k in arcs {
                let (i, j, _) = couplings[k];
                if is_source && lam[j].is_nan() {
                    lam[j] = psi[i] + c(i, j);
                    comp_tgt.push(j);
                    frontier.push((false, j));
                } else if !is_source && psi[i].is_nan() {
                    psi[i] = lam[j] - c(i, j);
                    comp_src.push(i);
                    frontier.push((true, i));
                }
            }
        }
        // Pin the component's additive constant against everything done.
        if !done_src.is_empty() {
            let mut hi = f64::INFINITY;
            for &i in &done_src {
                for &j in &comp_tgt {
                    hi = hi.min(psi[i] + c(i, j) - lam[j]);
                }
            }
            let mut lo = f64::NEG_INFINITY;
            for &i in &comp_src {
                for &j in &done_tgt {
                    lo = lo.max(lam[j] - c(i, j) - psi[i]);
                }
            }
            let shift = 0.5 * (lo + hi);
            for &j in &comp_tgt {
                lam[j] += shift;
            }
            for &i in &comp_src {
                psi[i] += shift;
            }
        }
        done_src.extend_from_slice(&comp_src);
        done_tgt.extend_from_slice(&comp_tgt);
    }

    // Atoms without support arcs (zero weight) get the tightest feasible
    // values; they carry no mass, so nothing else moves.
    for j in 0..nt {
        if lam[j].is_nan() {
            lam[j] = done_src
                .iter()
                .map(|&i| psi[i] + c(i, j))
                .fold(f64::INFINITY, f64::min);
        }
    }
    for i in 0..ns {
        if psi[i].is_nan() {
            psi[i] = (0..nt)
                .map(|j| lam[j] - c(i, j))
                .fold(f64::NEG_INFINITY, f64::max);
        }
    }
    (psi, lam)
}

/// Couples `source` to `target` under `cost`. The exact method is a
/// network simplex with deterministic pivoting; the entropic method is a
/// regularized dual iteration whose plan is rounded back to exact
/// marginals. Both report dual potentials; see [`TransportPlan`].
pub fn solve_discrete(
    cost: &CostModel,
    source: &AtomCloud,
    target: &AtomCloud,
    method: SolveMethod,
) -> Result<TransportPlan> {
    check_cloud_against_cost(cost, source, &cost.source_box, "source atom")?;
    check_cloud_against_cost(cost, target, &cost.target_box, "target atom")?;
    let sa: f64 = source.weights().iter().sum();
    let sb: f64 = target.weights().iter().sum();
    if (sa - sb).abs() > 1e-12 {
        return Err(LabError::Imbalance {
            source_total: sa,
            target_total: sb,
        });
    }
    let (ns, nt) = (source.len(), target.len());
    if ns * nt > SOLVE_SIZE_LIMIT {
        return Err(LabError::TooLarge {
            size: ns * nt,
            limit: SOLVE_SIZE_LIMIT,
        });
    }

    let data = par::map_collect(ns * nt, |k| {
        cost.eval_unchecked(source.position(k / nt), target.position(k % nt))
    });
    let cmat = CostMatrix { ns, nt, data };

    let (couplings, psi, lam, objective) = match method {
        SolveMethod::Exact => {
            let sol = simplex::solve(source.weights(), target.weights(), &cmat);
            let (psi, lam) = canonical_duals(ns, nt, &sol.flows, |i, j| cmat.at(i, j));
            // Both the simplex tree duals and the rebuilt ones certify the
            // same optimum.
            debug_assert!({
                let tree: f64 = source
                    .weights()
                    .iter()
                    .zip(&sol.alpha)
                    .map(|(w, d)| w * d)
                    .sum::<f64>()
                    + target
                        .weights()
                        .iter()
                        .zip(&sol.beta)
                        .map(|(w, d)| w * d)
                        .sum::<f64>();
                let canon: f64 = target
                    .weights()
                    .iter()
                    .zip(&lam)
                    .map(|(w, d)| w * d)
                    .sum::<f64>()
                    - source
                        .weights()
                        .iter()
                        .zip(&psi)
                        .map(|(w, d)| w * d)
                        .sum::<f64>();
                (tree - canon).abs() <= 1e-9 * (1.0 + tree.abs())
            });
            (sol.flows, psi, lam, sol.objective)
        }
        SolveMethod::Entropic {
            epsilon,
            max_iter,
            tol,
        } => {
            let sol = entropic::solve(
                source.weights(),
                target.weights(),
                &cmat,
                epsilon,
                max_iter,
                tol,
            )?;
            debug_assert!(sol.iterations <= max_iter && sol.marginal_error <= tol);
            let lam = sol.g;
            let psi = par::map_collect(ns, |i| {
                (0..nt)
                    .map(|j| lam[j] - cmat.at(i, j))
                    .fold(f64::NEG_INFINITY, f64::max)
            });
            // Softmax sandwich: the hard envelope psi and the regularized
            // source dual f bracket each other within eps log nt.
            debug_assert!((0..ns).all(|i| {
                let s = psi[i] + sol.f[i] - epsilon * source.weight(i).ln();
                s <= 1e-9 && s >= -epsilon * (nt as f64).ln() - 1e-9
            }));
            (sol.flows, psi, lam, sol.objective)
        }
    };

    let dual_objective: f64 = target
        .weights()
        .iter()
        .zip(&lam)
        .map(|(b, l)| b * l)
        .sum::<f64>()
        - source
            .weights()
            .iter()
            .zip(&psi)
            .map(|(a, p)| a * p)
            .sum::<f64>();
    Ok(TransportPlan {
        couplings,
        source_duals: psi,
        target_duals: lam,
        objective,
        gap: objective - dual_objective,
        method,
    })
}

/// Checks every contract a plan carries: marginals match the cloud
/// weights, stored source duals equal the c-convex envelope of the target
/// duals, the envelope is attained on the support, and the duality gap is
/// within the method's guarantee (machine precision for exact solves, the
/// softmax defect `10 eps log(n)` for entropic ones).
pub fn validate_plan(
    plan: &TransportPlan,
    cost: &CostModel,
    source: &AtomCloud,
    target: &AtomCloud,
) -> Result<()> {
    let (ns, nt) = (source.len(), target.len());
    if plan.source_duals.len() != ns || plan.target_duals.len() != nt {
        return Err(invalid("plan dual lengths do not match the clouds"));
    }
    let tol = 1e-9 * cost.scale();

    let mut row = vec![0.0f64; ns];
    let mut col = vec![0.0f64; nt];
    let mut objective = 0.0;
    for &(i, j, m) in &plan.couplings {
        if i >= ns || j >= nt {
            return Err(invalid(format!("coupling ({i}, {j}) is out of range")));
        }
        if !(m > 0.0) {
            return Err(invalid(format!("coupling ({i}, {j}) has mass {m}")));
        }
        row[i] += m;
        col[j] += m;
        objective += m * cost.eval_unchecked(source.position(i), target.position(j));
    }
    for i in 0..ns {
        if (row[i] - source.weight(i)).abs() > 1e-9 {
            return Err(invalid(format!(
                "row {i} mass {} differs from weight {}",
                row[i],
                source.weight(i)
            )));
        }
    }
    for j in 0..nt {
        if (col[j] - target.weight(j)).abs() > 1e-9 {
            return Err(invalid(format!(
                "column {j} mass {} differs from weight {}",
                col[j],
                target.weight(j)
            )));
        }
    }
    if (objective - plan.objective).abs() > tol.max(1e-12 * objective.abs()) {
        return Err(invalid(format!(
            "stored objective {} differs from recomputed {objective}",
            plan.objective
        )));
    }

    // The c-convex envelope of the target duals, directly.
    let envelope = par::map_collect(ns, |i| {
        (0..nt)
            .map(|j| plan.target_duals[j] - cost.eval_unchecked(source.position(i), target.position(j)))
            .fold(f64::NEG_INFINITY, f64::max)
    });
    for i in 0..ns {
        if (plan.source_duals[i] - envelope[i]).abs() > tol {
            return Err(invalid(format!(
                "source dual {i} is {} but the envelope gives {}",
                plan.source_duals[i], envelope[i]
            )));
        }
    }

    match plan.method {
        SolveMethod::Exact => {
            for &(i, j, _) in &plan.couplings {
                let attained = plan.target_duals[j]
                    - cost.eval_unchecked(source.position(i), target.position(j));
                if envelope[i] - attained > tol {
                    return Err(invalid(format!(
                        "support arc ({i}, {j}) misses the envelope by {}",
                        envelope[i] - attained
                    )));
                }
            }
            if plan.gap.abs() > 1e-8 * plan.objective.abs() + 1e-12 * cost.scale() {
                return Err(invalid(format!("exact solve left gap {}", plan.gap)));
            }
        }
        SolveMethod::Entropic { epsilon, .. } => {
            let bound = 10.0 * epsilon * ((ns + nt) as f64).ln();
            if plan.gap > bound || plan.gap < -tol {
                return Err(invalid(format!(
                    "entropic gap {} outside [0, {bound}]",
                    plan.gap
                )));
            }
        }
    }
    Ok(())
}

/// How a potential evaluates off its atoms.
#[derive(Debug, Clone)]
pub enum PotentialSource {
    /// `u(x) = max_j(-c(x, y_j) + lambda_j)`; the canonical c-convex form.
    Atoms { positions: Vec<f64>, lambdas: Vec<f64> },
    /// Closed-form scalar field, used to inject known potentials.
    Analytic {
        name: &'static str,
        f: fn(&[f64]) -> f64,
    },
}

/// A potential `u` with its generating data, evaluation grid, and the
/// normalization `u(anchor) = 0`.
#[derive(Debug, Clone)]
pub struct PotentialField {
    pub cost: CostModel,
    pub source: PotentialSource,
    pub grid: GridSpec,
    /// `u` at cell centers.
    pub values: Vec<f64>,
    pub anchor: Vec<f64>,
    anchor_offset: f64,
    /// Sampled K with `u + K|x|^2` convex; 0 for costs with flat `D_xx c`.
    pub k_semiconvex: f64,
}

/// Sup of `|D_xx c(x, y_j)|` over probe points and atoms, halved: each
/// branch of the envelope has Hessian bounded below by `-|D_xx c|`.
fn sampled_semiconvexity(cost: &CostModel, probe_box: &GridBox, atom_positions: &[f64]) -> f64 {
    let dim = cost.dim();
    let n_atoms = atom_positions.len() / dim;
    let stride = n_atoms.div_ceil(128).max(1);
    let mut bound = 0.0f64;
    for x in halton_points(probe_box, 64) {
        for y in atom_positions.chunks(dim).step_by(stride) {
            if let Ok(h) = cost.hess_xx(&x, y) {
                bound = bound.max(h.op_norm());
            }
        }
    }
    0.5 * bound
}

impl PotentialField {
    pub fn from_atoms(
        cost: CostModel,
        atom_positions: Vec<f64>,
        lambdas: Vec<f64>,
        grid: GridSpec,
        anchor: &[f64],
    ) -> Result<Self> {
        let dim = cost.dim();
        if atom_positions.len() != lambdas.len() * dim {
            return Err(LabError::DimensionMismatch {
                what: "potential atoms",
                expected: lambdas.len() * dim,
                got: atom_positions.len(),
            });
        }
        if lambdas.is_empty() {
            return Err(invalid("a potential needs at least one atom"));
        }
        if lambdas.iter().any(|l| !l.is_finite()) {
            return Err(invalid("atom duals must be finite"));
        }
        if grid.dim() != dim || anchor.len() != dim {
            return Err(LabError::DimensionMismatch {
                what: "potential grid",
                expected: dim,
                got: if grid.dim() != dim {
                    grid.dim()
                } else {
                    anchor.len()
                },
            });
        }
        let tol = 1e-9 * (1.0 + cost.target_box.diameter());
        for y in atom_positions.chunks(dim) {
            if !cost.target_box.contains(y, tol) {
                return Err(LabError::OutsideDomain {
                    what: "potential atom",
                    point: y.to_vec(),
                });
            }
        }
        let k_semiconvex = sampled_semiconvexity(&cost, &grid.bbox, &atom_positions);
        let source = PotentialSource::Atoms {
            positions: atom_positions,
            lambdas,
        };
        Self::finish(cost, source, grid, anchor.to_vec(), k_semiconvex)
    }

    /// Wraps a closed-form `u`. The caller vouches for `k_semiconvex`;
    /// injected oracles know their own convexity.
    pub fn analytic(
        name: &'static str,
        f: fn(&[f64]) -> f64,
        cost: CostModel,
        grid: GridSpec,
        anchor: &[f64],
        k_semiconvex: f64,
    ) -> Result<Self> {
        if grid.dim() != cost.dim() || anchor.len() != cost.dim() {
            return Err(LabError::DimensionMismatch {
                what: "potential grid",
                expected: cost.dim(),
                got: grid.dim(),
            });
        }
        let source = PotentialSource::Analytic { name, f };
        Self::finish(cost, source, grid, anchor.to_vec(), k_semiconvex)
    }

    fn finish(
        cost: CostModel,
        source: PotentialSource,
        grid: GridSpec,
        anchor: Vec<f64>,
        k_semiconvex: f64,
    ) -> Result<Self> {
        if anchor.iter().any(|a| !a.is_finite()) {
            return Err(invalid("anchor must be finite"));
        }
        let mut field = PotentialField {
            cost,
            source,
            grid,
            values: Vec::new(),
            anchor,
            anchor_offset: 0.0,
            k_semiconvex,
        };
        field.anchor_offset = field.eval_raw(&field.anchor);
        field.values = par::map_collect(field.grid.cell_count(), |c| {
            field.eval_raw(&field.grid.center(c)) - field.anchor_offset
        });
        Ok(field)
    }

    fn eval_raw(&self, x: &[f64]) -> f64 {
        match &self.source {
            PotentialSource::Atoms { positions, lambdas } => {
                let dim = self.cost.dim();
                positions
                    .chunks(dim)
                    .zip(lambdas)
                    .map(|(y, l)| l - self.cost.eval_unchecked(x, y))
                    .fold(f64::NEG_INFINITY, f64::max)
            }
            PotentialSource::Analytic { f, .. } => f(x),
        }
    }

    /// `u(x)`, anchored so `u(anchor) = 0`. Defined for every `x`; the
    /// envelope extends past the grid box.
    pub fn eval(&self, x: &[f64]) -> f64 {
        self.eval_raw(x) - self.anchor_offset
    }

    /// Target atoms and their duals, when the potential has them.
    pub fn atoms(&self) -> Option<(&[f64], &[f64])> {
        match &self.source {
            PotentialSource::Atoms { positions, lambdas } => {
                Some((positions.as_slice(), lambdas.as_slice()))
            }
            PotentialSource::Analytic { .. } => None,
        }
    }

    /// The atom whose branch attains the envelope at `x`. Unlike the
    /// differenced gradient this is an exact supporting slope even
    /// between two nearly tied branches, so sections based on it stay
    /// nonnegative to rounding. None for analytic potentials.
    pub fn supporting_atom(&self, x: &[f64]) -> Option<Vec<f64>> {
        let PotentialSource::Atoms { positions, lambdas } = &self.source else {
            return None;
        };
        let dim = self.cost.dim();
        let mut best = f64::NEG_INFINITY;
        let mut winner = 0;
        for (j, (y, l)) in positions.chunks(dim).zip(lambdas).enumerate() {
            let v = l - self.cost.eval_unchecked(x, y);
            if v > best {
                best = v;
                winner = j;
            }
        }
        Some(positions[winner * dim..(winner + 1) * dim].to_vec())
    }
}

/// Threshold separating genuine kinks from discretization noise in
/// one-sided slopes at step `h` of a potential with semiconvexity `k`.
pub(crate) fn kink_gap_tol(h: f64, k: f64) -> f64 {
    10.0 * h * (1.0 + k)
}

/// Rebuilds the potential of a solved plan on an evaluation grid.
pub fn reconstruct_potential(
    plan: &TransportPlan,
    cost: &CostModel,
    target: &AtomCloud,
    grid: &GridSpec,
    anchor: &[f64],
) -> Result<PotentialField> {
    if let SolveMethod::Entropic { epsilon, .. } = plan.method {
        let cap = 1e-3 * cost.scale();
        if epsilon > cap {
            return Err(LabError::NotApplicable {
                what: "reconstruct_potential",
                detail: format!(
                    "entropic duals at epsilon {epsilon:.3e} exceed the trusted cap {cap:.3e}; \
                     section geometry is sensitive to dual error"
                ),
            });
        }
    }
    if plan.target_duals.len() != target.len() {
        return Err(invalid("plan duals do not match the target cloud"));
    }
    PotentialField::from_atoms(
        cost.clone(),
        target.positions_flat().to_vec(),
        plan.target_duals.clone(),
        grid.clone(),
        anchor,
    )
}

/// The target the potential's gradient points at: `c_exp(x, grad u(x))`,
/// with the gradient taken by centered differences at the grid spacing.
/// One-sided slopes that disagree beyond the semiconvexity budget mean
/// `u` has a kink at `x`; the caller gets the gap instead of a target.
pub fn transport_map(u: &PotentialField, x: &[f64]) -> Result<Vec<f64>> {
    let dim = u.grid.dim();
    if x.len() != dim {
        return Err(LabError::DimensionMismatch {
            what: "transport_map point",
            expected: dim,
            got: x.len(),
        });
    }
    let u0 = u.eval(x);
    let mut grad = vec![0.0; dim];
    let mut probe = x.to_vec();
    for k in 0..dim {
        let h = u.grid.spacing(k);
        probe[k] = x[k] + h;
        let up = u.eval(&probe);
        probe[k] = x[k] - h;
        let dn = u.eval(&probe);
        probe[k] = x[k];
        let gap = ((up - u0) / h - (u0 - dn) / h).abs();
        if gap > kink_gap_tol(h, u.k_semiconvex) {
            return Err(LabError::NondifferentiablePoint {
                point: x.to_vec(),
                gap,
            });
        }
        grad[k] = (up - dn) / (2.0 * h);
    }
    u.cost.c_exp(x, &grad)
}

/// Cellwise defect of the transport equation, `det(D^2 u + D_xx c) -
/// |det D_xy c| f/g`, with all second-order data taken at the grid step.
pub struct ResidualField {
    pub grid: GridSpec,
    /// Residual per cell; NaN where masked.
    pub values: Vec<f64>,
    /// Cells the residual was actually computed on.
    pub valid: CellSet,
}

impl ResidualField {
    pub fn valid_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.valid.iter().map(|c| self.values[c])
    }

    pub fn median_abs(&self) -> Option<f64> {
        let mut v: Vec<f64> = self.valid_values().map(f64::abs).collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(|a, b| a.partial_cmp(b).expect("finite residuals"));
        Some(v[v.len() / 2])
    }
}

/// Evaluates the equation residual of `u` against densities `f` and `g`
/// on `region`. Masked out: cells within 2 cells of the grid boundary,
/// kink cells, cells where the map or the cost degenerates, and cells
/// where `g` falls below the division guard 1e-12.
pub fn ma_residual<F, G>(
    u: &PotentialField,
    cost: &CostModel,
    f_density: F,
    g_density: G,
    region: &CellSet,
) -> Result<ResidualField>
where
    F: Fn(&[f64]) -> f64 + Sync,
    G: Fn(&[f64]) -> f64 + Sync,
{
    if region.grid != u.grid {
        return Err(invalid("residual region lives on a different grid"));
    }
    let hess = crate::regularity::hessian_field(u, 1);
    let cells = u.grid.cell_count();
    let entries = par::map_collect(cells, |c| -> Option<f64> {
        if !region.contains(c) || !hess.valid.contains(c) {
            return None;
        }
        let multi = u.grid.multi(c);
        if !u.grid.interior_multi(&multi, 2) {
            return None;
        }
        let x = u.grid.center(c);
        let t = transport_map(u, &x).ok()?;
        let g = g_density(&t);
        if g < 1e-12 {
            return None;
        }
        let h = hess.hessians[c].as_ref()?;
        let lhs = h.add(&cost.hess_xx(&x, &t).ok()?).det();
        let twist = cost.hess_xy(&x, &t).ok()?.det().abs();
        Some(lhs - twist * f_density(&x) / g)
    });
    let mut values = vec![f64::NAN; cells];
    let mut valid = CellSet::new(u.grid.clone());
    for (c, e) in entries.into_iter().enumerate() {
        if let Some(v) = e {
            values[c] = v;
            valid.insert(c);
        }
    }
    Ok(ResidualField {
        grid: u.grid.clone(),
        values,
        valid,
    })
}

/// Exact 1D solver by sorted matching. Requires the mixed second
/// derivative of the cost to keep one sign over the product box: negative
/// means sorted-with-sorted (monotone) is optimal, positive means
/// sorted-with-reversed (antitone). Duals come from the same staircase
/// propagation as the general solver.
pub fn oracle_1d(
    cost: &CostModel,
    source: &AtomCloud,
    target: &AtomCloud,
) -> Result<TransportPlan> {
    if cost.dim() != 1 {
        return Err(LabError::DimensionMismatch {
            what: "oracle_1d cost",
            expected: 1,
            got: cost.dim(),
        });
    }
    check_cloud_against_cost(cost, source, &cost.source_box, "source atom")?;
    check_cloud_against_cost(cost, target, &cost.target_box, "target atom")?;
    if source.weights().iter().any(|w| *w <= 0.0) || target.weights().iter().any(|w| *w <= 0.0) {
        return Err(invalid("oracle_1d needs strictly positive weights"));
    }

    // Twist sign, sampled on a 64x64 product grid plus the corners.
    let sx = GridSpec::square(cost.source_box.clone(), 64)?;
    let sy = GridSpec::square(cost.target_box.clone(), 64)?;
    let mut xs: Vec<f64> = sx.centers().map(|p| p[0]).collect();
    let mut ys: Vec<f64> = sy.centers().map(|p| p[0]).collect();
    xs.extend([cost.source_box.lo[0], cost.source_box.hi[0]]);
    ys.extend([cost.target_box.lo[0], cost.target_box.hi[0]]);
    let mut sign = 0.0f64;
    for &x in &xs {
        for &y in &ys {
            let s = cost.hess_xy(&[x], &[y]).map_err(|e| LabError::NotApplicable {
                what: "oracle_1d",
                detail: format!("twist undefined at sample ({x}, {y}): {e}"),
            })?[(0, 0)];
            if s == 0.0 {
                return Err(LabError::NotApplicable {
                    what: "oracle_1d",
                    detail: format!("twist vanishes at sample ({x}, {y})"),
                });
            }
            if sign == 0.0 {
                sign = s.signum();
            } else if s.signum() != sign {
                return Err(LabError::NotApplicable {
                    what: "oracle_1d",
                    detail: "twist changes sign on the product box".into(),
                });
            }
        }
    }

    let order = |cloud: &AtomCloud, reversed: bool| -> Vec<usize> {
        let mut idx: Vec<usize> = (0..cloud.len()).collect();
        idx.sort_by(|&a, &b| {
            cloud.position(a)[0]
                .partial_cmp(&cloud.position(b)[0])
                .expect("finite positions")
                .then(a.cmp(&b))
        });
        if reversed {
            idx.reverse();
        }
        idx
    };
    let src = order(source, false);
    // Negative twist (submodular cost): sorted source meets sorted target.
    let tgt = order(target, sign > 0.0);

    let mut couplings = Vec::new();
    let (mut ia, mut ib) = (0usize, 0usize);
    let mut rem_a = source.weight(src[0]);
    let mut rem_b = target.weight(tgt[0]);
    while ia < src.len() && ib < tgt.len() {
        let m = rem_a.min(rem_b);
        if m > 0.0 {
            couplings.push((src[ia], tgt[ib], m));
        }
        rem_a -= m;
        rem_b -= m;
        if rem_a <= 0.0 {
            ia += 1;
            if ia < src.len() {
                rem_a = source.weight(src[ia]);
            }
        }
        if rem_b <= 0.0 {
            ib += 1;
            if ib < tgt.len() {
                rem_b = target.weight(tgt[ib]);
            }
        }
    }

    let objective: f64 = couplings
        .iter()
        .map(|&(i, j, m)| m * cost.eval_unchecked(source.position(i), target.position(j)))
        .sum();
    let (psi, lam) = canonical_duals(source.len(), target.len(), &couplings, |i, j| {
        cost.eval_unchecked(source.position(i), target.position(j))
    });
    couplings.sort_unstable_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));

    let dual_objective: f64 = target
        .weights()
        .iter()
        .zip(&lam)
        .map(|(b, l)| b * l)
        .sum::<f64>()
        - source
            .weights()
            .iter()
            .zip(&psi)
            .map(|(a, p)| a * p)
            .sum::<f64>();
    Ok(TransportPlan {
        couplings,
        source_duals: psi,
        target_duals: lam,
        objective,
        gap: objective - dual_objective,
        method: SolveMethod::Exact,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::{Bump, CostKind};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid_1d(lo: f64, hi: f64, res: usize) -> GridSpec {
        GridSpec::new(GridBox::new(vec![lo], vec![hi]).unwrap(), vec![res]).unwrap()
    }

    /// Equal-mass cloud at the centers of a 1D partition of [lo, hi].
    fn line_cloud(lo: f64, hi: f64, n: usize) -> AtomCloud {
        let h = (hi - lo) / n as f64;
        let positions: Vec<f64> = (0..n).map(|i| lo + (i as f64 + 0.5) * h).collect();
        AtomCloud::equal_weights(positions, GridBox::new(vec![lo], vec![hi]).unwrap()).unwrap()
    }

    #[test]
    fn cloud_constructor_validates() {
        let bbox = GridBox::unit(2);
        assert!(matches!(
            AtomCloud::new(vec![2.0, 0.5], vec![1.0], bbox.clone()),
            Err(LabError::OutsideDomain { .. })
        ));
        assert!(AtomCloud::new(vec![0.5, 0.5], vec![0.0], bbox.clone()).is_err());
        assert!(AtomCloud::new(vec![0.5, 0.5], vec![-1.0], bbox.clone()).is_err());
        let cloud = AtomCloud::new(vec![0.2, 0.2, 0.8, 0.8], vec![3.0, 1.0], bbox).unwrap();
        assert!((cloud.weight(0) - 0.75).abs() < 1e-15);
        assert!((cloud.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn stratified_unit_square_gives_cell_centers() {
        let spec = DensitySpec::UniformOnBox {
            bbox: GridBox::unit(2),
        };
        let cloud = sample_density(&spec, 4, 7).unwrap();
        assert_eq!(cloud.len(), 4);
        let expect = [[0.25, 0.25], [0.75, 0.25], [0.25, 0.75], [0.75, 0.75]];
        for (i, e) in expect.iter().enumerate() {
            assert!((cloud.position(i)[0] - e[0]).abs() < 1e-12);
            assert!((cloud.position(i)[1] - e[1]).abs() < 1e-12);
            assert!((cloud.weight(i) - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn union_of_balls_atoms_stay_in_support() {
        let spec = DensitySpec::UnionOfBalls {
            balls: vec![
                BallSpec {
                    center: vec![-2.0, 0.0],
                    radius: 1.0,
                },
                BallSpec {
                    center: vec![2.0, 0.0],
                    radius: 1.0,
                },
            ],
        };
        let cloud = sample_density(&spec, 256, 0).unwrap();
        assert!(!cloud.is_empty());
        for i in 0..cloud.len() {
            let p = cloud.position(i);
            let d1 = ((p[0] + 2.0).powi(2) + p[1].powi(2)).sqrt();
            let d2 = ((p[0] - 2.0).powi(2) + p[1].powi(2)).sqrt();
            assert!(d1 <= 1.0 + 1e-12 || d2 <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn gaussian_mixture_first_moment() {
        // Box symmetric about the mean, so the truncated mean is exact.
        let spec = DensitySpec::GaussianMixture {
            bbox: GridBox::new(vec![-1.0, -2.0], vec![3.0, 2.0]).unwrap(),
            components: vec![GaussianComponent {
                mean: vec![1.0, 0.0],
                sigma: 0.5,
                weight: 1.0,
            }],
        };
        let n = 900;
        let cloud = sample_density(&spec, n, 3).unwrap();
        let mut mean = [0.0f64; 2];
        for i in 0..cloud.len() {
            mean[0] += cloud.weight(i) * cloud.position(i)[0];
            mean[1] += cloud.weight(i) * cloud.position(i)[1];
        }
        let tol = 3.0 * 0.5 / (n as f64).sqrt();
        assert!((mean[0] - 1.0).abs() <= tol, "mean_x {} off", mean[0]);
        assert!(mean[1].abs() <= tol, "mean_y {} off", mean[1]);

        // Two symmetric components: global symmetry pins the mean at 0.
        let spec2 = DensitySpec::GaussianMixture {
            bbox: GridBox::symmetric(2, 3.0),
            components: vec![
                GaussianComponent {
                    mean: vec![-1.0, 0.0],
                    sigma: 0.5,
                    weight: 1.0,
                },
                GaussianComponent {
                    mean: vec![1.0, 0.0],
                    sigma: 0.5,
                    weight: 1.0,
                },
            ],
        };
        let cloud2 = sample_density(&spec2, n, 3).unwrap();
        let mut mx = 0.0;
        for i in 0..cloud2.len() {
            mx += cloud2.weight(i) * cloud2.position(i)[0];
        }
        // Mixture std per axis is sqrt(sigma^2 + 1).
        assert!(mx.abs() <= 3.0 * (1.25f64).sqrt() / (n as f64).sqrt());
    }

    #[test]
    fn vanishing_density_is_invalid() {
        let spec = DensitySpec::CsvGrid {
            lo: vec![0.0],
            hi: vec![1.0],
            res: vec![4],
            values: vec![0.0; 4],
        };
        let err = sample_density(&spec, 16, 0).unwrap_err();
        assert!(err.is_validation());
    }

    #[test]
    fn trivial_single_atom_solve() {
        let cost = CostModel::new(
            CostKind::SquaredDistance,
            GridBox::unit(2),
            GridBox::unit(2),
        )
        .unwrap();
        let source = AtomCloud::new(vec![0.3, 0.4], vec![1.0], GridBox::unit(2)).unwrap();
        let target = AtomCloud::new(vec![0.7, 0.1], vec![1.0], GridBox::unit(2)).unwrap();
        let plan = solve_discrete(&cost, &source, &target, SolveMethod::Exact).unwrap();
        assert_eq!(plan.couplings, vec![(0, 0, 1.0)]);
        let expect = cost.eval(&[0.3, 0.4], &[0.7, 0.1]).unwrap();
        assert!((plan.objective - expect).abs() < 1e-15);
        validate_plan(&plan, &cost, &source, &target).unwrap();
    }

    #[test]
    fn monotone_shift_matches_oracle() {
        let cost = CostModel::new(
            CostKind::SquaredDistance,
            GridBox::new(vec![0.0], vec![1.0]).unwrap(),
            GridBox::new(vec![1.0], vec![2.0]).unwrap(),
        )
        .unwrap();
        let source = line_cloud(0.0, 1.0, 200);
        let target = line_cloud(1.0, 2.0, 200);
        let plan = solve_discrete(&cost, &source, &target, SolveMethod::Exact).unwrap();
        validate_plan(&plan, &cost, &source, &target).unwrap();
        // The optimal matching is monotone: atom i goes to atom i, and the
        // displacement is exactly 1, so the objective is 1^2/2.
        assert_eq!(plan.couplings.len(), 200);
        for (k, &(i, j, m)) in plan.couplings.iter().enumerate() {
            assert_eq!((i, j), (k, k));
            assert!((m - 0.005).abs() < 1e-15);
        }
        assert!((plan.objective - 0.5).abs() < 1e-12);

        let oracle = oracle_1d(&cost, &source, &target).unwrap();
        validate_plan(&oracle, &cost, &source, &target).unwrap();
        assert_eq!(oracle.couplings.len(), plan.couplings.len());
        assert!((oracle.objective - plan.objective).abs() < 1e-12);
    }

    #[test]
    fn explicit_two_by_two_prefers_zero_arcs() {
        // Atoms at 0 and sqrt(2) make the squared-distance matrix
        // [[0, 1], [1, 0]]; the diagonal coupling costs nothing.
        let r = 2.0f64;
        let bbox = GridBox::new(vec![0.0], vec![r]).unwrap();
        let cost = CostModel::new(CostKind::SquaredDistance, bbox.clone(), bbox.clone()).unwrap();
        let s2 = 2.0f64.sqrt();
        let source = AtomCloud::equal_weights(vec![0.0, s2], bbox.clone()).unwrap();
        let target = AtomCloud::equal_weights(vec![0.0, s2], bbox).unwrap();
        let plan = solve_discrete(&cost, &source, &target, SolveMethod::Exact).unwrap();
        assert_eq!(plan.couplings, vec![(0, 0, 0.5), (1, 1, 0.5)]);
        assert_eq!(plan.objective, 0.0);
        validate_plan(&plan, &cost, &source, &target).unwrap();
    }

    #[test]
    fn oversized_exact_solve_is_rejected() {
        let source = line_cloud(0.0, 1.0, 2100);
        let target = line_cloud(0.0, 1.0, 2100);
        let cost = CostModel::new(
            CostKind::SquaredDistance,
            GridBox::new(vec![0.0], vec![1.0]).unwrap(),
            GridBox::new(vec![0.0], vec![1.0]).unwrap(),
        )
        .unwrap();
        let err = solve_discrete(&cost, &source, &target, SolveMethod::Exact).unwrap_err();
        assert!(matches!(err, LabError::TooLarge { .. }));
        assert!(err.is_validation());
    }

    #[test]
    fn entropic_objective_tracks_exact() {
        let bbox = GridBox::new(vec![0.0], vec![0.1]).unwrap();
        let cost =
            CostModel::new(CostKind::SquaredDistance, bbox.clone(), bbox.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut make = |n: usize| {
            let positions: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..0.1)).collect();
            let weights: Vec<f64> = (0..n).map(|_| rng.gen_range(0.2..1.0)).collect();
            AtomCloud::new(positions, weights, bbox.clone()).unwrap()
        };
        let source = make(50);
        let target = make(50);
        let exact = solve_discrete(&cost, &source, &target, SolveMethod::Exact).unwrap();
        let epsilon = 5e-4;
        let method = SolveMethod::Entropic {
            epsilon,
            max_iter: 50_000,
            tol: 1e-10,
        };
        let ent = solve_discrete(&cost, &source, &target, method).unwrap();
        validate_plan(&ent, &cost, &source, &target).unwrap();
        let bound = 10.0 * epsilon * (100.0f64).ln();
        assert!(
            (ent.objective - exact.objective).abs() <= bound,
            "objectives {} vs {} differ beyond {}",
            ent.objective,
            exact.objective,
            bound
        );
        // Rounding makes the marginals exact, not just close.
        let mut rows = vec![0.0; 50];
        for &(i, _, m) in &ent.couplings {
            rows[i] += m;
        }
        for i in 0..50 {
            assert!((rows[i] - source.weight(i)).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_reconstruction_pins_quadratic() {
        let bbox = GridBox::unit(2);
        let cost =
            CostModel::new(CostKind::QuadraticBilinear, bbox.clone(), bbox.clone()).unwrap();
        let spec = DensitySpec::UniformOnBox { bbox: bbox.clone() };
        let cloud = sample_density(&spec, 144, 0).unwrap();
        let plan = solve_discrete(&cost, &cloud, &cloud, SolveMethod::Exact).unwrap();
        for &(i, j, _) in &plan.couplings {
            assert_eq!(i, j, "self-coupling under bilinear cost must be identity");
        }
        let grid = GridSpec::square(bbox, 12).unwrap();
        let u = reconstruct_potential(&plan, &cost, &cloud, &grid, &[0.5, 0.5]).unwrap();
        // u and |x|^2/2 may differ by a constant only.
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for c in 0..grid.cell_count() {
            let x = grid.center(c);
            let d = u.values[c] - 0.5 * (x[0] * x[0] + x[1] * x[1]);
            lo = lo.min(d);
            hi = hi.max(d);
        }
        let sp = grid.spacing(0);
        assert!(
            hi - lo <= 2.0 * sp * sp,
            "constant drift {} exceeds {}",
            hi - lo,
            2.0 * sp * sp
        );
        // The induced map is the identity on interior probe points.
        for p in [[0.3, 0.4], [0.52, 0.52], [0.71, 0.26]] {
            let t = transport_map(&u, &p).unwrap();
            assert!((t[0] - p[0]).abs() <= 2.0 * sp && (t[1] - p[1]).abs() <= 2.0 * sp);
        }
    }

    #[test]
    fn single_atom_potential_is_one_profile() {
        let bbox = GridBox::unit(2);
        let cost =
            CostModel::new(CostKind::QuadraticBilinear, bbox.clone(), bbox.clone()).unwrap();
        let grid = GridSpec::square(bbox, 9).unwrap();
        let anchor = [0.5, 0.5];
        let u = PotentialField::from_atoms(
            cost,
            vec![0.3, 0.7],
            vec![0.0],
            grid.clone(),
            &anchor,
        )
        .unwrap();
        for c in 0..grid.cell_count() {
            let x = grid.center(c);
            let expect = (x[0] * 0.3 + x[1] * 0.7) - (0.5 * 0.3 + 0.5 * 0.7);
            assert!((u.values[c] - expect).abs() < 1e-12);
        }
        let t = transport_map(&u, &[0.2, 0.9]).unwrap();
        assert!((t[0] - 0.3).abs() < 1e-9 && (t[1] - 0.7).abs() < 1e-9);
    }

    #[test]
    fn coarse_entropic_duals_are_refused() {
        let bbox = GridBox::new(vec![0.0], vec![1.0]).unwrap();
        let cost =
            CostModel::new(CostKind::SquaredDistance, bbox.clone(), bbox.clone()).unwrap();
        let source = line_cloud(0.0, 1.0, 8);
        let target = line_cloud(0.0, 1.0, 8);
        let method = SolveMethod::Entropic {
            epsilon: 0.5,
            max_iter: 10_000,
            tol: 1e-8,
        };
        let plan = solve_discrete(&cost, &source, &target, method).unwrap();
        let grid = grid_1d(0.0, 1.0, 16);
        let err = reconstruct_potential(&plan, &cost, &target, &grid, &[0.5]).unwrap_err();
        assert!(matches!(err, LabError::NotApplicable { .. }));
        assert!(err.is_validation());
    }

    #[test]
    fn shift_potential_derivative_and_map() {
        let cost = CostModel::new(
            CostKind::QuadraticBilinear,
            GridBox::new(vec![0.0], vec![1.0]).unwrap(),
            GridBox::new(vec![1.0], vec![2.0]).unwrap(),
        )
        .unwrap();
        let source = line_cloud(0.0, 1.0, 200);
        let target = line_cloud(1.0, 2.0, 200);
        let plan = solve_discrete(&cost, &source, &target, SolveMethod::Exact).unwrap();
        validate_plan(&plan, &cost, &source, &target).unwrap();
        let grid = grid_1d(0.0, 1.0, 100);
        let u = reconstruct_potential(&plan, &cost, &target, &grid, &[0.5]).unwrap();
        let h = grid.spacing(0);
        // Interior centered differences of u track u'(x) = x + 1.
        for c in 1..grid.cell_count() - 1 {
            let x = grid.center(c)[0];
            let du = (u.values[c + 1] - u.values[c - 1]) / (2.0 * h);
            assert!(
                (du - (x + 1.0)).abs() <= 2.0 * h,
                "u'({x}) = {du}, expected {}",
                x + 1.0
            );
        }
        for x in [0.1, 0.37, 0.5, 0.88] {
            let t = transport_map(&u, &[x]).unwrap();
            assert!((t[0] - (x + 1.0)).abs() <= 2.0 * h);
        }
        // At plan atoms the map agrees with the assigned target to within
        // one target-atom spacing.
        let atom_spacing = 1.0 / 200.0;
        for &(i, j, _) in plan.couplings.iter().step_by(37) {
            let t = transport_map(&u, source.position(i)).unwrap();
            assert!((t[0] - target.position(j)[0]).abs() <= atom_spacing + 1e-9);
        }
    }

    #[test]
    fn tie_point_reports_kink() {
        let cost = CostModel::new(
            CostKind::QuadraticBilinear,
            GridBox::new(vec![0.0], vec![1.0]).unwrap(),
            GridBox::new(vec![0.0], vec![3.0]).unwrap(),
        )
        .unwrap();
        let grid = grid_1d(0.0, 1.0, 100);
        // Profiles x*1 and x*2 - 0.5 cross at x = 0.5 with slope jump 1.
        let u = PotentialField::from_atoms(
            cost,
            vec![1.0, 2.0],
            vec![0.0, -0.5],
            grid,
            &[0.25],
        )
        .unwrap();
        let err = transport_map(&u, &[0.5]).unwrap_err();
        match err {
            LabError::NondifferentiablePoint { gap, .. } => assert!(gap > 0.5),
            other => panic!("expected kink, got {other:?}"),
        }
        let t = transport_map(&u, &[0.2]).unwrap();
        assert!((t[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn injected_quadratic_solves_equation() {
        let cost = CostModel::bilinear(2, 1.0);
        let grid = GridSpec::square(GridBox::symmetric(2, 1.0), 33).unwrap();
        let u = PotentialField::analytic(
            "half-square",
            |x| 0.5 * (x[0] * x[0] + x[1] * x[1]),
            cost.clone(),
            grid.clone(),
            &[0.0, 0.0],
            0.0,
        )
        .unwrap();
        let region = CellSet::from_indices(grid.clone(), 0..grid.cell_count());
        let res = ma_residual(&u, &cost, |_| 1.0, |_| 1.0, &region).unwrap();
        assert!(!res.valid.is_empty());
        for v in res.valid_values() {
            assert!(v.abs() <= 1e-6, "residual {v} too large");
        }
    }

    #[test]
    fn injected_shift_solves_equation_1d() {
        let cost = CostModel::new(
            CostKind::QuadraticBilinear,
            GridBox::new(vec![0.0], vec![1.0]).unwrap(),
            GridBox::new(vec![0.5], vec![2.5]).unwrap(),
        )
        .unwrap();
        let grid = grid_1d(0.0, 1.0, 50);
        let u = PotentialField::analytic(
            "shift",
            |x| 0.5 * x[0] * x[0] + x[0],
            cost.clone(),
            grid.clone(),
            &[0.5],
            0.0,
        )
        .unwrap();
        let region = CellSet::from_indices(grid.clone(), 0..grid.cell_count());
        let res = ma_residual(&u, &cost, |_| 1.0, |_| 1.0, &region).unwrap();
        assert!(!res.valid.is_empty());
        for v in res.valid_values() {
            assert!(v.abs() <= 1e-6);
        }
    }

    #[test]
    fn residual_converges_under_refinement() {
        // Smooth symmetric density pair on [-1, 1]; the solved potential's
        // residual should drop as atoms and grid refine together.
        let bbox = GridBox::symmetric(1, 1.0);
        let cost =
            CostModel::new(CostKind::QuadraticBilinear, bbox.clone(), bbox.clone()).unwrap();
        let zf = 10.0 / 3.0; // integral of 2 - x^2 over [-1, 1]
        let zg = 8.0 / 3.0; // integral of 1 + x^2 over [-1, 1]
        let f = move |x: &[f64]| (2.0 - x[0] * x[0]) / zf;
        let g = move |y: &[f64]| (1.0 + y[0] * y[0]) / zg;

        let median_at = |n_atoms: usize, res: usize| -> f64 {
            let centers = |n: usize| -> Vec<f64> {
                (0..n).map(|i| -1.0 + (i as f64 + 0.5) * 2.0 / n as f64).collect()
            };
            let xs = centers(n_atoms);
            let ws: Vec<f64> = xs.iter().map(|x| 2.0 - x * x).collect();
            let source = AtomCloud::new(xs.clone(), ws, bbox.clone()).unwrap();
            let vs: Vec<f64> = xs.iter().map(|x| 1.0 + x * x).collect();
            let target = AtomCloud::new(xs, vs, bbox.clone()).unwrap();
            let plan = oracle_1d(&cost, &source, &target).unwrap();
            let grid = grid_1d(-1.0, 1.0, res);
            let u = reconstruct_potential(&plan, &cost, &target, &grid, &[0.0]).unwrap();
            let region = CellSet::from_indices(grid.clone(), 0..grid.cell_count());
            let res_field = ma_residual(&u, &cost, f, g, &region).unwrap();
            res_field.median_abs().expect("interior cells survive")
        };

        let coarse = median_at(2_500, 12);
        let fine = median_at(10_000, 24);
        assert!(
            coarse / fine >= 1.7,
            "median residual {coarse} -> {fine} improves only {:.2}x",
            coarse / fine
        );
    }

    #[test]
    fn oracle_pairs_sorted_atoms() {
        let bbox = GridBox::new(vec![0.0], vec![1.0]).unwrap();
        let cost =
            CostModel::new(CostKind::SquaredDistance, bbox.clone(), bbox.clone()).unwrap();
        let source = AtomCloud::equal_weights(vec![0.2, 0.8], bbox.clone()).unwrap();
        let target = AtomCloud::equal_weights(vec![0.3, 0.9], bbox).unwrap();
        let plan = oracle_1d(&cost, &source, &target).unwrap();
        assert_eq!(plan.couplings, vec![(0, 0, 0.5), (1, 1, 0.5)]);
        validate_plan(&plan, &cost, &source, &target).unwrap();
    }

    #[test]
    fn oracle_antitone_beats_every_permutation() {
        // delta large enough to flip the twist sign on a box around 1:
        // d2c/dxdy = -1 + 0.5 pi^2 cos(pi x) cos(pi y) > 0 there.
        let bbox = GridBox::new(vec![0.85], vec![1.15]).unwrap();
        let cost = CostModel::new(
            CostKind::PerturbedBilinear {
                delta: 0.5,
                bump: Bump::SinProduct,
            },
            bbox.clone(),
            bbox.clone(),
        )
        .unwrap();
        let xs = [0.9, 1.0, 1.1];
        let source = AtomCloud::equal_weights(xs.to_vec(), bbox.clone()).unwrap();
        let target = AtomCloud::equal_weights(xs.to_vec(), bbox).unwrap();
        let plan = oracle_1d(&cost, &source, &target).unwrap();
        validate_plan(&plan, &cost, &source, &target).unwrap();

        // Exhaustive check over all 3! matchings.
        let perms: [[usize; 3]; 6] = [
            [0, 1, 2],
            [0, 2, 1],
            [1, 0, 2],
            [1, 2, 0],
            [2, 0, 1],
            [2, 1, 0],
        ];
        let perm_cost = |p: &[usize; 3]| -> f64 {
            (0..3)
                .map(|i| cost.eval_unchecked(&[xs[i]], &[xs[p[i]]]) / 3.0)
                .sum()
        };
        let best = perms.iter().map(perm_cost).fold(f64::INFINITY, f64::min);
        assert!((plan.objective - best).abs() < 1e-12);
        assert!(plan.objective < perm_cost(&[0, 1, 2]) - 1e-6);
        // The reversed pairing is the winner.
        assert_eq!(
            plan.couplings,
            vec![
                (0, 2, 1.0 / 3.0),
                (1, 1, 1.0 / 3.0),
                (2, 0, 1.0 / 3.0)
            ]
        );
    }

    #[test]
    fn oracle_rejects_mixed_twist() {
        let bbox = GridBox::unit(1);
        let cost = CostModel::new(
            CostKind::PerturbedBilinear {
                delta: 0.2,
                bump: Bump::SinProduct,
            },
            bbox.clone(),
            bbox.clone(),
        )
        .unwrap();
        let source = line_cloud(0.0, 1.0, 4);
        let target = line_cloud(0.0, 1.0, 4);
        let err = oracle_1d(&cost, &source, &target).unwrap_err();
        assert!(matches!(err, LabError::NotApplicable { .. }));
        assert!(err.is_validation());
    }

    #[test]
    fn self_coupling_is_identity_by_brute_force() {
        let bbox = GridBox::symmetric(2, 1.0);
        let cost = CostModel::bilinear(2, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for n in 2..=7usize {
            let positions: Vec<f64> = (0..2 * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let cloud = AtomCloud::equal_weights(positions, bbox.clone()).unwrap();
            let plan = solve_discrete(&cost, &cloud, &cloud, SolveMethod::Exact).unwrap();
            for &(i, j, _) in &plan.couplings {
                assert_eq!(i, j, "n = {n}");
            }
            // Every permutation coupling is feasible for equal weights;
            // none beats the identity.
            let mut perm: Vec<usize> = (0..n).collect();
            let mut best = f64::INFINITY;
            permute(&mut perm, 0, &mut |p: &[usize]| {
                let cost_p: f64 = (0..n)
                    .map(|i| cost.eval_unchecked(cloud.position(i), cloud.position(p[i])))
                    .sum::<f64>()
                    / n as f64;
                best = best.min(cost_p);
            });
            assert!(plan.objective <= best + 1e-12);
        }
    }

    fn permute(p: &mut Vec<usize>, k: usize, visit: &mut impl FnMut(&[usize])) {
        if k == p.len() {
            visit(p);
            return;
        }
        for i in k..p.len() {
            p.swap(k, i);
            permute(p, k + 1, visit);
            p.swap(k, i);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig { cases: 48, ..ProptestConfig::default() })]

        #[test]
        fn exact_plans_always_validate(
            seed in 0u64..4096,
            ns in 1usize..11,
            nt in 1usize..11,
            dim in 1usize..3,
            kind_ix in 0usize..4,
        ) {
            let bbox = GridBox::symmetric(dim, 1.0);
            let kind = match kind_ix {
                0 => CostKind::QuadraticBilinear,
                1 => CostKind::SquaredDistance,
                2 => CostKind::Power { exponent: 3.0 },
                _ => CostKind::PerturbedBilinear { delta: 0.02, bump: Bump::ExpNegSq },
            };
            let cost = CostModel::new(kind, bbox.clone(), bbox.clone()).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut cloud = |n: usize| {
                let positions: Vec<f64> =
                    (0..n * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let weights: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..1.0)).collect();
                AtomCloud::new(positions, weights, bbox.clone()).unwrap()
            };
            let source = cloud(ns);
            let target = cloud(nt);
            let plan = solve_discrete(&cost, &source, &target, SolveMethod::Exact).unwrap();
            validate_plan(&plan, &cost, &source, &target).unwrap();
        }
    }
}
