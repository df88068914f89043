//! Cost models, their analytic derivatives, the c-exponential map, and
//! sampled hypothesis checks.
//!
//! Four cost families are built in; all are smooth on the product of their
//! boxes except `|x-y|^p/p` with `p < 2` on the diagonal. Derivatives are
//! hand-written closed forms, which keeps them exact and lets finite
//! differences act as an independent check in tests.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, LabError, Result};
use crate::grid::{halton, GridBox};
use crate::linalg::{self, Mat};

/// Analytic perturbation bumps for the perturbed-bilinear family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Bump {
    /// `sin(pi x_1) sin(pi y_1)`.
    #[serde(rename = "phi1")]
    SinProduct,
    /// `exp(-|x-y|^2)`.
    #[serde(rename = "phi2")]
    ExpNegSq,
}

impl Bump {
    fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        match self {
            Bump::SinProduct => (std::f64::consts::PI * x[0]).sin() * (std::f64::consts::PI * y[0]).sin(),
            Bump::ExpNegSq => {
                let s: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
                (-s).exp()
            }
        }
    }

    fn grad_x(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        let pi = std::f64::consts::PI;
        match self {
            Bump::SinProduct => {
                let mut g = vec![0.0; x.len()];
                g[0] = pi * (pi * x[0]).cos() * (pi * y[0]).sin();
                g
            }
            Bump::ExpNegSq => {
                let e = self.eval(x, y);
                x.iter().zip(y).map(|(a, b)| -2.0 * (a - b) * e).collect()
            }
        }
    }

    fn grad_y(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        let pi = std::f64::consts::PI;
        match self {
            Bump::SinProduct => {
                let mut g = vec![0.0; y.len()];
                g[0] = pi * (pi * x[0]).sin() * (pi * y[0]).cos();
                g
            }
            Bump::ExpNegSq => {
                let e = self.eval(x, y);
                x.iter().zip(y).map(|(a, b)| 2.0 * (a - b) * e).collect()
            }
        }
    }

    fn hess_xx(&self, x: &[f64], y: &[f64]) -> Mat {
        let pi = std::f64::consts::PI;
        let n = x.len();
        match self {
            Bump::SinProduct => {
                let mut h = Mat::zeros(n, n);
                h[(0, 0)] = -pi * pi * (pi * x[0]).sin() * (pi * y[0]).sin();
                h
            }
            Bump::ExpNegSq => {
                let e = self.eval(x, y);
                let d = linalg::sub(x, y);
                let mut h = Mat::zeros(n, n);
                for i in 0..n {
                    h[(i, i)] = -2.0 * e;
                }
                h.add_outer(&d, 4.0 * e);
                h
            }
        }
    }

    fn hess_xy(&self, x: &[f64], y: &[f64]) -> Mat {
        let pi = std::f64::consts::PI;
        let n = x.len();
        match self {
            Bump::SinProduct => {
                let mut h = Mat::zeros(n, n);
                h[(0, 0)] = pi * pi * (pi * x[0]).cos() * (pi * y[0]).cos();
                h
            }
            Bump::ExpNegSq => {
                let e = self.eval(x, y);
                let d = linalg::sub(x, y);
                let mut h = Mat::zeros(n, n);
                for i in 0..n {
                    h[(i, i)] = 2.0 * e;
                }
                h.add_outer(&d, -4.0 * e);
                h
            }
        }
    }

    fn hess_yy(&self, x: &[f64], y: &[f64]) -> Mat {
        match self {
            // Symmetric roles of x_1 and y_1.
            Bump::SinProduct => {
                let pi = std::f64::consts::PI;
                let n = x.len();
                let mut h = Mat::zeros(n, n);
                h[(0, 0)] = -pi * pi * (pi * x[0]).sin() * (pi * y[0]).sin();
                h
            }
            // phi2 depends on x - y only, so d^2/dy^2 = d^2/dx^2.
            Bump::ExpNegSq => self.hess_xx(x, y),
        }
    }

    /// Upper bound on the C^2 norm (max absolute value over the function
    /// and all first and second partials, anywhere in R^n x R^n).
    ///
    /// SinProduct: |phi| <= 1, first partials <= pi, second <= pi^2.
    /// ExpNegSq with s = |x-y|^2: |phi| <= 1; first partials 2|d_i|e^{-s}
    /// peak at sqrt(2)e^{-1/2} < 1; diagonal second partials
    /// |4 d_i^2 - 2| e^{-s} peak at 2 (d = 0); off-diagonal
    /// 4|d_i d_j| e^{-s} peaks at 2/e < 2.
    pub fn c2_norm_bound(&self) -> f64 {
        match self {
            Bump::SinProduct => std::f64::consts::PI * std::f64::consts::PI,
            Bump::ExpNegSq => 2.0,
        }
    }
}

/// Which analytic cost family a model evaluates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum CostKind {
    /// `-x . y`.
    QuadraticBilinear,
    /// `|x-y|^2 / 2`.
    SquaredDistance,
    /// `|x-y|^p / p`, `p > 1`.
    Power { exponent: f64 },
    /// `-x . y + delta * phi(x,y)`.
    PerturbedBilinear { delta: f64, bump: Bump },
}

/// First and second derivatives of a cost at one point pair.
/// `hess_xy[(i, j)] = d^2 c / dx_i dy_j`.
#[derive(Debug, Clone)]
pub struct CostDerivatives {
    pub grad_x: Vec<f64>,
    pub grad_y: Vec<f64>,
    pub hess_xx: Mat,
    pub hess_xy: Mat,
}

/// A cost family together with the product box it lives on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub kind: CostKind,
    pub source_box: GridBox,
    pub target_box: GridBox,
}

/// Evaluation surface needed by the condition checker. `CostModel`
/// implements it; tests use it to probe ad-hoc costs that are not part of
/// the built-in families.
pub trait DifferentiableCost {
    fn dim(&self) -> usize;
    fn eval_raw(&self, x: &[f64], y: &[f64]) -> f64;
    fn grad_x_raw(&self, x: &[f64], y: &[f64]) -> Result<Vec<f64>>;
    fn grad_y_raw(&self, x: &[f64], y: &[f64]) -> Result<Vec<f64>>;
    fn hess_xx_raw(&self, x: &[f64], y: &[f64]) -> Result<Mat>;
    fn hess_xy_raw(&self, x: &[f64], y: &[f64]) -> Result<Mat>;
    fn hess_yy_raw(&self, x: &[f64], y: &[f64]) -> Result<Mat>;
}

impl CostModel {
    pub fn new(kind: CostKind, source_box: GridBox, target_box: GridBox) -> Result<Self> {
        if source_box.dim() != target_box.dim() {
            return Err(LabError::DimensionMismatch {
                what: "cost boxes",
                expected: source_box.dim(),
                got: target_box.dim(),
            });
        }
        match &kind {
            CostKind::Power { exponent } => {
                if !(exponent > &1.0) || !exponent.is_finite() {
                    return Err(invalid(format!("power cost needs exponent > 1, got {exponent}")));
                }
            }
            CostKind::PerturbedBilinear { delta, .. } => {
                if !delta.is_finite() || *delta < 0.0 {
                    return Err(invalid(format!("perturbation delta must be >= 0, got {delta}")));
                }
            }
            _ => {}
        }
        Ok(CostModel {
            kind,
            source_box,
            target_box,
        })
    }

    /// Bilinear cost on `[-r, r]^n` on both sides; the workhorse model.
    pub fn bilinear(dim: usize, r: f64) -> Self {
        CostModel::new(
            CostKind::QuadraticBilinear,
            GridBox::symmetric(dim, r),
            GridBox::symmetric(dim, r),
        )
        .expect("valid boxes")
    }

    pub fn dim(&self) -> usize {
        self.source_box.dim()
    }

    fn domain_tol(&self) -> f64 {
        1e-9 * (1.0 + self.source_box.diameter().max(self.target_box.diameter()))
    }

    fn check_domains(&self, x: &[f64], y: &[f64]) -> Result<()> {
        let tol = self.domain_tol();
        if !self.source_box.contains(x, tol) {
            return Err(LabError::OutsideDomain {
                what: "cost source point",
                point: x.to_vec(),
            });
        }
        if !self.target_box.contains(y, tol) {
            return Err(LabError::OutsideDomain {
                what: "cost target point",
                point: y.to_vec(),
            });
        }
        Ok(())
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        self.check_domains(x, y)?;
        Ok(self.eval_unchecked(x, y))
    }

    /// Cost value without domain checks; used on hot paths after the grid
    /// and atoms have been validated once.
    pub fn eval_unchecked(&self, x: &[f64], y: &[f64]) -> f64 {
        match &self.kind {
            CostKind::QuadraticBilinear => -linalg::dot(x, y),
            CostKind::SquaredDistance => {
                0.5 * x
                    .iter()
                    .zip(y)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
            }
            CostKind::Power { exponent } => {
                let r = linalg::dist(x, y);
                r.powf(*exponent) / exponent
            }
            CostKind::PerturbedBilinear { delta, bump } => {
                -linalg::dot(x, y) + delta * bump.eval(x, y)
            }
        }
    }

    /// `D_x c` alone; the hot path for c-exponential iterations.
    pub fn grad_x(&self, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        match &self.kind {
            CostKind::QuadraticBilinear => Ok(linalg::scale(y, -1.0)),
            CostKind::SquaredDistance => Ok(linalg::sub(x, y)),
            CostKind::Power { exponent } => {
                let d = linalg::sub(x, y);
                let r = linalg::norm(&d);
                if r == 0.0 {
                    if *exponent < 2.0 {
                        return Err(LabError::CostSingularity {
                            x: x.to_vec(),
                            exponent: *exponent,
                        });
                    }
                    return Ok(vec![0.0; x.len()]);
                }
                Ok(linalg::scale(&d, r.powf(exponent - 2.0)))
            }
            CostKind::PerturbedBilinear { delta, bump } => {
                let mut g = linalg::scale(y, -1.0);
                let gb = bump.grad_x(x, y);
                for (gi, bi) in g.iter_mut().zip(&gb) {
                    *gi += delta * bi;
                }
                Ok(g)
            }
        }
    }

    pub fn grad_y(&self, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        match &self.kind {
            CostKind::QuadraticBilinear => Ok(linalg::scale(x, -1.0)),
            CostKind::SquaredDistance => Ok(linalg::sub(y, x)),
            CostKind::Power { .. } => Ok(linalg::scale(&self.grad_x(x, y)?, -1.0)),
            CostKind::PerturbedBilinear { delta, bump } => {
                let mut g = linalg::scale(x, -1.0);
                let gb = bump.grad_y(x, y);
                for (gi, bi) in g.iter_mut().zip(&gb) {
                    *gi += delta * bi;
                }
                Ok(g)
            }
        }
    }

    pub fn hess_xx(&self, x: &[f64], y: &[f64]) -> Result<Mat> {
        let n = self.dim();
        match &self.kind {
            CostKind::QuadraticBilinear => Ok(Mat::zeros(n, n)),
            CostKind::SquaredDistance => Ok(Mat::identity(n)),
            CostKind::Power { exponent } => self.power_hess(x, y, *exponent),
            CostKind::PerturbedBilinear { delta, bump } => {
                Ok(bump.hess_xx(x, y).scale(*delta))
            }
        }
    }

    pub fn hess_xy(&self, x: &[f64], y: &[f64]) -> Result<Mat> {
        let n = self.dim();
        match &self.kind {
            CostKind::QuadraticBilinear => Ok(Mat::identity(n).scale(-1.0)),
            CostKind::SquaredDistance => Ok(Mat::identity(n).scale(-1.0)),
            CostKind::Power { exponent } => Ok(self.power_hess(x, y, *exponent)?.scale(-1.0)),
            CostKind::PerturbedBilinear { delta, bump } => {
                Ok(Mat::identity(n).scale(-1.0).add(&bump.hess_xy(x, y).scale(*delta)))
            }
        }
    }

    pub fn hess_yy(&self, x: &[f64], y: &[f64]) -> Result<Mat> {
        let n = self.dim();
        match &self.kind {
            CostKind::QuadraticBilinear => Ok(Mat::zeros(n, n)),
            CostKind::SquaredDistance => Ok(Mat::identity(n)),
            // |x-y|^p is a function of x - y, so d^2/dy^2 = d^2/dx^2.
            CostKind::Power { exponent } => self.power_hess(x, y, *exponent),
            CostKind::PerturbedBilinear { delta, bump } => {
                Ok(bump.hess_yy(x, y).scale(*delta))
            }
        }
    }

    /// `D_xx` of `|x-y|^p/p`: `r^{p-2} I + (p-2) r^{p-4} d d^T`.
    fn power_hess(&self, x: &[f64], y: &[f64], p: f64) -> Result<Mat> {
        let n = self.dim();
        let d = linalg::sub(x, y);
        let r = linalg::norm(&d);
        if r == 0.0 {
            if p < 2.0 {
                return Err(LabError::CostSingularity {
                    x: x.to_vec(),
                    exponent: p,
                });
            }
            // p = 2 is |x-y|^2/2; Hessian limits to zero for p > 2.
            if p == 2.0 {
                return Ok(Mat::identity(n));
            }
            return Ok(Mat::zeros(n, n));
        }
        let mut h = Mat::identity(n).scale(r.powf(p - 2.0));
        h.add_outer(&d, (p - 2.0) * r.powf(p - 4.0));
        Ok(h)
    }

    pub fn derivatives(&self, x: &[f64], y: &[f64]) -> Result<CostDerivatives> {
        self.check_domains(x, y)?;
        Ok(CostDerivatives {
            grad_x: self.grad_x(x, y)?,
            grad_y: self.grad_y(x, y)?,
            hess_xx: self.hess_xx(x, y)?,
            hess_xy: self.hess_xy(x, y)?,
        })
    }

    /// Solves `p = -D_x c(x, y)` for `y` by damped Newton from `y_0 = p`.
    /// Iterates may leave the target box; only the residual matters.
    pub fn c_exp(&self, x: &[f64], p: &[f64]) -> Result<Vec<f64>> {
        let tol = 1e-10 * (1.0 + linalg::norm(p));
        let residual = |y: &[f64]| -> Result<Vec<f64>> {
            Ok(linalg::add(p, &self.grad_x(x, y)?))
        };
        let mut y = p.to_vec();
        let mut r = residual(&y)?;
        let mut rn = linalg::norm(&r);
        for _ in 0..50 {
            if rn <= tol {
                return Ok(y);
            }
            let jac = self.hess_xy(x, &y)?;
            let step = jac.inverse().map_err(|_| LabError::DegenerateCost {
                detail: format!("singular D_xy c at iterate {y:?}"),
            })?;
            let delta = step.mat_vec(&linalg::scale(&r, -1.0));
            let mut t = 1.0;
            let mut accepted = false;
            for _ in 0..20 {
                let trial = linalg::add(&y, &linalg::scale(&delta, t));
                match residual(&trial) {
                    Ok(tr) => {
                        let trn = linalg::norm(&tr);
                        if trn < rn {
                            y = trial;
                            r = tr;
                            rn = trn;
                            accepted = true;
                            break;
                        }
                    }
                    Err(_) => {} // singular trial point; halve and retry
                }
                t *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        if rn <= tol {
            Ok(y)
        } else {
            Err(LabError::NoSolution {
                what: "c_exp",
                residual: rn,
            })
        }
    }

    /// Magnitude of the cost over its product box, sampled on a fixed
    /// low-discrepancy set; floors at 1. Relative tolerances elsewhere are
    /// quoted against this scale.
    pub fn scale(&self) -> f64 {
        let mut m = 1.0f64;
        for (x, y) in product_halton(&self.source_box, &self.target_box, 128) {
            m = m.max(self.eval_unchecked(&x, &y).abs());
        }
        m
    }

    /// Same cost with source and target swapped. Valid because every
    /// built-in kind is symmetric under `(x, y) -> (y, x)`.
    pub fn transposed(&self) -> CostModel {
        CostModel {
            kind: self.kind.clone(),
            source_box: self.target_box.clone(),
            target_box: self.source_box.clone(),
        }
    }

    pub fn check_conditions(&self, n_samples: usize, seed: u64) -> Result<ConditionReport> {
        check_conditions_on(self, &self.source_box, &self.target_box, n_samples, seed)
    }
}

impl DifferentiableCost for CostModel {
    fn dim(&self) -> usize {
        self.dim()
    }
    fn eval_raw(&self, x: &[f64], y: &[f64]) -> f64 {
        self.eval_unchecked(x, y)
    }
    fn grad_x_raw(&self, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        self.grad_x(x, y)
    }
    fn grad_y_raw(&self, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        self.grad_y(x, y)
    }
    fn hess_xx_raw(&self, x: &[f64], y: &[f64]) -> Result<Mat> {
        self.hess_xx(x, y)
    }
    fn hess_xy_raw(&self, x: &[f64], y: &[f64]) -> Result<Mat> {
        self.hess_xy(x, y)
    }
    fn hess_yy_raw(&self, x: &[f64], y: &[f64]) -> Result<Mat> {
        self.hess_yy(x, y)
    }
}

/// Sampled verdicts on the structural hypotheses a cost must satisfy:
/// smoothness scale, injectivity of the two gradient fibrations, a
/// nonvanishing mixed Hessian determinant, and the C^2 distance from the
/// bilinear model.
#[derive(Debug, Clone, Serialize)]
pub struct ConditionReport {
    pub sample_count: usize,
    /// Sampled sup of |c| and its derivative entries, orders 0..3.
    /// Order 3 is estimated by differencing the analytic Hessians.
    pub c_norms: [f64; 4],
    pub c1_ok: bool,
    /// Worst ratio `|D_x c(x,y) - D_x c(x,y')| / |y - y'|` over sampled
    /// well-separated pairs; near zero means the fibration collapses.
    pub c1_worst_collision: f64,
    pub c1_witness: Option<CollisionWitness>,
    pub c2_ok: bool,
    pub c2_worst_collision: f64,
    pub c2_witness: Option<CollisionWitness>,
    pub c3_ok: bool,
    pub c3_min_absdet: f64,
    /// Sampled `max |c(x,y) + x.y|_{C^2}` over a fixed low-discrepancy
    /// sequence of 10^4 product points.
    pub delta_hat: f64,
}

/// Pair of probe points whose cost gradients nearly collide, plus the
/// fiber base point.
#[derive(Debug, Clone, Serialize)]
pub struct CollisionWitness {
    pub base: Vec<f64>,
    pub first: Vec<f64>,
    pub second: Vec<f64>,
}

/// Number of product points used for the `delta_hat` sweep.
const DELTA_HAT_SAMPLES: usize = 10_000;

/// Low-discrepancy points on a product of boxes: one Halton stream per
/// combined axis.
fn product_halton(a: &GridBox, b: &GridBox, count: usize) -> Vec<(Vec<f64>, Vec<f64>)> {
    const PRIMES: [usize; 8] = [2, 3, 5, 7, 11, 13, 17, 19];
    let (da, db) = (a.dim(), b.dim());
    assert!(da + db <= PRIMES.len());
    (0..count)
        .map(|i| {
            let x: Vec<f64> = (0..da)
                .map(|k| a.lo[k] + halton(i, PRIMES[k]) * (a.hi[k] - a.lo[k]))
                .collect();
            let y: Vec<f64> = (0..db)
                .map(|k| b.lo[k] + halton(i, PRIMES[da + k]) * (b.hi[k] - b.lo[k]))
                .collect();
            (x, y)
        })
        .collect()
}

fn uniform_in(rng: &mut ChaCha8Rng, bbox: &GridBox) -> Vec<f64> {
    (0..bbox.dim())
        .map(|a| rng.gen_range(bbox.lo[a]..bbox.hi[a]))
        .collect()
}

/// Sampled condition checks for any twice-differentiable cost on the given
/// product box. Failures are flags in the report, never errors.
pub fn check_conditions_on(
    cost: &impl DifferentiableCost,
    source_box: &GridBox,
    target_box: &GridBox,
    n_samples: usize,
    seed: u64,
) -> Result<ConditionReport> {
    if n_samples < 10 {
        return Err(invalid(format!(
            "condition check needs at least 10 samples, got {n_samples}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cost.dim();

    // Derivative norms over a low-discrepancy sweep. Points where the cost
    // is singular (power kind diagonal) are skipped.
    let mut c_norms = [0.0f64; 4];
    let norm_points = product_halton(source_box, target_box, n_samples.min(2000));
    let fd_step = 1e-4 * (source_box.diameter() + target_box.diameter()).max(1e-6);
    let mut evaluated = 0usize;
    for (x, y) in &norm_points {
        let Ok(gx) = cost.grad_x_raw(x, y) else { continue };
        let Ok(gy) = cost.grad_y_raw(x, y) else { continue };
        let Ok(hxx) = cost.hess_xx_raw(x, y) else { continue };
        let Ok(hxy) = cost.hess_xy_raw(x, y) else { continue };
        let Ok(hyy) = cost.hess_yy_raw(x, y) else { continue };
        evaluated += 1;
        c_norms[0] = c_norms[0].max(cost.eval_raw(x, y).abs());
        for v in gx.iter().chain(&gy) {
            c_norms[1] = c_norms[1].max(v.abs());
        }
        c_norms[2] = c_norms[2].max(hxx.max_abs()).max(hxy.max_abs()).max(hyy.max_abs());
        // Third order: difference each Hessian along each axis.
        let mut third = 0.0f64;
        for axis in 0..n {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[axis] += fd_step;
            xm[axis] -= fd_step;
            if let (Ok(hp), Ok(hm)) = (cost.hess_xx_raw(&xp, y), cost.hess_xx_raw(&xm, y)) {
                third = third.max(hp.add(&hm.scale(-1.0)).max_abs() / (2.0 * fd_step));
            }
            let mut yp = y.clone();
            let mut ym = y.clone();
            yp[axis] += fd_step;
            ym[axis] -= fd_step;
            if let (Ok(hp), Ok(hm)) = (cost.hess_xy_raw(x, &yp), cost.hess_xy_raw(x, &ym)) {
                third = third.max(hp.add(&hm.scale(-1.0)).max_abs() / (2.0 * fd_step));
            }
        }
        c_norms[3] = c_norms[3].max(third);
    }

    // (C1): for fixed x, distinct targets must give distinct D_x c.
    // (C2): the mirrored statement. Both are sampled, not proved.
    let deriv_scale = c_norms[2].max(1.0);
    let collision_tol = 1e-6 * deriv_scale;
    let n_fibers = 16usize;
    let per_fiber = (n_samples / n_fibers).clamp(16, 128);
    let probe = |fiber_box: &GridBox,
                     probe_box: &GridBox,
                     rng: &mut ChaCha8Rng,
                     grad: &dyn Fn(&[f64], &[f64]) -> Result<Vec<f64>>|
     -> (f64, Option<CollisionWitness>) {
        let min_sep = 0.05 * probe_box.diameter();
        let mut worst = f64::INFINITY;
        let mut witness = None;
        for _ in 0..n_fibers {
            let base = uniform_in(rng, fiber_box);
            let probes: Vec<Vec<f64>> = (0..per_fiber).map(|_| uniform_in(rng, probe_box)).collect();
            let grads: Vec<Option<Vec<f64>>> =
                probes.iter().map(|p| grad(&base, p).ok()).collect();
            for j in 0..probes.len() {
                let Some(gj) = &grads[j] else { continue };
                for k in j + 1..probes.len() {
                    let Some(gk) = &grads[k] else { continue };
                    let sep = linalg::dist(&probes[j], &probes[k]);
                    if sep < min_sep {
                        continue;
                    }
                    let ratio = linalg::dist(gj, gk) / sep;
                    if ratio < worst {
                        worst = ratio;
                        witness = Some(CollisionWitness {
                            base: base.clone(),
                            first: probes[j].clone(),
                            second: probes[k].clone(),
                        });
                    }
                }
            }
        }
        (worst, witness)
    };

    let (c1_worst, c1_wit) = probe(source_box, target_box, &mut rng, &|x, y| {
        cost.grad_x_raw(x, y)
    });
    let (c2_worst, c2_wit) = probe(target_box, source_box, &mut rng, &|y, x| {
        cost.grad_y_raw(x, y)
    });
    let c1_ok = c1_worst > collision_tol;
    let c2_ok = c2_worst > collision_tol;

    // (C3): min |det D_xy c| over the low-discrepancy sweep.
    let det_points = product_halton(source_box, target_box, n_samples.min(DELTA_HAT_SAMPLES));
    let mut min_det = f64::INFINITY;
    let mut max_det = 0.0f64;
    for (x, y) in &det_points {
        if let Ok(h) = cost.hess_xy_raw(x, y) {
            let d = h.det().abs();
            min_det = min_det.min(d);
            max_det = max_det.max(d);
        }
    }
    if !min_det.is_finite() {
        min_det = 0.0;
    }
    let c3_ok = min_det > 1e-6 * max_det.max(1.0);

    // C^2 distance from the bilinear model, on a fixed sequence that does
    // not depend on seed or sample count.
    let mut delta_hat = 0.0f64;
    for (x, y) in product_halton(source_box, target_box, DELTA_HAT_SAMPLES) {
        let Ok(gx) = cost.grad_x_raw(&x, &y) else { continue };
        let Ok(gy) = cost.grad_y_raw(&x, &y) else { continue };
        let Ok(hxx) = cost.hess_xx_raw(&x, &y) else { continue };
        let Ok(hxy) = cost.hess_xy_raw(&x, &y) else { continue };
        let Ok(hyy) = cost.hess_yy_raw(&x, &y) else { continue };
        let mut e = (cost.eval_raw(&x, &y) + linalg::dot(&x, &y)).abs();
        for i in 0..n {
            e = e.max((gx[i] + y[i]).abs());
            e = e.max((gy[i] + x[i]).abs());
        }
        e = e.max(hxx.max_abs()).max(hyy.max_abs());
        e = e.max(hxy.add(&Mat::identity(n)).max_abs());
        delta_hat = delta_hat.max(e);
    }

    Ok(ConditionReport {
        sample_count: evaluated,
        c_norms,
        c1_ok,
        c1_worst_collision: c1_worst,
        c1_witness: if c1_ok { None } else { c1_wit },
        c2_ok,
        c2_worst_collision: c2_worst,
        c2_witness: if c2_ok { None } else { c2_wit },
        c3_ok,
        c3_min_absdet: min_det,
        delta_hat,
    })
}
