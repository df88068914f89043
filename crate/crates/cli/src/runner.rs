//! Subcommand drivers: output-directory resolution, the per-scenario
//! cache keyed by content hash, and one function per analysis. Every
//! report file is deterministic; only `artifact.json` carries wall-clock
//! times.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use lab_core::cconvex::{section_extract, write_sections_csv, SectionRow};
use lab_core::geometry::john_normalize;
use lab_core::grid::{CellSet, GridSpec};
use lab_core::regularity::{
    boundary_heights, engulfing_estimate, hessian_field, levelset_decay, singular_detect,
    w2p_norm,
};
use lab_core::transport::{
    artifact, reconstruct_potential, sample_density, solve_discrete, transport_map,
    validate_plan, DensitySpec, PotentialField,
};

use crate::config::ScenarioConfig;
use crate::{svg, Failure, RunArgs};

const POTENTIAL_FILE: &str = "potential.pot";
const PLAN_FILE: &str = "plan.csv";
const SCENARIO_FILE: &str = "scenario.json";
const ARTIFACT_FILE: &str = "artifact.json";

/// Dilation constant handed to the covering step of the decay ladder.
const DECAY_C_PRIME: f64 = 9.0;
/// Sampled pairs per height in the engulfing estimate.
const ENGULF_SAMPLES: usize = 100;
/// Points the sections subcommand probes.
const SECTION_POINTS: usize = 24;
/// Point pairs the cost condition check draws.
const CHECK_COST_SAMPLES: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Analysis {
    CheckCost,
    Solve,
    Sections,
    Engulf,
    Decay,
    W2p,
    Singular,
    Boundary,
}

impl Analysis {
    pub fn name(self) -> &'static str {
        match self {
            Analysis::CheckCost => "check-cost",
            Analysis::Solve => "solve",
            Analysis::Sections => "sections",
            Analysis::Engulf => "engulf",
            Analysis::Decay => "decay",
            Analysis::W2p => "w2p",
            Analysis::Singular => "singular",
            Analysis::Boundary => "boundary",
        }
    }
}

/// Run record in the scenario directory. Analysis subcommands extend
/// `report_paths` and `wall_clock_seconds`; solve also pins the artifact
/// file names. All paths are relative to the run directory.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunArtifact {
    pub schema_version: u32,
    pub scenario_hash: String,
    pub scenario_name: String,
    pub tool_version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub potential_file: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan_file: Option<String>,
    #[serde(default)]
    pub report_paths: BTreeMap<String, Vec<String>>,
    #[serde(default)]
    pub wall_clock_seconds: BTreeMap<String, f64>,
}

struct Outcome {
    files: Vec<&'static str>,
    reused: bool,
}

impl Outcome {
    fn fresh(files: Vec<&'static str>) -> Self {
        Outcome {
            files,
            reused: false,
        }
    }

    fn reused(files: Vec<&'static str>) -> Self {
        Outcome {
            files,
            reused: true,
        }
    }
}

struct RunContext {
    cfg: ScenarioConfig,
    run_dir: PathBuf,
    hash: String,
    force: bool,
}

impl RunContext {
    fn seed(&self) -> u64 {
        self.cfg.experiment.seed
    }

    fn path(&self, file: &str) -> PathBuf {
        self.run_dir.join(file)
    }

    fn cached(&self, files: &[&'static str]) -> bool {
        !self.force && files.iter().all(|f| self.path(f).exists())
    }
}

pub fn run(cmd: Analysis, args: RunArgs) -> Result<(), Failure> {
    crate::init_threads(args.threads)?;
    let mut cfg = ScenarioConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.experiment.seed = seed;
    }
    let out_base = resolve_out_base(&args, &cfg);
    let hash = cfg.scenario_hash();
    let run_dir = out_base.join(&hash[..12]);
    std::fs::create_dir_all(&run_dir).map_err(|e| {
        Failure::validation(format!("cannot create {}: {e}", run_dir.display()))
    })?;
    let ctx = RunContext {
        cfg,
        run_dir,
        hash,
        force: args.force,
    };
    write_json(&ctx.path(SCENARIO_FILE), &ctx.cfg)?;
    let started = Instant::now();
    let result = match cmd {
        Analysis::CheckCost => cmd_check_cost(&ctx),
        Analysis::Solve => cmd_solve(&ctx),
        Analysis::Sections => cmd_sections(&ctx),
        Analysis::Engulf => cmd_engulf(&ctx),
        Analysis::Decay => cmd_decay(&ctx),
        Analysis::W2p => cmd_w2p(&ctx),
        Analysis::Singular => cmd_singular(&ctx),
        Analysis::Boundary => cmd_boundary(&ctx),
    };
    match result {
        Ok(outcome) => {
            update_artifact(&ctx, cmd, &outcome, started.elapsed().as_secs_f64())?;
            Ok(())
        }
        Err(f) => {
            let f = f.with_operation(cmd.name());
            let _ = std::fs::write(ctx.path("error.json"), f.to_json() + "\n");
            Err(f)
        }
    }
}

fn resolve_out_base(args: &RunArgs, cfg: &ScenarioConfig) -> PathBuf {
    if let Ok(v) = std::env::var("LAB_OUT") {
        if !v.is_empty() {
            return PathBuf::from(v);
        }
    }
    if let Some(o) = &args.out {
        return o.clone();
    }
    if let Some(o) = &cfg.output {
        return o.clone();
    }
    PathBuf::from("lab-out")
}

fn update_artifact(
    ctx: &RunContext,
    cmd: Analysis,
    outcome: &Outcome,
    secs: f64,
) -> Result<(), Failure> {
    let path = ctx.path(ARTIFACT_FILE);
    let fresh = || RunArtifact {
        schema_version: 1,
        scenario_hash: ctx.hash.clone(),
        scenario_name: ctx.cfg.name.clone(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        potential_file: None,
        plan_file: None,
        report_paths: BTreeMap::new(),
        wall_clock_seconds: BTreeMap::new(),
    };
    let mut art = std::fs::read_to_string(&path)
        .ok()
        .and_then(|t| serde_json::from_str::<RunArtifact>(&t).ok())
        .filter(|a| a.scenario_hash == ctx.hash)
        .unwrap_or_else(fresh);
    art.tool_version = env!("CARGO_PKG_VERSION").to_string();
    if cmd == Analysis::Solve {
        art.potential_file = Some(POTENTIAL_FILE.to_string());
        art.plan_file = Some(PLAN_FILE.to_string());
    }
    art.report_paths.insert(
        cmd.name().to_string(),
        outcome.files.iter().map(|f| f.to_string()).collect(),
    );
    if !outcome.reused {
        art.wall_clock_seconds.insert(cmd.name().to_string(), secs);
    }
    write_json(&path, &art)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Failure::validation(e.to_string()))?;
    std::fs::write(path, text + "\n")
        .map_err(|e| Failure::validation(format!("cannot write {}: {e}", path.display())))
}

fn create_file(path: &Path) -> Result<std::io::BufWriter<std::fs::File>, Failure> {
    let file = std::fs::File::create(path).map_err(|e| {
        Failure::validation(format!("cannot create {}: {e}", path.display()))
    })?;
    Ok(std::io::BufWriter::new(file))
}

/// Loads the cached potential; the analysis subcommands all start here.
fn load_potential(ctx: &RunContext, op: &str) -> Result<PotentialField, Failure> {
    let path = ctx.path(POTENTIAL_FILE);
    if !path.exists() {
        return Err(Failure::validation(format!(
            "no cached solve for scenario {} in {}; run `lab solve` with the same config first",
            &ctx.hash[..12],
            ctx.run_dir.display()
        )));
    }
    artifact::read_potential_file(&path).map_err(|e| Failure::from_lab(op, e))
}

/// Cells of `grid` whose center carries positive reference density.
fn support_cells(grid: &GridSpec, density: &DensitySpec) -> CellSet {
    let mut set = CellSet::new(grid.clone());
    for c in 0..grid.cell_count() {
        if density.density(&grid.center(c)) > 0.0 {
            set.insert(c);
        }
    }
    set
}

fn min_halfwidth(grid: &GridSpec) -> f64 {
    (0..grid.dim())
        .map(|a| 0.5 * (grid.bbox.hi[a] - grid.bbox.lo[a]))
        .fold(f64::INFINITY, f64::min)
}

fn cmd_check_cost(ctx: &RunContext) -> Result<Outcome, Failure> {
    const FILES: [&str; 1] = ["check_cost.json"];
    if ctx.cached(&FILES) {
        println!("check-cost: cached in {}", ctx.run_dir.display());
        return Ok(Outcome::reused(FILES.to_vec()));
    }
    let cost = ctx
        .cfg
        .cost_model()
        .map_err(|e| Failure::from_lab("check-cost", e))?;
    let report = cost
        .check_conditions(CHECK_COST_SAMPLES, ctx.seed())
        .map_err(|e| Failure::from_lab("check-cost", e))?;
    write_json(&ctx.path(FILES[0]), &report)?;
    println!(
        "check-cost: twist {} dual-twist {} det {} (delta-hat {:.4}) -> {}",
        report.c1_ok,
        report.c2_ok,
        report.c3_ok,
        report.delta_hat,
        ctx.run_dir.display()
    );
    Ok(Outcome::fresh(FILES.to_vec()))
}

#[derive(Serialize)]
struct SolveSummary {
    objective: f64,
    gap: f64,
    method: lab_core::transport::SolveMethod,
    n_source: usize,
    n_target: usize,
    couplings: usize,
    eval_resolution: usize,
}

fn cmd_solve(ctx: &RunContext) -> Result<Outcome, Failure> {
    const FILES: [&str; 3] = [POTENTIAL_FILE, PLAN_FILE, "solve_summary.json"];
    if ctx.cached(&FILES) {
        println!(
            "solve: reusing cached scenario {} in {}",
            &ctx.hash[..12],
            ctx.run_dir.display()
        );
        return Ok(Outcome::reused(FILES.to_vec()));
    }
    let op = "solve";
    let fl = |e| Failure::from_lab(op, e);
    let cfg = &ctx.cfg;
    let cost = cfg.cost_model().map_err(fl)?;
    let source = sample_density(&cfg.source.density, cfg.grid.n_atoms, ctx.seed()).map_err(fl)?;
    let target =
        sample_density(&cfg.target.density, cfg.grid.n_atoms, ctx.seed() + 1).map_err(fl)?;
    let plan = solve_discrete(&cost, &source, &target, cfg.solver).map_err(fl)?;
    validate_plan(&plan, &cost, &source, &target).map_err(fl)?;
    let grid = GridSpec::square(cfg.source.domain.clone(), cfg.grid.eval_resolution).map_err(fl)?;
    let anchor = cfg.source.domain.center();
    let u = reconstruct_potential(&plan, &cost, &target, &grid, &anchor).map_err(fl)?;
    artifact::write_potential_file(&ctx.path(FILES[0]), &u).map_err(fl)?;
    artifact::write_plan_file(&ctx.path(FILES[1]), &plan).map_err(fl)?;
    write_json(
        &ctx.path(FILES[2]),
        &SolveSummary {
            objective: plan.objective,
            gap: plan.gap,
            method: plan.method,
            n_source: source.len(),
            n_target: target.len(),
            couplings: plan.couplings.len(),
            eval_resolution: cfg.grid.eval_resolution,
        },
    )?;
    println!(
        "solve: objective {:.6e}, gap {:.3e} -> {}",
        plan.objective,
        plan.gap,
        ctx.run_dir.display()
    );
    Ok(Outcome::fresh(FILES.to_vec()))
}

/// Interior points with positive source density, drawn uniformly from
/// the grid box shrunk by `margin` on every side.
fn sample_support_points(
    u: &PotentialField,
    density: &DensitySpec,
    count: usize,
    margin: f64,
    seed: u64,
) -> Vec<Vec<f64>> {
    let dim = u.grid.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(count);
    let mut attempts = 0usize;
    while points.len() < count && attempts < 400 * count {
        attempts += 1;
        let x: Vec<f64> = (0..dim)
            .map(|a| rng.gen_range(u.grid.bbox.lo[a] + margin..u.grid.bbox.hi[a] - margin))
            .collect();
        if density.density(&x) > 0.0 {
            points.push(x);
        }
    }
    points
}

#[derive(Serialize)]
struct SectionsSummary {
    points_requested: usize,
    points_used: usize,
    heights: Vec<f64>,
    rows: usize,
    skipped: usize,
}

fn cmd_sections(ctx: &RunContext) -> Result<Outcome, Failure> {
    const FILES: [&str; 2] = ["sections.csv", "sections.json"];
    if ctx.cached(&FILES) {
        println!("sections: cached in {}", ctx.run_dir.display());
        return Ok(Outcome::reused(FILES.to_vec()));
    }
    let op = "sections";
    let u = load_potential(ctx, op)?;
    let h0 = ctx.cfg.experiment.h0;
    let heights = [h0, 0.5 * h0, 0.25 * h0];
    let margin = 3.0 * u.grid.max_spacing();
    let points = sample_support_points(
        &u,
        &ctx.cfg.source.density,
        SECTION_POINTS,
        margin,
        ctx.seed() + 2,
    );
    if points.is_empty() {
        return Err(Failure::validation(
            "no interior points with positive source density; domain too thin for sections"
                .into(),
        ));
    }
    let mut rows = Vec::new();
    let mut skipped = 0usize;
    for x0 in &points {
        let Ok(y0) = transport_map(&u, x0) else {
            skipped += heights.len();
            continue;
        };
        for &h in &heights {
            let mut sec = match section_extract(&u, x0, &y0, h) {
                Ok(s) => s,
                Err(_) => {
                    skipped += 1;
                    continue;
                }
            };
            let report = match john_normalize(&mut sec) {
                Ok(r) => r,
                Err(_) => {
                    skipped += 1;
                    continue;
                }
            };
            rows.push(SectionRow {
                x0: x0.clone(),
                y0: y0.clone(),
                h,
                cell_count: sec.cells.len(),
                volume: sec.cells.volume(),
                connected: sec.connected,
                sandwich_ratio: report.sandwich_ratio,
                norm_size: report.norm_size,
            });
        }
    }
    if rows.is_empty() {
        return Err(Failure {
            kind: crate::FailureKind::Numerical,
            operation: Some(op.to_string()),
            message: "every sampled section failed to extract or normalize".into(),
        });
    }
    let mut csv = create_file(&ctx.path(FILES[0]))?;
    write_sections_csv(&mut csv, u.grid.dim(), &rows).map_err(|e| Failure::from_lab(op, e))?;
    csv.flush()
        .map_err(|e| Failure::validation(e.to_string()))?;
    write_json(
        &ctx.path(FILES[1]),
        &SectionsSummary {
            points_requested: SECTION_POINTS,
            points_used: points.len(),
            heights: heights.to_vec(),
            rows: rows.len(),
            skipped,
        },
    )?;
    println!(
        "sections: {} rows ({} skipped) -> {}",
        rows.len(),
        skipped,
        ctx.run_dir.display()
    );
    Ok(Outcome::fresh(FILES.to_vec()))
}

#[derive(Serialize)]
struct EngulfSummary {
    max_c: f64,
    c_prime: f64,
    h_list: Vec<f64>,
}

fn cmd_engulf(ctx: &RunContext) -> Result<Outcome, Failure> {
    const FILES: [&str; 2] = ["engulf.csv", "engulf.json"];
    if ctx.cached(&FILES) {
        println!("engulf: cached in {}", ctx.run_dir.display());
        return Ok(Outcome::reused(FILES.to_vec()));
    }
    let op = "engulf";
    let u = load_potential(ctx, op)?;
    let h0 = ctx.cfg.experiment.h0;
    // One decade below h0 in three geometric steps.
    let h_list: Vec<f64> = (0..4).map(|j| h0 * 10f64.powf(-(j as f64) / 3.0)).collect();
    let interior = 0.45 * min_halfwidth(&u.grid);
    let table = engulfing_estimate(&u, ENGULF_SAMPLES, &h_list, h0, interior, ctx.seed())
        .map_err(|e| Failure::from_lab(op, e))?;
    let mut csv = create_file(&ctx.path(FILES[0]))?;
    writeln!(csv, "h,samples,skipped,saturated,max_c,q50,q90")
        .map_err(|e| Failure::validation(e.to_string()))?;
    for row in &table.rows {
        writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            row.h, row.samples, row.skipped, row.saturated, row.max_c, row.q50, row.q90
        )
        .map_err(|e| Failure::validation(e.to_string()))?;
    }
    csv.flush()
        .map_err(|e| Failure::validation(e.to_string()))?;
    write_json(
        &ctx.path(FILES[1]),
        &EngulfSummary {
            max_c: table.max_c,
            c_prime: table.c_prime,
            h_list,
        },
    )?;
    println!(
        "engulf: max C {:.3}, C' {:.3} -> {}",
        table.max_c,
        table.c_prime,
        ctx.run_dir.display()
    );
    Ok(Outcome::fresh(FILES.to_vec()))
}

#[derive(Serialize)]
struct DecaySummary {
    theta: f64,
    beta: f64,
    c_hat: f64,
    max_ratio: f64,
    aborted_at: Option<usize>,
    rho0: f64,
}

fn cmd_decay(ctx: &RunContext) -> Result<Outcome, Failure> {
    const FILES: [&str; 2] = ["decay.csv", "decay.json"];
    if ctx.cached(&FILES) {
        println!("decay: cached in {}", ctx.run_dir.display());
        return Ok(Outcome::reused(FILES.to_vec()));
    }
    let op = "decay";
    let u = load_potential(ctx, op)?;
    let e = &ctx.cfg.experiment;
    let rho0 = 0.4 * min_halfwidth(&u.grid);
    let table = levelset_decay(
        &u,
        e.m_base,
        e.n_threshold,
        e.k_levels,
        rho0,
        e.sigma,
        DECAY_C_PRIME,
    )
    .map_err(|e| Failure::from_lab(op, e))?;
    let mut csv = create_file(&ctx.path(FILES[0]))?;
    table
        .write_csv(&mut csv)
        .map_err(|e| Failure::from_lab(op, e))?;
    csv.flush()
        .map_err(|e| Failure::validation(e.to_string()))?;
    write_json(
        &ctx.path(FILES[1]),
        &DecaySummary {
            theta: table.theta,
            beta: table.beta,
            c_hat: table.c_hat,
            max_ratio: table.max_ratio,
            aborted_at: table.aborted_at,
            rho0,
        },
    )?;
    println!(
        "decay: {} levels, max ratio {} -> {}",
        table.rows.len(),
        table.max_ratio,
        ctx.run_dir.display()
    );
    Ok(Outcome::fresh(FILES.to_vec()))
}

/// Hessian step multiplier for potentials reconstructed from `n_atoms`
/// atoms: differences must straddle several envelope facets, whose size
/// is the atom pitch, before they see the curvature instead of the
/// piecewise-linear noise.
fn hessian_multiplier(u: &PotentialField, density: &DensitySpec, n_atoms: usize) -> usize {
    let support_vol = support_cells(&u.grid, density).volume();
    let dim = u.grid.dim() as f64;
    let pitch = if support_vol > 0.0 {
        (support_vol / n_atoms as f64).powf(1.0 / dim)
    } else {
        u.grid.max_spacing()
    };
    ((2.5 * pitch / u.grid.max_spacing()).ceil() as usize).max(1)
}

/// Centered ball region that keeps `reach` cells of stencil margin.
fn ball_region(grid: &GridSpec, reach: usize) -> Result<(CellSet, f64), Failure> {
    let min_hw = min_halfwidth(grid);
    let margin = (reach + 1) as f64 * grid.max_spacing();
    let radius = (0.8 * min_hw).min(min_hw - margin);
    if radius <= 0.2 * min_hw {
        return Err(Failure::validation(format!(
            "grid too coarse: a {reach}-cell Hessian stencil leaves a ball of radius {radius:.3}"
        )));
    }
    let mid = grid.bbox.center();
    let mut region = CellSet::new(grid.clone());
    for c in 0..grid.cell_count() {
        let x = grid.center(c);
        let d2: f64 = x.iter().zip(&mid).map(|(a, b)| (a - b) * (a - b)).sum();
        if d2 <= radius * radius {
            region.insert(c);
        }
    }
    Ok((region, radius))
}

#[derive(Serialize)]
struct W2pSummary {
    region_radius: f64,
    hessian_step_multiplier: usize,
    mask_measure: f64,
    region_cells: usize,
}

fn cmd_w2p(ctx: &RunContext) -> Result<Outcome, Failure> {
    const FILES: [&str; 2] = ["w2p.csv", "w2p.json"];
    if ctx.cached(&FILES) {
        println!("w2p: cached in {}", ctx.run_dir.display());
        return Ok(Outcome::reused(FILES.to_vec()));
    }
    let op = "w2p";
    let u = load_potential(ctx, op)?;
    let e = &ctx.cfg.experiment;
    let mult = hessian_multiplier(&u, &ctx.cfg.source.density, ctx.cfg.grid.n_atoms);
    let (region, radius) = ball_region(&u.grid, mult)?;
    let hess = hessian_field(&u, mult);
    let mask =
        singular_detect(&u, e.h0, e.ratio_cap).map_err(|err| Failure::from_lab(op, err))?;
    let mut csv = create_file(&ctx.path(FILES[0]))?;
    writeln!(
        csv,
        "p,direct,layer_cake_bound,levels_used,cells_counted,masked_direct,masked_bound,masked_cells"
    )
    .map_err(|err| Failure::validation(err.to_string()))?;
    for &p in &e.p_list {
        let plain = w2p_norm(&hess, &region, p, None, e.m_base)
            .map_err(|err| Failure::from_lab(op, err))?;
        let masked = w2p_norm(&hess, &region, p, Some(&mask), e.m_base)
            .map_err(|err| Failure::from_lab(op, err))?;
        writeln!(
            csv,
            "{},{},{},{},{},{},{},{}",
            p,
            plain.direct,
            plain.layer_cake_bound,
            plain.levels_used,
            plain.cells_counted,
            masked.direct,
            masked.layer_cake_bound,
            masked.cells_counted
        )
        .map_err(|err| Failure::validation(err.to_string()))?;
    }
    csv.flush()
        .map_err(|err| Failure::validation(err.to_string()))?;
    write_json(
        &ctx.path(FILES[1]),
        &W2pSummary {
            region_radius: radius,
            hessian_step_multiplier: mult,
            mask_measure: mask.measure,
            region_cells: region.len(),
        },
    )?;
    println!(
        "w2p: {} exponents over a radius {:.3} ball -> {}",
        e.p_list.len(),
        radius,
        ctx.run_dir.display()
    );
    Ok(Outcome::fresh(FILES.to_vec()))
}

#[derive(Serialize)]
struct SingularSummary {
    h0: f64,
    ratio_cap: f64,
    kink_gap: f64,
    measure: f64,
    excluded_cells: usize,
    support_cells: usize,
    /// Excluded cells inside the support, over support cells.
    fraction: f64,
    resolution: Vec<usize>,
}

fn cmd_singular(ctx: &RunContext) -> Result<Outcome, Failure> {
    const FILES: [&str; 2] = ["singular.txt", "singular.json"];
    const SVG_FILE: &str = "singular.svg";
    if ctx.cached(&FILES) {
        println!("singular: cached in {}", ctx.run_dir.display());
        return Ok(Outcome::reused(FILES.to_vec()));
    }
    let op = "singular";
    let u = load_potential(ctx, op)?;
    let e = &ctx.cfg.experiment;
    let mask = singular_detect(&u, e.h0, e.ratio_cap).map_err(|err| Failure::from_lab(op, err))?;
    let support = support_cells(&u.grid, &ctx.cfg.source.density);
    let overlap = support.iter().filter(|&c| mask.excluded.contains(c)).count();
    let fraction = if support.is_empty() {
        f64::NAN
    } else {
        overlap as f64 / support.len() as f64
    };
    let mut text = create_file(&ctx.path(FILES[0]))?;
    mask.write_text(&mut text)
        .map_err(|err| Failure::from_lab(op, err))?;
    text.flush()
        .map_err(|err| Failure::validation(err.to_string()))?;
    write_json(
        &ctx.path(FILES[1]),
        &SingularSummary {
            h0: e.h0,
            ratio_cap: e.ratio_cap,
            kink_gap: mask.kink_gap,
            measure: mask.measure,
            excluded_cells: mask.excluded.len(),
            support_cells: support.len(),
            fraction,
            resolution: u.grid.res.clone(),
        },
    )?;
    let mut files = FILES.to_vec();
    if u.grid.dim() == 2 {
        let doc = svg::cell_overlay(
            "singular candidate set",
            &u.grid,
            &support,
            &mask.excluded,
        );
        std::fs::write(ctx.path(SVG_FILE), doc)
            .map_err(|err| Failure::validation(err.to_string()))?;
        files.push(SVG_FILE);
    }
    println!(
        "singular: {} excluded cells, support fraction {:.4} -> {}",
        mask.excluded.len(),
        fraction,
        ctx.run_dir.display()
    );
    Ok(Outcome::fresh(files))
}

#[derive(Serialize)]
struct BoundarySummary {
    p: f64,
    h0: f64,
    sigma: f64,
    decay_rate: f64,
    domain_convex: bool,
    kink_cells: usize,
    domain_cells: usize,
    bands: usize,
}

fn cmd_boundary(ctx: &RunContext) -> Result<Outcome, Failure> {
    const FILES: [&str; 2] = ["boundary.csv", "boundary.json"];
    if ctx.cached(&FILES) {
        println!("boundary: cached in {}", ctx.run_dir.display());
        return Ok(Outcome::reused(FILES.to_vec()));
    }
    let op = "boundary";
    let u = load_potential(ctx, op)?;
    let e = &ctx.cfg.experiment;
    let support = support_cells(&u.grid, &ctx.cfg.source.density);
    if support.is_empty() {
        return Err(Failure::validation(
            "source density vanishes on every grid cell".into(),
        ));
    }
    let p = if e.p_list.contains(&2.0) {
        2.0
    } else {
        e.p_list[0]
    };
    let profile = boundary_heights(&u, &support, e.h0, p, e.sigma)
        .map_err(|err| Failure::from_lab(op, err))?;
    let mut csv = create_file(&ctx.path(FILES[0]))?;
    profile
        .write_csv(&mut csv)
        .map_err(|err| Failure::from_lab(op, err))?;
    csv.flush()
        .map_err(|err| Failure::validation(err.to_string()))?;
    write_json(
        &ctx.path(FILES[1]),
        &BoundarySummary {
            p,
            h0: e.h0,
            sigma: e.sigma,
            decay_rate: profile.decay_rate,
            domain_convex: profile.domain_convex,
            kink_cells: profile.kink_cells,
            domain_cells: support.len(),
            bands: profile.families.len(),
        },
    )?;
    println!(
        "boundary: {} bands, decay rate {} -> {}",
        profile.families.len(),
        profile.decay_rate,
        ctx.run_dir.display()
    );
    Ok(Outcome::fresh(FILES.to_vec()))
}
