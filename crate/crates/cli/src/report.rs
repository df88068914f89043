//! `emit-report`: scans a directory of runs (one level deep), indexes
//! what each run produced, renders the cross-run SVG charts, and fits
//! observed convergence orders where one scenario ran at three or more
//! resolutions.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::svg::{self, Series};
use crate::Failure;

/// Output names a run directory can contain; anything else is ignored.
const KNOWN_FILES: [&str; 17] = [
    "artifact.json",
    "potential.pot",
    "plan.csv",
    "solve_summary.json",
    "check_cost.json",
    "sections.csv",
    "sections.json",
    "engulf.csv",
    "engulf.json",
    "decay.csv",
    "decay.json",
    "w2p.csv",
    "w2p.json",
    "singular.txt",
    "singular.json",
    "singular.svg",
    "boundary.csv",
];

struct RunEntry {
    label: String,
    name: Option<String>,
    resolution: Option<usize>,
    files: Vec<String>,
    /// (k, ratio) rows of the decay table.
    decay: Vec<(f64, f64)>,
    /// (p, direct, masked_direct) rows of the Sobolev table.
    w2p: Vec<(f64, f64, f64)>,
    /// (k, power_sum) rows of the boundary profile.
    boundary: Vec<(f64, f64)>,
    /// Excluded fraction of the support, if a singular scan ran.
    singular_fraction: Option<f64>,
}

fn read_csv(path: &Path, expected_header: &str) -> Option<Vec<Vec<f64>>> {
    let text = std::fs::read_to_string(path).ok()?;
    let mut lines = text.lines();
    if lines.next()? != expected_header {
        return None;
    }
    let mut rows = Vec::new();
    for line in lines {
        let row: Vec<f64> = line
            .split(',')
            .map(|s| s.parse::<f64>().unwrap_or(f64::NAN))
            .collect();
        if !row.is_empty() {
            rows.push(row);
        }
    }
    Some(rows)
}

fn read_json(path: &Path) -> Option<serde_json::Value> {
    serde_json::from_str(&std::fs::read_to_string(path).ok()?).ok()
}

fn scan_dir(dir: &Path, label: String) -> Option<RunEntry> {
    let files: Vec<String> = KNOWN_FILES
        .iter()
        .filter(|f| dir.join(f).exists())
        .map(|f| f.to_string())
        .collect();
    if files.is_empty() {
        return None;
    }
    let scenario = read_json(&dir.join("scenario.json"));
    let name = scenario
        .as_ref()
        .and_then(|v| v.get("name"))
        .and_then(|v| v.as_str())
        .map(str::to_string);
    let resolution = scenario
        .as_ref()
        .and_then(|v| v.pointer("/grid/eval_resolution"))
        .and_then(|v| v.as_u64())
        .map(|v| v as usize);
    let decay = read_csv(
        &dir.join("decay.csv"),
        "k,rho_k,measure,ratio,sections_selected,mean_bad_fraction",
    )
    .map(|rows| rows.iter().map(|r| (r[0], r[3])).collect())
    .unwrap_or_default();
    let w2p = read_csv(
        &dir.join("w2p.csv"),
        "p,direct,layer_cake_bound,levels_used,cells_counted,masked_direct,masked_bound,masked_cells",
    )
    .map(|rows| rows.iter().map(|r| (r[0], r[1], r[5])).collect())
    .unwrap_or_default();
    let boundary = read_csv(
        &dir.join("boundary.csv"),
        "k,h_band_lo,h_band_hi,n_sections,power_sum_p",
    )
    .map(|rows| rows.iter().map(|r| (r[0], r[4])).collect())
    .unwrap_or_default();
    let singular_fraction = read_json(&dir.join("singular.json"))
        .as_ref()
        .and_then(|v| v.get("fraction"))
        .and_then(|v| v.as_f64());
    Some(RunEntry {
        label,
        name,
        resolution,
        files,
        decay,
        w2p,
        boundary,
        singular_fraction,
    })
}

fn series_label(e: &RunEntry) -> String {
    match &e.name {
        Some(n) if n != &e.label => format!("{n} [{}]", e.label),
        _ => e.label.clone(),
    }
}

/// Observed convergence order from three successively refined values.
/// Solves `(v1-v2)/(v2-v3) = (h1^q - h2^q)/(h2^q - h3^q)` for `q`;
/// non-monotone triples have no order and yield NaN.
fn observed_order(h: [f64; 3], v: [f64; 3]) -> f64 {
    let d12 = v[0] - v[1];
    let d23 = v[1] - v[2];
    if d12 == 0.0 || d23 == 0.0 || d12.signum() != d23.signum() {
        return f64::NAN;
    }
    let target = d12 / d23;
    let g = |q: f64| (h[0].powf(q) - h[1].powf(q)) / (h[1].powf(q) - h[2].powf(q)) - target;
    let (mut lo, mut hi) = (0.05f64, 10.0f64);
    let glo = g(lo);
    if !glo.is_finite() || !g(hi).is_finite() || glo.signum() == g(hi).signum() {
        return f64::NAN;
    }
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if g(mid).signum() == glo.signum() {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[derive(Serialize)]
struct ConvergenceEntry {
    name: String,
    p: f64,
    resolutions: Vec<usize>,
    values: Vec<f64>,
    /// One fitted order per consecutive resolution triple.
    observed_orders: Vec<f64>,
}

/// Groups runs by scenario name; a name reaching three or more distinct
/// resolutions gets a fitted order per exponent p.
fn w2p_convergence(entries: &[RunEntry]) -> Vec<ConvergenceEntry> {
    let mut groups: BTreeMap<&str, Vec<&RunEntry>> = BTreeMap::new();
    for e in entries {
        if let (Some(name), Some(_), false) = (&e.name, e.resolution, e.w2p.is_empty()) {
            groups.entry(name.as_str()).or_default().push(e);
        }
    }
    let mut table = Vec::new();
    for (name, mut runs) in groups {
        runs.sort_by_key(|e| e.resolution);
        runs.dedup_by_key(|e| e.resolution);
        if runs.len() < 3 {
            continue;
        }
        let resolutions: Vec<usize> = runs.iter().map(|e| e.resolution.unwrap()).collect();
        let h: Vec<f64> = resolutions.iter().map(|r| 1.0 / *r as f64).collect();
        let ps: Vec<f64> = runs[0].w2p.iter().map(|r| r.0).collect();
        for p in ps {
            let values: Vec<f64> = runs
                .iter()
                .filter_map(|e| {
                    e.w2p
                        .iter()
                        .find(|row| row.0 == p)
                        .map(|row| row.1)
                })
                .collect();
            if values.len() != runs.len() {
                continue;
            }
            let observed_orders: Vec<f64> = (0..values.len() - 2)
                .map(|i| {
                    observed_order(
                        [h[i], h[i + 1], h[i + 2]],
                        [values[i], values[i + 1], values[i + 2]],
                    )
                })
                .collect();
            table.push(ConvergenceEntry {
                name: name.to_string(),
                p,
                resolutions: resolutions.clone(),
                values,
                observed_orders,
            });
        }
    }
    table
}

#[derive(Serialize)]
struct RunIndex {
    dir: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    name: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    eval_resolution: Option<usize>,
    files: Vec<String>,
}

#[derive(Serialize)]
struct Report {
    tool_version: String,
    runs: Vec<RunIndex>,
    w2p_convergence: Vec<ConvergenceEntry>,
    plots: Vec<String>,
}

pub fn emit(run_dir: &Path) -> Result<(), Failure> {
    if !run_dir.is_dir() {
        return Err(Failure::validation(format!(
            "{} is not a directory",
            run_dir.display()
        )));
    }
    let mut dirs: Vec<(PathBuf, String)> = vec![(run_dir.to_path_buf(), ".".to_string())];
    let mut subs: Vec<PathBuf> = std::fs::read_dir(run_dir)
        .map_err(|e| Failure::validation(format!("cannot read {}: {e}", run_dir.display())))?
        .filter_map(|r| r.ok())
        .map(|d| d.path())
        .filter(|p| p.is_dir())
        .collect();
    subs.sort();
    for s in subs {
        let label = s
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        dirs.push((s, label));
    }
    let entries: Vec<RunEntry> = dirs
        .into_iter()
        .filter_map(|(d, label)| scan_dir(&d, label))
        .collect();
    if entries.is_empty() {
        return Err(Failure::validation(format!(
            "nothing to report in {}: no completed subcommand outputs found",
            run_dir.display()
        )));
    }

    let decay_series: Vec<Series> = entries
        .iter()
        .filter(|e| !e.decay.is_empty())
        .map(|e| Series {
            label: series_label(e),
            points: e.decay.clone(),
        })
        .collect();
    let mut singular_groups: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for e in &entries {
        if let (Some(f), Some(res)) = (e.singular_fraction, e.resolution) {
            let key = e.name.clone().unwrap_or_else(|| e.label.clone());
            singular_groups.entry(key).or_default().push((res as f64, f));
        }
    }
    let singular_series: Vec<Series> = singular_groups
        .into_iter()
        .map(|(label, mut points)| {
            points.sort_by(|a, b| a.0.total_cmp(&b.0));
            Series { label, points }
        })
        .collect();
    let w2p_series: Vec<Series> = entries
        .iter()
        .filter(|e| !e.w2p.is_empty())
        .map(|e| Series {
            label: series_label(e),
            points: e.w2p.iter().map(|r| (r.0, r.1)).collect(),
        })
        .collect();
    let boundary_series: Vec<Series> = entries
        .iter()
        .filter(|e| !e.boundary.is_empty())
        .map(|e| Series {
            label: series_label(e),
            points: e.boundary.clone(),
        })
        .collect();

    let plots = [
        (
            "decay_ratios.svg",
            svg::line_plot(
                "level-set measure ratios",
                "level k",
                "|D_k| / |D_{k-1}|",
                &decay_series,
            ),
        ),
        (
            "singular_fraction.svg",
            svg::line_plot(
                "singular candidate fraction",
                "grid resolution",
                "excluded fraction of support",
                &singular_series,
            ),
        ),
        (
            "w2p_vs_p.svg",
            svg::line_plot(
                "Hessian integrability",
                "p",
                "integral of |D2 u|^p",
                &w2p_series,
            ),
        ),
        (
            "boundary_sums.svg",
            svg::line_plot(
                "boundary family sums",
                "band k",
                "sum of |D2 u|^p mass",
                &boundary_series,
            ),
        ),
    ];
    for (file, doc) in &plots {
        std::fs::write(run_dir.join(file), doc).map_err(|e| {
            Failure::validation(format!("cannot write {file}: {e}"))
        })?;
    }

    let report = Report {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        runs: entries
            .iter()
            .map(|e| RunIndex {
                dir: e.label.clone(),
                name: e.name.clone(),
                eval_resolution: e.resolution,
                files: e.files.clone(),
            })
            .collect(),
        w2p_convergence: w2p_convergence(&entries),
        plots: plots.iter().map(|(f, _)| f.to_string()).collect(),
    };
    let text = serde_json::to_string_pretty(&report)
        .map_err(|e| Failure::validation(e.to_string()))?;
    std::fs::write(run_dir.join("report.json"), text + "\n")
        .map_err(|e| Failure::validation(e.to_string()))?;
    println!(
        "emit-report: {} runs indexed, {} convergence rows -> {}",
        report.runs.len(),
        report.w2p_convergence.len(),
        run_dir.join("report.json").display()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_recovers_quadratic_convergence() {
        // v = 1 + h^2 sampled at h = 1/64, 1/96, 1/128.
        let h = [1.0 / 64.0, 1.0 / 96.0, 1.0 / 128.0];
        let v = [1.0 + h[0] * h[0], 1.0 + h[1] * h[1], 1.0 + h[2] * h[2]];
        let q = observed_order(h, v);
        assert!((q - 2.0).abs() < 1e-6, "got {q}");
    }

    #[test]
    fn order_rejects_non_monotone_triples() {
        assert!(observed_order([0.02, 0.01, 0.005], [1.0, 1.2, 1.1]).is_nan());
        assert!(observed_order([0.02, 0.01, 0.005], [1.0, 1.0, 1.1]).is_nan());
    }
}
