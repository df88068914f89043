//! On-disk form of solved objects: a potential file is a one-line JSON
//! header followed by CSV atom rows, a plan file is plain CSV couplings.
//! Floats are written with the shortest round-trip formatting, so
//! write -> read -> write reproduces a file byte for byte.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cost::CostModel;
use crate::error::{invalid, LabError, Result};
use crate::grid::{GridBox, GridSpec};
use crate::transport::{PotentialField, PotentialSource, TransportPlan};

/// Everything needed to rebuild a [`PotentialField`] besides the atoms.
/// `spacing` is redundant with `grid_box` and `resolution`; it is stored
/// so a corrupted or hand-edited header is caught on read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PotentialHeader {
    pub dimension: usize,
    pub cost: CostModel,
    pub anchor: Vec<f64>,
    pub grid_box: GridBox,
    pub resolution: Vec<usize>,
    pub spacing: Vec<f64>,
    pub atom_count: usize,
}

pub fn write_potential<W: Write>(mut w: W, u: &PotentialField) -> Result<()> {
    let (positions, lambdas) = match &u.source {
        PotentialSource::Atoms { positions, lambdas } => (positions, lambdas),
        PotentialSource::Analytic { name, .. } => {
            return Err(LabError::NotApplicable {
                what: "write_potential",
                detail: format!("analytic potential '{name}' has no atom representation"),
            });
        }
    };
    let dim = u.cost.dim();
    let header = PotentialHeader {
        dimension: dim,
        cost: u.cost.clone(),
        anchor: u.anchor.clone(),
        grid_box: u.grid.bbox.clone(),
        resolution: u.grid.res.clone(),
        spacing: (0..dim).map(|k| u.grid.spacing(k)).collect(),
        atom_count: lambdas.len(),
    };
    let header_line = serde_json::to_string(&header).map_err(|e| invalid(e.to_string()))?;
    writeln!(w, "{header_line}")?;
    for (j, (y, l)) in positions.chunks(dim).zip(lambdas).enumerate() {
        write!(w, "{j}")?;
        for c in y {
            write!(w, ",{c}")?;
        }
        writeln!(w, ",{l}")?;
    }
    Ok(())
}

pub fn read_potential<R: BufRead>(r: R) -> Result<PotentialField> {
    let mut lines = r.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| invalid("potential file is empty"))??;
    let header: PotentialHeader = serde_json::from_str(&header_line)
        .map_err(|e| invalid(format!("bad potential header: {e}")))?;

    // Re-run the constructors so a tampered header cannot smuggle in an
    // inconsistent model.
    let cost = CostModel::new(
        header.cost.kind.clone(),
        header.cost.source_box.clone(),
        header.cost.target_box.clone(),
    )?;
    let grid = GridSpec::new(header.grid_box.clone(), header.resolution.clone())?;
    let dim = cost.dim();
    if header.dimension != dim || grid.dim() != dim || header.anchor.len() != dim {
        return Err(invalid("potential header dimensions disagree"));
    }
    if header.spacing.len() != dim {
        return Err(invalid("potential header spacing has wrong length"));
    }
    for k in 0..dim {
        let s = grid.spacing(k);
        if (header.spacing[k] - s).abs() > 1e-9 * (1.0 + s.abs()) {
            return Err(invalid(format!(
                "header spacing {} disagrees with grid spacing {s} on axis {k}",
                header.spacing[k]
            )));
        }
    }

    let mut positions = Vec::with_capacity(header.atom_count * dim);
    let mut lambdas = Vec::with_capacity(header.atom_count);
    for line in lines {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != dim + 2 {
            return Err(invalid(format!(
                "atom row has {} fields, expected {}",
                fields.len(),
                dim + 2
            )));
        }
        let j: usize = fields[0]
            .parse()
            .map_err(|_| invalid(format!("bad atom index '{}'", fields[0])))?;
        if j != lambdas.len() {
            return Err(invalid(format!(
                "atom rows out of order: saw {j}, expected {}",
                lambdas.len()
            )));
        }
        for f in &fields[1..] {
            let v: f64 = f
                .parse()
                .map_err(|_| invalid(format!("bad float '{f}' in atom row {j}")))?;
            if !v.is_finite() {
                return Err(invalid(format!("non-finite value in atom row {j}")));
            }
            positions.push(v);
        }
        lambdas.push(positions.pop().expect("row has dim + 1 floats"));
    }
    if lambdas.len() != header.atom_count {
        return Err(invalid(format!(
            "header promises {} atoms, file has {}",
            header.atom_count,
            lambdas.len()
        )));
    }
    PotentialField::from_atoms(cost, positions, lambdas, grid, &header.anchor)
}

pub fn write_plan<W: Write>(mut w: W, plan: &TransportPlan) -> Result<()> {
    writeln!(w, "i,j,mass")?;
    for &(i, j, m) in &plan.couplings {
        writeln!(w, "{i},{j},{m}")?;
    }
    Ok(())
}

/// Reads coupling rows back. Duals and objective are not stored in plan
/// CSV; callers needing them keep the potential artifact instead.
pub fn read_plan<R: BufRead>(r: R) -> Result<Vec<(usize, usize, f64)>> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if n == 0 {
            if line != "i,j,mass" {
                return Err(invalid("plan file is missing its header row"));
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(invalid(format!("plan row {n} has {} fields", fields.len())));
        }
        let i: usize = fields[0].parse().map_err(|_| invalid("bad plan row index"))?;
        let j: usize = fields[1].parse().map_err(|_| invalid("bad plan col index"))?;
        let m: f64 = fields[2].parse().map_err(|_| invalid("bad plan mass"))?;
        if !(m > 0.0) || !m.is_finite() {
            return Err(invalid(format!("plan row {n} has mass {m}")));
        }
        out.push((i, j, m));
    }
    Ok(out)
}

pub fn write_potential_file(path: &Path, u: &PotentialField) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_potential(std::io::BufWriter::new(file), u)
}

pub fn read_potential_file(path: &Path) -> Result<PotentialField> {
    let file = std::fs::File::open(path)?;
    read_potential(std::io::BufReader::new(file))
}

pub fn write_plan_file(path: &Path, plan: &TransportPlan) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_plan(std::io::BufWriter::new(file), plan)
}

pub fn read_plan_file(path: &Path) -> Result<Vec<(usize, usize, f64)>> {
    let file = std::fs::File::open(path)?;
    read_plan(std::io::BufReader::new(file))
}
