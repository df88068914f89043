//! Scenario files: a versioned JSON schema, validation of every field
//! against the documented ranges, a canonical content hash, and the
//! built-in presets.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use lab_core::cost::{Bump, CostKind, CostModel};
use lab_core::grid::GridBox;
use lab_core::transport::{BallSpec, DensitySpec, SolveMethod};

use crate::Failure;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarginalSpec {
    /// Box the atoms must stay inside; becomes the cost-side domain.
    pub domain: GridBox,
    pub density: DensitySpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridParams {
    pub n_atoms: usize,
    /// Cells per axis of the evaluation grid on the source domain.
    pub eval_resolution: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentParams {
    /// Level base of the Hessian ladder.
    #[serde(rename = "M")]
    pub m_base: f64,
    /// Density threshold inside sections.
    #[serde(rename = "N")]
    pub n_threshold: f64,
    pub p_list: Vec<f64>,
    pub h0: f64,
    #[serde(rename = "K_levels")]
    pub k_levels: usize,
    pub sigma: f64,
    pub ratio_cap: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub schema_version: u32,
    pub name: String,
    pub dimension: usize,
    pub source: MarginalSpec,
    pub target: MarginalSpec,
    pub cost: CostKind,
    pub grid: GridParams,
    pub solver: SolveMethod,
    pub experiment: ExperimentParams,
    /// Default output directory; LAB_OUT and --out take precedence.
    #[serde(default)]
    pub output: Option<PathBuf>,
}

impl ScenarioConfig {
    pub fn load(path: &std::path::Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Failure::validation(format!("cannot read config {}: {e}", path.display()))
        })?;
        let cfg: ScenarioConfig = serde_json::from_str(&text)
            .map_err(|e| Failure::validation(format!("bad config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), Failure> {
        let fail = |m: String| Err(Failure::validation(m));
        if self.schema_version != SCHEMA_VERSION {
            return fail(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if self.name.is_empty() {
            return fail("scenario name must be nonempty".into());
        }
        if !(1..=3).contains(&self.dimension) {
            return fail(format!("dimension {} is outside 1..=3", self.dimension));
        }
        for (side, m) in [("source", &self.source), ("target", &self.target)] {
            if m.domain.dim() != self.dimension {
                return fail(format!("{side} domain dimension mismatch"));
            }
            let support = m
                .density
                .bounding_box()
                .map_err(|e| Failure::validation(format!("{side} density: {e}")))?;
            let tol = 1e-9 * (1.0 + m.domain.diameter());
            for a in 0..self.dimension {
                if support.lo[a] < m.domain.lo[a] - tol || support.hi[a] > m.domain.hi[a] + tol {
                    return fail(format!("{side} density support leaves its domain box"));
                }
            }
        }
        if self.grid.n_atoms == 0 {
            return fail("grid.n_atoms must be positive".into());
        }
        if self.grid.n_atoms > 20_000 {
            return fail("grid.n_atoms above 20000 is outside the supported range".into());
        }
        if !(4..=512).contains(&self.grid.eval_resolution) {
            return fail("grid.eval_resolution must lie in 4..=512".into());
        }
        let e = &self.experiment;
        if !(e.m_base > 1.0) || !e.m_base.is_finite() {
            return fail("experiment.M must exceed 1".into());
        }
        if !(e.n_threshold > 1.0) || !e.n_threshold.is_finite() {
            return fail("experiment.N must exceed 1".into());
        }
        if e.p_list.is_empty() || e.p_list.iter().any(|p| !(*p >= 1.0) || !p.is_finite()) {
            return fail("experiment.p_list needs entries, all at least 1".into());
        }
        if !(e.h0 > 0.0) || !e.h0.is_finite() {
            return fail("experiment.h0 must be positive".into());
        }
        if e.k_levels == 0 || e.k_levels > 32 {
            return fail("experiment.K_levels must lie in 1..=32".into());
        }
        if !(e.sigma > 0.0 && e.sigma < 1.0) {
            return fail("experiment.sigma must lie in (0, 1)".into());
        }
        if !(e.ratio_cap >= 1.0) || !e.ratio_cap.is_finite() {
            return fail("experiment.ratio_cap must be at least 1".into());
        }
        // The cost constructor re-checks kind parameters.
        self.cost_model()
            .map_err(|e| Failure::validation(format!("cost: {e}")))?;
        Ok(())
    }

    pub fn cost_model(&self) -> lab_core::Result<CostModel> {
        CostModel::new(
            self.cost.clone(),
            self.source.domain.clone(),
            self.target.domain.clone(),
        )
    }

    /// Content hash of the canonicalized config: keys sorted at every
    /// level, floats in shortest round-trip form, and the plumbing-only
    /// `output` field removed. Identical scenarios hash identically
    /// regardless of key order or where their outputs go.
    pub fn scenario_hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        if let serde_json::Value::Object(map) = &mut value {
            map.remove("output");
        }
        let mut canon = String::new();
        write_canonical(&value, &mut canon);
        let digest = Sha256::digest(canon.as_bytes());
        let mut hex = String::with_capacity(64);
        for b in digest {
            hex.push_str(&format!("{b:02x}"));
        }
        hex
    }

}

fn write_canonical(v: &serde_json::Value, out: &mut String) {
    match v {
        serde_json::Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push('{');
            for (i, k) in keys.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&serde_json::to_string(k).expect("string serializes"));
                out.push(':');
                write_canonical(&map[*k], out);
            }
            out.push('}');
        }
        serde_json::Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_canonical(item, out);
            }
            out.push(']');
        }
        other => out.push_str(&serde_json::to_string(other).expect("scalar serializes")),
    }
}

pub const PRESET_NAMES: [&str; 10] = [
    "E1", "E2-d000", "E2-d002", "E2-d005", "E3-64", "E3-96", "E3-128", "E4-64", "E4-128", "E5",
];

fn uniform_box_marginal(r: f64) -> MarginalSpec {
    MarginalSpec {
        domain: GridBox::symmetric(2, r),
        density: DensitySpec::UniformOnBox {
            bbox: GridBox::symmetric(2, r),
        },
    }
}

fn experiment_defaults(seed: u64) -> ExperimentParams {
    ExperimentParams {
        m_base: 4.0,
        n_threshold: 2.0,
        p_list: vec![1.0, 2.0, 4.0],
        h0: 0.05,
        k_levels: 3,
        sigma: 0.2,
        ratio_cap: 3.0,
        seed,
    }
}

/// Built-in scenarios: E1 identity, E2 perturbation sweep, E3 p-sweep at
/// three resolutions, E4 two-ball split at two resolutions, E5 boundary
/// profile on a ball domain.
pub fn preset(name: &str) -> Option<ScenarioConfig> {
    let base = |name: &str, res: usize, atoms: usize, seed: u64| ScenarioConfig {
        schema_version: SCHEMA_VERSION,
        name: name.to_string(),
        dimension: 2,
        source: uniform_box_marginal(1.25),
        target: uniform_box_marginal(1.25),
        cost: CostKind::QuadraticBilinear,
        grid: GridParams {
            n_atoms: atoms,
            eval_resolution: res,
        },
        solver: SolveMethod::Exact,
        experiment: experiment_defaults(seed),
        output: None,
    };
    let delta_variant = |delta: f64| {
        let mut cfg = base("delta-sweep", 128, 1600, 11);
        cfg.source = uniform_box_marginal(1.0);
        cfg.target = uniform_box_marginal(1.0);
        if delta > 0.0 {
            cfg.cost = CostKind::PerturbedBilinear {
                delta,
                bump: Bump::SinProduct,
            };
        }
        cfg
    };
    let two_ball = |res: usize| {
        let mut cfg = base("two-ball", res, 256, 11);
        cfg.source = MarginalSpec {
            domain: GridBox::symmetric(2, 1.0),
            density: DensitySpec::UniformOnBall {
                center: vec![0.0, 0.0],
                radius: 0.7,
            },
        };
        cfg.target = MarginalSpec {
            domain: GridBox::symmetric(2, 1.0),
            density: DensitySpec::UnionOfBalls {
                balls: vec![
                    BallSpec {
                        center: vec![-0.55, 0.0],
                        radius: 0.25,
                    },
                    BallSpec {
                        center: vec![0.55, 0.0],
                        radius: 0.25,
                    },
                ],
            },
        };
        cfg
    };
    let p_sweep = |res: usize| {
        let mut cfg = base("p-sweep", res, 1600, 7);
        cfg.experiment.p_list = vec![1.0, 1.5, 2.0, 3.0, 4.0];
        cfg
    };
    match name {
        "E1" => Some(base("identity", 128, 1600, 7)),
        "E2-d000" => Some(delta_variant(0.0)),
        "E2-d002" => Some(delta_variant(0.02)),
        "E2-d005" => Some(delta_variant(0.05)),
        "E3-64" => Some(p_sweep(64)),
        "E3-96" => Some(p_sweep(96)),
        "E3-128" => Some(p_sweep(128)),
        "E4-64" => Some(two_ball(64)),
        "E4-128" => Some(two_ball(128)),
        "E5" => {
            let mut cfg = base("boundary", 96, 1600, 5);
            let ball = DensitySpec::UniformOnBall {
                center: vec![0.0, 0.0],
                radius: 1.0,
            };
            cfg.source = MarginalSpec {
                domain: GridBox::symmetric(2, 1.2),
                density: ball.clone(),
            };
            cfg.target = MarginalSpec {
                domain: GridBox::symmetric(2, 1.2),
                density: ball,
            };
            cfg.experiment.h0 = 0.1;
            cfg.experiment.p_list = vec![2.0];
            Some(cfg)
        }
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_hash_distinctly() {
        let mut hashes = Vec::new();
        for name in PRESET_NAMES {
            let cfg = preset(name).expect("preset exists");
            cfg.validate().expect("preset validates");
            hashes.push(cfg.scenario_hash());
        }
        hashes.sort();
        hashes.dedup();
        assert_eq!(hashes.len(), PRESET_NAMES.len());
    }

    #[test]
    fn hash_ignores_output_but_not_content() {
        let mut a = preset("E1").unwrap();
        let h0 = a.scenario_hash();
        a.output = Some(PathBuf::from("/somewhere/else"));
        assert_eq!(a.scenario_hash(), h0);
        a.grid.eval_resolution += 1;
        assert_ne!(a.scenario_hash(), h0);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut v = serde_json::to_value(preset("E1").unwrap()).unwrap();
        v.as_object_mut()
            .unwrap()
            .insert("surprise".into(), serde_json::json!(1));
        let text = serde_json::to_string(&v).unwrap();
        assert!(serde_json::from_str::<ScenarioConfig>(&text).is_err());
    }
}
