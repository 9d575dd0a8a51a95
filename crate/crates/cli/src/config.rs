use std::path::Path;

use kfp_core::coefficients::FieldSpec;
use kfp_core::geometry::{KineticCylinder, PhasePoint, PhaseSet};
use kfp_core::solver::{PhaseGrid, Remap, SolverOptions};
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: String,
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

/// Top-level configuration shared by every verb; each verb reads its own section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub grid: PhaseGrid<f64>,
    pub field: FieldSpec,
    pub solver: SolverOptions<f64>,
    pub window: Window,
    pub rough: RoughFamily,
    pub verify: VerifyConfig,
    pub kernel: KernelConfig,
    pub decay: DecayConfig,
    pub moser: MoserConfig,
    pub oracle: OracleConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            grid: PhaseGrid {
                d: 1,
                nx: 128,
                nv: 128,
                lx: 16.0,
                lv: 8.0,
                dt: 1.0 / 512.0,
            },
            field: FieldSpec::identity(1),
            solver: SolverOptions::default(),
            window: Window { s: 0.0, t: 0.5 },
            rough: RoughFamily::default(),
            verify: VerifyConfig::default(),
            kernel: KernelConfig::default(),
            decay: DecayConfig::default(),
            moser: MoserConfig::default(),
            oracle: OracleConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Window {
    pub s: f64,
    pub t: f64,
}

/// Random piecewise-constant fields used wherever a suite needs rough coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoughFamily {
    pub cell: [f64; 3],
    pub eig: [f64; 2],
    pub skew: f64,
}

impl Default for RoughFamily {
    fn default() -> Self {
        RoughFamily {
            cell: [0.25, 1.0, 1.0],
            eig: [0.5, 2.0],
            skew: 0.6,
        }
    }
}

impl RoughFamily {
    pub fn spec(&self, d: usize, seed: u64) -> FieldSpec {
        let skew = if d >= 2 { self.skew } else { 0.0 };
        FieldSpec::random_piecewise(d, self.cell, self.eig, skew, seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    pub geometry_samples: usize,
    pub ellipticity_samples: usize,
    pub conservation_fields: usize,
    pub conservation_steps: usize,
    pub conservation_tol: f64,
    pub adjoint_pairs: usize,
    pub adjoint_window: f64,
    pub adjoint_tol: f64,
    /// Lattice for the nonsymmetric half of the adjoint suite (skew needs d = 2).
    pub adjoint_grid_2d: PhaseGrid<f64>,
    pub chapman_configs: usize,
    pub chapman_tol: f64,
    pub energy_tol: f64,
    pub davies_configs: usize,
    pub davies_tau: [f64; 2],
    pub twist_functions: usize,
    pub twist_fields: usize,
    pub twist_time: f64,
    pub envelope_taus: Vec<f64>,
    pub envelope_offset: f64,
    pub envelope_step: f64,
    pub envelope_fraction: f64,
    /// Finer velocity lattice for the rough envelope check, so `r >= 4 dv` fits in the horizon.
    pub envelope_nv: usize,
    pub envelope_radius: f64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            geometry_samples: 1000,
            ellipticity_samples: 2000,
            conservation_fields: 5,
            conservation_steps: 512,
            conservation_tol: 1e-9,
            adjoint_pairs: 50,
            adjoint_window: 0.0625,
            adjoint_tol: 1e-8,
            adjoint_grid_2d: PhaseGrid {
                d: 2,
                nx: 12,
                nv: 12,
                lx: 8.0,
                lv: 4.0,
                dt: 1.0 / 128.0,
            },
            chapman_configs: 20,
            chapman_tol: 1e-10,
            energy_tol: 1e-6,
            davies_configs: 20,
            davies_tau: [0.1, 1.0],
            twist_functions: 10,
            twist_fields: 5,
            twist_time: 0.125,
            envelope_taus: vec![0.1, 0.5, 1.0],
            envelope_offset: 8.0,
            envelope_step: 0.25,
            envelope_fraction: 0.99,
            envelope_nv: 256,
            envelope_radius: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KernelConfig {
    pub source: PhasePoint<f64>,
    pub delta_width: f64,
    pub heatmap: bool,
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig {
            source: PhasePoint {
                x: vec![0.0],
                v: vec![0.0625],
            },
            delta_width: 2.0,
            heatmap: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecayCase {
    #[serde(rename = "E")]
    pub e: PhaseSet<f64>,
    #[serde(rename = "F")]
    pub f: PhaseSet<f64>,
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecayConfig {
    pub cases: Vec<DecayCase>,
}

impl Default for DecayConfig {
    fn default() -> Self {
        let f = PhaseSet::Box {
            x: vec![[-1.0, 0.0]],
            v: vec![[-0.5, 0.5]],
        };
        let cases = [(1.0, 0.25), (2.0, 0.5), (3.0, 0.25), (4.0, 1.0)]
            .into_iter()
            .map(|(gap, tau)| DecayCase {
                e: PhaseSet::Box {
                    x: vec![[gap, gap + 1.0]],
                    v: vec![[0.0, 1.0]],
                },
                f: f.clone(),
                tau,
            })
            .collect();
        DecayConfig { cases }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MoserSource {
    /// Closed-form constant-coefficient kernel from the origin.
    Exact,
    /// Solver kernel column from the origin at `window.s`.
    Column,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MoserConfig {
    pub source: MoserSource,
    pub resolution: usize,
    pub cylinders: Vec<KineticCylinder<f64>>,
}

impl Default for MoserConfig {
    fn default() -> Self {
        let cyl = |r: f64| {
            serde_json::from_value(serde_json::json!({
                "t": 1.0, "x": [0.0], "v": [0.0], "r": r, "orientation": "backward"
            }))
            .expect("static cylinder")
        };
        MoserConfig {
            source: MoserSource::Exact,
            resolution: 24,
            cylinders: vec![cyl(0.2), cyl(0.3), cyl(0.4)],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleConfig {
    /// Remap for the kernel comparison; the linear remap smears the
    /// sub-cell x-structure of the kernel at this resolution.
    pub remap: Remap,
    pub tau: f64,
    pub delta_width: f64,
    pub l1_tol: f64,
    pub refine: bool,
    pub min_ratio: f64,
    pub normalization_tol: f64,
    pub chapman_tol: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            remap: Remap::Spectral,
            tau: 0.5,
            delta_width: 2.0,
            l1_tol: 0.05,
            refine: true,
            min_ratio: 1.8,
            normalization_tol: 1e-8,
            chapman_tol: 1e-6,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(invalid(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        let core = |e: kfp_core::KfpError| invalid(e.to_string());
        self.grid.validate().map_err(core)?;
        self.solver.validate().map_err(core)?;
        kfp_core::coefficients::build_field::<f64>(&self.field).map_err(core)?;
        if self.field.d != self.grid.d {
            return Err(invalid("field and grid dimensions differ"));
        }
        self.grid.steps_between(self.window.s, self.window.t).map_err(core)?;
        if self.window.t <= self.window.s {
            return Err(invalid("window needs s < t"));
        }
        let v = &self.verify;
        let positive = [
            ("conservation_tol", v.conservation_tol),
            ("adjoint_tol", v.adjoint_tol),
            ("chapman_tol", v.chapman_tol),
            ("energy_tol", v.energy_tol),
            ("oracle.l1_tol", self.oracle.l1_tol),
            ("oracle.normalization_tol", self.oracle.normalization_tol),
            ("oracle.chapman_tol", self.oracle.chapman_tol),
            ("envelope_step", v.envelope_step),
            ("adjoint_window", v.adjoint_window),
            ("twist_time", v.twist_time),
        ];
        for (name, value) in positive {
            if !(value > 0.0) || !value.is_finite() {
                return Err(invalid(format!("{name} must be positive")));
            }
        }
        if !(v.davies_tau[0] > 0.0 && v.davies_tau[0] <= v.davies_tau[1]) {
            return Err(invalid("davies_tau needs 0 < lo <= hi"));
        }
        if !(v.envelope_fraction > 0.0 && v.envelope_fraction <= 1.0) {
            return Err(invalid("envelope_fraction must lie in (0, 1]"));
        }
        v.adjoint_grid_2d.validate().map_err(core)?;
        kfp_core::coefficients::build_field::<f64>(&self.rough.spec(2, 0)).map_err(core)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_and_validates() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        assert_eq!(RunConfig::from_json(&text).unwrap(), cfg);
        assert_eq!(RunConfig::from_json("{}").unwrap(), cfg);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(matches!(RunConfig::from_json(r#"{"bogus": 1}"#), Err(ConfigError::Parse(_))));
        assert!(RunConfig::from_json(r#"{"schema_version": 2}"#).is_err());
        assert!(RunConfig::from_json(r#"{"window": {"s": 0.0, "t": 0.3001}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"verify": {"energy_tol": 0.0}}"#).is_err());
        let inverted = r#"{"field": {"kind": "constant", "d": 1,
            "params": {"matrix": [[1.0]], "declared_lambda": 2.0, "declared_Lambda": 1.0}}}"#;
        assert!(RunConfig::from_json(inverted).is_err());
    }
}
