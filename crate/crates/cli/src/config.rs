//! JSON experiment configuration.
//!
//! Every block except `chart` is optional. Unknown keys are rejected so
//! that typos surface as configuration errors.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thermoray_core::exprfield::{parse, FieldExpr, Var};
use thermoray_core::flow::{Fan, ThermostatFlow};
use thermoray_core::grid::Domain;
use thermoray_core::random::GENERATOR_NAME;
use thermoray_core::surface::{ExternalField, IsothermalChart};

use crate::error::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "generator")]
    pub generator: String,
    pub chart: ChartConfig,
    #[serde(default)]
    pub field: FieldConfig,
    #[serde(default)]
    pub integrator: IntegratorConfig,
    #[serde(default)]
    pub fan: FanConfig,
    #[serde(default)]
    pub experiment: ExperimentBlock,
    #[serde(default)]
    pub output: Option<String>,
}

fn schema_version() -> u32 {
    SCHEMA_VERSION
}

fn generator() -> String {
    GENERATOR_NAME.to_string()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChartKind {
    Torus,
    Disk,
}

/// A number, or an expression in constants such as `"2*pi"`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Scalar {
    Number(f64),
    Expr(String),
}

impl Scalar {
    fn value(&self, what: &str) -> Result<f64, CliError> {
        match self {
            Scalar::Number(v) => Ok(*v),
            Scalar::Expr(s) => {
                let e = parse(s).map_err(|e| CliError::config(format!("{what}: {e}")))?;
                if !(e.differentiate(Var::X).is_zero() && e.differentiate(Var::Y).is_zero()) {
                    return Err(CliError::config(format!("{what} must be a constant, got `{s}`")));
                }
                e.eval(0.0, 0.0).map_err(|err| CliError::config(format!("{what}: {err}")))
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChartConfig {
    pub kind: ChartKind,
    /// Torus period (default `2π`).
    #[serde(rename = "L", default)]
    pub length: Option<Scalar>,
    /// Disk radius.
    #[serde(rename = "R", default)]
    pub radius: Option<Scalar>,
    #[serde(default = "zero_expr")]
    pub rho: String,
    #[serde(rename = "Nx")]
    pub nx: usize,
    #[serde(rename = "Ny")]
    pub ny: usize,
    #[serde(rename = "Nphi", default = "default_nphi")]
    pub nphi: usize,
}

fn zero_expr() -> String {
    "0".into()
}

fn default_nphi() -> usize {
    33
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldConfig {
    #[serde(rename = "E1", default = "zero_expr")]
    pub e1: String,
    #[serde(rename = "E2", default = "zero_expr")]
    pub e2: String,
}

impl Default for FieldConfig {
    fn default() -> Self {
        FieldConfig { e1: zero_expr(), e2: zero_expr() }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegratorConfig {
    #[serde(default)]
    pub h: Option<f64>,
    #[serde(rename = "T_cap", default)]
    pub t_cap: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FanConfig {
    pub n_boundary: usize,
    pub n_angles: usize,
}

impl Default for FanConfig {
    fn default() -> Self {
        let f = Fan::default();
        FanConfig { n_boundary: f.n_boundary, n_angles: f.n_angles }
    }
}

/// Random degree-limited trigonometric `ρ`, `E¹`, `E²` replacing the
/// chart and field expressions (torus only).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomFields {
    pub degree: u32,
    pub amplitude: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Refinement {
    pub coarse: usize,
    pub fine: usize,
}

/// Command-specific settings; each command reads the keys it needs.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentBlock {
    // verify
    pub random_fields: Option<RandomFields>,
    pub spatial_degree: Option<u32>,
    pub pestov_refinement: Option<Refinement>,
    pub conformal_samples: Option<usize>,
    // orbit
    pub start: Option<[f64; 3]>,
    pub duration: Option<f64>,
    // conjugates, terminator, riccati
    pub beta: Option<f64>,
    pub beta_max: Option<f64>,
    pub beta_tol: Option<f64>,
    pub grid_n: Option<usize>,
    pub grid_nphi: Option<usize>,
    pub probes: Option<usize>,
    // xray, kernel, invert
    pub m: Option<usize>,
    pub basis_degree: Option<u32>,
    pub threshold: Option<f64>,
    pub reg: Option<f64>,
    pub tensor: Option<Vec<String>>,
    pub potential: Option<Vec<String>>,
    pub transport: Option<bool>,
    // surjectivity-demo
    pub f: Option<String>,
    pub alpha: Option<[String; 2]>,
    pub kmax: Option<usize>,
    pub max_iter: Option<usize>,
    pub cg_tol: Option<f64>,
    pub control_samples: Option<usize>,
    #[serde(default)]
    pub tolerances: BTreeMap<String, f64>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| CliError::config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(CliError::config(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.generator != GENERATOR_NAME {
            return Err(CliError::config(format!(
                "unsupported generator `{}` (only `{GENERATOR_NAME}`)",
                self.generator
            )));
        }
        let c = &self.chart;
        if c.nx < 4 || c.ny < 4 {
            return Err(CliError::config("Nx and Ny must be at least 4"));
        }
        if c.nphi < 3 || c.nphi.is_multiple_of(2) {
            return Err(CliError::config("Nphi must be odd and at least 3"));
        }
        self.domain()?;
        for (what, s) in [("rho", &c.rho), ("E1", &self.field.e1), ("E2", &self.field.e2)] {
            expr(what, s)?;
        }
        if self.fan.n_boundary == 0 || self.fan.n_angles == 0 {
            return Err(CliError::config("fan sizes must be positive"));
        }
        if let Some(h) = self.integrator.h {
            if !(h > 0.0 && h.is_finite()) {
                return Err(CliError::config("integrator.h must be positive"));
            }
        }
        if let Some(t) = self.integrator.t_cap {
            if !(t > 0.0 && t.is_finite()) {
                return Err(CliError::config("integrator.T_cap must be positive"));
            }
        }
        for (k, v) in &self.experiment.tolerances {
            if !(*v > 0.0 && v.is_finite()) {
                return Err(CliError::config(format!("tolerance `{k}` must be positive")));
            }
        }
        Ok(())
    }

    pub fn domain(&self) -> Result<Domain, CliError> {
        match self.chart.kind {
            ChartKind::Torus => {
                if self.chart.radius.is_some() {
                    return Err(CliError::config("torus charts take `L`, not `R`"));
                }
                let length = match &self.chart.length {
                    Some(l) => l.value("chart.L")?,
                    None => 2.0 * PI,
                };
                if !(length > 0.0 && length.is_finite()) {
                    return Err(CliError::config("chart.L must be positive"));
                }
                Ok(Domain::Torus { length })
            }
            ChartKind::Disk => {
                if self.chart.length.is_some() {
                    return Err(CliError::config("disk charts take `R`, not `L`"));
                }
                let radius = self
                    .chart
                    .radius
                    .as_ref()
                    .ok_or_else(|| CliError::config("disk charts need `R`"))?
                    .value("chart.R")?;
                if !(radius > 0.0 && radius.is_finite()) {
                    return Err(CliError::config("chart.R must be positive"));
                }
                Ok(Domain::Disk { radius })
            }
        }
    }

    pub fn rho(&self) -> Result<FieldExpr, CliError> {
        expr("rho", &self.chart.rho)
    }

    pub fn chart(&self) -> Result<IsothermalChart, CliError> {
        self.chart_with(self.rho()?, self.chart.nx, self.chart.ny)
    }

    pub fn chart_with(&self, rho: FieldExpr, nx: usize, ny: usize) -> Result<IsothermalChart, CliError> {
        IsothermalChart::new(self.domain()?, rho, nx, ny).map_err(|e| CliError::config(format!("chart: {e}")))
    }

    pub fn field(&self) -> Result<ExternalField, CliError> {
        Ok(ExternalField::new(expr("E1", &self.field.e1)?, expr("E2", &self.field.e2)?))
    }

    /// Chart and field, with the field checked against the chart.
    pub fn surface(&self) -> Result<(IsothermalChart, ExternalField), CliError> {
        let chart = self.chart()?;
        let field = self.field()?;
        field.validate(&chart).map_err(|e| CliError::config(format!("field: {e}")))?;
        Ok((chart, field))
    }

    pub fn flow(&self, chart: &IsothermalChart, field: &ExternalField) -> Result<ThermostatFlow, CliError> {
        let mut flow = ThermostatFlow::new(chart, field)?;
        if let Some(h) = self.integrator.h {
            flow = flow.with_step(h)?;
        }
        if let Some(t) = self.integrator.t_cap {
            flow = flow.with_t_cap(t)?;
        }
        Ok(flow)
    }

    pub fn fan(&self) -> Fan {
        Fan::new(self.fan.n_boundary, self.fan.n_angles)
    }

    /// Highest fiber mode resolved by `Nphi` samples.
    pub fn fiber_kmax(&self) -> usize {
        (self.chart.nphi - 1) / 2
    }

    /// `sha256:` of the canonical JSON of the effective configuration.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
        format!("sha256:{hex}")
    }
}

/// Parses an expression; errors point at the offending byte.
pub fn expr(what: &str, src: &str) -> Result<FieldExpr, CliError> {
    parse(src).map_err(|e| {
        let pad = " ".repeat(e.offset().min(src.len()));
        CliError::config(format!("{what}: {e}\n    {src}\n    {pad}^"))
    })
}
