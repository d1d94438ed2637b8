//! Run configuration: a TOML file with `problem`, `numerics`, `oracle` and
//! `outputs` sections. Unknown keys are rejected before any computation.

use crate::evolution::EvolutionSettings;
use crate::expr::parse;
use crate::measures::MeasureSettings;
use crate::oracle::OracleSettings;
use crate::presets::{preset, sec7_family, Preset};
use crate::problem::{
    CoefficientField, Lattice, LyapKind, LyapunovCandidate, ProblemError, TimeInterval,
};
use crate::solver::Bc;
use serde::Deserialize;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("config read error: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid override `{0}`: expected key=value")]
    BadOverride(String),
    #[error("override path `{0}` does not address a table entry")]
    BadOverridePath(String),
    #[error("problem block needs either a preset or explicit q and b")]
    MissingProblem,
    #[error("unknown boundary condition `{0}` (dirichlet | neumann)")]
    BadBc(String),
    #[error("unknown Lyapunov kind `{0}` (h1iii | h4 | h34)")]
    BadKind(String),
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error(transparent)]
    Expr(#[from] crate::expr::ExprError),
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub problem: ProblemBlock,
    #[serde(default)]
    pub numerics: NumericsBlock,
    #[serde(default)]
    pub oracle: OracleBlock,
    #[serde(default)]
    pub outputs: OutputsBlock,
    #[serde(default)]
    pub solve: Option<SolveBlock>,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ProblemBlock {
    pub preset: Option<String>,
    #[serde(default = "default_dim")]
    pub dim: usize,
    /// `[lo]` or `[lo, hi]`; a missing `hi` flags an unbounded interval.
    pub interval: Option<Vec<f64>>,
    /// Upper triangle of `Q`, row-major, as expressions.
    pub q: Option<Vec<String>>,
    pub b: Option<Vec<String>>,
    /// Polynomial degree parameter of the built-in Lyapunov family.
    pub sec7_n: Option<u32>,
    /// Drift one-sided bound `C(t)` of the unit-diffusion family.
    pub sec7_c: Option<String>,
    pub lyapunov: Option<LyapunovBlock>,
}

fn default_dim() -> usize {
    1
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LyapunovBlock {
    pub phi: String,
    pub kind: String,
    pub a: Option<f64>,
    pub c: Option<f64>,
    pub t0: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NumericsBlock {
    pub r0: f64,
    pub h: f64,
    pub dt: f64,
    pub theta: f64,
    pub bc: String,
    pub exhaust_tol: f64,
    pub n_max: u32,
    pub compact_radius: f64,
    pub eps_cons: f64,
    pub eps_meas: f64,
    pub eps_kb: f64,
    /// Time step of the long measure sweeps.
    pub dt_measure: f64,
    pub quad_stride: usize,
    pub horizons: Vec<f64>,
    /// Hypothesis-check window `[a, b]`.
    pub window: [f64; 2],
    /// Variable-rate hypothesis exponent (user input).
    pub p0: f64,
    pub smoothing_tau0: f64,
    pub smoothing_rungs: usize,
    pub decay_ladder: Vec<f64>,
    pub rho_ladder: Vec<f64>,
    pub anchors: Vec<f64>,
}

impl Default for NumericsBlock {
    fn default() -> Self {
        NumericsBlock {
            r0: 4.0,
            h: 0.05,
            dt: 1e-3,
            theta: 1.0,
            bc: "neumann".into(),
            exhaust_tol: 5e-4,
            n_max: 3,
            compact_radius: 2.0,
            eps_cons: 1e-3,
            eps_meas: 1e-3,
            eps_kb: 1e-2,
            dt_measure: 5e-3,
            quad_stride: 1,
            horizons: vec![5.0, 10.0, 20.0, 40.0],
            window: [0.0, 2.0 * std::f64::consts::PI],
            p0: 2.0,
            smoothing_tau0: 0.125,
            smoothing_rungs: 3,
            decay_ladder: vec![1.0, 2.0, 3.0, 4.0],
            rho_ladder: vec![1.0, 2.0, 3.0, 4.0],
            anchors: vec![0.0, 1.0],
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleBlock {
    pub n_particles: usize,
    pub dt: f64,
    pub seed: u64,
    pub drift_clip: f64,
}

impl Default for OracleBlock {
    fn default() -> Self {
        let d = OracleSettings::default();
        OracleBlock {
            n_particles: d.n_particles,
            dt: d.dt,
            seed: d.seed,
            drift_clip: d.drift_clip,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputsBlock {
    pub dir: String,
    pub write: Vec<String>,
}

impl Default for OutputsBlock {
    fn default() -> Self {
        OutputsBlock {
            dir: "out".into(),
            write: vec!["summary".into()],
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolveBlock {
    pub f: String,
    pub s: f64,
    pub t: f64,
    #[serde(default)]
    pub output_times: Vec<f64>,
}

/// Everything resolved into the typed settings the library consumes.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub name: String,
    pub cf: Arc<CoefficientField>,
    pub lyapunov: Vec<LyapunovCandidate>,
    pub c_of_t: Option<crate::expr::Expression>,
    pub evo: EvolutionSettings,
    pub measures: MeasureSettings,
    pub oracle: OracleSettings,
    pub lattice: Lattice,
    pub numerics: NumericsBlock,
    pub outputs: OutputsBlock,
    pub solve: Option<SolveBlock>,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<RunConfig, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    pub fn from_path(path: &std::path::Path) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    /// Parse with `key=value` dotted-path overrides applied first.
    pub fn from_str_with_overrides(
        text: &str,
        overrides: &[String],
    ) -> Result<RunConfig, ConfigError> {
        let mut value: toml::Value = toml::from_str(text)?;
        for ov in overrides {
            apply_override(&mut value, ov)?;
        }
        Ok(value.try_into()?)
    }

    pub fn resolve(&self) -> Result<Resolved, ConfigError> {
        let (name, base): (String, Preset) = match (&self.problem.preset, &self.problem.q) {
            (Some(p), _) => {
                let pr = if p == "sec7" {
                    sec7_family(
                        self.problem.sec7_n.unwrap_or(1),
                        self.problem.sec7_c.as_deref().unwrap_or("-2+sin(t)"),
                    )?
                } else {
                    preset(p)?
                };
                (p.clone(), pr)
            }
            (None, Some(q)) => {
                let b = self.problem.b.as_ref().ok_or(ConfigError::MissingProblem)?;
                let dim = self.problem.dim;
                let interval = match self.problem.interval.as_deref() {
                    Some([lo]) => TimeInterval::new(*lo, None),
                    Some([lo, hi]) => TimeInterval::new(*lo, Some(*hi)),
                    _ => TimeInterval::new(0.0, None),
                };
                let qs: Vec<&str> = q.iter().map(|s| s.as_str()).collect();
                let bs: Vec<&str> = b.iter().map(|s| s.as_str()).collect();
                let cf = CoefficientField::from_strings(dim, interval, &qs, &bs)?;
                (
                    "custom".to_string(),
                    Preset {
                        name: "custom",
                        cf,
                        lyapunov: Vec::new(),
                        c_of_t: None,
                    },
                )
            }
            _ => return Err(ConfigError::MissingProblem),
        };

        let mut lyapunov = base.lyapunov;
        if let Some(lb) = &self.problem.lyapunov {
            let kind = match lb.kind.as_str() {
                "h1iii" => LyapKind::H1iii,
                "h4" => LyapKind::H4,
                "h34" => LyapKind::H34,
                other => return Err(ConfigError::BadKind(other.into())),
            };
            let mut lc = LyapunovCandidate::new(parse(&lb.phi, base.cf.dim())?, kind);
            lc.a = lb.a;
            lc.c = lb.c;
            lc.t0 = lb.t0;
            lyapunov = vec![lc];
        }

        let n = &self.numerics;
        let bc = match n.bc.as_str() {
            "dirichlet" => Bc::Dirichlet,
            "neumann" => Bc::Neumann,
            other => return Err(ConfigError::BadBc(other.into())),
        };
        let evo = EvolutionSettings {
            r0: n.r0,
            h: n.h,
            dt: n.dt,
            theta: n.theta,
            bc,
            exhaust_tol: n.exhaust_tol,
            n_max: n.n_max,
            compact_radius: n.compact_radius,
            eps_cons: n.eps_cons,
            strict_budget: false,
        };
        let measures = MeasureSettings {
            evo: evo.clone(),
            dt: n.dt_measure,
            quad_stride: n.quad_stride,
            eps_meas: n.eps_meas,
            eps_kb: n.eps_kb,
            horizons: n.horizons.clone(),
        };
        let oracle = OracleSettings {
            n_particles: self.oracle.n_particles,
            dt: self.oracle.dt,
            seed: self.oracle.seed,
            drift_clip: self.oracle.drift_clip,
        };
        let lattice = Lattice::standard((n.window[0], n.window[1]), 2.0 * n.r0);
        Ok(Resolved {
            name,
            cf: Arc::new(base.cf),
            lyapunov,
            c_of_t: base.c_of_t,
            evo,
            measures,
            oracle,
            lattice,
            numerics: n.clone(),
            outputs: self.outputs.clone(),
            solve: self.solve.clone(),
        })
    }
}

fn apply_override(value: &mut toml::Value, spec: &str) -> Result<(), ConfigError> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| ConfigError::BadOverride(spec.into()))?;
    let parsed: toml::Value = if let Ok(i) = raw.parse::<i64>() {
        toml::Value::Integer(i)
    } else if let Ok(f) = raw.parse::<f64>() {
        toml::Value::Float(f)
    } else if let Ok(b) = raw.parse::<bool>() {
        toml::Value::Boolean(b)
    } else if raw.starts_with('[') {
        toml::from_str::<toml::Value>(&format!("v = {raw}"))
            .map_err(ConfigError::Toml)?
            .get("v")
            .cloned()
            .ok_or_else(|| ConfigError::BadOverride(spec.into()))?
    } else {
        toml::Value::String(raw.to_string())
    };
    let mut cursor = value;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = cursor
            .as_table_mut()
            .ok_or_else(|| ConfigError::BadOverridePath(path.into()))?;
        if i + 1 == parts.len() {
            table.insert(part.to_string(), parsed);
            return Ok(());
        }
        cursor = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    Err(ConfigError::BadOverridePath(path.into()))
}
