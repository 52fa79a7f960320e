//! Declarative experiment configs, figure presets, and the orchestration that
//! turns them into CSV and JSON artifacts.

mod csv;
mod presets;
mod run;
mod validate;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

use crate::error::{LabError, Result};
use crate::ode::IntegrationPlan;
use crate::order_params::{ModelConfig, OrderParams, VariantConfig};
use crate::sim::{init_sim, measure_order_params, SimState, StreamOptions};

pub use presets::{preset, preset_names, PRESETS};
pub use run::{run_experiment, sweep, Outcome, Status, SweepRow};
pub use validate::{validate_integrals, KindReport, ValidationReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Kind {
    Theory,
    Simulate,
    Compare,
    Sweep,
    ValidateIntegrals,
}

impl Kind {
    pub fn name(self) -> &'static str {
        match self {
            Kind::Theory => "theory",
            Kind::Simulate => "simulate",
            Kind::Compare => "compare",
            Kind::Sweep => "sweep",
            Kind::ValidateIntegrals => "validate-integrals",
        }
    }
}

/// Initial condition: a named preset (`"paper-fig3"`, `"random"`) or explicit
/// overlap matrices given as lists of rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum InitSpec {
    Named(String),
    Explicit {
        #[serde(rename = "Q")]
        q: Vec<Vec<f64>>,
        #[serde(rename = "R")]
        r: Vec<Vec<f64>>,
        #[serde(rename = "T")]
        t: Vec<Vec<f64>>,
    },
}

/// One initial condition or a list of them; a list adds an `init` axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum InitList {
    One(InitSpec),
    Many(Vec<InitSpec>),
}

impl InitList {
    fn specs(&self) -> Vec<&InitSpec> {
        match self {
            InitList::One(s) => vec![s],
            InitList::Many(v) => v.iter().collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Axis {
    pub name: String,
    pub values: Vec<f64>,
}

pub const AXIS_NAMES: [&str; 10] = ["N", "K", "M", "P", "V", "eta_w", "eta_J", "gamma", "lambda", "sigma_noise"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSettings {
    pub init_seed: u64,
    pub matched_init: bool,
    pub ma_window: f64,
    pub eps_tasks: usize,
    pub eps_test: usize,
}

impl Default for SimSettings {
    fn default() -> Self {
        let s = StreamOptions::default();
        SimSettings {
            init_seed: 0,
            matched_init: false,
            ma_window: s.ma_window,
            eps_tasks: s.eps_tasks,
            eps_test: s.eps_test,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValidateSettings {
    pub seed: u64,
    pub count: usize,
    pub tolerance: f64,
}

impl Default for ValidateSettings {
    fn default() -> Self {
        ValidateSettings {
            seed: 0,
            count: 1000,
            tolerance: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: Kind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub variant: VariantConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan: Option<IntegrationPlan>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init: Option<InitList>,
    #[serde(default)]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub axes: Vec<Axis>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    #[serde(default)]
    pub sim: SimSettings,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validate: Option<ValidateSettings>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
}

pub const SWEEP_ALPHA_MAX: f64 = 450.0;

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| LabError::config(json_field(&e), e.to_string()))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// The plan actually used: the configured one, or the default with the
    /// sweep horizon for sweeps.
    pub fn effective_plan(&self) -> IntegrationPlan {
        match self.plan {
            Some(p) => p,
            None => {
                let mut p = IntegrationPlan::default();
                if self.kind == Kind::Sweep {
                    p.alpha_max = SWEEP_ALPHA_MAX;
                }
                p
            }
        }
    }

    pub fn effective_threshold(&self) -> f64 {
        self.threshold.unwrap_or(crate::dynamics::DEFAULT_EPS_THRESHOLD)
    }

    pub fn stream_options(&self) -> StreamOptions {
        let plan = self.effective_plan();
        StreamOptions {
            alpha_max: plan.alpha_max,
            record_every: plan.record_every,
            ma_window: self.sim.ma_window,
            eps_tasks: self.sim.eps_tasks,
            eps_test: self.sim.eps_test,
        }
    }

    /// Checks everything that can be checked without running, and expands
    /// the grid into concrete runs in grid order.
    pub fn resolve(&self) -> Result<Vec<RunSpec>> {
        if self.kind == Kind::ValidateIntegrals {
            let v = self.validate.unwrap_or_default();
            if v.count == 0 {
                return Err(LabError::config("validate.count", "must be at least 1"));
            }
            if !(v.tolerance >= 0.0) {
                return Err(LabError::config("validate.tolerance", "must be nonnegative"));
            }
            return Ok(Vec::new());
        }
        let model = self
            .model
            .clone()
            .ok_or_else(|| LabError::config("model", "required for this kind"))?;
        self.effective_plan().validate()?;
        if let Some(t) = self.threshold {
            crate::dynamics::eps_threshold_config(t).map_err(|e| LabError::config("threshold", e.to_string()))?;
        }
        if matches!(self.kind, Kind::Simulate | Kind::Compare) {
            if self.seeds.is_empty() {
                return Err(LabError::config("seeds", "at least one seed is required"));
            }
            self.stream_options().validate()?;
        }
        if self.kind == Kind::Sweep && self.axes.is_empty() {
            return Err(LabError::config("axes", "a sweep needs at least one axis"));
        }
        for (i, axis) in self.axes.iter().enumerate() {
            if !AXIS_NAMES.contains(&axis.name.as_str()) {
                return Err(LabError::config(
                    format!("axes[{i}].name"),
                    format!("unknown field `{}`; expected one of {}", axis.name, AXIS_NAMES.join(", ")),
                ));
            }
            if axis.values.is_empty() {
                return Err(LabError::config(format!("axes[{i}].values"), "must not be empty"));
            }
            if self.axes[..i].iter().any(|a| a.name == axis.name) {
                return Err(LabError::config(format!("axes[{i}].name"), "duplicate axis"));
            }
        }

        let default_init = InitList::One(InitSpec::Named(
            if self.kind == Kind::Simulate || self.kind == Kind::Compare {
                "random"
            } else {
                "paper-fig3"
            }
            .into(),
        ));
        let inits = self.init.as_ref().unwrap_or(&default_init).specs();
        if inits.is_empty() {
            return Err(LabError::config("init", "list must not be empty"));
        }

        let mut runs = Vec::new();
        let sizes: Vec<usize> = self.axes.iter().map(|a| a.values.len()).collect();
        let cells: usize = sizes.iter().product();
        for (init_idx, init) in inits.iter().enumerate() {
            for cell in 0..cells {
                let mut rem = cell;
                let mut picks = vec![0; sizes.len()];
                for d in (0..sizes.len()).rev() {
                    picks[d] = rem % sizes[d];
                    rem /= sizes[d];
                }
                let mut m = model.clone();
                let mut v = self.variant.clone();
                let mut coords = Vec::new();
                if inits.len() > 1 {
                    coords.push(("init".to_string(), init_idx as f64));
                }
                for (axis, &p) in self.axes.iter().zip(&picks) {
                    let value = axis.values[p];
                    apply_axis(&mut m, &mut v, &axis.name, value)?;
                    coords.push((axis.name.clone(), value));
                }
                m.validate()?;
                v.validate()?;
                let init = resolve_init(init, &m, &self.sim)?;
                runs.push(RunSpec {
                    index: runs.len(),
                    coords,
                    model: m,
                    variant: v,
                    init,
                });
            }
        }
        Ok(runs)
    }
}

fn json_field(e: &serde_json::Error) -> String {
    let msg = e.to_string();
    for marker in ["unknown field `", "missing field `"] {
        if let Some(pos) = msg.find(marker) {
            let rest = &msg[pos + marker.len()..];
            if let Some(end) = rest.find('`') {
                return rest[..end].to_string();
            }
        }
    }
    "config".to_string()
}

fn as_count(name: &str, value: f64) -> Result<usize> {
    if value >= 1.0 && value.fract() == 0.0 && value <= u32::MAX as f64 {
        Ok(value as usize)
    } else {
        Err(LabError::config(name, format!("axis value {value} is not a positive integer")))
    }
}

fn apply_axis(m: &mut ModelConfig, v: &mut VariantConfig, name: &str, value: f64) -> Result<()> {
    match name {
        "N" => m.n = as_count(name, value)?,
        "K" => m.k = as_count(name, value)?,
        "M" => m.m = as_count(name, value)?,
        "P" => m.p = as_count(name, value)?,
        "V" => m.v = as_count(name, value)?,
        "eta_w" => m.eta_w = value,
        "eta_J" => m.eta_j = value,
        "gamma" => v.gamma = value,
        "lambda" => v.lambda = value,
        "sigma_noise" => v.sigma_noise = value,
        _ => return Err(LabError::config(name, "not a sweepable field")),
    }
    Ok(())
}

/// A resolved initial condition.
#[derive(Debug, Clone)]
pub enum ResolvedInit {
    Overlaps(OrderParams),
    /// Simulator draw from `init_sim(seed)`, optionally matched to `Q = I/2`.
    Random { seed: u64, matched: bool },
}

impl ResolvedInit {
    /// The simulator state this initial condition describes.
    pub fn sim_state(&self, model: &ModelConfig, variant: &VariantConfig) -> Result<SimState> {
        match self {
            ResolvedInit::Overlaps(p) => SimState::with_overlaps(model, variant, p, 0),
            ResolvedInit::Random { seed, matched } => {
                let mut s = init_sim(model, variant, *seed)?;
                if *matched {
                    s.match_init()?;
                }
                Ok(s)
            }
        }
    }

    /// The overlaps the theory starts from.
    pub fn overlaps(&self, model: &ModelConfig, variant: &VariantConfig) -> Result<OrderParams> {
        match self {
            ResolvedInit::Overlaps(p) => Ok(p.clone()),
            ResolvedInit::Random { .. } => measure_order_params(&self.sim_state(model, variant)?),
        }
    }
}

fn matrix(field: &str, rows: &[Vec<f64>], shape: (usize, usize)) -> Result<DMatrix<f64>> {
    if rows.len() != shape.0 || rows.iter().any(|r| r.len() != shape.1) {
        return Err(LabError::config(
            format!("init.{field}"),
            format!("expected {}x{} matrix", shape.0, shape.1),
        ));
    }
    Ok(DMatrix::from_fn(shape.0, shape.1, |i, j| rows[i][j]))
}

fn resolve_init(spec: &InitSpec, m: &ModelConfig, sim: &SimSettings) -> Result<ResolvedInit> {
    match spec {
        InitSpec::Named(name) => match name.as_str() {
            "paper-fig3" => Ok(ResolvedInit::Overlaps(OrderParams::fig3_init(m.k, m.m))),
            "random" => Ok(ResolvedInit::Random {
                seed: sim.init_seed,
                matched: sim.matched_init,
            }),
            other => Err(LabError::config(
                "init",
                format!("unknown preset `{other}`; expected paper-fig3 or random"),
            )),
        },
        InitSpec::Explicit { q, r, t } => {
            let q = matrix("Q", q, (m.k, m.k))?;
            let r = matrix("R", r, (m.k, m.m))?;
            let t = matrix("T", t, (m.m, m.m))?;
            OrderParams::new(q, r, t)
                .map(ResolvedInit::Overlaps)
                .map_err(|e| LabError::config("init", e.to_string()))
        }
    }
}

/// One concrete run of an experiment.
#[derive(Debug, Clone)]
pub struct RunSpec {
    pub index: usize,
    pub coords: Vec<(String, f64)>,
    pub model: ModelConfig,
    pub variant: VariantConfig,
    pub init: ResolvedInit,
}
