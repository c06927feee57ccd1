//! Run configuration: a TOML (or JSON) file maps onto [`RunConfig`], which
//! is validated against the requested scenario before anything runs.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub name: String,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Flow,
    Sweep,
    Atlas,
    Cost,
    Jumps,
    Generic,
    Report,
}

impl ScenarioKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ScenarioKind::Flow => "flow",
            ScenarioKind::Sweep => "sweep",
            ScenarioKind::Atlas => "atlas",
            ScenarioKind::Cost => "cost",
            ScenarioKind::Jumps => "jumps",
            ScenarioKind::Generic => "generic",
            ScenarioKind::Report => "report",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub kind: ScenarioKind,
    /// Initial state for flow/sweep/jumps/report; endpoint A for cost.
    pub u0: Option<Vec<f64>>,
    /// Endpoint B for cost.
    pub u1: Option<Vec<f64>>,
    /// Viscosity for `flow`.
    pub epsilon: Option<f64>,
    /// Viscosity schedule for sweep/jumps/report.
    pub epsilons: Option<Vec<f64>>,
    /// Time step for `flow` (default `min(1e-3, eps/20)`).
    pub step: Option<f64>,
    /// Base step of the sweep schedule `tau(eps) = min(base_step, eps/20)`.
    pub base_step: Option<f64>,
    /// Sublevel bound for atlas-backed scenarios.
    pub rho: Option<f64>,
    pub t_grid: Option<usize>,
    pub seed_grid: Option<usize>,
    /// Atlas chart window override (defaults to [-T, T]).
    pub time_window: Option<(f64, f64)>,
    /// Frozen process time for `cost` and slice exports.
    pub t: Option<f64>,
    /// Perturbation ball radius for `generic`.
    pub radius: Option<f64>,
    /// Sample count for `generic`.
    pub count: Option<usize>,
    /// `linear` or `linear_quadratic` for `generic`.
    pub mode: Option<String>,
    /// Times at which component slices are exported by `atlas`.
    pub slice_times: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub scenario: ScenarioConfig,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output_dir: String,
}

fn default_seed() -> u64 {
    0
}

fn default_output() -> String {
    "critflow-out".to_string()
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let parsed = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => serde_json::from_str::<RunConfig>(&text)
                .map_err(|e| anyhow!("JSON config: {e}"))?,
            _ => toml::from_str::<RunConfig>(&text).map_err(|e| anyhow!("TOML config: {e}"))?,
        };
        parsed.validate()?;
        Ok(parsed)
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.scenario;
        match s.kind {
            ScenarioKind::Flow => {
                let eps = s.epsilon.ok_or_else(|| anyhow!("flow needs `epsilon`"))?;
                if eps <= 0.0 {
                    bail!("epsilon must be positive");
                }
                if s.step.map_or(false, |v| v <= 0.0) {
                    bail!("step must be positive");
                }
                require_u0(s)?;
            }
            ScenarioKind::Sweep | ScenarioKind::Jumps | ScenarioKind::Report => {
                let eps = s
                    .epsilons
                    .as_ref()
                    .ok_or_else(|| anyhow!("{} needs `epsilons`", s.kind.as_str()))?;
                if eps.len() < 2 {
                    bail!("need at least two epsilons");
                }
                if !eps.windows(2).all(|w| w[1] < w[0]) {
                    bail!("epsilons must be strictly decreasing");
                }
                if eps.iter().any(|e| *e <= 0.0) {
                    bail!("epsilons must be positive");
                }
                if s.base_step.map_or(false, |v| v <= 0.0) {
                    bail!("base_step must be positive");
                }
                require_u0(s)?;
            }
            ScenarioKind::Atlas => {}
            ScenarioKind::Cost => {
                require_u0(s)?;
                if s.u1.as_ref().map_or(true, |u| u.is_empty()) {
                    bail!("cost needs `u1`");
                }
                if s.t.is_none() {
                    bail!("cost needs `t`");
                }
            }
            ScenarioKind::Generic => {
                let count = s.count.ok_or_else(|| anyhow!("generic needs `count`"))?;
                if count == 0 {
                    bail!("count must be at least 1");
                }
                if s.radius.map_or(true, |r| r < 0.0) {
                    bail!("generic needs a nonnegative `radius`");
                }
                if let Some(mode) = &s.mode {
                    if mode != "linear" && mode != "linear_quadratic" {
                        bail!("mode must be `linear` or `linear_quadratic`");
                    }
                }
            }
        }
        if s.rho.map_or(false, |r| r <= 1.0) {
            bail!("rho must exceed 1");
        }
        if s.time_window.map_or(false, |(lo, hi)| lo >= hi) {
            bail!("time_window must be an increasing pair");
        }
        Ok(())
    }
}

fn require_u0(s: &ScenarioConfig) -> Result<()> {
    if s.u0.as_ref().map_or(true, |u| u.is_empty()) {
        bail!("scenario `{}` needs a nonempty `u0`", s.kind.as_str());
    }
    Ok(())
}
