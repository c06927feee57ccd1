//! Scenario execution: each subcommand runs the corresponding pipeline
//! against the configured model and persists CSV/JSON/SVG artifacts plus a
//! manifest into the output directory.

use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use nalgebra::DVector;
use serde_json::{json, Value};

use critflow::{
    build_atlas, builtin, check_consistency, cost, dissipation_localization, extract_limit,
    integrate, jump_windows, lusin_diagnostic, sample_test, sweep, Atlas, AtlasConfig,
    ComponentRef, CostConfig, CostOutcome, EnergyModel, FlowConfig, LimitEstimate,
    PerturbationMode, StepPolicy, SweepResult, Trajectory,
};
use critflow::flow::dissipation_measure;

use crate::config::{RunConfig, ScenarioKind};
use crate::plot::{branch_portrait, line_plot, Series};

#[derive(Debug)]
pub enum RunError {
    Config(String),
    Numerical(String),
}

impl std::fmt::Display for RunError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RunError::Config(m) => write!(f, "configuration error: {m}"),
            RunError::Numerical(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

pub struct Runner {
    pub config: RunConfig,
    pub out_dir: PathBuf,
    pub no_plots: bool,
    pub quiet: bool,
}

impl Runner {
    pub fn execute(&self) -> Result<(), RunError> {
        let started = Instant::now();
        let started_stamp = chrono::Utc::now().to_rfc3339();
        fs::create_dir_all(&self.out_dir)
            .map_err(|e| RunError::Config(format!("cannot create output dir: {e}")))?;

        let model = builtin(&self.config.model.name, &self.config.model.params)
            .map_err(|e| RunError::Config(e.to_string()))?;

        let outcome = match self.config.scenario.kind {
            ScenarioKind::Flow => self.run_flow(&model),
            ScenarioKind::Sweep => self.run_sweep(&model).map(|_| ()),
            ScenarioKind::Atlas => self.run_atlas(&model).map(|_| ()),
            ScenarioKind::Cost => self.run_cost(&model),
            ScenarioKind::Jumps => self.run_jumps(&model).map(|_| ()),
            ScenarioKind::Generic => self.run_generic(&model),
            ScenarioKind::Report => self.run_report(&model),
        };
        if let Err(e) = &outcome {
            let failure = json!({
                "scenario": self.config.scenario.kind.as_str(),
                "error": e.to_string(),
            });
            let _ = self.write_json("failure.json", &failure);
        }

        let manifest = json!({
            "config": serde_json::to_value(&self.config).unwrap(),
            "version": env!("CARGO_PKG_VERSION"),
            "timing": {
                "started": started_stamp,
                "wall_seconds": started.elapsed().as_secs_f64(),
            },
        });
        self.write_json("manifest.json", &manifest)?;
        outcome
    }

    fn note(&self, message: &str) {
        if !self.quiet {
            println!("{message}");
        }
    }

    fn write_json(&self, name: &str, value: &Value) -> Result<(), RunError> {
        let path = self.out_dir.join(name);
        let text = serde_json::to_string_pretty(value)
            .map_err(|e| RunError::Numerical(format!("serialize {name}: {e}")))?;
        fs::write(&path, text).map_err(|e| RunError::Numerical(format!("write {name}: {e}")))?;
        Ok(())
    }

    fn write_text(&self, name: &str, text: &str) -> Result<(), RunError> {
        fs::write(self.out_dir.join(name), text)
            .map_err(|e| RunError::Numerical(format!("write {name}: {e}")))
    }

    fn u0(&self, model: &EnergyModel) -> Result<DVector<f64>, RunError> {
        let raw = self.config.scenario.u0.as_ref().expect("validated");
        if raw.len() != model.dim() {
            return Err(RunError::Config(format!(
                "u0 has dimension {}, model expects {}",
                raw.len(),
                model.dim()
            )));
        }
        Ok(DVector::from_vec(raw.clone()))
    }

    fn atlas_config(&self, model: &EnergyModel) -> AtlasConfig {
        let s = &self.config.scenario;
        let rho = s.rho.unwrap_or(10.0);
        let t_grid = s.t_grid.unwrap_or(9);
        let seed_grid = s.seed_grid.unwrap_or(if model.dim() == 1 { 9 } else { 7 });
        let mut config = AtlasConfig::new(model, rho, t_grid, seed_grid);
        config.seed = self.config.seed ^ 0xa71a5;
        if let Some(window) = s.time_window {
            config.continuation.time_window = window;
        }
        config
    }

    fn cost_config(&self) -> CostConfig {
        CostConfig {
            rho: self.config.scenario.rho.unwrap_or(10.0),
            ..CostConfig::default()
        }
    }

    // ------------------------------------------------------------------
    // flow
    // ------------------------------------------------------------------

    fn run_flow(&self, model: &EnergyModel) -> Result<(), RunError> {
        let s = &self.config.scenario;
        let eps = s.epsilon.expect("validated");
        let step = s.step.unwrap_or_else(|| (1e-3f64).min(eps / 20.0));
        let flow_config = FlowConfig::new(eps, step);
        let trajectory = integrate(model, &flow_config, &self.u0(model)?)
            .map_err(|e| RunError::Numerical(e.to_string()))?;
        self.write_trajectory_csv("trajectory.csv", &trajectory)?;
        if !self.no_plots {
            self.write_text(
                "flow_states.svg",
                &states_plot(&trajectory, &format!("{} flow, eps = {eps}", model.name())),
            )?;
            self.write_text(
                "flow_energy.svg",
                &line_plot(
                    &format!("{} energy along the flow", model.name()),
                    "t",
                    "energy",
                    &[Series {
                        label: "E(t, u(t))".to_string(),
                        points: trajectory
                            .times
                            .iter()
                            .zip(&trajectory.energies)
                            .map(|(&t, &e)| (t, e))
                            .collect(),
                    }],
                    &[],
                ),
            )?;
        }
        self.note(&format!(
            "flow: {} nodes over [0, {}]",
            trajectory.len(),
            model.horizon()
        ));
        Ok(())
    }

    fn write_trajectory_csv(&self, name: &str, trajectory: &Trajectory) -> Result<(), RunError> {
        let mut buffer = Vec::new();
        trajectory
            .write_csv(&mut buffer)
            .map_err(|e| RunError::Numerical(format!("csv: {e}")))?;
        fs::write(self.out_dir.join(name), buffer)
            .map_err(|e| RunError::Numerical(format!("write {name}: {e}")))
    }

    // ------------------------------------------------------------------
    // sweep
    // ------------------------------------------------------------------

    fn run_sweep(&self, model: &EnergyModel) -> Result<SweepResult, RunError> {
        let s = &self.config.scenario;
        let epsilons = s.epsilons.clone().expect("validated");
        let mut policy = StepPolicy::default();
        if let Some(base) = s.base_step {
            policy.base_step = base;
        }
        let result = sweep(model, &self.u0(model)?, &epsilons, &policy);
        if result.trajectories.is_empty() {
            return Err(RunError::Numerical(format!(
                "all sweep runs failed: {:?}",
                result.failures
            )));
        }
        for (i, trajectory) in result.trajectories.iter().enumerate() {
            self.write_trajectory_csv(&format!("trajectory_{i:03}.csv"), trajectory)?;
        }
        let mut csv = String::from("epsilon,inside_mass,outside_mass,total_mass\n");
        for trajectory in &result.trajectories {
            let total = dissipation_measure(trajectory, (0.0, trajectory.horizon()));
            let inside: f64 = jump_windows(trajectory)
                .iter()
                .map(|&w| dissipation_measure(trajectory, w))
                .sum();
            csv.push_str(&format!(
                "{:.16e},{:.16e},{:.16e},{:.16e}\n",
                trajectory.epsilon,
                inside,
                total - inside,
                total
            ));
        }
        self.write_text("mu_mass.csv", &csv)?;
        if !self.no_plots {
            let series: Vec<Series> = result
                .trajectories
                .iter()
                .map(|trajectory| Series {
                    label: format!("eps = {}", trajectory.epsilon),
                    points: trajectory
                        .times
                        .iter()
                        .zip(&trajectory.states)
                        .map(|(&t, u)| (t, u[0]))
                        .collect(),
                })
                .collect();
            self.write_text(
                "sweep_states.svg",
                &line_plot(
                    &format!("{} sweep, first component", model.name()),
                    "t",
                    "u_1",
                    &series,
                    &[],
                ),
            )?;
        }
        if !result.failures.is_empty() {
            self.note(&format!("sweep: {} run(s) failed", result.failures.len()));
        }
        Ok(result)
    }

    // ------------------------------------------------------------------
    // atlas
    // ------------------------------------------------------------------

    fn run_atlas(&self, model: &EnergyModel) -> Result<Atlas, RunError> {
        let atlas = build_atlas(model, &self.atlas_config(model));
        self.write_json("atlas.json", &atlas.to_json())?;
        if let Some(slice_times) = &self.config.scenario.slice_times {
            let mut slices = Vec::new();
            for &t in slice_times {
                let comps = atlas.components_at(model, t);
                let lusin = lusin_diagnostic(model, &atlas, t);
                slices.push(json!({
                    "t": t,
                    "components": comps.iter().map(component_json).collect::<Vec<_>>(),
                    "lusin": serde_json::to_value(&lusin).unwrap(),
                }));
            }
            self.write_json("slices.json", &Value::Array(slices))?;
        }
        if !self.no_plots {
            let branches: Vec<(Vec<(f64, f64)>, bool)> = atlas
                .branches
                .iter()
                .map(|b| {
                    (
                        b.samples.iter().map(|s| (s.t, s.u[0])).collect(),
                        b.closed,
                    )
                })
                .collect();
            let folds: Vec<(f64, f64)> = atlas
                .branches
                .iter()
                .flat_map(|b| b.folds.iter().map(|&i| (b.samples[i].t, b.samples[i].u[0])))
                .collect();
            self.write_text(
                "atlas_portrait.svg",
                &branch_portrait(
                    &format!("{} critical branches", model.name()),
                    &branches,
                    &folds,
                ),
            )?;
        }
        let folds: usize = atlas.branches.iter().map(|b| b.folds.len()).sum();
        self.note(&format!(
            "atlas: {} branch(es), {} fold(s), coverage distance {:.2e}",
            atlas.branches.len(),
            folds,
            atlas.coverage_max_distance
        ));
        Ok(atlas)
    }

    // ------------------------------------------------------------------
    // cost
    // ------------------------------------------------------------------

    fn resolve_endpoint(
        &self,
        model: &EnergyModel,
        atlas: &Atlas,
        t: f64,
        raw: &[f64],
    ) -> Result<ComponentRef, RunError> {
        if raw.len() != model.dim() {
            return Err(RunError::Config(format!(
                "endpoint has dimension {}, model expects {}",
                raw.len(),
                model.dim()
            )));
        }
        let u = DVector::from_vec(raw.to_vec());
        let nearest = atlas
            .components_at(model, t)
            .into_iter()
            .min_by(|a, b| {
                (&a.representative - &u)
                    .norm()
                    .partial_cmp(&(&b.representative - &u).norm())
                    .unwrap()
            })
            .filter(|c| (&c.representative - &u).norm() <= 1e-3 * (1.0 + u.norm()));
        Ok(nearest.unwrap_or_else(|| ComponentRef::singleton(t, u)))
    }

    fn run_cost(&self, model: &EnergyModel) -> Result<(), RunError> {
        let s = &self.config.scenario;
        let t = s.t.expect("validated");
        let atlas = build_atlas(model, &self.atlas_config(model));
        let cost_config = self.cost_config();
        let a = self.resolve_endpoint(model, &atlas, t, s.u0.as_ref().expect("validated"))?;
        let b = self.resolve_endpoint(model, &atlas, t, s.u1.as_ref().expect("validated"))?;
        let outcome = cost(model, &atlas, t, &a, &b, &cost_config)
            .map_err(|e| RunError::Numerical(e.to_string()))?;
        let payload = match &outcome {
            CostOutcome::Reached(result) => {
                let mut witness = Vec::new();
                result
                    .curve
                    .write_csv(model, &mut witness)
                    .map_err(|e| RunError::Numerical(format!("witness csv: {e}")))?;
                fs::write(self.out_dir.join("witness.csv"), witness)
                    .map_err(|e| RunError::Numerical(format!("write witness: {e}")))?;
                json!({
                    "t": t,
                    "value": result.value,
                    "unreachable": false,
                    "lower_bound_gap": result.lower_bound_gap,
                    "cross_check_value": result.cross_check_value,
                    "endpoints": [component_json(&a), component_json(&b)],
                })
            }
            CostOutcome::Unreachable => json!({
                "t": t,
                "value": Value::Null,
                "unreachable": true,
                "endpoints": [component_json(&a), component_json(&b)],
            }),
        };
        self.write_json("cost.json", &payload)?;
        self.write_cost_matrix(model, &atlas, t, &cost_config)?;
        match outcome {
            CostOutcome::Reached(result) => self.note(&format!("cost: {}", result.value)),
            CostOutcome::Unreachable => self.note("cost: unreachable"),
        }
        Ok(())
    }

    fn write_cost_matrix(
        &self,
        model: &EnergyModel,
        atlas: &Atlas,
        t: f64,
        cost_config: &CostConfig,
    ) -> Result<(), RunError> {
        let comps = atlas.components_at(model, t);
        let mut fast = cost_config.clone();
        fast.cross_check = false;
        let mut matrix = Vec::new();
        for a in &comps {
            let mut row = Vec::new();
            for b in &comps {
                let value = match cost(model, atlas, t, a, b, &fast) {
                    Ok(CostOutcome::Reached(result)) => json!(result.value),
                    _ => Value::Null,
                };
                row.push(value);
            }
            matrix.push(Value::Array(row));
        }
        let payload = json!({
            "t": t,
            "components": comps.iter().map(component_json).collect::<Vec<_>>(),
            "matrix": matrix,
        });
        self.write_json("cost_matrix.json", &payload)
    }

    // ------------------------------------------------------------------
    // jumps
    // ------------------------------------------------------------------

    fn run_jumps(&self, model: &EnergyModel) -> Result<LimitEstimate, RunError> {
        let sweep_result = self.run_sweep(model)?;
        if sweep_result.trajectories.len() < 2 {
            return Err(RunError::Numerical(format!(
                "limit extraction needs at least two surviving trajectories; failures: {:?}",
                sweep_result.failures
            )));
        }
        let atlas = self.run_atlas(model)?;
        let limit = extract_limit(model, &atlas, &sweep_result, &self.cost_config());
        self.write_json("jumps.json", &limit.to_json())?;
        let localization = dissipation_localization(&sweep_result, &limit);
        let mut csv = String::from("epsilon,inside_mass,outside_mass,total_mass\n");
        for row in &localization.rows {
            csv.push_str(&format!(
                "{:.16e},{:.16e},{:.16e},{:.16e}\n",
                row.epsilon, row.inside_mass, row.outside_mass, row.total_mass
            ));
        }
        self.write_text("mu_table.csv", &csv)?;
        if !self.no_plots {
            let smallest = sweep_result.smallest();
            let markers: Vec<f64> = limit.jumps.iter().map(|j| j.t_certify).collect();
            self.write_text(
                "limit_energy.svg",
                &line_plot(
                    &format!("{} energy with jump markers", model.name()),
                    "t",
                    "energy",
                    &[Series {
                        label: format!("eps = {}", smallest.epsilon),
                        points: smallest
                            .times
                            .iter()
                            .zip(&smallest.energies)
                            .map(|(&t, &e)| (t, e))
                            .collect(),
                    }],
                    &markers,
                ),
            )?;
            let mass_points: Vec<(f64, f64)> = localization
                .rows
                .iter()
                .map(|r| (r.epsilon, r.inside_mass))
                .collect();
            self.write_text(
                "mu_vs_eps.svg",
                &line_plot(
                    "window dissipation mass vs eps",
                    "eps",
                    "inside mass",
                    &[Series {
                        label: "mu_eps(window)".to_string(),
                        points: mass_points,
                    }],
                    &[],
                ),
            )?;
        }
        self.note(&format!(
            "jumps: {} jump(s), bv residual {:.2e}, {} unresolved",
            limit.jumps.len(),
            limit.bv_balance_residual,
            limit.unresolved_jumps
        ));
        Ok(limit)
    }

    // ------------------------------------------------------------------
    // generic
    // ------------------------------------------------------------------

    fn run_generic(&self, model: &EnergyModel) -> Result<(), RunError> {
        let s = &self.config.scenario;
        let mode = match s.mode.as_deref() {
            Some("linear_quadratic") => PerturbationMode::LinearQuadratic,
            _ => PerturbationMode::Linear,
        };
        let report = sample_test(
            model,
            s.radius.unwrap_or(0.1),
            s.count.expect("validated"),
            self.config.seed,
            mode,
        );
        self.write_json("generic_report.json", &report.to_json())?;
        self.note(&format!(
            "generic: pass fraction {:.3} ({} inconclusive)",
            report.pass_fraction, report.inconclusive
        ));
        Ok(())
    }

    // ------------------------------------------------------------------
    // report: the composite pipeline
    // ------------------------------------------------------------------

    fn run_report(&self, model: &EnergyModel) -> Result<(), RunError> {
        let consistency = check_consistency(model, 200, self.config.seed, 10.0);
        self.write_json(
            "consistency.json",
            &json!({
                "passed": consistency.passed(),
                "samples_checked": consistency.samples_checked,
                "max_grad_rel_err": consistency.max_grad_rel_err,
                "max_power_rel_err": consistency.max_power_rel_err,
                "max_hess_rel_err": consistency.max_hess_rel_err,
                "min_convexity_margin": consistency.min_convexity_margin,
                "min_power_margin": consistency.min_power_margin,
                "min_gronwall_margin": consistency.min_gronwall_margin,
                "failures": consistency.failures,
            }),
        )?;
        let limit = self.run_jumps(model)?;
        let t_slice = limit.jumps.first().map(|j| j.t_certify).unwrap_or(0.0);
        let atlas = build_atlas(model, &self.atlas_config(model));
        self.write_cost_matrix(model, &atlas, t_slice, &self.cost_config())?;
        let summary = json!({
            "model": model.name(),
            "consistency_passed": consistency.passed(),
            "branches": atlas.branches.len(),
            "folds": atlas.branches.iter().map(|b| b.folds.len()).sum::<usize>(),
            "jumps": limit.jumps.len(),
            "unresolved_jumps": limit.unresolved_jumps,
            "bv_balance_residual": limit.bv_balance_residual,
            "cost_matrix_time": t_slice,
        });
        self.write_json("summary.json", &summary)?;
        Ok(())
    }
}

fn component_json(c: &ComponentRef) -> Value {
    json!({
        "kind": format!("{:?}", c.kind),
        "t": c.t,
        "representative": c.representative.iter().cloned().collect::<Vec<f64>>(),
        "component_id": c.component_id.as_ref().map(|id| serde_json::to_value(id).unwrap()),
    })
}

fn states_plot(trajectory: &Trajectory, title: &str) -> String {
    let d = trajectory.states[0].len().min(6);
    let series: Vec<Series> = (0..d)
        .map(|i| Series {
            label: format!("u_{}", i + 1),
            points: trajectory
                .times
                .iter()
                .zip(&trajectory.states)
                .map(|(&t, u)| (t, u[i]))
                .collect(),
        })
        .collect();
    line_plot(title, "t", "state", &series, &[])
}
