//! Vanishing-viscosity analysis: eps-sweeps, jump-window detection, limit
//! extraction with per-jump certification (energy drop, transition cost,
//! local dissipation mass), the balanced energy identity residual, the
//! dissipation localization report and the discrete graph-Hausdorff
//! diagnostic.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::Serialize;

use crate::atlas::{Atlas, ComponentKind, ComponentRef};
use crate::cost::{cost, CostConfig, CostOutcome};
use crate::energy::EnergyModel;
use crate::flow::{dissipation_measure, integrate, FlowConfig, Trajectory};

/// Step schedule of a sweep: `tau(eps) = min(base_step, eps/20)`.
#[derive(Debug, Clone)]
pub struct StepPolicy {
    pub base_step: f64,
    pub refine: bool,
}

impl Default for StepPolicy {
    fn default() -> Self {
        StepPolicy {
            base_step: 1e-3,
            refine: true,
        }
    }
}

impl StepPolicy {
    pub fn step_for(&self, epsilon: f64) -> f64 {
        self.base_step.min(epsilon / 20.0)
    }
}

/// A family of eps-flows from shared well-prepared data.
#[derive(Debug, Clone)]
pub struct SweepResult {
    /// Strictly decreasing; entries of failed runs are removed.
    pub epsilons: Vec<f64>,
    pub trajectories: Vec<Trajectory>,
    pub failures: Vec<(f64, String)>,
    pub u0: DVector<f64>,
}

impl SweepResult {
    pub fn smallest(&self) -> &Trajectory {
        self.trajectories.last().expect("nonempty sweep")
    }
}

/// Integrates one trajectory per eps (concurrently); failed runs are
/// recorded and excluded.
pub fn sweep(
    model: &EnergyModel,
    u0: &DVector<f64>,
    epsilons: &[f64],
    policy: &StepPolicy,
) -> SweepResult {
    assert!(
        epsilons.windows(2).all(|w| w[1] < w[0]),
        "epsilons must be strictly decreasing"
    );
    let runs: Vec<(f64, Result<Trajectory, String>)> = epsilons
        .par_iter()
        .map(|&eps| {
            let mut config = FlowConfig::new(eps, policy.step_for(eps));
            config.refine = policy.refine;
            (eps, integrate(model, &config, u0).map_err(|e| e.to_string()))
        })
        .collect();
    let mut result = SweepResult {
        epsilons: Vec::new(),
        trajectories: Vec::new(),
        failures: Vec::new(),
        u0: u0.clone(),
    };
    for (eps, run) in runs {
        match run {
            Ok(traj) => {
                result.epsilons.push(eps);
                result.trajectories.push(traj);
            }
            Err(message) => result.failures.push((eps, message)),
        }
    }
    result
}

// ---------------------------------------------------------------------------
// jump windows
// ---------------------------------------------------------------------------

fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Transition layers have `O(eps log 1/eps)` duration for nondegenerate
/// exits; windows are dilated by this half-width.
fn window_half_width(epsilon: f64, median_step: f64) -> f64 {
    (5.0 * epsilon * (1.0 / epsilon).ln()).max(20.0 * median_step)
}

/// Maximal intervals where the trajectory moves faster than 10x its median
/// speed (floored by the mean branch-following speed `TV / T`), dilated by
/// the layer half-width and merged.
pub fn jump_windows(traj: &Trajectory) -> Vec<(f64, f64)> {
    let speeds = traj.speeds();
    let positive: Vec<f64> = speeds[1..].to_vec();
    let tv: f64 = traj
        .states
        .windows(2)
        .map(|w| (&w[1] - &w[0]).norm())
        .sum();
    let horizon = traj.horizon() - traj.times[0];
    let scale = median(&positive).max(tv / horizon.max(1e-12));
    let threshold = 10.0 * scale;
    if threshold <= 0.0 {
        return Vec::new();
    }
    let taus = traj.steps();
    let hw = window_half_width(traj.epsilon, median(&taus[1..]));

    let mut raw: Vec<(f64, f64)> = Vec::new();
    let mut open: Option<(f64, f64)> = None;
    for k in 1..traj.len() {
        if speeds[k] > threshold {
            let (a, b) = (traj.times[k - 1], traj.times[k]);
            open = match open {
                Some((lo, _)) => Some((lo, b)),
                None => Some((a, b)),
            };
        } else if let Some(window) = open.take() {
            raw.push(window);
        }
    }
    if let Some(window) = open {
        raw.push(window);
    }

    let t0 = traj.times[0];
    let t1 = traj.horizon();
    let mut dilated: Vec<(f64, f64)> = raw
        .into_iter()
        .map(|(a, b)| ((a - hw).max(t0), (b + hw).min(t1)))
        .collect();
    dilated.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let mut merged: Vec<(f64, f64)> = Vec::new();
    for w in dilated {
        match merged.last_mut() {
            Some(last) if w.0 <= last.1 => last.1 = last.1.max(w.1),
            _ => merged.push(w),
        }
    }
    merged
}

/// Mass-weighted mean time of the dissipation density inside a window.
pub fn dissipation_barycenter(traj: &Trajectory, window: (f64, f64)) -> Option<f64> {
    let taus = traj.steps();
    let mut mass = 0.0;
    let mut moment = 0.0;
    for k in 1..traj.len() {
        if traj.times[k] >= window.0 && traj.times[k] <= window.1 {
            let m = taus[k] * traj.dissipation_density[k];
            mass += m;
            moment += m * traj.times[k];
        }
    }
    (mass > 0.0).then(|| moment / mass)
}

// ---------------------------------------------------------------------------
// limit extraction
// ---------------------------------------------------------------------------

/// Certification record of one jump of the extracted limit.
#[derive(Debug, Clone)]
pub struct JumpRecord {
    /// Dissipation-density barycenter of the window at the smallest eps.
    pub t_jump: f64,
    /// Fit `t(eps) = a + b eps^(2/3)` over the sweep (fold-layer scaling).
    pub t_jump_extrapolated: Option<f64>,
    /// Fit linear in eps, kept for comparison; the fold delay scales as
    /// eps^(2/3), so this one retains an O(eps^(2/3)) bias.
    pub t_jump_extrapolated_linear: Option<f64>,
    pub window: (f64, f64),
    /// Time at which both flanking components coexist and the jump is
    /// certified (the barycenter clamped into both existence intervals).
    pub t_certify: f64,
    pub left_component: ComponentRef,
    pub right_component: ComponentRef,
    pub energy_drop: f64,
    pub cost_value: f64,
    pub local_mu_mass: f64,
    pub resolved: bool,
}

/// The extracted vanishing-viscosity limit with its certificates.
#[derive(Debug, Clone)]
pub struct LimitEstimate {
    pub times: Vec<f64>,
    pub limit_states: Vec<DVector<f64>>,
    pub jumps: Vec<JumpRecord>,
    pub windows: Vec<(f64, f64)>,
    pub bv_balance_residual: f64,
    /// Reported constant in `slope <= C sqrt(eps)` off jump windows.
    pub off_jump_slope_constant: f64,
    /// Max off-window disagreement with the second-smallest eps trajectory.
    pub cross_validation_gap: f64,
    pub unresolved_jumps: usize,
}

fn in_windows(windows: &[(f64, f64)], t: f64) -> bool {
    windows.iter().any(|&(a, b)| t >= a && t <= b)
}

fn snap_component(
    atlas: &Atlas,
    model: &EnergyModel,
    previous: Option<&ComponentRef>,
    t: f64,
    u: &DVector<f64>,
) -> Option<ComponentRef> {
    let tol = 0.2 * (1.0 + u.norm());
    if let Some(prev) = previous {
        if let Some(tracked) = atlas.track_component(model, prev, t) {
            if (&tracked.representative - u).norm() <= tol {
                return Some(tracked);
            }
        }
    }
    atlas
        .components_at(model, t)
        .into_iter()
        .map(|c| {
            let dist = match atlas.loop_samples(&c) {
                Some(samples) => samples
                    .iter()
                    .map(|s| (&s.u - u).norm())
                    .fold(f64::INFINITY, f64::min),
                None => (&c.representative - u).norm(),
            };
            (dist, c)
        })
        .filter(|(d, _)| *d <= tol)
        .min_by(|(a, _), (b, _)| a.partial_cmp(b).unwrap())
        .map(|(_, c)| c)
}

/// Least squares fit `t = a + b * eps^q`, returning the intercept `a`.
fn extrapolate(points: &[(f64, f64)], q: f64) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|(eps, _)| eps.powf(q)).collect();
    let sx: f64 = xs.iter().sum();
    let sy: f64 = points.iter().map(|(_, t)| t).sum();
    let sxx: f64 = xs.iter().map(|x| x * x).sum();
    let sxy: f64 = xs.iter().zip(points).map(|(x, (_, t))| x * t).sum();
    let denom = n * sxx - sx * sx;
    if denom.abs() < 1e-30 {
        return None;
    }
    let b = (n * sxy - sx * sy) / denom;
    Some((sy - b * sx) / n)
}

/// Extracts the limit curve from the sweep: off jump windows the
/// smallest-eps states snapped to atlas components, inside windows the
/// flanking branch states switched at the certification time; every jump
/// certified by energy drop, transition cost and local dissipation mass,
/// and the balanced energy identity residual evaluated over off-window
/// sample pairs.
pub fn extract_limit(
    model: &EnergyModel,
    atlas: &Atlas,
    sweep: &SweepResult,
    cost_config: &CostConfig,
) -> LimitEstimate {
    assert!(
        sweep.trajectories.len() >= 2,
        "limit extraction needs at least two eps values"
    );
    let traj = sweep.smallest();
    let eps = traj.epsilon;
    let windows = jump_windows(traj);

    // per-window jump records
    let mut jumps: Vec<JumpRecord> = Vec::new();
    for &window in &windows {
        let t_jump = dissipation_barycenter(traj, window).unwrap_or(0.5 * (window.0 + window.1));
        let local_mu_mass = dissipation_measure(traj, window);

        // flanking states
        let before_idx = traj.times.iter().rposition(|&t| t < window.0);
        let after_idx = traj.times.iter().position(|&t| t > window.1);
        let (left, initial) = match before_idx {
            Some(k) => (
                snap_component(atlas, model, None, traj.times[k], &traj.states[k]),
                false,
            ),
            None => (
                Some(ComponentRef::singleton(0.0, sweep.u0.clone())),
                true,
            ),
        };
        let after_state = match after_idx {
            Some(k) => (traj.times[k], traj.states[k].clone()),
            None => (
                *traj.times.last().unwrap(),
                traj.states.last().unwrap().clone(),
            ),
        };
        let right = snap_component(atlas, model, None, after_state.0, &after_state.1);

        let (Some(left), Some(right)) = (left, right) else {
            jumps.push(JumpRecord {
                t_jump,
                t_jump_extrapolated: None,
                t_jump_extrapolated_linear: None,
                window,
                t_certify: t_jump,
                left_component: ComponentRef::singleton(t_jump, traj.state_at(window.0)),
                right_component: ComponentRef::singleton(t_jump, after_state.1.clone()),
                energy_drop: f64::NAN,
                cost_value: f64::NAN,
                local_mu_mass,
                resolved: false,
            });
            continue;
        };

        // certification time: clamp the barycenter into both existence
        // intervals; initial relaxations are certified at t = 0
        let t_certify = if initial {
            0.0
        } else {
            let (l_lo, l_hi) = atlas.component_time_interval(&left);
            let (r_lo, r_hi) = atlas.component_time_interval(&right);
            t_jump.clamp(l_lo.max(r_lo), l_hi.min(r_hi))
        };
        let left_cert = if initial {
            left.clone()
        } else {
            atlas
                .track_component(model, &left, t_certify)
                .unwrap_or(left.clone())
        };
        let right_cert = atlas
            .track_component(model, &right, t_certify)
            .unwrap_or(right.clone());

        let energy_drop = model.energy(t_certify, &left_cert.representative)
            - model.energy(t_certify, &right_cert.representative);
        let (cost_value, resolved) =
            match cost(model, atlas, t_certify, &left_cert, &right_cert, cost_config) {
                Ok(CostOutcome::Reached(result)) => (result.value, true),
                _ => (f64::NAN, false),
            };
        jumps.push(JumpRecord {
            t_jump,
            t_jump_extrapolated: None,
            t_jump_extrapolated_linear: None,
            window,
            t_certify,
            left_component: left_cert,
            right_component: right_cert,
            energy_drop,
            cost_value,
            local_mu_mass,
            resolved,
        });
    }

    // extrapolate jump times across the sweep: match each smaller-eps
    // barycenter list by window ordinal
    let per_eps: Vec<(f64, Vec<f64>)> = sweep
        .epsilons
        .iter()
        .zip(&sweep.trajectories)
        .map(|(&e, t)| {
            let ws = jump_windows(t);
            let bits = ws
                .iter()
                .filter_map(|&w| dissipation_barycenter(t, w))
                .collect::<Vec<_>>();
            (e, bits)
        })
        .collect();
    for (j, jump) in jumps.iter_mut().enumerate() {
        let points: Vec<(f64, f64)> = per_eps
            .iter()
            .filter_map(|(e, ts)| ts.get(j).map(|&t| (*e, t)))
            .collect();
        jump.t_jump_extrapolated = extrapolate(&points, 2.0 / 3.0);
        jump.t_jump_extrapolated_linear = extrapolate(&points, 1.0);
    }

    // limit states: snapped off windows, branch-switched inside
    let mut limit_states: Vec<DVector<f64>> = Vec::with_capacity(traj.len());
    let mut previous: Option<ComponentRef> = None;
    let mut slope_constant = 0.0f64;
    for k in 0..traj.len() {
        let t = traj.times[k];
        if !in_windows(&windows, t) {
            slope_constant = slope_constant.max(traj.slopes[k] / eps.sqrt());
        }
        let inside = windows
            .iter()
            .position(|&(a, b)| t >= a && t <= b)
            .map(|wi| &jumps[wi]);
        let state = match inside {
            Some(jump) if jump.resolved => {
                let side = if t <= jump.t_certify {
                    &jump.left_component
                } else {
                    &jump.right_component
                };
                match side.kind {
                    ComponentKind::NoncriticalSingleton => side.representative.clone(),
                    _ => {
                        let (lo, hi) = atlas.component_time_interval(side);
                        let tc = t.clamp(lo, hi);
                        atlas
                            .track_component(model, side, tc)
                            .map(|c| c.representative)
                            .unwrap_or_else(|| side.representative.clone())
                    }
                }
            }
            _ => match snap_component(atlas, model, previous.as_ref(), t, &traj.states[k]) {
                Some(c) => {
                    let u = c.representative.clone();
                    previous = Some(c);
                    u
                }
                None => traj.states[k].clone(),
            },
        };
        limit_states.push(state);
    }

    // balanced energy identity residual over off-window sample pairs
    let unresolved = jumps.iter().filter(|j| !j.resolved).count();
    let taus = traj.steps();
    let mut work = vec![0.0; traj.len()];
    for k in 1..traj.len() {
        work[k] = work[k - 1] + taus[k] * model.power(traj.times[k], &limit_states[k]);
    }
    let energies: Vec<f64> = (0..traj.len())
        .map(|k| model.energy(traj.times[k], &limit_states[k]))
        .collect();
    let off_window: Vec<usize> = (0..traj.len())
        .filter(|&k| !in_windows(&windows, traj.times[k]))
        .collect();
    let stride = (off_window.len() / 120).max(1);
    let probes: Vec<usize> = off_window.into_iter().step_by(stride).collect();
    let mut residual = 0.0f64;
    if unresolved == 0 {
        for (a, &i) in probes.iter().enumerate() {
            for &j in probes.iter().skip(a + 1) {
                let (s, t) = (traj.times[i], traj.times[j]);
                let jump_sum: f64 = jumps
                    .iter()
                    .filter(|jr| jr.t_certify > s && jr.t_certify < t)
                    .map(|jr| jr.cost_value)
                    .sum();
                let defect =
                    jump_sum + energies[j] - energies[i] - (work[j] - work[i]);
                residual = residual.max(defect.abs());
            }
        }
    } else {
        residual = f64::NAN;
    }

    // cross-validation against the next eps, off the union of both window
    // sets
    let second = &sweep.trajectories[sweep.trajectories.len() - 2];
    let mut all_windows = windows.clone();
    all_windows.extend(jump_windows(second));
    let mut gap = 0.0f64;
    for k in (0..traj.len()).step_by((traj.len() / 200).max(1)) {
        let t = traj.times[k];
        if !in_windows(&all_windows, t) {
            gap = gap.max((&traj.states[k] - second.state_at(t)).norm());
        }
    }

    LimitEstimate {
        times: traj.times.clone(),
        limit_states,
        jumps,
        windows,
        bv_balance_residual: residual,
        off_jump_slope_constant: slope_constant,
        cross_validation_gap: gap,
        unresolved_jumps: unresolved,
    }
}

// ---------------------------------------------------------------------------
// dissipation localization
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct LocalizationRow {
    pub epsilon: f64,
    pub inside_mass: f64,
    pub outside_mass: f64,
    pub total_mass: f64,
}

/// Per-eps split of the dissipation measure into the trajectory's own jump
/// windows vs their complement, against the summed limit jump costs.
#[derive(Debug, Clone, Serialize)]
pub struct LocalizationReport {
    pub rows: Vec<LocalizationRow>,
    pub limit_cost_total: f64,
    /// inside mass at the smallest eps over the summed jump costs.
    pub final_inside_ratio: f64,
}

pub fn dissipation_localization(sweep: &SweepResult, limit: &LimitEstimate) -> LocalizationReport {
    let mut rows = Vec::new();
    for traj in &sweep.trajectories {
        let total = dissipation_measure(traj, (traj.times[0], traj.horizon()));
        let windows = jump_windows(traj);
        let inside: f64 = windows
            .iter()
            .map(|&w| dissipation_measure(traj, w))
            .sum();
        rows.push(LocalizationRow {
            epsilon: traj.epsilon,
            inside_mass: inside,
            outside_mass: total - inside,
            total_mass: total,
        });
    }
    let limit_cost_total: f64 = limit
        .jumps
        .iter()
        .filter(|j| j.resolved)
        .map(|j| j.cost_value)
        .sum();
    let final_inside_ratio = rows
        .last()
        .map(|r| {
            if limit_cost_total > 0.0 {
                r.inside_mass / limit_cost_total
            } else if r.inside_mass == 0.0 {
                1.0
            } else {
                f64::INFINITY
            }
        })
        .unwrap_or(f64::NAN);
    LocalizationReport {
        rows,
        limit_cost_total,
        final_inside_ratio,
    }
}

// ---------------------------------------------------------------------------
// graph Hausdorff diagnostic
// ---------------------------------------------------------------------------

/// Symmetric Hausdorff distance between the discrete graphs
/// `{(t_k, u_k)}` of two trajectories, in the product metric
/// `max(|dt|, |du|)`. A discrete stand-in for graph convergence across the
/// sweep, meaningful even where pointwise convergence is delicate near
/// jumps.
pub fn graph_hausdorff(a: &Trajectory, b: &Trajectory) -> f64 {
    let one_sided = |from: &Trajectory, to: &Trajectory| -> f64 {
        let mut worst = 0.0f64;
        for k in 0..from.len() {
            let mut best = f64::INFINITY;
            for j in 0..to.len() {
                let d = (from.times[k] - to.times[j])
                    .abs()
                    .max((&from.states[k] - &to.states[j]).norm());
                if d < best {
                    best = d;
                }
            }
            worst = worst.max(best);
        }
        worst
    };
    one_sided(a, b).max(one_sided(b, a))
}

// ---------------------------------------------------------------------------
// JSON export
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct JumpExport {
    t_jump: f64,
    t_jump_extrapolated: Option<f64>,
    t_jump_extrapolated_linear: Option<f64>,
    window: (f64, f64),
    t_certify: f64,
    left_state: Vec<f64>,
    right_state: Vec<f64>,
    energy_drop: f64,
    cost_value: f64,
    local_mu_mass: f64,
    resolved: bool,
}

#[derive(Serialize)]
struct LimitExport {
    times: Vec<f64>,
    states: Vec<Vec<f64>>,
    jumps: Vec<JumpExport>,
    windows: Vec<(f64, f64)>,
    bv_balance_residual: f64,
    off_jump_slope_constant: f64,
    cross_validation_gap: f64,
    unresolved_jumps: usize,
}

impl LimitEstimate {
    pub fn to_json(&self) -> serde_json::Value {
        let export = LimitExport {
            times: self.times.clone(),
            states: self
                .limit_states
                .iter()
                .map(|u| u.iter().cloned().collect())
                .collect(),
            jumps: self
                .jumps
                .iter()
                .map(|j| JumpExport {
                    t_jump: j.t_jump,
                    t_jump_extrapolated: j.t_jump_extrapolated,
                    t_jump_extrapolated_linear: j.t_jump_extrapolated_linear,
                    window: j.window,
                    t_certify: j.t_certify,
                    left_state: j.left_component.representative.iter().cloned().collect(),
                    right_state: j.right_component.representative.iter().cloned().collect(),
                    energy_drop: j.energy_drop,
                    cost_value: j.cost_value,
                    local_mu_mass: j.local_mu_mass,
                    resolved: j.resolved,
                })
                .collect(),
            windows: self.windows.clone(),
            bv_balance_residual: self.bv_balance_residual,
            off_jump_slope_constant: self.off_jump_slope_constant,
            cross_validation_gap: self.cross_validation_gap,
            unresolved_jumps: self.unresolved_jumps,
        };
        serde_json::to_value(export).expect("limit export is serializable")
    }
}
