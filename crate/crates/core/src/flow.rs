//! Implicit-Euler integration of the singularly perturbed gradient flow
//! `eps u' + DE(t,u) = 0` with the discrete energy-dissipation bookkeeping:
//! per-node slope, power and dissipation density, the identity residual,
//! and window masses of the discrete dissipation measure.

use nalgebra::DVector;
use thiserror::Error;

use crate::energy::EnergyModel;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("step {step} (t={t:.6}): Newton stalled with residual {residual:.3e}")]
    NewtonDivergence { step: usize, t: f64, residual: f64 },
    #[error("step bound violated: step {step:.3e} >= 2*eps/lambda = {bound:.3e}")]
    StepBound { step: f64, bound: f64 },
    #[error("initial energy is not finite at u0")]
    BadInitialState,
}

/// Configuration of the implicit (proximal) Euler scheme.
#[derive(Debug, Clone)]
pub struct FlowConfig {
    pub epsilon: f64,
    /// Base uniform time step; refined near fast transitions when `refine`
    /// is set.
    pub step: f64,
    pub newton_tol: f64,
    pub newton_max_iter: usize,
    /// Halve the step while the displacement exceeds 10x the running median
    /// step displacement. Keeps the dissipation localization sharp across
    /// jump layers.
    pub refine: bool,
}

impl FlowConfig {
    pub fn new(epsilon: f64, step: f64) -> Self {
        assert!(epsilon > 0.0 && step > 0.0);
        FlowConfig {
            epsilon,
            step,
            newton_tol: 1e-10,
            newton_max_iter: 50,
            refine: true,
        }
    }

    fn validate(&self, model: &EnergyModel) -> Result<(), FlowError> {
        let lambda = model.lambda_bound();
        if lambda > 0.0 {
            let bound = 2.0 * self.epsilon / lambda;
            if self.step >= bound {
                return Err(FlowError::StepBound {
                    step: self.step,
                    bound,
                });
            }
        }
        Ok(())
    }
}

/// A time-discretized trajectory of the eps-flow with its per-node
/// energy-dissipation record. `dissipation_density[k]` is
/// `eps/2 |(u_k - u_{k-1})/tau_k|^2 + 1/(2 eps) |DE(t_k,u_k)|^2`
/// (zero velocity part at `k = 0`).
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub epsilon: f64,
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub energies: Vec<f64>,
    pub slopes: Vec<f64>,
    pub powers: Vec<f64>,
    pub dissipation_density: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn horizon(&self) -> f64 {
        *self.times.last().unwrap()
    }

    /// Step sizes `tau_k = t_k - t_{k-1}` (index 0 unused, kept 0).
    pub fn steps(&self) -> Vec<f64> {
        let mut tau = vec![0.0; self.times.len()];
        for k in 1..self.times.len() {
            tau[k] = self.times[k] - self.times[k - 1];
        }
        tau
    }

    /// Node speeds `|u_k - u_{k-1}| / tau_k` (zero at the first node).
    pub fn speeds(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.times.len()];
        for k in 1..self.times.len() {
            let tau = self.times[k] - self.times[k - 1];
            v[k] = (&self.states[k] - &self.states[k - 1]).norm() / tau;
        }
        v
    }

    /// Point evaluation record at a node.
    pub fn sample(&self, model: &crate::energy::EnergyModel, k: usize) -> crate::energy::EnergySample {
        crate::energy::EnergySample::at(model, self.times[k], self.states[k].clone())
    }

    /// State at time `t` by linear interpolation between nodes.
    pub fn state_at(&self, t: f64) -> DVector<f64> {
        if t <= self.times[0] {
            return self.states[0].clone();
        }
        if t >= *self.times.last().unwrap() {
            return self.states.last().unwrap().clone();
        }
        let k = match self
            .times
            .binary_search_by(|probe| probe.partial_cmp(&t).unwrap())
        {
            Ok(i) => return self.states[i].clone(),
            Err(i) => i,
        };
        let (t0, t1) = (self.times[k - 1], self.times[k]);
        let w = (t - t0) / (t1 - t0);
        &self.states[k - 1] * (1.0 - w) + &self.states[k] * w
    }

    /// CSV export: `t, u_1..u_d, energy, slope, power, dissipation_density`,
    /// 17 significant digits.
    pub fn write_csv<W: std::io::Write>(&self, mut out: W) -> std::io::Result<()> {
        let d = self.states[0].len();
        let mut header = String::from("t");
        for i in 1..=d {
            header.push_str(&format!(",u_{i}"));
        }
        header.push_str(",energy,slope,power,dissipation_density");
        writeln!(out, "{header}")?;
        for k in 0..self.len() {
            let mut line = format!("{:.16e}", self.times[k]);
            for i in 0..d {
                line.push_str(&format!(",{:.16e}", self.states[k][i]));
            }
            line.push_str(&format!(
                ",{:.16e},{:.16e},{:.16e},{:.16e}",
                self.energies[k], self.slopes[k], self.powers[k], self.dissipation_density[k]
            ));
            writeln!(out, "{line}")?;
        }
        Ok(())
    }
}

/// One implicit Euler step: solves `eps (u - u_prev)/tau + DE(t_next, u) = 0`
/// by damped Newton from `u_prev`.
fn implicit_step(
    model: &EnergyModel,
    config: &FlowConfig,
    u_prev: &DVector<f64>,
    t_next: f64,
    tau: f64,
    step_index: usize,
) -> Result<DVector<f64>, FlowError> {
    let eps = config.epsilon;
    let residual = |u: &DVector<f64>| (u - u_prev) * (eps / tau) + model.gradient(t_next, u);
    let mut u = u_prev.clone();
    let mut res = residual(&u);
    let mut res_norm = res.norm();
    for _ in 0..config.newton_max_iter {
        if res_norm <= config.newton_tol {
            return Ok(u);
        }
        let mut jac = model.hessian(t_next, &u);
        for i in 0..jac.nrows() {
            jac[(i, i)] += eps / tau;
        }
        let delta = match jac.clone().lu().solve(&(-&res)) {
            Some(d) => d,
            None => jac
                .svd(true, true)
                .solve(&(-&res), 1e-14)
                .map_err(|_| FlowError::NewtonDivergence {
                    step: step_index,
                    t: t_next,
                    residual: res_norm,
                })?,
        };
        // damping: halve the update while the residual does not decrease
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let candidate = &u + &delta * alpha;
            let cand_res = residual(&candidate);
            let cand_norm = cand_res.norm();
            if cand_norm < res_norm {
                u = candidate;
                res = cand_res;
                res_norm = cand_norm;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            return Err(FlowError::NewtonDivergence {
                step: step_index,
                t: t_next,
                residual: res_norm,
            });
        }
    }
    if res_norm <= config.newton_tol {
        Ok(u)
    } else {
        Err(FlowError::NewtonDivergence {
            step: step_index,
            t: t_next,
            residual: res_norm,
        })
    }
}

/// Integrates the perturbed flow from `u0` over `[0, horizon]`.
///
/// Each node solves the incremental problem
/// `eps (u_{k+1} - u_k)/tau + DE(t_{k+1}, u_{k+1}) = 0`; under the step
/// bound `tau < 2 eps / lambda` the problem is strictly convex, so the
/// discrete energy is nonincreasing for autonomous models.
pub fn integrate(
    model: &EnergyModel,
    config: &FlowConfig,
    u0: &DVector<f64>,
) -> Result<Trajectory, FlowError> {
    config.validate(model)?;
    let e0 = model.energy(0.0, u0);
    if !e0.is_finite() {
        return Err(FlowError::BadInitialState);
    }

    let eps = config.epsilon;
    let horizon = model.horizon();
    let mut times = vec![0.0];
    let mut states = vec![u0.clone()];
    let mut energies = vec![e0];
    let mut slopes = vec![model.slope(0.0, u0)];
    let mut powers = vec![model.power(0.0, u0)];
    let mut densities = vec![0.5 / eps * slopes[0] * slopes[0]];

    // running displacement history at base resolution for the refinement
    // trigger
    let mut base_disps: Vec<f64> = Vec::new();
    let max_halvings = 6;

    let mut t = 0.0;
    let mut step_index = 0;
    while t < horizon - 1e-12 {
        let base_tau = config.step.min(horizon - t);
        let u_prev = states.last().unwrap().clone();

        // decide the sub-step count for this base interval
        let mut halvings = 0;
        let mut accepted: Vec<(f64, DVector<f64>)> = Vec::new();
        loop {
            let pieces = 1usize << halvings;
            let tau = base_tau / pieces as f64;
            accepted.clear();
            let mut u = u_prev.clone();
            let mut ok = true;
            let mut max_disp = 0.0f64;
            for j in 1..=pieces {
                let t_next = t + base_tau * j as f64 / pieces as f64;
                match implicit_step(model, config, &u, t_next, tau, step_index) {
                    Ok(next) => {
                        max_disp = max_disp.max((&next - &u).norm());
                        u = next.clone();
                        accepted.push((t_next, next));
                    }
                    Err(e) => {
                        if halvings >= max_halvings {
                            return Err(e);
                        }
                        ok = false;
                        break;
                    }
                }
            }
            if ok {
                let median = median_of(&base_disps);
                let fast = config.refine
                    && base_disps.len() >= 16
                    && median > 0.0
                    && max_disp > 10.0 * median;
                if fast && halvings < max_halvings {
                    halvings += 1;
                    continue;
                }
                break;
            }
            halvings += 1;
        }

        let total_disp: f64 = {
            let last = &accepted.last().unwrap().1;
            (last - &u_prev).norm()
        };
        base_disps.push(total_disp);

        for (t_next, u_next) in accepted.drain(..) {
            let tau = t_next - *times.last().unwrap();
            let velocity = (&u_next - states.last().unwrap()).norm() / tau;
            let slope = model.slope(t_next, &u_next);
            let energy = model.energy(t_next, &u_next);
            if !energy.is_finite() {
                return Err(FlowError::NewtonDivergence {
                    step: step_index,
                    t: t_next,
                    residual: f64::INFINITY,
                });
            }
            times.push(t_next);
            energies.push(energy);
            slopes.push(slope);
            powers.push(model.power(t_next, &u_next));
            densities.push(0.5 * eps * velocity * velocity + 0.5 / eps * slope * slope);
            states.push(u_next);
        }
        t += base_tau;
        step_index += 1;
    }

    Ok(Trajectory {
        epsilon: eps,
        times,
        states,
        energies,
        slopes,
        powers,
        dissipation_density: densities,
    })
}

fn median_of(values: &[f64]) -> f64 {
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

/// Discrete residual of the energy-dissipation identity
/// `int (eps/2 |u'|^2 + 1/(2 eps) |DE|^2) + E(t) = E(0) + int P`:
/// returns `max_k | sum_{j<=k} tau_j d_j + E_k - E_0 - sum_{j<=k} tau_j P_j |`.
/// First order in the step for the smooth corpus.
pub fn energy_identity_residual(model: &EnergyModel, traj: &Trajectory) -> f64 {
    let _ = model;
    let tau = traj.steps();
    let mut diss = 0.0;
    let mut work = 0.0;
    let mut worst = 0.0f64;
    for k in 1..traj.len() {
        diss += tau[k] * traj.dissipation_density[k];
        work += tau[k] * traj.powers[k];
        let residual = (diss + traj.energies[k] - traj.energies[0] - work).abs();
        worst = worst.max(residual);
    }
    worst
}

/// Mass of the discrete dissipation measure `mu_eps` in the window:
/// `sum tau_k d_k` over nodes with `t_k` in the window.
pub fn dissipation_measure(traj: &Trajectory, window: (f64, f64)) -> f64 {
    let (a, b) = window;
    if b <= a {
        return 0.0;
    }
    let tau = traj.steps();
    let mut mass = 0.0;
    for k in 1..traj.len() {
        if traj.times[k] >= a && traj.times[k] <= b {
            mass += tau[k] * traj.dissipation_density[k];
        }
    }
    mass
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energy::builtin;
    use approx::assert_relative_eq;
    use std::collections::BTreeMap;

    fn bowl() -> EnergyModel {
        builtin("quadratic_bowl", &BTreeMap::new()).unwrap()
    }

    fn tilted() -> EnergyModel {
        builtin("tilted_double_well", &BTreeMap::new()).unwrap()
    }

    #[test]
    fn bowl_tracks_exponential_decay() {
        // oracle: the closed-form solution u(t) = e^{-t/eps} u0
        let model = bowl();
        let config = FlowConfig::new(0.1, 1e-4);
        let traj = integrate(&model, &config, &DVector::from_element(1, 1.0)).unwrap();
        let mut worst = 0.0f64;
        for k in 0..traj.len() {
            let exact = (-traj.times[k] / 0.1).exp();
            worst = worst.max((traj.states[k][0] - exact).abs());
        }
        assert!(worst < 1e-3, "max error {worst}");
    }

    #[test]
    fn stationary_point_stays_put() {
        let model = bowl();
        let config = FlowConfig::new(0.05, 1e-3);
        let traj = integrate(&model, &config, &DVector::zeros(1)).unwrap();
        for state in &traj.states {
            assert_eq!(state[0], 0.0);
        }
        assert_eq!(energy_identity_residual(&model, &traj), 0.0);
        assert_eq!(dissipation_measure(&traj, (0.0, 1.0)), 0.0);
    }

    #[test]
    fn tilted_well_follows_left_branch() {
        // oracle: left root of u^3 - u = t by Newton per node
        let model = tilted();
        let config = FlowConfig::new(0.01, 1e-4);
        let traj = integrate(&model, &config, &DVector::from_element(1, -1.0)).unwrap();
        let idx = traj
            .times
            .iter()
            .position(|&t| (t - 0.30).abs() < 5e-5)
            .unwrap();
        let mut root = -1.0f64;
        for _ in 0..60 {
            let f = root * root * root - root - 0.30;
            root -= f / (3.0 * root * root - 1.0);
        }
        assert!(
            (traj.states[idx][0] - root).abs() < 0.05,
            "state {} vs branch root {root}",
            traj.states[idx][0]
        );
    }

    #[test]
    fn residual_is_first_order() {
        let model = bowl();
        let run = |step: f64| {
            let config = FlowConfig::new(0.1, step);
            let traj = integrate(&model, &config, &DVector::from_element(1, 1.0)).unwrap();
            energy_identity_residual(&model, &traj)
        };
        let coarse = run(1e-3);
        let fine = run(5e-4);
        assert!(coarse < 5e-3, "coarse residual {coarse}");
        assert!(fine <= 0.6 * coarse, "fine {fine} vs coarse {coarse}");
    }

    #[test]
    fn residual_halves_across_smooth_corpus() {
        for (name, u0) in [
            ("tilted_double_well", DVector::from_element(1, -1.0)),
            ("double_well_2d", DVector::from_vec(vec![-1.0, 0.4])),
            ("mexican_hat", DVector::from_vec(vec![0.3, 0.1])),
        ] {
            let model = builtin(name, &BTreeMap::new()).unwrap();
            let run = |step: f64| {
                let config = FlowConfig::new(0.05, step);
                let traj = integrate(&model, &config, &u0).unwrap();
                energy_identity_residual(&model, &traj)
            };
            let coarse = run(2e-4);
            let fine = run(1e-4);
            assert!(
                fine <= 0.6 * coarse,
                "{name}: fine {fine} vs coarse {coarse}"
            );
        }
    }

    #[test]
    fn tilted_residual_small() {
        let model = tilted();
        let config = FlowConfig::new(0.05, 1e-4);
        let traj = integrate(&model, &config, &DVector::from_element(1, -1.0)).unwrap();
        let residual = energy_identity_residual(&model, &traj);
        assert!(residual < 1e-3, "residual {residual}");
    }

    #[test]
    fn bowl_dissipation_matches_closed_form() {
        // total dissipated energy equals E(0,1) - E(T, u(T)) = (1 - e^{-2T/eps})/2
        let model = bowl();
        let config = FlowConfig::new(0.1, 1e-4);
        let traj = integrate(&model, &config, &DVector::from_element(1, 1.0)).unwrap();
        let mass = dissipation_measure(&traj, (0.0, model.horizon()));
        let exact = 0.5 * (1.0 - (-2.0 * model.horizon() / 0.1).exp());
        assert_relative_eq!(mass, exact, max_relative = 0.01);
    }

    #[test]
    fn autonomous_energy_monotone() {
        let model = bowl();
        let config = FlowConfig::new(0.07, 1e-3);
        let traj = integrate(&model, &config, &DVector::from_element(1, 2.0)).unwrap();
        for k in 1..traj.len() {
            assert!(traj.energies[k] <= traj.energies[k - 1] + 1e-12);
        }
    }

    #[test]
    fn young_inequality_bookkeeping() {
        // sum tau slope_k |du|/tau <= sum tau d_k along any trajectory
        for (model, eps) in [(bowl(), 0.1), (tilted(), 0.02)] {
            let config = FlowConfig::new(eps, 1e-3);
            let traj = integrate(&model, &config, &DVector::from_element(1, -1.0)).unwrap();
            let tau = traj.steps();
            let mut lhs = 0.0;
            let mut rhs = 0.0;
            for k in 1..traj.len() {
                let v = (&traj.states[k] - &traj.states[k - 1]).norm() / tau[k];
                lhs += tau[k] * traj.slopes[k] * v;
                rhs += tau[k] * traj.dissipation_density[k];
            }
            assert!(lhs <= rhs + 1e-10, "{} vs {}", lhs, rhs);
        }
    }

    #[test]
    fn discrete_gronwall_bound() {
        let model = tilted();
        let config = FlowConfig::new(0.05, 1e-3);
        let traj = integrate(&model, &config, &DVector::from_element(1, -1.0)).unwrap();
        let shifted0 = traj.energies[0] - model.energy_floor() + 1.0;
        for k in 0..traj.len() {
            let shifted = traj.energies[k] - model.energy_floor() + 1.0;
            let bound = shifted0 * (model.power_constant() * traj.times[k]).exp();
            assert!(shifted <= 1.05 * bound);
        }
    }

    #[test]
    fn step_bound_is_enforced() {
        let model = tilted();
        let config = FlowConfig::new(0.001, 0.01);
        let err = integrate(&model, &config, &DVector::from_element(1, -1.0)).unwrap_err();
        assert!(matches!(err, FlowError::StepBound { .. }));
    }

    #[test]
    fn node_samples_record_exact_slope() {
        let model = tilted();
        let config = FlowConfig::new(0.05, 1e-3);
        let traj = integrate(&model, &config, &DVector::from_element(1, -1.0)).unwrap();
        let sample = traj.sample(&model, traj.len() / 2);
        assert_eq!(sample.slope, model.slope(sample.t, &sample.u));
        assert_eq!(sample.energy, traj.energies[traj.len() / 2]);
    }

    #[test]
    fn csv_has_header_and_rows() {
        let model = bowl();
        let config = FlowConfig::new(0.1, 0.05);
        let traj = integrate(&model, &config, &DVector::from_element(1, 1.0)).unwrap();
        let mut buffer = Vec::new();
        traj.write_csv(&mut buffer).unwrap();
        let text = String::from_utf8(buffer).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "t,u_1,energy,slope,power,dissipation_density"
        );
        assert_eq!(lines.count(), traj.len());
    }
}
