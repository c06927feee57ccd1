//! Charting of the critical set `DE(t,u) = 0`: deflated Newton root finding,
//! pseudo-arclength continuation of critical branches with fold detection,
//! fixed-time loop continuation for degenerate continua, per-time component
//! extraction, transversality reports and the fibered-Lusin diagnostic.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::energy::EnergyModel;

/// Default residual tolerance for critical points, scaled by `1 + |u|`.
pub const CRITICAL_TOL: f64 = 1e-9;

/// Threshold on |t2|/|t3| below which a transversality condition fails.
pub const TRANSVERSALITY_TOL: f64 = 1e-5;

fn degeneracy_tol(spectrum: &[f64]) -> f64 {
    let radius = spectrum.iter().fold(0.0f64, |m, e| m.max(e.abs()));
    1e-6 * (1.0 + radius)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Classification {
    NondegenerateMin,
    NondegenerateSaddle,
    NondegenerateMax,
    Degenerate,
}

/// A located solution of `DE(t,u) = 0` with its Hessian classification.
#[derive(Debug, Clone)]
pub struct CriticalPoint {
    pub t: f64,
    pub u: DVector<f64>,
    pub residual: f64,
    /// Hessian eigenvalues, ascending.
    pub spectrum: Vec<f64>,
    pub kernel_dim: usize,
    pub morse_index: usize,
    pub classification: Classification,
}

impl CriticalPoint {
    /// Classifies `(t,u)` from the model Hessian; does not verify the
    /// residual bound.
    pub fn classify(model: &EnergyModel, t: f64, u: DVector<f64>) -> Self {
        let residual = model.slope(t, &u);
        let hess = model.hessian(t, &u);
        let mut spectrum: Vec<f64> = hess.symmetric_eigenvalues().iter().cloned().collect();
        spectrum.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let tol = degeneracy_tol(&spectrum);
        let kernel_dim = spectrum.iter().filter(|e| e.abs() <= tol).count();
        let morse_index = spectrum.iter().filter(|e| **e < -tol).count();
        let d = spectrum.len();
        let classification = if kernel_dim > 0 {
            Classification::Degenerate
        } else if morse_index == 0 {
            Classification::NondegenerateMin
        } else if morse_index == d {
            Classification::NondegenerateMax
        } else {
            Classification::NondegenerateSaddle
        };
        CriticalPoint {
            t,
            u,
            residual,
            spectrum,
            kernel_dim,
            morse_index,
            classification,
        }
    }

    pub fn is_degenerate(&self) -> bool {
        self.kernel_dim > 0
    }

    pub fn satisfies_residual_bound(&self) -> bool {
        self.residual <= CRITICAL_TOL * (1.0 + self.u.norm())
    }
}

// ---------------------------------------------------------------------------
// deflated Newton search
// ---------------------------------------------------------------------------

/// Newton iteration on `u -> DE(t,u)` from every seed, with deflation
/// against previously found roots to steer later seeds toward new ones.
/// Returns deduplicated converged roots; seeds that fail to converge are
/// dropped silently.
pub fn find_critical(model: &EnergyModel, t: f64, seeds: &[DVector<f64>]) -> Vec<CriticalPoint> {
    assert!(!seeds.is_empty(), "seeds must be nonempty");
    let mut roots: Vec<DVector<f64>> = Vec::new();
    for seed in seeds {
        if let Some(root) = newton_deflated(model, t, seed, &roots) {
            let root = polish_degenerate(model, t, root);
            let duplicate = roots
                .iter()
                .any(|r| (r - &root).norm() <= 1e-6 * (1.0 + r.norm()));
            if !duplicate {
                roots.push(root);
            }
        }
    }
    roots.sort_by(|a, b| {
        a.iter()
            .zip(b.iter())
            .find_map(|(x, y)| x.partial_cmp(y).filter(|o| o.is_ne()))
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    roots
        .into_iter()
        .map(|u| CriticalPoint::classify(model, t, u))
        .collect()
}

/// Deflated merit: the residual norm is multiplied by `prod (1 + 1/|u - r_j|)`
/// during line-search acceptance, which penalizes approach to known roots.
fn deflated_merit(model: &EnergyModel, t: f64, u: &DVector<f64>, roots: &[DVector<f64>]) -> f64 {
    let mut merit = model.slope(t, u);
    for r in roots {
        let dist = (u - r).norm().max(1e-14);
        merit *= 1.0 + 1.0 / dist;
    }
    merit
}

/// Near a degenerate root the residual criterion leaves an `O(sqrt(tol))`
/// position error. When the smallest Hessian eigenvalue is suspiciously
/// small, a Gauss-Newton solve on the augmented system
/// `(DE(t,u), D^2E(t,u) v, (|v|^2 - 1)/2) = 0` recovers the exact
/// degenerate point; the polish is kept only when it converges nearby.
fn polish_degenerate(model: &EnergyModel, t: f64, root: DVector<f64>) -> DVector<f64> {
    let d = model.dim();
    let hess = model.hessian(t, &root);
    let eig = hess.symmetric_eigen();
    let radius = eig.eigenvalues.iter().fold(0.0f64, |m, e| m.max(e.abs()));
    let mut idx = 0;
    let mut smallest = f64::INFINITY;
    for (i, e) in eig.eigenvalues.iter().enumerate() {
        if e.abs() < smallest {
            smallest = e.abs();
            idx = i;
        }
    }
    if smallest > 1e-3 * (1.0 + radius) || smallest <= degeneracy_tol(&[radius]) {
        return root;
    }
    let mut u = root.clone();
    let mut v = eig.eigenvectors.column(idx).into_owned().normalize();
    let h_fd = 1e-5 * (1.0 + u.norm());
    for _ in 0..30 {
        let grad = model.gradient(t, &u);
        let hv = model.hessian(t, &u) * &v;
        let norm_defect = 0.5 * (v.norm_squared() - 1.0);
        let mut residual = DVector::zeros(2 * d + 1);
        residual.rows_mut(0, d).copy_from(&grad);
        residual.rows_mut(d, d).copy_from(&hv);
        residual[2 * d] = norm_defect;
        if residual.norm() <= 1e-12 * (1.0 + u.norm()) {
            break;
        }
        let hess = model.hessian(t, &u);
        let mut jac = DMatrix::zeros(2 * d + 1, 2 * d);
        jac.view_mut((0, 0), (d, d)).copy_from(&hess);
        for j in 0..d {
            let mut up = u.clone();
            let mut dn = u.clone();
            up[j] += h_fd;
            dn[j] -= h_fd;
            let col = (model.hessian(t, &up) * &v - model.hessian(t, &dn) * &v) / (2.0 * h_fd);
            jac.view_mut((d, j), (d, 1)).copy_from(&col);
        }
        jac.view_mut((d, d), (d, d)).copy_from(&hess);
        for j in 0..d {
            jac[(2 * d, d + j)] = v[j];
        }
        let Ok(delta) = jac.svd(true, true).solve(&(-residual), 1e-12) else {
            return root;
        };
        if !delta.iter().all(|x| x.is_finite()) {
            return root;
        }
        for j in 0..d {
            u[j] += delta[j];
            v[j] += delta[d + j];
        }
    }
    let moved = (&u - &root).norm();
    let grad_ok = model.slope(t, &u) <= CRITICAL_TOL * (1.0 + u.norm());
    let new_hess = model.hessian(t, &u);
    let new_smallest = new_hess
        .symmetric_eigenvalues()
        .iter()
        .fold(f64::INFINITY, |m, e| m.min(e.abs()));
    if grad_ok && moved <= 1e-2 * (1.0 + root.norm()) && new_smallest < smallest {
        u
    } else {
        root
    }
}

fn newton_deflated(
    model: &EnergyModel,
    t: f64,
    seed: &DVector<f64>,
    roots: &[DVector<f64>],
) -> Option<DVector<f64>> {
    let mut u = seed.clone();
    let mut merit = deflated_merit(model, t, &u, roots);
    for _ in 0..200 {
        let grad = model.gradient(t, &u);
        if grad.norm() <= CRITICAL_TOL * (1.0 + u.norm()) {
            return Some(u);
        }
        let hess = model.hessian(t, &u);
        let delta = match hess.clone().lu().solve(&(-&grad)) {
            Some(d) if d.iter().all(|x| x.is_finite()) => d,
            _ => hess.svd(true, true).solve(&(-&grad), 1e-12).ok()?,
        };
        let mut alpha = 1.0;
        let mut moved = false;
        for _ in 0..40 {
            let candidate = &u + &delta * alpha;
            let cand_merit = deflated_merit(model, t, &candidate, roots);
            if cand_merit < merit {
                u = candidate;
                merit = cand_merit;
                moved = true;
                break;
            }
            alpha *= 0.5;
        }
        if !moved {
            return None;
        }
    }
    let grad = model.gradient(t, &u);
    (grad.norm() <= CRITICAL_TOL * (1.0 + u.norm())).then_some(u)
}

// ---------------------------------------------------------------------------
// pseudo-arclength continuation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ContinuationConfig {
    /// Target arclength step in `(t,u)` space.
    pub arc_step: f64,
    /// Signed arclength span traced from the start point.
    pub span: (f64, f64),
    /// Branches stop when `t` leaves this window.
    pub time_window: (f64, f64),
    /// Branches stop when the shifted energy exceeds this bound.
    pub rho: f64,
    pub max_steps: usize,
    pub corrector_tol: f64,
    /// Fold refinement stops once `|t'(s)|` drops below this.
    pub fold_tol: f64,
}

impl ContinuationConfig {
    /// Defaults for a model: the chart window extends symmetrically to
    /// `[-T, T]` so that branches are not cut at the initial time and the
    /// folds bounding the slow manifolds are resolved.
    pub fn for_model(model: &EnergyModel, rho: f64) -> Self {
        let t = model.horizon();
        ContinuationConfig {
            arc_step: 0.02,
            span: (-100.0, 100.0),
            time_window: (-t, t),
            rho,
            max_steps: 50_000,
            corrector_tol: 1e-11,
            fold_tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum BranchKind {
    /// A curve `s -> (t(s), u(s))` of critical points.
    Transversal,
    /// A closed curve of critical points inside a single time slice; the
    /// degenerate-continuum pathway that fails (T.1)/(T.2).
    FixedTimeLoop,
}

#[derive(Debug, Clone)]
pub struct BranchSample {
    /// Arclength-like parameter, signed from the start point.
    pub s: f64,
    pub t: f64,
    pub u: DVector<f64>,
    /// Unit tangent `(t'(s), u'(s))` in `R^{1+d}`, oriented along +s.
    pub tangent: DVector<f64>,
    pub residual: f64,
    pub spectrum: Vec<f64>,
    pub fold: bool,
}

#[derive(Debug, Clone)]
pub struct CriticalBranch {
    pub kind: BranchKind,
    pub samples: Vec<BranchSample>,
    /// Indices into `samples` where `t'(s) = 0` within the fold tolerance.
    pub folds: Vec<usize>,
    pub closed: bool,
    /// Set when the trace stopped before exhausting its span: corrector
    /// divergence or a kernel of dimension >= 2.
    pub truncation: Option<String>,
}

impl CriticalBranch {
    /// Product-metric distance `max(|dt|, |du|)` from `(t,u)` to the
    /// sampled branch.
    pub fn distance_to(&self, t: f64, u: &DVector<f64>) -> f64 {
        self.samples
            .iter()
            .map(|s| (s.t - t).abs().max((&s.u - u).norm()))
            .fold(f64::INFINITY, f64::min)
    }

    /// Fold-delimited sample index ranges; each segment has monotone `t`.
    pub fn segments(&self) -> Vec<(usize, usize)> {
        if self.samples.is_empty() {
            return Vec::new();
        }
        let mut bounds = vec![0usize];
        bounds.extend(self.folds.iter().cloned());
        bounds.push(self.samples.len() - 1);
        bounds.sort_unstable();
        bounds.dedup();
        bounds.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

fn aug(t: f64, u: &DVector<f64>) -> DVector<f64> {
    let mut x = DVector::zeros(u.len() + 1);
    x[0] = t;
    x.rows_mut(1, u.len()).copy_from(u);
    x
}

fn split_aug(x: &DVector<f64>) -> (f64, DVector<f64>) {
    (x[0], x.rows(1, x.len() - 1).into_owned())
}

/// `d x (d+1)` Jacobian `[d_t DE | D^2 E]` of the critical equation at
/// `(t,u)`; the time column by centered differences of the gradient.
fn extended_jacobian(model: &EnergyModel, t: f64, u: &DVector<f64>) -> DMatrix<f64> {
    let d = model.dim();
    let mut jac = DMatrix::zeros(d, d + 1);
    let h = 1e-6 * (1.0 + t.abs());
    let dt_grad = (model.gradient(t + h, u) - model.gradient(t - h, u)) / (2.0 * h);
    jac.set_column(0, &dt_grad);
    let hess = model.hessian(t, u);
    for j in 0..d {
        jac.set_column(j + 1, &hess.column(j));
    }
    jac
}

/// Unit nullspace vector of the extended Jacobian via a bordered solve;
/// `None` when the nullspace is not one-dimensional.
fn branch_tangent(model: &EnergyModel, x: &DVector<f64>, hint: Option<&DVector<f64>>) -> Option<DVector<f64>> {
    let (t, u) = split_aug(x);
    let jac = extended_jacobian(model, t, &u);
    let d = jac.nrows();

    // rank check: nullity >= 2 means the tangent is undefined
    let svd = jac.clone().svd(false, false);
    let smax = svd.singular_values.iter().cloned().fold(0.0f64, f64::max);
    let rank = svd
        .singular_values
        .iter()
        .filter(|s| **s > 1e-8 * smax.max(1.0))
        .count();
    if rank < d {
        return None;
    }

    let mut candidates: Vec<DVector<f64>> = Vec::new();
    if let Some(h) = hint {
        candidates.push(h.clone());
    }
    for i in 0..=d {
        let mut e = DVector::zeros(d + 1);
        e[i] = 1.0;
        candidates.push(e);
    }
    for c in candidates {
        let mut bordered = DMatrix::zeros(d + 1, d + 1);
        bordered.view_mut((0, 0), (d, d + 1)).copy_from(&jac);
        for j in 0..=d {
            bordered[(d, j)] = c[j];
        }
        let mut rhs = DVector::zeros(d + 1);
        rhs[d] = 1.0;
        if let Some(sol) = bordered.lu().solve(&rhs) {
            let n = sol.norm();
            if n > 1e-10 && sol.iter().all(|v| v.is_finite()) {
                return Some(sol / n);
            }
        }
    }
    None
}

/// Newton corrector for the bordered system `DE(t,u) = 0`,
/// `tangent . (x - anchor) = 0`.
fn correct(
    model: &EnergyModel,
    prediction: &DVector<f64>,
    tangent: &DVector<f64>,
    tol: f64,
) -> Option<DVector<f64>> {
    let d = prediction.len() - 1;
    let mut x = prediction.clone();
    for _ in 0..30 {
        let (t, u) = split_aug(&x);
        let grad = model.gradient(t, &u);
        if grad.norm() <= tol * (1.0 + u.norm()) {
            return Some(x);
        }
        let jac = extended_jacobian(model, t, &u);
        let mut bordered = DMatrix::zeros(d + 1, d + 1);
        bordered.view_mut((0, 0), (d, d + 1)).copy_from(&jac);
        for j in 0..=d {
            bordered[(d, j)] = tangent[j];
        }
        let mut rhs = DVector::zeros(d + 1);
        for i in 0..d {
            rhs[i] = -grad[i];
        }
        rhs[d] = -tangent.dot(&(&x - prediction));
        let delta = bordered.lu().solve(&rhs)?;
        if !delta.iter().all(|v| v.is_finite()) {
            return None;
        }
        x += delta;
    }
    let (t, u) = split_aug(&x);
    (model.gradient(t, &u).norm() <= tol * (1.0 + u.norm())).then_some(x)
}

struct TraceOutcome {
    samples: Vec<(DVector<f64>, DVector<f64>)>, // (aug point, oriented tangent)
    closed: bool,
    truncation: Option<String>,
}

/// One-directional trace by tangent prediction and orthogonal correction.
fn trace_direction(
    model: &EnergyModel,
    start: &DVector<f64>,
    start_tangent: &DVector<f64>,
    config: &ContinuationConfig,
    span: f64,
) -> TraceOutcome {
    let mut samples = Vec::new();
    let mut x = start.clone();
    let mut tangent = start_tangent.clone();
    let mut arclength = 0.0;
    let mut h = config.arc_step;
    let mut closed = false;
    let mut truncation = None;
    let min_step = config.arc_step / 64.0;

    for step in 0..config.max_steps {
        if arclength >= span {
            break;
        }
        let prediction = &x + &tangent * h;
        match correct(model, &prediction, &tangent, config.corrector_tol) {
            Some(next) => {
                let Some(mut next_tangent) = branch_tangent(model, &next, Some(&tangent)) else {
                    truncation = Some("kernel dimension >= 2: tangent undefined".to_string());
                    break;
                };
                if next_tangent.dot(&tangent) < 0.0 {
                    next_tangent = -next_tangent;
                }
                let (t, u) = split_aug(&next);
                // window and sublevel exits
                if t < config.time_window.0 || t > config.time_window.1 {
                    if let Some(boundary) = clamp_to_time(
                        model,
                        &x,
                        &next,
                        &tangent,
                        config,
                        t.clamp(config.time_window.0, config.time_window.1),
                    ) {
                        let bt = branch_tangent(model, &boundary, Some(&tangent))
                            .map(|mut v| {
                                if v.dot(&tangent) < 0.0 {
                                    v = -v;
                                }
                                v
                            })
                            .unwrap_or_else(|| tangent.clone());
                        samples.push((boundary, bt));
                    }
                    break;
                }
                if model.shifted_energy(t, &u) > config.rho {
                    break;
                }
                arclength += (&next - &x).norm();
                x = next;
                tangent = next_tangent;
                samples.push((x.clone(), tangent.clone()));
                h = (h * 1.3).min(config.arc_step);
                // closure: returned to the start after a genuine excursion
                if step > 8 && (&x - start).norm() < 0.5 * config.arc_step {
                    closed = true;
                    break;
                }
            }
            None => {
                h *= 0.5;
                if h < min_step {
                    truncation = Some("corrector divergence".to_string());
                    break;
                }
            }
        }
    }
    TraceOutcome {
        samples,
        closed,
        truncation,
    }
}

/// Bisection between an inside and an outside point until `t` hits the
/// window boundary.
fn clamp_to_time(
    model: &EnergyModel,
    inside: &DVector<f64>,
    outside: &DVector<f64>,
    tangent: &DVector<f64>,
    config: &ContinuationConfig,
    target: f64,
) -> Option<DVector<f64>> {
    let mut lo = inside.clone();
    let mut hi = outside.clone();
    for _ in 0..60 {
        let mid = (&lo + &hi) * 0.5;
        let corrected = correct(model, &mid, tangent, config.corrector_tol)?;
        if (corrected[0] - target).abs() < 1e-12 {
            return Some(corrected);
        }
        let inside_side = (inside[0] - target).signum();
        if (corrected[0] - target).signum() == inside_side {
            lo = corrected;
        } else {
            hi = corrected;
        }
    }
    Some(lo)
}

/// Continues the critical branch through `start` by pseudo-arclength
/// prediction-correction, tracing both directions of the span, locating
/// folds (sign changes of `t'(s)`, refined by bisection until
/// `|t'| < fold_tol`).
///
/// For starts whose extended Jacobian has a two-dimensional nullspace
/// (degenerate continua at frozen time, e.g. a circle of minima in an
/// autonomous model) the branch is traced as a fixed-time loop along the
/// Hessian kernel instead.
pub fn continue_branch(
    model: &EnergyModel,
    start: &CriticalPoint,
    config: &ContinuationConfig,
) -> CriticalBranch {
    let x0 = aug(start.t, &start.u);
    let Some(tangent0) = branch_tangent(model, &x0, None) else {
        // two-dimensional kernel: fall back to a frozen-time loop
        return continue_loop(model, start, config);
    };

    let forward = trace_direction(model, &x0, &tangent0, config, config.span.1.abs());
    let backward = trace_direction(
        model,
        &x0,
        &(-&tangent0),
        config,
        config.span.0.abs(),
    );

    // assemble: backward reversed (tangents flipped to keep +s orientation),
    // then the start, then forward
    let mut points: Vec<(DVector<f64>, DVector<f64>)> = Vec::new();
    for (x, tan) in backward.samples.iter().rev() {
        points.push((x.clone(), -tan));
    }
    points.push((x0.clone(), tangent0.clone()));
    points.extend(forward.samples.iter().cloned());

    let closed = forward.closed || backward.closed;
    let truncation = forward.truncation.or(backward.truncation);
    finish_branch(model, points, config, closed, truncation)
}

fn finish_branch(
    model: &EnergyModel,
    mut points: Vec<(DVector<f64>, DVector<f64>)>,
    config: &ContinuationConfig,
    closed: bool,
    truncation: Option<String>,
) -> CriticalBranch {
    // fold refinement: insert a sample at each sign change of the tangent
    // t-component
    let mut k = 1;
    while k < points.len() {
        let a_t = points[k - 1].1[0];
        let b_t = points[k].1[0];
        if a_t * b_t < 0.0 && a_t.abs() > config.fold_tol && b_t.abs() > config.fold_tol {
            if let Some(fold) = refine_fold(model, &points[k - 1], &points[k], config) {
                points.insert(k, fold);
                k += 1;
            }
        }
        k += 1;
    }

    let mut samples = Vec::with_capacity(points.len());
    let mut folds = Vec::new();
    let mut s = 0.0;
    for (i, (x, tan)) in points.iter().enumerate() {
        if i > 0 {
            s += (x - &points[i - 1].0).norm();
        }
        let (t, u) = split_aug(x);
        let cp = CriticalPoint::classify(model, t, u.clone());
        let fold = tan[0].abs() <= config.fold_tol;
        if fold {
            folds.push(samples.len());
        }
        samples.push(BranchSample {
            s,
            t,
            u,
            tangent: tan.clone(),
            residual: cp.residual,
            spectrum: cp.spectrum,
            fold,
        });
    }
    CriticalBranch {
        kind: BranchKind::Transversal,
        samples,
        folds,
        closed,
        truncation,
    }
}

fn refine_fold(
    model: &EnergyModel,
    a: &(DVector<f64>, DVector<f64>),
    b: &(DVector<f64>, DVector<f64>),
    config: &ContinuationConfig,
) -> Option<(DVector<f64>, DVector<f64>)> {
    let secant = (&b.0 - &a.0).normalize();
    let mut lo = a.0.clone();
    let mut hi = b.0.clone();
    let mut lo_sign = a.1[0].signum();
    let mut best: Option<(DVector<f64>, DVector<f64>)> = None;
    for _ in 0..80 {
        let mid = (&lo + &hi) * 0.5;
        let corrected = correct(model, &mid, &secant, config.corrector_tol)?;
        let mut tan = branch_tangent(model, &corrected, Some(&secant))?;
        if tan.dot(&secant) < 0.0 {
            tan = -tan;
        }
        if tan[0].abs() <= config.fold_tol {
            return Some((corrected, tan));
        }
        best = Some((corrected.clone(), tan.clone()));
        if tan[0].signum() == lo_sign {
            lo = corrected;
            lo_sign = tan[0].signum();
        } else {
            hi = corrected;
        }
    }
    best
}

/// Traces a connected critical continuum inside the slice `{t = start.t}`
/// along the Hessian kernel; closes when the curve returns to its start.
fn continue_loop(
    model: &EnergyModel,
    start: &CriticalPoint,
    config: &ContinuationConfig,
) -> CriticalBranch {
    let t = start.t;
    let d = model.dim();
    let kernel_dir = |u: &DVector<f64>, hint: Option<&DVector<f64>>| -> Option<DVector<f64>> {
        let hess = model.hessian(t, u);
        let eig = hess.symmetric_eigen();
        let mut idx = 0;
        let mut best = f64::INFINITY;
        for (i, e) in eig.eigenvalues.iter().enumerate() {
            if e.abs() < best {
                best = e.abs();
                idx = i;
            }
        }
        let mut v = eig.eigenvectors.column(idx).into_owned();
        if let Some(h) = hint {
            if v.dot(h) < 0.0 {
                v = -v;
            }
        }
        Some(v.normalize())
    };

    // bordered corrector for the singular Hessian: solve
    // [H v; v^T 0] [delta; mu] = [-grad; 0]
    let correct_in_slice = |u: &DVector<f64>, dir: &DVector<f64>| -> Option<DVector<f64>> {
        let mut w = u.clone();
        for _ in 0..30 {
            let grad = model.gradient(t, &w);
            if grad.norm() <= config.corrector_tol * (1.0 + w.norm()) {
                return Some(w);
            }
            let hess = model.hessian(t, &w);
            let mut bordered = DMatrix::zeros(d + 1, d + 1);
            bordered.view_mut((0, 0), (d, d)).copy_from(&hess);
            for i in 0..d {
                bordered[(i, d)] = dir[i];
                bordered[(d, i)] = dir[i];
            }
            let mut rhs = DVector::zeros(d + 1);
            for i in 0..d {
                rhs[i] = -grad[i];
            }
            let sol = bordered.lu().solve(&rhs)?;
            for i in 0..d {
                w[i] += sol[i];
            }
        }
        let grad = model.gradient(t, &w);
        (grad.norm() <= config.corrector_tol * (1.0 + w.norm())).then_some(w)
    };

    let mut points: Vec<DVector<f64>> = vec![start.u.clone()];
    let mut closed = false;
    let mut truncation = None;
    let Some(mut dir) = kernel_dir(&start.u, None) else {
        return isolated_branch(model, start);
    };
    let h = config.arc_step;
    for step in 0..config.max_steps {
        let u_prev = points.last().unwrap().clone();
        let prediction = &u_prev + &dir * h;
        match correct_in_slice(&prediction, &dir) {
            Some(next) => {
                let Some(next_dir) = kernel_dir(&next, Some(&dir)) else {
                    truncation = Some("kernel direction lost".to_string());
                    break;
                };
                if (&next - &points[0]).norm() < 0.6 * h && step > 4 {
                    closed = true;
                    break;
                }
                points.push(next);
                dir = next_dir;
            }
            None => {
                truncation = Some("loop corrector divergence".to_string());
                break;
            }
        }
    }

    let mut samples = Vec::with_capacity(points.len());
    let mut s = 0.0;
    for (i, u) in points.iter().enumerate() {
        if i > 0 {
            s += (u - &points[i - 1]).norm();
        }
        let cp = CriticalPoint::classify(model, t, u.clone());
        let mut tangent = DVector::zeros(d + 1);
        let dir_here = kernel_dir(u, None).unwrap_or_else(|| DVector::zeros(d));
        for i in 0..d {
            tangent[i + 1] = dir_here[i];
        }
        samples.push(BranchSample {
            s,
            t,
            u: u.clone(),
            tangent,
            residual: cp.residual,
            spectrum: cp.spectrum,
            fold: false,
        });
    }
    CriticalBranch {
        kind: BranchKind::FixedTimeLoop,
        samples,
        folds: Vec::new(),
        closed,
        truncation,
    }
}

fn isolated_branch(model: &EnergyModel, start: &CriticalPoint) -> CriticalBranch {
    let d = model.dim();
    CriticalBranch {
        kind: BranchKind::FixedTimeLoop,
        samples: vec![BranchSample {
            s: 0.0,
            t: start.t,
            u: start.u.clone(),
            tangent: DVector::zeros(d + 1),
            residual: start.residual,
            spectrum: start.spectrum.clone(),
            fold: false,
        }],
        folds: Vec::new(),
        closed: false,
        truncation: None,
    }
}

// ---------------------------------------------------------------------------
// atlas assembly
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct AtlasConfig {
    pub rho: f64,
    pub t_grid: usize,
    pub seed_grid: usize,
    pub continuation: ContinuationConfig,
    pub merge_tol: f64,
    pub coverage_probes: usize,
    pub seed: u64,
}

impl AtlasConfig {
    pub fn new(model: &EnergyModel, rho: f64, t_grid: usize, seed_grid: usize) -> Self {
        AtlasConfig {
            rho,
            t_grid,
            seed_grid,
            continuation: ContinuationConfig::for_model(model, rho),
            merge_tol: 1e-4,
            coverage_probes: 16,
            seed: 0xa71a5,
        }
    }
}

/// The critical set within a sublevel, covered by finitely many branches.
#[derive(Debug, Clone)]
pub struct Atlas {
    pub rho: f64,
    pub time_window: (f64, f64),
    pub autonomous: bool,
    pub branches: Vec<CriticalBranch>,
    pub isolated: Vec<CriticalPoint>,
    /// Worst distance from re-seeded probe roots to the atlas; coverage is
    /// heuristic and this is its report.
    pub coverage_max_distance: f64,
    pub coverage_probes: usize,
}

/// Seeds deflated Newton runs on a `t x u` grid over the sublevel,
/// continues every root not already covered, merges duplicate branches and
/// reports coverage diagnostics from re-seeded probes.
///
/// For autonomous models the critical set is time-invariant, so coverage
/// and merging compare states only; otherwise the product metric
/// `max(|dt|, |du|)` is used.
pub fn build_atlas(model: &EnergyModel, config: &AtlasConfig) -> Atlas {
    assert!(config.rho > 1.0, "sublevel bound must exceed 1");
    let radius = model.sublevel_radius(config.rho).min(1e3);
    let seeds = seed_points(model, radius, config.seed_grid, config.seed);
    let (t_lo, t_hi) = config.continuation.time_window;
    let autonomous = model.is_autonomous();

    let branch_distance = |branch: &CriticalBranch, t: f64, u: &DVector<f64>| -> f64 {
        if autonomous {
            branch
                .samples
                .iter()
                .map(|s| (&s.u - u).norm())
                .fold(f64::INFINITY, f64::min)
        } else {
            branch.distance_to(t, u)
        }
    };

    let mut branches: Vec<CriticalBranch> = Vec::new();
    let mut isolated: Vec<CriticalPoint> = Vec::new();

    for k in 0..config.t_grid {
        let t = if config.t_grid == 1 {
            0.5 * (t_lo + t_hi)
        } else {
            t_lo + (t_hi - t_lo) * k as f64 / (config.t_grid - 1) as f64
        };
        for root in find_critical(model, t, &seeds) {
            if !model.in_sublevel(config.rho, &root.u)
                && model.shifted_energy(t, &root.u) > config.rho
            {
                continue;
            }
            let covered = branches.iter().any(|b| {
                branch_distance(b, root.t, &root.u)
                    < config.merge_tol.max(config.continuation.arc_step)
            });
            if covered {
                continue;
            }
            let branch = continue_branch(model, &root, &config.continuation);
            if branch.samples.len() <= 1 && branch.kind == BranchKind::FixedTimeLoop {
                if isolated
                    .iter()
                    .all(|p| (&p.u - &root.u).norm().max((p.t - root.t).abs()) > config.merge_tol)
                {
                    isolated.push(root);
                }
                continue;
            }
            branches.push(branch);
        }
    }

    // merge branches that cover the same component
    let mut kept: Vec<CriticalBranch> = Vec::new();
    for branch in branches {
        let duplicate = kept.iter().any(|other| {
            branch
                .samples
                .iter()
                .all(|s| branch_distance(other, s.t, &s.u) < 2.0 * config.continuation.arc_step)
        });
        if !duplicate {
            kept.push(branch);
        }
    }

    let mut atlas = Atlas {
        rho: config.rho,
        time_window: (t_lo, t_hi),
        autonomous: model.is_autonomous(),
        branches: kept,
        isolated,
        coverage_max_distance: 0.0,
        coverage_probes: config.coverage_probes,
    };

    // coverage probes: re-seed and measure the distance of found roots to
    // the atlas
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xc0ffee);
    let mut worst = 0.0f64;
    for _ in 0..config.coverage_probes {
        if let Some((t, u)) = model.sample_sublevel(config.rho, &mut rng) {
            let t = t.clamp(t_lo, t_hi);
            for root in find_critical(model, t, &[u]) {
                if model.shifted_energy(root.t, &root.u) > config.rho {
                    continue;
                }
                worst = worst.max(atlas.distance_to(root.t, &root.u));
            }
        }
    }
    atlas.coverage_max_distance = worst;
    atlas
}

fn seed_points(model: &EnergyModel, radius: f64, seed_grid: usize, seed: u64) -> Vec<DVector<f64>> {
    let d = model.dim();
    let n = seed_grid.max(2);
    let coords = |k: usize| -radius + 2.0 * radius * k as f64 / (n - 1) as f64;
    match d {
        1 => (0..n).map(|k| DVector::from_element(1, coords(k))).collect(),
        2 => {
            let mut seeds = Vec::with_capacity(n * n);
            for i in 0..n {
                for j in 0..n {
                    seeds.push(DVector::from_vec(vec![coords(i), coords(j)]));
                }
            }
            seeds
        }
        _ => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut seeds = vec![DVector::zeros(d)];
            for _ in 0..(n * n) {
                let v = DVector::from_fn(d, |_, _| {
                    rand::Rng::gen_range(&mut rng, -radius..=radius)
                });
                seeds.push(v);
            }
            seeds
        }
    }
}

impl Atlas {
    /// Distance from `(t,u)` to the charted critical set; states only for
    /// autonomous models.
    pub fn distance_to(&self, t: f64, u: &DVector<f64>) -> f64 {
        let mut best = f64::INFINITY;
        for b in &self.branches {
            let d = if self.autonomous {
                b.samples
                    .iter()
                    .map(|s| (&s.u - u).norm())
                    .fold(f64::INFINITY, f64::min)
            } else {
                b.distance_to(t, u)
            };
            best = best.min(d);
        }
        for p in &self.isolated {
            let d = if self.autonomous {
                (&p.u - u).norm()
            } else {
                (p.t - t).abs().max((&p.u - u).norm())
            };
            best = best.min(d);
        }
        best
    }

    /// Connected components of the critical set at time `t`, as seen by the
    /// atlas: one per fold-delimited branch segment crossing `{t}`, one per
    /// frozen-time loop alive at `t`, plus matching isolated points.
    pub fn components_at(&self, model: &EnergyModel, t: f64) -> Vec<ComponentRef> {
        let mut refs: Vec<ComponentRef> = Vec::new();
        for (bi, branch) in self.branches.iter().enumerate() {
            match branch.kind {
                BranchKind::Transversal => {
                    for (si, (lo, hi)) in branch.segments().into_iter().enumerate() {
                        if let Some(u) = segment_crossing(model, branch, lo, hi, t) {
                            let duplicate = refs
                                .iter()
                                .any(|r| (&r.representative - &u).norm() < 1e-6 * (1.0 + u.norm()));
                            if !duplicate {
                                refs.push(ComponentRef {
                                    kind: ComponentKind::CriticalComponent,
                                    t,
                                    representative: u,
                                    component_id: Some(ComponentId::Crossing {
                                        branch: bi,
                                        segment: si,
                                    }),
                                });
                            }
                        }
                    }
                }
                BranchKind::FixedTimeLoop => {
                    let alive = self.autonomous
                        || branch
                            .samples
                            .first()
                            .map(|s| (s.t - t).abs() < 1e-9)
                            .unwrap_or(false);
                    if alive {
                        refs.push(ComponentRef {
                            kind: ComponentKind::CriticalComponent,
                            t,
                            representative: branch.samples[0].u.clone(),
                            component_id: Some(ComponentId::Loop { branch: bi }),
                        });
                    }
                }
            }
        }
        for (pi, p) in self.isolated.iter().enumerate() {
            if (p.t - t).abs() < 1e-9 || self.autonomous {
                refs.push(ComponentRef {
                    kind: ComponentKind::CriticalComponent,
                    t,
                    representative: p.u.clone(),
                    component_id: Some(ComponentId::Isolated { index: pi }),
                });
            }
        }
        refs.sort_by(|a, b| {
            a.representative
                .iter()
                .zip(b.representative.iter())
                .find_map(|(x, y)| x.partial_cmp(y).filter(|o| o.is_ne()))
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        refs
    }

    /// Follows a crossing component to another time inside the same
    /// fold-delimited segment. `None` when the segment does not reach
    /// `new_t` (the component dies at a fold).
    pub fn track_component(
        &self,
        model: &EnergyModel,
        component: &ComponentRef,
        new_t: f64,
    ) -> Option<ComponentRef> {
        match component.component_id {
            Some(ComponentId::Crossing { branch, segment }) => {
                let b = &self.branches[branch];
                let (lo, hi) = *b.segments().get(segment)?;
                let u = segment_crossing(model, b, lo, hi, new_t)?;
                Some(ComponentRef {
                    kind: ComponentKind::CriticalComponent,
                    t: new_t,
                    representative: u,
                    component_id: component.component_id.clone(),
                })
            }
            Some(ComponentId::Loop { .. }) if self.autonomous => Some(ComponentRef {
                t: new_t,
                ..component.clone()
            }),
            Some(ComponentId::Isolated { .. }) if self.autonomous => Some(ComponentRef {
                t: new_t,
                ..component.clone()
            }),
            _ => ((component.t - new_t).abs() < 1e-9).then(|| component.clone()),
        }
    }

    /// The time interval spanned by the fold-delimited segment of a
    /// crossing component (the window on which the component persists).
    pub fn component_time_interval(&self, component: &ComponentRef) -> (f64, f64) {
        match component.component_id {
            Some(ComponentId::Crossing { branch, segment }) => {
                let b = &self.branches[branch];
                if let Some(&(lo, hi)) = b.segments().get(segment) {
                    let mut t_min = f64::INFINITY;
                    let mut t_max = f64::NEG_INFINITY;
                    for s in &b.samples[lo..=hi] {
                        t_min = t_min.min(s.t);
                        t_max = t_max.max(s.t);
                    }
                    (t_min, t_max)
                } else {
                    (component.t, component.t)
                }
            }
            _ if self.autonomous => (f64::NEG_INFINITY, f64::INFINITY),
            _ => (component.t, component.t),
        }
    }

    /// Loop samples backing a component, if it is a frozen-time loop.
    pub fn loop_samples(&self, component: &ComponentRef) -> Option<&[BranchSample]> {
        match component.component_id {
            Some(ComponentId::Loop { branch }) => Some(&self.branches[branch].samples),
            _ => None,
        }
    }
}

/// Crossing of a monotone-in-`t` branch segment with the slice `{t}`,
/// refined by a frozen-time Newton solve from the interpolated state.
fn segment_crossing(
    model: &EnergyModel,
    branch: &CriticalBranch,
    lo: usize,
    hi: usize,
    t: f64,
) -> Option<DVector<f64>> {
    let samples = &branch.samples[lo..=hi];
    if samples.is_empty() {
        return None;
    }
    for w in samples.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        if (a.t - t) * (b.t - t) <= 0.0 {
            let span = (b.t - a.t).abs();
            let alpha = if span < 1e-14 {
                0.5
            } else {
                ((t - a.t) / (b.t - a.t)).clamp(0.0, 1.0)
            };
            let guess = &a.u * (1.0 - alpha) + &b.u * alpha;
            let refined = frozen_newton(model, t, &guess)?;
            return Some(refined);
        }
    }
    // endpoints that sit exactly on the slice (fold tangencies)
    for s in [samples.first().unwrap(), samples.last().unwrap()] {
        if (s.t - t).abs() < 1e-9 {
            return Some(s.u.clone());
        }
    }
    None
}

fn frozen_newton(model: &EnergyModel, t: f64, guess: &DVector<f64>) -> Option<DVector<f64>> {
    let mut u = guess.clone();
    for _ in 0..60 {
        let grad = model.gradient(t, &u);
        if grad.norm() <= CRITICAL_TOL * (1.0 + u.norm()) {
            return Some(u);
        }
        let hess = model.hessian(t, &u);
        let delta = match hess.clone().lu().solve(&(-&grad)) {
            Some(d) if d.iter().all(|x| x.is_finite()) => d,
            _ => hess.svd(true, true).solve(&(-&grad), 1e-12).ok()?,
        };
        // keep the solve local to the segment
        let step = delta.norm();
        let cap = 0.5 * (1.0 + u.norm());
        u += if step > cap { delta * (cap / step) } else { delta };
    }
    let grad = model.gradient(t, &u);
    (grad.norm() <= 10.0 * CRITICAL_TOL * (1.0 + u.norm())).then_some(u)
}

// ---------------------------------------------------------------------------
// components
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ComponentKind {
    CriticalComponent,
    NoncriticalSingleton,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum ComponentId {
    Crossing { branch: usize, segment: usize },
    Loop { branch: usize },
    Isolated { index: usize },
}

/// An element of the class of connected components of `C(t)` plus
/// noncritical singletons.
#[derive(Debug, Clone)]
pub struct ComponentRef {
    pub kind: ComponentKind,
    pub t: f64,
    pub representative: DVector<f64>,
    /// Absent for noncritical singletons.
    pub component_id: Option<ComponentId>,
}

impl ComponentRef {
    pub fn singleton(t: f64, u: DVector<f64>) -> Self {
        ComponentRef {
            kind: ComponentKind::NoncriticalSingleton,
            t,
            representative: u,
            component_id: None,
        }
    }

    pub fn same_component(&self, other: &ComponentRef) -> bool {
        match (&self.component_id, &other.component_id) {
            (Some(a), Some(b)) => a == b,
            (None, None) => {
                (&self.representative - &other.representative).norm()
                    < 1e-8 * (1.0 + self.representative.norm())
            }
            _ => false,
        }
    }
}

// ---------------------------------------------------------------------------
// transversality
// ---------------------------------------------------------------------------

/// Verdicts of the transversality conditions at a critical point:
/// one-dimensional kernel, nonvanishing mixed time derivative against the
/// kernel vector, nonvanishing cubic term along it.
#[derive(Debug, Clone, Serialize)]
pub struct TransversalityReport {
    pub kernel_dim: usize,
    pub t2_value: Option<f64>,
    pub t3_value: Option<f64>,
    pub passes_t1: bool,
    pub passes_t2: bool,
    pub passes_t3: bool,
}

impl TransversalityReport {
    pub fn passes_partial(&self) -> bool {
        self.passes_t1 && self.passes_t2
    }

    pub fn passes_full(&self) -> bool {
        self.passes_t1 && self.passes_t2 && self.passes_t3
    }
}

/// Evaluates (T.1)-(T.3) at a critical point. Nondegenerate points return a
/// trivially passing report with `kernel_dim = 0`; kernels of dimension two
/// or more fail (T.1) with the higher conditions left unevaluated.
pub fn transversality(model: &EnergyModel, cp: &CriticalPoint) -> TransversalityReport {
    if cp.kernel_dim == 0 {
        return TransversalityReport {
            kernel_dim: 0,
            t2_value: None,
            t3_value: None,
            passes_t1: true,
            passes_t2: true,
            passes_t3: true,
        };
    }
    if cp.kernel_dim >= 2 {
        return TransversalityReport {
            kernel_dim: cp.kernel_dim,
            t2_value: None,
            t3_value: None,
            passes_t1: false,
            passes_t2: false,
            passes_t3: false,
        };
    }

    // unit kernel vector: eigenvector of the smallest-|eigenvalue| pair,
    // sign fixed by the first nonvanishing component
    let hess = model.hessian(cp.t, &cp.u);
    let eig = hess.symmetric_eigen();
    let mut idx = 0;
    let mut best = f64::INFINITY;
    for (i, e) in eig.eigenvalues.iter().enumerate() {
        if e.abs() < best {
            best = e.abs();
            idx = i;
        }
    }
    let mut v = eig.eigenvectors.column(idx).into_owned().normalize();
    if let Some(first) = v.iter().find(|x| x.abs() > 1e-8) {
        if *first < 0.0 {
            v = -v;
        }
    }

    // (T.2): <d_t DE, v> by centered differences of the gradient in time
    let ht = 1e-5;
    let dt_grad = (model.gradient(cp.t + ht, &cp.u) - model.gradient(cp.t - ht, &cp.u)) / (2.0 * ht);
    let t2 = dt_grad.dot(&v);

    // (T.3): D^3 E [v,v,v] as the second derivative of h -> <DE(u + h v), v>,
    // Richardson-extrapolated centered differences
    let hu = 1e-4 * (1.0 + cp.u.norm());
    let g = |h: f64| model.gradient(cp.t, &(&cp.u + &v * h)).dot(&v);
    let second = |h: f64| (g(h) - 2.0 * g(0.0) + g(-h)) / (h * h);
    let coarse = second(hu);
    let fine = second(hu / 2.0);
    let t3 = (4.0 * fine - coarse) / 3.0;

    TransversalityReport {
        kernel_dim: 1,
        t2_value: Some(t2),
        t3_value: Some(t3),
        passes_t1: true,
        passes_t2: t2.abs() > TRANSVERSALITY_TOL,
        passes_t3: t3.abs() > TRANSVERSALITY_TOL,
    }
}

// ---------------------------------------------------------------------------
// fibered Lusin diagnostic
// ---------------------------------------------------------------------------

/// Energy values over the time slice of the atlas, clustered, with a 1-d
/// outer measure estimate of the value set. For clean critical sets the
/// cluster count equals the component count and the estimate vanishes.
#[derive(Debug, Clone, Serialize)]
pub struct LusinReport {
    pub t: f64,
    pub component_count: usize,
    /// Cluster midpoints of the distinct energy values, ascending.
    pub values: Vec<f64>,
    /// Sum of cluster diameters: interval-covering outer estimate of the
    /// energy image of the slice.
    pub outer_estimate: f64,
}

pub fn lusin_diagnostic(model: &EnergyModel, atlas: &Atlas, t: f64) -> LusinReport {
    let components = atlas.components_at(model, t);
    let mut energies: Vec<f64> = Vec::new();
    for c in &components {
        if let Some(samples) = atlas.loop_samples(c) {
            energies.extend(samples.iter().map(|s| model.energy(t, &s.u)));
        } else {
            energies.push(model.energy(t, &c.representative));
        }
    }
    energies.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut values = Vec::new();
    let mut outer = 0.0;
    let mut i = 0;
    while i < energies.len() {
        let mut j = i;
        while j + 1 < energies.len() && energies[j + 1] - energies[j] <= 1e-8 {
            j += 1;
        }
        values.push(0.5 * (energies[i] + energies[j]));
        outer += energies[j] - energies[i];
        i = j + 1;
    }
    LusinReport {
        t,
        component_count: components.len(),
        values,
        outer_estimate: outer,
    }
}

// ---------------------------------------------------------------------------
// JSON export
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct SampleExport {
    s: f64,
    t: f64,
    u: Vec<f64>,
    spectrum: Vec<f64>,
    fold: bool,
}

#[derive(Serialize)]
struct BranchExport {
    kind: BranchKind,
    closed: bool,
    truncation: Option<String>,
    samples: Vec<SampleExport>,
}

#[derive(Serialize)]
struct AtlasExport {
    rho: f64,
    time_window: (f64, f64),
    autonomous: bool,
    coverage_max_distance: f64,
    coverage_probes: usize,
    branches: Vec<BranchExport>,
    isolated: Vec<SampleExport>,
}

impl Atlas {
    pub fn to_json(&self) -> serde_json::Value {
        let export = AtlasExport {
            rho: self.rho,
            time_window: self.time_window,
            autonomous: self.autonomous,
            coverage_max_distance: self.coverage_max_distance,
            coverage_probes: self.coverage_probes,
            branches: self
                .branches
                .iter()
                .map(|b| BranchExport {
                    kind: b.kind,
                    closed: b.closed,
                    truncation: b.truncation.clone(),
                    samples: b
                        .samples
                        .iter()
                        .map(|s| SampleExport {
                            s: s.s,
                            t: s.t,
                            u: s.u.iter().cloned().collect(),
                            spectrum: s.spectrum.clone(),
                            fold: s.fold,
                        })
                        .collect(),
                })
                .collect(),
            isolated: self
                .isolated
                .iter()
                .map(|p| SampleExport {
                    s: 0.0,
                    t: p.t,
                    u: p.u.iter().cloned().collect(),
                    spectrum: p.spectrum.clone(),
                    fold: false,
                })
                .collect(),
        };
        serde_json::to_value(export).expect("atlas export is serializable")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energy::builtin;
    use approx::assert_relative_eq;
    use std::collections::BTreeMap;

    const FOLD_T: f64 = 0.384_900_179_459_750_5; // 2/(3 sqrt 3)
    const FOLD_U: f64 = -0.577_350_269_189_625_8; // -1/sqrt 3

    fn no_params() -> BTreeMap<String, f64> {
        BTreeMap::new()
    }

    fn tilted() -> EnergyModel {
        builtin("tilted_double_well", &no_params()).unwrap()
    }

    #[test]
    fn tilted_roots_at_zero() {
        // oracle: u^3 - u = 0 has roots -1, 0, 1
        let model = tilted();
        let seeds = [-2.0, 0.1, 2.0]
            .iter()
            .map(|&x| DVector::from_element(1, x))
            .collect::<Vec<_>>();
        let roots = find_critical(&model, 0.0, &seeds);
        assert_eq!(roots.len(), 3);
        let expect = [-1.0, 0.0, 1.0];
        for (root, want) in roots.iter().zip(expect) {
            assert_relative_eq!(root.u[0], want, epsilon = 1e-9);
            assert!(root.satisfies_residual_bound());
        }
        assert_eq!(roots[0].classification, Classification::NondegenerateMin);
        assert_eq!(roots[1].classification, Classification::NondegenerateMax);
        assert_eq!(roots[2].classification, Classification::NondegenerateMin);
    }

    #[test]
    fn bowl_from_far_seed() {
        let model = builtin("quadratic_bowl", &no_params()).unwrap();
        let roots = find_critical(&model, 0.3, &[DVector::from_element(1, 5.0)]);
        assert_eq!(roots.len(), 1);
        assert_relative_eq!(roots[0].u[0], 0.0, epsilon = 1e-12);
        assert_eq!(roots[0].classification, Classification::NondegenerateMin);
    }

    #[test]
    fn fold_point_is_degenerate() {
        // oracle: solving 3u^2 - 1 = 0 and u^3 - u = t jointly gives the
        // fold (t*, u*) = (2/(3 sqrt 3), -1/sqrt 3)
        let model = tilted();
        let roots = find_critical(&model, FOLD_T, &[DVector::from_element(1, -0.6)]);
        assert!(!roots.is_empty());
        let fold = &roots[0];
        assert_relative_eq!(fold.u[0], FOLD_U, epsilon = 1e-6);
        assert_eq!(fold.kernel_dim, 1);
        assert_eq!(fold.classification, Classification::Degenerate);
    }

    #[test]
    fn tilted_branch_s_curve() {
        let model = tilted();
        let config = ContinuationConfig::for_model(&model, 10.0);
        let start = CriticalPoint::classify(&model, 0.0, DVector::from_element(1, -1.0));
        let branch = continue_branch(&model, &start, &config);
        assert_eq!(branch.kind, BranchKind::Transversal);
        assert_eq!(branch.folds.len(), 2, "expected exactly two folds");
        let mut fold_ts: Vec<f64> = branch.folds.iter().map(|&i| branch.samples[i].t).collect();
        fold_ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_relative_eq!(fold_ts[0], -FOLD_T, epsilon = 1e-6);
        assert_relative_eq!(fold_ts[1], FOLD_T, epsilon = 1e-6);
        // the branch covers all three roots at t = 0
        for want in [-1.0, 0.0, 1.0] {
            let d = branch.distance_to(0.0, &DVector::from_element(1, want));
            assert!(d < 0.03, "root {want} missed by {d}");
        }
        // unit tangents and residual bound everywhere
        for s in &branch.samples {
            assert_relative_eq!(s.tangent.norm(), 1.0, epsilon = 1e-8);
            assert!(s.residual <= CRITICAL_TOL * (1.0 + s.u.norm()) * 10.0);
        }
    }

    #[test]
    fn bowl_branch_is_straight() {
        let model = builtin("quadratic_bowl", &no_params()).unwrap();
        let config = ContinuationConfig::for_model(&model, 10.0);
        let start = CriticalPoint::classify(&model, 0.0, DVector::zeros(1));
        let branch = continue_branch(&model, &start, &config);
        assert!(branch.folds.is_empty());
        for s in &branch.samples {
            assert!(s.u[0].abs() < 1e-10);
            assert_relative_eq!(s.tangent[0].abs(), 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn planar_well_branch_stays_in_axis() {
        let model = builtin("double_well_2d", &no_params()).unwrap();
        let config = ContinuationConfig::for_model(&model, 10.0);
        let start =
            CriticalPoint::classify(&model, 0.0, DVector::from_vec(vec![-1.0, 0.0]));
        let branch = continue_branch(&model, &start, &config);
        assert!(branch.samples.len() > 10);
        for s in &branch.samples {
            assert!(s.u[1].abs() < 1e-9, "u2 = {}", s.u[1]);
            // reduced residual against the 1-d cubic oracle
            let r = (s.u[0].powi(3) - s.u[0] - s.t).abs();
            assert!(r < 1e-8);
        }
        // same fold structure as the scalar well
        assert_eq!(branch.folds.len(), 2);
        for &i in &branch.folds {
            assert_relative_eq!(branch.samples[i].t.abs(), FOLD_T, epsilon = 1e-6);
        }
    }

    #[test]
    fn fold_set_matches_degeneracy_set() {
        // along the branch, |t'| below tolerance iff the smallest Hessian
        // eigenvalue is below the degeneracy tolerance (one refinement step)
        let model = tilted();
        let config = ContinuationConfig::for_model(&model, 10.0);
        let start = CriticalPoint::classify(&model, 0.0, DVector::from_element(1, -1.0));
        let branch = continue_branch(&model, &start, &config);
        for (i, s) in branch.samples.iter().enumerate() {
            let min_abs_eig = s.spectrum.iter().fold(f64::INFINITY, |m, e| m.min(e.abs()));
            let tol = 1e-6 * (1.0 + s.spectrum.iter().fold(0.0f64, |m, e| m.max(e.abs())));
            if branch.folds.contains(&i) {
                assert!(min_abs_eig < 1e-4, "fold sample with eig {min_abs_eig}");
            }
            if min_abs_eig <= tol {
                // a degenerate sample must be a refined fold
                assert!(branch.folds.contains(&i));
            }
        }
    }

    #[test]
    fn tilted_atlas_one_branch_two_folds() {
        let model = tilted();
        let config = AtlasConfig::new(&model, 10.0, 9, 9);
        let atlas = build_atlas(&model, &config);
        assert_eq!(atlas.branches.len(), 1, "expected a single branch");
        assert_eq!(atlas.branches[0].folds.len(), 2);
        // three components strictly between the folds, one outside
        let comps = atlas.components_at(&model, 0.2);
        assert_eq!(comps.len(), 3);
        let comps = atlas.components_at(&model, 0.45);
        assert_eq!(comps.len(), 1);
    }

    #[test]
    fn mexican_hat_atlas_origin_and_circle() {
        let model = builtin("mexican_hat", &no_params()).unwrap();
        let config = AtlasConfig::new(&model, 10.0, 3, 7);
        let atlas = build_atlas(&model, &config);
        let comps = atlas.components_at(&model, 0.4);
        assert_eq!(comps.len(), 2, "origin plus circle");
        // identify by radius
        let mut radii: Vec<f64> = comps.iter().map(|c| c.representative.norm()).collect();
        radii.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!(radii[0] < 1e-8);
        assert_relative_eq!(radii[1], 1.0, epsilon = 1e-8);
        // the origin is a nondegenerate maximum with spectrum {-1,-1}
        let origin = comps.iter().find(|c| c.representative.norm() < 1e-8).unwrap();
        let cp = CriticalPoint::classify(&model, 0.4, origin.representative.clone());
        assert_eq!(cp.classification, Classification::NondegenerateMax);
        assert_relative_eq!(cp.spectrum[0], -1.0, epsilon = 1e-9);
        assert_relative_eq!(cp.spectrum[1], -1.0, epsilon = 1e-9);
        // the circle is a closed degenerate loop
        let loop_branch = atlas
            .branches
            .iter()
            .find(|b| b.kind == BranchKind::FixedTimeLoop)
            .expect("circle loop present");
        assert!(loop_branch.closed);
        for s in &loop_branch.samples {
            assert_relative_eq!(s.u.norm(), 1.0, epsilon = 1e-7);
        }
    }

    #[test]
    fn bowl_atlas_single_branch() {
        let model = builtin("quadratic_bowl", &no_params()).unwrap();
        let config = AtlasConfig::new(&model, 10.0, 5, 5);
        let atlas = build_atlas(&model, &config);
        assert_eq!(atlas.branches.len(), 1);
        assert!(atlas.branches[0].folds.is_empty());
    }

    #[test]
    fn transversality_at_fold() {
        // closed-form oracle: d_t DE = -1 so |t2| = 1; D^3 E = 6u so
        // t3 = 6 u* = -2 sqrt 3 for the +1-oriented kernel vector
        let model = tilted();
        let cp = CriticalPoint::classify(
            &model,
            FOLD_T,
            DVector::from_element(1, FOLD_U),
        );
        assert_eq!(cp.kernel_dim, 1);
        let report = transversality(&model, &cp);
        assert!(report.passes_t1 && report.passes_t2 && report.passes_t3);
        assert_relative_eq!(report.t2_value.unwrap().abs(), 1.0, epsilon = 1e-6);
        assert_relative_eq!(
            report.t3_value.unwrap(),
            -2.0 * 3.0f64.sqrt(),
            epsilon = 1e-4
        );
    }

    #[test]
    fn transversality_trivial_for_bowl() {
        let model = builtin("quadratic_bowl", &no_params()).unwrap();
        let cp = CriticalPoint::classify(&model, 0.1, DVector::zeros(1));
        let report = transversality(&model, &cp);
        assert_eq!(report.kernel_dim, 0);
        assert!(report.passes_t1 && report.passes_t2 && report.passes_t3);
    }

    #[test]
    fn circle_fails_t2() {
        // rotational symmetry forces a persistent tangential kernel with
        // vanishing time derivative
        let model = builtin("mexican_hat", &no_params()).unwrap();
        let cp = CriticalPoint::classify(&model, 0.3, DVector::from_vec(vec![1.0, 0.0]));
        assert!(cp.kernel_dim >= 1);
        let report = transversality(&model, &cp);
        assert!(!report.passes_t2);
        assert_relative_eq!(report.t2_value.unwrap_or(0.0), 0.0, epsilon = 1e-10);
    }

    #[test]
    fn lusin_mexican_hat_two_values() {
        let model = builtin("mexican_hat", &no_params()).unwrap();
        let config = AtlasConfig::new(&model, 10.0, 3, 7);
        let atlas = build_atlas(&model, &config);
        let report = lusin_diagnostic(&model, &atlas, 0.25);
        assert_eq!(report.values.len(), 2);
        assert_relative_eq!(report.values[0], 0.0, epsilon = 1e-9);
        assert_relative_eq!(report.values[1], 0.25, epsilon = 1e-9);
        assert!(report.outer_estimate < 1e-10);
        assert_eq!(report.component_count, 2);
    }

    #[test]
    fn lusin_tilted_clusters_energies() {
        let model = tilted();
        let config = AtlasConfig::new(&model, 10.0, 9, 9);
        let atlas = build_atlas(&model, &config);
        let report = lusin_diagnostic(&model, &atlas, 0.0);
        // E(0, -1) = E(0, 1) = -0.25 and E(0, 0) = 0 cluster to two values
        assert_eq!(report.component_count, 3);
        assert_eq!(report.values.len(), 2);
        assert_relative_eq!(report.values[0], -0.25, epsilon = 1e-9);
        assert_relative_eq!(report.values[1], 0.0, epsilon = 1e-9);
    }

    #[test]
    fn energy_quasi_constant_on_components() {
        // |E(t,v) - E(t,u)| <= lambda/2 |v-u|^2 for samples of one
        // component; clean built-ins are constant to 1e-8
        let model = builtin("mexican_hat", &no_params()).unwrap();
        let config = AtlasConfig::new(&model, 10.0, 3, 7);
        let atlas = build_atlas(&model, &config);
        let loop_branch = atlas
            .branches
            .iter()
            .find(|b| b.kind == BranchKind::FixedTimeLoop)
            .unwrap();
        let t = loop_branch.samples[0].t;
        for a in loop_branch.samples.iter().step_by(5) {
            for b in loop_branch.samples.iter().step_by(7) {
                let gap = (model.energy(t, &a.u) - model.energy(t, &b.u)).abs();
                assert!(gap <= 0.5 * model.lambda_bound() * (&a.u - &b.u).norm_squared() + 1e-12);
                assert!(gap <= 1e-8);
            }
        }
    }

    #[test]
    fn cross_time_critical_estimate() {
        // E(t,u) - E(s,v) <= L Etilde(s,v) |t-s| + lambda/2 |v-u|^2 with
        // L = C_P e^{C_P T} over atlas samples
        let model = tilted();
        let config = AtlasConfig::new(&model, 10.0, 9, 9);
        let atlas = build_atlas(&model, &config);
        let c_p = model.power_constant();
        let l = c_p * (c_p * model.horizon()).exp();
        let samples: Vec<_> = atlas.branches[0].samples.iter().step_by(6).collect();
        for a in &samples {
            for b in &samples {
                let lhs = model.energy(a.t, &a.u) - model.energy(b.t, &b.u);
                let rhs = l * model.shifted_energy(b.t, &b.u) * (a.t - b.t).abs()
                    + 0.5 * model.lambda_bound() * (&a.u - &b.u).norm_squared();
                assert!(lhs <= rhs + 1e-9, "lhs {lhs} rhs {rhs}");
            }
        }
    }

    #[test]
    fn track_component_through_time() {
        let model = tilted();
        let config = AtlasConfig::new(&model, 10.0, 9, 9);
        let atlas = build_atlas(&model, &config);
        let comps = atlas.components_at(&model, 0.0);
        let left = comps
            .iter()
            .find(|c| (c.representative[0] + 1.0).abs() < 1e-6)
            .unwrap();
        // the left branch exists up to the fold and not beyond
        let tracked = atlas.track_component(&model, left, 0.3).unwrap();
        let mut root = -1.0f64;
        for _ in 0..50 {
            root -= (root.powi(3) - root - 0.3) / (3.0 * root * root - 1.0);
        }
        assert_relative_eq!(tracked.representative[0], root, epsilon = 1e-7);
        assert!(atlas.track_component(&model, left, 0.45).is_none());
        let (t_min, t_max) = atlas.component_time_interval(left);
        assert!(t_min <= -0.45);
        assert_relative_eq!(t_max, FOLD_T, epsilon = 1e-6);
    }

    #[test]
    fn atlas_json_schema() {
        let model = tilted();
        let config = AtlasConfig::new(&model, 10.0, 5, 7);
        let atlas = build_atlas(&model, &config);
        let json = atlas.to_json();
        let branches = json["branches"].as_array().unwrap();
        assert!(!branches.is_empty());
        let sample = &branches[0]["samples"][0];
        for key in ["s", "t", "u", "spectrum", "fold"] {
            assert!(!sample[key].is_null(), "missing key {key}");
        }
    }
}
