//! Time-dependent energies `E : [0,T] x R^d -> R` with exact derivative
//! hooks, the built-in corpus used across tests and experiments, and the
//! sampled consistency checks for the standing structural assumptions
//! (power control, lambda-convexity, Gronwall growth).

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub type ScalarFn = Arc<dyn Fn(f64, &DVector<f64>) -> f64 + Send + Sync>;
pub type VectorFn = Arc<dyn Fn(f64, &DVector<f64>) -> DVector<f64> + Send + Sync>;
pub type MatrixFn = Arc<dyn Fn(f64, &DVector<f64>) -> DMatrix<f64> + Send + Sync>;

#[derive(Debug, Error)]
pub enum EnergyError {
    #[error("unknown built-in energy `{0}`")]
    UnknownBuiltin(String),
    #[error("invalid parameter for `{model}`: {reason}")]
    InvalidParams { model: String, reason: String },
    #[error("dimension mismatch: model has d={expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// A time-dependent energy on `R^d` with exact first and second
/// derivatives and the structural constants of the standing assumptions:
/// `lambda_bound` (the Hessian is bounded below by `-lambda`),
/// `power_constant` (`|d_t E| <= C_P * shifted energy`) and `energy_floor`
/// (a global lower bound used to form the shifted energy `E - floor + 1`).
///
/// All evaluation hooks are pure; a model can be shared read-only across
/// threads.
#[derive(Clone)]
pub struct EnergyModel {
    name: String,
    dim: usize,
    horizon: f64,
    lambda_bound: f64,
    power_constant: f64,
    energy_floor: f64,
    autonomous: bool,
    energy: ScalarFn,
    power: ScalarFn,
    gradient: VectorFn,
    hessian: MatrixFn,
}

impl fmt::Debug for EnergyModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EnergyModel")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("horizon", &self.horizon)
            .field("lambda_bound", &self.lambda_bound)
            .field("power_constant", &self.power_constant)
            .field("energy_floor", &self.energy_floor)
            .field("autonomous", &self.autonomous)
            .finish()
    }
}

#[allow(clippy::too_many_arguments)]
impl EnergyModel {
    pub fn new(
        name: impl Into<String>,
        dim: usize,
        horizon: f64,
        lambda_bound: f64,
        power_constant: f64,
        energy_floor: f64,
        autonomous: bool,
        energy: ScalarFn,
        power: ScalarFn,
        gradient: VectorFn,
        hessian: MatrixFn,
    ) -> Self {
        assert!(dim >= 1, "state dimension must be positive");
        assert!(horizon > 0.0, "horizon must be positive");
        EnergyModel {
            name: name.into(),
            dim,
            horizon,
            lambda_bound,
            power_constant,
            energy_floor,
            autonomous,
            energy,
            power,
            gradient,
            hessian,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn lambda_bound(&self) -> f64 {
        self.lambda_bound
    }

    pub fn power_constant(&self) -> f64 {
        self.power_constant
    }

    pub fn energy_floor(&self) -> f64 {
        self.energy_floor
    }

    pub fn is_autonomous(&self) -> bool {
        self.autonomous
    }

    pub fn energy(&self, t: f64, u: &DVector<f64>) -> f64 {
        (self.energy)(t, u)
    }

    /// Partial derivative of the energy in time, `P(t,u) = d_t E(t,u)`.
    pub fn power(&self, t: f64, u: &DVector<f64>) -> f64 {
        (self.power)(t, u)
    }

    /// Minimal selection of the subdifferential; equal to `DE(t,u)` for the
    /// smooth corpus.
    pub fn gradient(&self, t: f64, u: &DVector<f64>) -> DVector<f64> {
        (self.gradient)(t, u)
    }

    pub fn hessian(&self, t: f64, u: &DVector<f64>) -> DMatrix<f64> {
        (self.hessian)(t, u)
    }

    /// Local slope `|DE(t,u)|`.
    pub fn slope(&self, t: f64, u: &DVector<f64>) -> f64 {
        self.gradient(t, u).norm()
    }

    /// Shifted energy `E(t,u) - floor + 1`; at least 1 whenever the
    /// declared floor is a true lower bound.
    pub fn shifted_energy(&self, t: f64, u: &DVector<f64>) -> f64 {
        self.energy(t, u) - self.energy_floor + 1.0
    }

    /// Membership probe for the uniform sublevel `{u : shifted energy <= rho
    /// for every t}`, checked on a fixed time grid.
    pub fn in_sublevel(&self, rho: f64, u: &DVector<f64>) -> bool {
        if self.autonomous {
            return self.shifted_energy(0.0, u) <= rho;
        }
        let n = 9;
        (0..n).all(|k| {
            let t = self.horizon * k as f64 / (n - 1) as f64;
            self.shifted_energy(t, u) <= rho
        })
    }

    /// Largest radius along the ray `c |-> c * dir` that stays in the
    /// sublevel, located by doubling and bisection.
    pub fn ray_radius(&self, rho: f64, dir: &DVector<f64>) -> f64 {
        let dir = dir.normalize();
        let mut lo = 0.0f64;
        let mut hi = 1.0f64;
        // grow until outside or cap reached
        while self.in_sublevel(rho, &(&dir * hi)) && hi < 1e6 {
            lo = hi;
            hi *= 2.0;
        }
        if hi >= 1e6 {
            return hi;
        }
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if self.in_sublevel(rho, &(&dir * mid)) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    }

    /// Radius estimate of the sublevel: max ray radius over the coordinate
    /// axes and a handful of deterministic diagonal directions.
    pub fn sublevel_radius(&self, rho: f64) -> f64 {
        let mut radius = 0.0f64;
        for i in 0..self.dim {
            let mut e = DVector::zeros(self.dim);
            e[i] = 1.0;
            radius = radius.max(self.ray_radius(rho, &e));
            e[i] = -1.0;
            radius = radius.max(self.ray_radius(rho, &e));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        for _ in 0..8 {
            let dir = random_unit(self.dim, &mut rng);
            radius = radius.max(self.ray_radius(rho, &dir));
            radius = radius.max(self.ray_radius(rho, &(-dir)));
        }
        radius
    }

    /// Draws a pseudo-random point of the sublevel `{shifted energy <= rho}`
    /// together with a uniform time. Rejection sampling along random rays;
    /// returns `None` when the acceptance budget is exhausted.
    pub fn sample_sublevel(&self, rho: f64, rng: &mut ChaCha8Rng) -> Option<(f64, DVector<f64>)> {
        for _ in 0..200 {
            let t = rng.gen_range(0.0..=self.horizon);
            let dir = random_unit(self.dim, rng);
            let reach = self.ray_radius(rho, &dir);
            if reach <= 0.0 {
                continue;
            }
            let c: f64 = rng.gen_range(0.0..=reach);
            let u = &dir * c;
            if self.in_sublevel(rho, &u) {
                return Some((t, u));
            }
        }
        None
    }
}

fn random_unit(dim: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
    loop {
        let v = DVector::from_fn(dim, |_, _| rng.gen_range(-1.0..=1.0f64));
        let n = v.norm();
        if n > 1e-8 {
            return v / n;
        }
    }
}

/// A point evaluation record along flows and transitions.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergySample {
    pub t: f64,
    pub u: DVector<f64>,
    pub energy: f64,
    /// `|DE(t,u)|`, exactly as computed from the gradient hook.
    pub slope: f64,
    pub power: f64,
}

impl EnergySample {
    pub fn at(model: &EnergyModel, t: f64, u: DVector<f64>) -> Self {
        let energy = model.energy(t, &u);
        let slope = model.slope(t, &u);
        let power = model.power(t, &u);
        EnergySample {
            t,
            u,
            energy,
            slope,
            power,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BuiltinName {
    QuadraticBowl,
    TiltedDoubleWell,
    DoubleWell2d,
    MexicanHat,
    AllenCahn1d,
}

impl BuiltinName {
    pub const ALL: [BuiltinName; 5] = [
        BuiltinName::QuadraticBowl,
        BuiltinName::TiltedDoubleWell,
        BuiltinName::DoubleWell2d,
        BuiltinName::MexicanHat,
        BuiltinName::AllenCahn1d,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            BuiltinName::QuadraticBowl => "quadratic_bowl",
            BuiltinName::TiltedDoubleWell => "tilted_double_well",
            BuiltinName::DoubleWell2d => "double_well_2d",
            BuiltinName::MexicanHat => "mexican_hat",
            BuiltinName::AllenCahn1d => "allen_cahn_1d",
        }
    }
}

impl FromStr for BuiltinName {
    type Err = EnergyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "quadratic_bowl" => Ok(BuiltinName::QuadraticBowl),
            "tilted_double_well" => Ok(BuiltinName::TiltedDoubleWell),
            "double_well_2d" => Ok(BuiltinName::DoubleWell2d),
            "mexican_hat" => Ok(BuiltinName::MexicanHat),
            "allen_cahn_1d" => Ok(BuiltinName::AllenCahn1d),
            other => Err(EnergyError::UnknownBuiltin(other.to_string())),
        }
    }
}

/// Constructs one of the built-in energies. Derivatives are exact closed
/// forms, and the structural constants are declared per model.
pub fn builtin(name: &str, params: &BTreeMap<String, f64>) -> Result<EnergyModel, EnergyError> {
    let which = BuiltinName::from_str(name)?;
    let mut params = params.clone();
    let model = match which {
        BuiltinName::QuadraticBowl => quadratic_bowl(&mut params)?,
        BuiltinName::TiltedDoubleWell => tilted_double_well(&mut params)?,
        BuiltinName::DoubleWell2d => double_well_2d(&mut params)?,
        BuiltinName::MexicanHat => mexican_hat(&mut params)?,
        BuiltinName::AllenCahn1d => allen_cahn_1d(&mut params)?,
    };
    if let Some(key) = params.keys().next() {
        return Err(EnergyError::InvalidParams {
            model: name.to_string(),
            reason: format!("unknown parameter `{key}`"),
        });
    }
    Ok(model)
}

fn take_param(params: &mut BTreeMap<String, f64>, key: &str, default: f64) -> f64 {
    params.remove(key).unwrap_or(default)
}

/// `E(t,u) = |u|^2 / 2`; autonomous, convex, unique minimum at the origin.
fn quadratic_bowl(params: &mut BTreeMap<String, f64>) -> Result<EnergyModel, EnergyError> {
    let dim = take_param(params, "dim", 1.0);
    let horizon = take_param(params, "horizon", 1.0);
    if dim < 1.0 || dim.fract() != 0.0 {
        return Err(EnergyError::InvalidParams {
            model: "quadratic_bowl".into(),
            reason: format!("dim must be a positive integer, got {dim}"),
        });
    }
    if horizon <= 0.0 {
        return Err(EnergyError::InvalidParams {
            model: "quadratic_bowl".into(),
            reason: "horizon must be positive".into(),
        });
    }
    let d = dim as usize;
    Ok(EnergyModel::new(
        "quadratic_bowl",
        d,
        horizon,
        0.0,
        0.0,
        0.0,
        true,
        Arc::new(|_t, u: &DVector<f64>| 0.5 * u.norm_squared()),
        Arc::new(|_t, _u| 0.0),
        Arc::new(|_t, u: &DVector<f64>| u.clone()),
        Arc::new(move |_t, _u| DMatrix::identity(d, d)),
    ))
}

/// Largest real root of `u^3 - u = t`, by Newton from a safe bracket.
pub fn cubic_right_root(t: f64) -> f64 {
    let mut u = 1.5f64.max(t.abs().cbrt() + 1.0);
    for _ in 0..100 {
        let f = u * u * u - u - t;
        let df = 3.0 * u * u - 1.0;
        let step = f / df;
        u -= step;
        if step.abs() < 1e-15 {
            break;
        }
    }
    u
}

/// Floor of `u^4/4 - u^2/2 - t u` over `[0, horizon] x R`: the inner minimum
/// decreases in `t`, so the floor sits at `t = horizon` on the right branch.
fn tilted_well_floor(horizon: f64) -> f64 {
    let u = cubic_right_root(horizon);
    0.25 * u.powi(4) - 0.5 * u * u - horizon * u
}

/// Declared power constant for the tilted wells: a scanned upper bound for
/// `|u| / (E(t,u) - floor + 1)` with a safety factor.
fn tilted_well_power_constant(horizon: f64, floor: f64) -> f64 {
    let mut worst = 0.0f64;
    for &t in &[0.0, horizon] {
        for k in 0..=4000 {
            let u = -4.0 + 8.0 * k as f64 / 4000.0;
            let e = 0.25 * u.powi(4) - 0.5 * u * u - t * u;
            let ratio = u.abs() / (e - floor + 1.0);
            worst = worst.max(ratio);
        }
    }
    1.1 * worst
}

/// `E(t,u) = u^4/4 - u^2/2 - t u` on `R`; the classic fold scenario with
/// load `l(t) = t`.
fn tilted_double_well(params: &mut BTreeMap<String, f64>) -> Result<EnergyModel, EnergyError> {
    let horizon = take_param(params, "horizon", 0.5);
    if horizon <= 0.0 {
        return Err(EnergyError::InvalidParams {
            model: "tilted_double_well".into(),
            reason: "horizon must be positive".into(),
        });
    }
    let floor = tilted_well_floor(horizon);
    let c_p = tilted_well_power_constant(horizon, floor);
    Ok(EnergyModel::new(
        "tilted_double_well",
        1,
        horizon,
        1.0,
        c_p,
        floor,
        false,
        Arc::new(|t, u: &DVector<f64>| {
            let x = u[0];
            0.25 * x.powi(4) - 0.5 * x * x - t * x
        }),
        Arc::new(|_t, u: &DVector<f64>| -u[0]),
        Arc::new(|t, u: &DVector<f64>| {
            let x = u[0];
            DVector::from_element(1, x * x * x - x - t)
        }),
        Arc::new(|_t, u: &DVector<f64>| {
            let x = u[0];
            DMatrix::from_element(1, 1, 3.0 * x * x - 1.0)
        }),
    ))
}

/// `E(t,u) = u1^4/4 - u1^2/2 + u2^2/2 - t u1`: the tilted well embedded in
/// the plane with a strictly convex transverse direction.
fn double_well_2d(params: &mut BTreeMap<String, f64>) -> Result<EnergyModel, EnergyError> {
    let horizon = take_param(params, "horizon", 0.5);
    if horizon <= 0.0 {
        return Err(EnergyError::InvalidParams {
            model: "double_well_2d".into(),
            reason: "horizon must be positive".into(),
        });
    }
    let floor = tilted_well_floor(horizon);
    let c_p = tilted_well_power_constant(horizon, floor);
    Ok(EnergyModel::new(
        "double_well_2d",
        2,
        horizon,
        1.0,
        c_p,
        floor,
        false,
        Arc::new(|t, u: &DVector<f64>| {
            let (x, y) = (u[0], u[1]);
            0.25 * x.powi(4) - 0.5 * x * x + 0.5 * y * y - t * x
        }),
        Arc::new(|_t, u: &DVector<f64>| -u[0]),
        Arc::new(|t, u: &DVector<f64>| {
            let (x, y) = (u[0], u[1]);
            DVector::from_vec(vec![x * x * x - x - t, y])
        }),
        Arc::new(|_t, u: &DVector<f64>| {
            let x = u[0];
            DMatrix::from_diagonal(&DVector::from_vec(vec![3.0 * x * x - 1.0, 1.0]))
        }),
    ))
}

/// `E(u) = (|u|^2 - 1)^2 / 4` on `R^2`: autonomous, with a degenerate circle
/// of minima that defeats the transversality conditions.
fn mexican_hat(params: &mut BTreeMap<String, f64>) -> Result<EnergyModel, EnergyError> {
    let horizon = take_param(params, "horizon", 1.0);
    if horizon <= 0.0 {
        return Err(EnergyError::InvalidParams {
            model: "mexican_hat".into(),
            reason: "horizon must be positive".into(),
        });
    }
    Ok(EnergyModel::new(
        "mexican_hat",
        2,
        horizon,
        1.0,
        0.0,
        0.0,
        true,
        Arc::new(|_t, u: &DVector<f64>| {
            let r2 = u.norm_squared();
            0.25 * (r2 - 1.0) * (r2 - 1.0)
        }),
        Arc::new(|_t, _u| 0.0),
        Arc::new(|_t, u: &DVector<f64>| {
            let r2 = u.norm_squared();
            u * (r2 - 1.0)
        }),
        Arc::new(|_t, u: &DVector<f64>| {
            let r2 = u.norm_squared();
            let mut h = DMatrix::identity(2, 2) * (r2 - 1.0);
            for i in 0..2 {
                for j in 0..2 {
                    h[(i, j)] += 2.0 * u[i] * u[j];
                }
            }
            h
        }),
    ))
}

/// Finite-difference Allen-Cahn energy on `(0,1)` with `n` interior nodes,
/// homogeneous Dirichlet ends, well `W(u) = (u^2-1)^2/4` and optional load
/// `l(t,x) = load_amp * t * sin(pi x)`.
fn allen_cahn_1d(params: &mut BTreeMap<String, f64>) -> Result<EnergyModel, EnergyError> {
    let n_param = take_param(params, "n", f64::NAN);
    if !n_param.is_finite() || n_param < 2.0 || n_param.fract() != 0.0 {
        return Err(EnergyError::InvalidParams {
            model: "allen_cahn_1d".into(),
            reason: format!("n must be an integer >= 2, got {n_param}"),
        });
    }
    let n = n_param as usize;
    let horizon = take_param(params, "horizon", 1.0);
    let amp = take_param(params, "load_amp", 0.0);
    if horizon <= 0.0 {
        return Err(EnergyError::InvalidParams {
            model: "allen_cahn_1d".into(),
            reason: "horizon must be positive".into(),
        });
    }
    let a = amp.abs() * horizon;
    if a >= 0.5 {
        return Err(EnergyError::InvalidParams {
            model: "allen_cahn_1d".into(),
            reason: format!("|load_amp| * horizon must be < 0.5, got {a}"),
        });
    }
    let h = 1.0 / (n as f64 + 1.0);
    let xs: Arc<Vec<f64>> = Arc::new((1..=n).map(|i| i as f64 * h).collect());

    // per-node floor: min_v W(v) - a |v| = W(v*) - a v* with v*^3 - v* = a
    let floor = if a == 0.0 {
        0.0
    } else {
        let v = cubic_right_root(a);
        (0.25 * (v * v - 1.0) * (v * v - 1.0) - a * v).min(0.0)
    };
    // |P| <= amp * sum h |u_i| <= C_P * shifted energy, via W(u) >= |u| - c0
    let c0 = 1.2;
    let c_p = if amp == 0.0 {
        0.0
    } else {
        amp.abs() * ((1.0 + (floor - 1.0 + a * c0).abs()) / (1.0 - a) + c0)
    };

    let w = |u: f64| 0.25 * (u * u - 1.0) * (u * u - 1.0);
    let wp = |u: f64| u * u * u - u;
    let load = move |amp: f64, t: f64, x: f64| amp * t * (std::f64::consts::PI * x).sin();

    let xs_e = xs.clone();
    let xs_p = xs.clone();
    let xs_g = xs.clone();
    Ok(EnergyModel::new(
        "allen_cahn_1d",
        n,
        horizon,
        h,
        c_p,
        floor,
        amp == 0.0,
        Arc::new(move |t, u: &DVector<f64>| {
            let mut total = 0.0;
            let mut prev = 0.0;
            for i in 0..n {
                let du = (u[i] - prev) / h;
                total += 0.5 * h * du * du;
                total += h * (w(u[i]) - load(amp, t, xs_e[i]) * u[i]);
                prev = u[i];
            }
            let du = (0.0 - prev) / h;
            total + 0.5 * h * du * du
        }),
        Arc::new(move |t, u: &DVector<f64>| {
            let _ = t;
            let mut p = 0.0;
            for i in 0..n {
                p -= h * amp * (std::f64::consts::PI * xs_p[i]).sin() * u[i];
            }
            p
        }),
        Arc::new(move |t, u: &DVector<f64>| {
            DVector::from_fn(n, |i, _| {
                let left = if i == 0 { 0.0 } else { u[i - 1] };
                let right = if i + 1 == n { 0.0 } else { u[i + 1] };
                (2.0 * u[i] - left - right) / h + h * (wp(u[i]) - load(amp, t, xs_g[i]))
            })
        }),
        Arc::new(move |_t, u: &DVector<f64>| {
            let mut m = DMatrix::zeros(n, n);
            for i in 0..n {
                m[(i, i)] = 2.0 / h + h * (3.0 * u[i] * u[i] - 1.0);
                if i + 1 < n {
                    m[(i, i + 1)] = -1.0 / h;
                    m[(i + 1, i)] = -1.0 / h;
                }
            }
            m
        }),
    ))
}

// ---------------------------------------------------------------------------
// finite-difference probes
// ---------------------------------------------------------------------------

pub fn fd_gradient(model: &EnergyModel, t: f64, u: &DVector<f64>, h: f64) -> DVector<f64> {
    DVector::from_fn(model.dim(), |i, _| {
        let mut up = u.clone();
        let mut dn = u.clone();
        up[i] += h;
        dn[i] -= h;
        (model.energy(t, &up) - model.energy(t, &dn)) / (2.0 * h)
    })
}

pub fn fd_power(model: &EnergyModel, t: f64, u: &DVector<f64>, h: f64) -> f64 {
    (model.energy(t + h, u) - model.energy(t - h, u)) / (2.0 * h)
}

pub fn fd_hessian(model: &EnergyModel, t: f64, u: &DVector<f64>, h: f64) -> DMatrix<f64> {
    let d = model.dim();
    let mut m = DMatrix::zeros(d, d);
    for j in 0..d {
        let mut up = u.clone();
        let mut dn = u.clone();
        up[j] += h;
        dn[j] -= h;
        let col = (model.gradient(t, &up) - model.gradient(t, &dn)) / (2.0 * h);
        m.set_column(j, &col);
    }
    m
}

// ---------------------------------------------------------------------------
// sampled consistency checks
// ---------------------------------------------------------------------------

/// Worst-case margins of the sampled structural checks. All `max_*` entries
/// are errors (small is good); all `min_*` entries are margins (nonnegative
/// is good, up to the stated tolerances).
#[derive(Debug, Clone)]
pub struct ConsistencyReport {
    pub samples_requested: usize,
    pub samples_checked: usize,
    pub max_grad_rel_err: f64,
    pub max_power_rel_err: f64,
    pub max_hess_rel_err: f64,
    pub max_hess_asymmetry: f64,
    pub min_convexity_margin: f64,
    pub min_power_margin: f64,
    pub min_gronwall_margin: f64,
    pub min_shifted_energy: f64,
    pub failures: Vec<String>,
}

impl ConsistencyReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Draws pseudo-random points of `{shifted energy <= rho}` and asserts the
/// declared-model invariants: derivative hooks against centered finite
/// differences, lambda-convexity of the Hessian, the power control and its
/// Gronwall consequence, and positivity of the shifted energy.
pub fn check_consistency(
    model: &EnergyModel,
    samples: usize,
    seed: u64,
    rho: f64,
) -> ConsistencyReport {
    assert!(samples >= 1, "need at least one sample");
    assert!(rho > 1.0, "sublevel bound must exceed 1");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = ConsistencyReport {
        samples_requested: samples,
        samples_checked: 0,
        max_grad_rel_err: 0.0,
        max_power_rel_err: 0.0,
        max_hess_rel_err: 0.0,
        max_hess_asymmetry: 0.0,
        min_convexity_margin: f64::INFINITY,
        min_power_margin: f64::INFINITY,
        min_gronwall_margin: f64::INFINITY,
        min_shifted_energy: f64::INFINITY,
        failures: Vec::new(),
    };
    let fd_h = 1e-5;
    let mut prev: Option<(f64, DVector<f64>)> = None;
    for k in 0..samples {
        let Some((t, u)) = model.sample_sublevel(rho, &mut rng) else {
            report
                .failures
                .push(format!("sample {k}: sublevel sampler exhausted its budget"));
            break;
        };
        report.samples_checked += 1;

        let grad = model.gradient(t, &u);
        let grad_fd = fd_gradient(model, t, &u, fd_h);
        let grad_err = (&grad_fd - &grad).norm() / grad.norm().max(1.0);
        report.max_grad_rel_err = report.max_grad_rel_err.max(grad_err);
        if grad_err >= 1e-6 {
            report.failures.push(format!(
                "sample {k} at t={t:.6}: gradient finite-difference error {grad_err:.3e}"
            ));
        }

        let p = model.power(t, &u);
        let p_fd = fd_power(model, t, &u, fd_h);
        let p_err = (p_fd - p).abs() / p.abs().max(1.0);
        report.max_power_rel_err = report.max_power_rel_err.max(p_err);
        if p_err >= 1e-6 {
            report.failures.push(format!(
                "sample {k} at t={t:.6}: power finite-difference error {p_err:.3e}"
            ));
        }

        let hess = model.hessian(t, &u);
        let asym = (&hess - hess.transpose()).norm() / hess.norm().max(1.0);
        report.max_hess_asymmetry = report.max_hess_asymmetry.max(asym);
        if asym >= 1e-10 {
            report
                .failures
                .push(format!("sample {k}: Hessian asymmetry {asym:.3e}"));
        }
        let hess_fd = fd_hessian(model, t, &u, fd_h);
        let hess_err = (&hess_fd - &hess).norm() / hess.norm().max(1.0);
        report.max_hess_rel_err = report.max_hess_rel_err.max(hess_err);
        if hess_err >= 1e-6 {
            report.failures.push(format!(
                "sample {k}: Hessian finite-difference error {hess_err:.3e}"
            ));
        }

        let eigs = hess.symmetric_eigenvalues();
        let min_eig = eigs.iter().cloned().fold(f64::INFINITY, f64::min);
        let conv_margin = min_eig + model.lambda_bound();
        report.min_convexity_margin = report.min_convexity_margin.min(conv_margin);
        if conv_margin < -1e-8 * (1.0 + min_eig.abs()) {
            report.failures.push(format!(
                "sample {k}: Hessian eigenvalue {min_eig:.6e} below -lambda"
            ));
        }

        let shifted = model.shifted_energy(t, &u);
        report.min_shifted_energy = report.min_shifted_energy.min(shifted);
        if shifted < 1.0 - 1e-9 {
            report
                .failures
                .push(format!("sample {k}: shifted energy {shifted:.6e} below 1"));
        }
        let power_margin = model.power_constant() * shifted - p.abs();
        report.min_power_margin = report.min_power_margin.min(power_margin);
        if power_margin < -1e-9 * shifted {
            report.failures.push(format!(
                "sample {k}: |power| {:.6e} exceeds C_P * shifted {:.6e}",
                p.abs(),
                model.power_constant() * shifted
            ));
        }

        // Gronwall pairing: compare shifted energies of the same state at the
        // current and the previous sampled time
        if let Some((s, v)) = prev.take() {
            let c_p = model.power_constant();
            let span = (t - s).abs();
            let here = model.shifted_energy(t, &v);
            let there = model.shifted_energy(s, &v);
            let upper = (c_p * span).exp() * there - here;
            let lower = here - (-c_p * span).exp() * there;
            let margin = upper.min(lower);
            report.min_gronwall_margin = report.min_gronwall_margin.min(margin);
            if margin < -1e-9 * there {
                report.failures.push(format!(
                    "sample {k}: Gronwall envelope violated between t={s:.4} and t={t:.4}"
                ));
            }
        }
        prev = Some((t, u));
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn no_params() -> BTreeMap<String, f64> {
        BTreeMap::new()
    }

    fn params(entries: &[(&str, f64)]) -> BTreeMap<String, f64> {
        entries
            .iter()
            .map(|(k, v)| (k.to_string(), *v))
            .collect()
    }

    #[test]
    fn unknown_builtin_is_rejected() {
        assert!(matches!(
            builtin("not_a_model", &no_params()),
            Err(EnergyError::UnknownBuiltin(_))
        ));
    }

    #[test]
    fn allen_cahn_requires_two_interior_points() {
        assert!(builtin("allen_cahn_1d", &params(&[("n", 1.0)])).is_err());
        assert!(builtin("allen_cahn_1d", &params(&[("n", 2.5)])).is_err());
        assert!(builtin("allen_cahn_1d", &params(&[("n", 8.0)])).is_ok());
    }

    #[test]
    fn unknown_param_is_rejected() {
        assert!(builtin("quadratic_bowl", &params(&[("wat", 1.0)])).is_err());
    }

    #[test]
    fn allen_cahn_well_values() {
        // W(1) = 0 and W(0) = 0.25
        let w = |u: f64| 0.25 * (u * u - 1.0f64) * (u * u - 1.0);
        assert_eq!(w(1.0), 0.0);
        assert_eq!(w(0.0), 0.25);
        // the model energy at the constant-zero state is sum_i h * W(0)
        let model = builtin("allen_cahn_1d", &params(&[("n", 32.0)])).unwrap();
        let u0 = DVector::zeros(32);
        let n = 32.0;
        let h = 1.0 / (n + 1.0);
        assert_relative_eq!(model.energy(0.0, &u0), 0.25 * n * h, epsilon = 1e-12);
    }

    #[test]
    fn quadratic_bowl_identities() {
        let model = builtin("quadratic_bowl", &params(&[("dim", 3.0)])).unwrap();
        let zero = DVector::zeros(3);
        assert_eq!(model.energy(0.3, &zero), 0.0);
        assert_eq!(model.gradient(0.3, &zero), zero);
        assert_eq!(model.shifted_energy(0.7, &zero), 1.0);
    }

    #[test]
    fn tilted_well_lambda_is_one() {
        // min over R of the Hessian 3u^2 - 1 is -1, attained at u = 0
        let model = builtin("tilted_double_well", &no_params()).unwrap();
        assert_eq!(model.lambda_bound(), 1.0);
        let h = model.hessian(0.0, &DVector::from_element(1, 0.0));
        assert_eq!(h[(0, 0)], -1.0);
    }

    #[test]
    fn tilted_well_floor_matches_grid_oracle() {
        // independent oracle: coarse grid scan plus Newton polish of E_u = 0
        let model = builtin("tilted_double_well", &no_params()).unwrap();
        let horizon = model.horizon();
        let e = |t: f64, u: f64| 0.25 * u.powi(4) - 0.5 * u * u - t * u;
        let mut best = f64::INFINITY;
        for kt in 0..=40 {
            let t = horizon * kt as f64 / 40.0;
            for ku in 0..=800 {
                let mut u = -3.0 + 6.0 * ku as f64 / 800.0;
                for _ in 0..60 {
                    let f = u * u * u - u - t;
                    let df = 3.0 * u * u - 1.0;
                    if df.abs() < 1e-12 {
                        break;
                    }
                    u -= f / df;
                }
                if u.is_finite() {
                    best = best.min(e(t, u));
                }
            }
        }
        assert_relative_eq!(model.energy_floor(), best, epsilon = 1e-9);
        // the shifted energy at (0, 1) must exceed 1: E(0,1) = -0.25 > floor
        let u = DVector::from_element(1, 1.0);
        assert!(model.shifted_energy(0.0, &u) >= 1.0);
        assert_relative_eq!(model.energy(0.0, &u), -0.25, epsilon = 1e-12);
    }

    #[test]
    fn mexican_hat_circle_is_flat() {
        let model = builtin("mexican_hat", &no_params()).unwrap();
        let u = DVector::from_vec(vec![0.6, 0.8]);
        assert_relative_eq!(model.energy(0.0, &u), 0.0, epsilon = 1e-14);
        assert_eq!(model.shifted_energy(0.2, &u), 1.0);
    }

    #[test]
    fn mexican_hat_rotation_invariance() {
        let model = builtin("mexican_hat", &no_params()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let u = DVector::from_fn(2, |_, _| rng.gen_range(-2.0..2.0f64));
            let phi: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let r = DMatrix::from_row_slice(2, 2, &[phi.cos(), -phi.sin(), phi.sin(), phi.cos()]);
            let ru = &r * &u;
            assert!((model.energy(0.0, &u) - model.energy(0.0, &ru)).abs() < 1e-12);
        }
    }

    #[test]
    fn lambda_convexity_characterization() {
        // E(t,v) - E(t,u) >= <grad(t,u), v-u> - lambda/2 |v-u|^2 on pairs
        for name in ["tilted_double_well", "double_well_2d", "mexican_hat"] {
            let model = builtin(name, &no_params()).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let mut pairs = 0;
            while pairs < 200 {
                let Some((t, u)) = model.sample_sublevel(8.0, &mut rng) else {
                    break;
                };
                let Some((_, v)) = model.sample_sublevel(8.0, &mut rng) else {
                    break;
                };
                let lhs = model.energy(t, &v) - model.energy(t, &u);
                let rhs = model.gradient(t, &u).dot(&(&v - &u))
                    - 0.5 * model.lambda_bound() * (&v - &u).norm_squared();
                assert!(
                    lhs >= rhs - 1e-9 * (1.0 + lhs.abs()),
                    "{name}: lambda-convexity violated: {lhs} < {rhs}"
                );
                pairs += 1;
            }
            assert_eq!(pairs, 200);
        }
    }

    #[test]
    fn consistency_suite_all_builtins() {
        for (name, ps) in [
            ("quadratic_bowl", no_params()),
            ("tilted_double_well", no_params()),
            ("double_well_2d", no_params()),
            ("mexican_hat", no_params()),
            ("allen_cahn_1d", params(&[("n", 16.0)])),
            ("allen_cahn_1d", params(&[("n", 16.0), ("load_amp", 0.3)])),
        ] {
            let model = builtin(name, &ps).unwrap();
            let report = check_consistency(&model, 200, 42, 10.0);
            assert!(
                report.passed(),
                "{name}: consistency failures: {:?}",
                report.failures
            );
            assert_eq!(report.samples_checked, 200, "{name}");
        }
    }

    #[test]
    fn tilted_well_thousand_samples_convex_with_lambda_one() {
        let model = builtin("tilted_double_well", &no_params()).unwrap();
        let report = check_consistency(&model, 1000, 77, 10.0);
        assert!(report.passed(), "failures: {:?}", report.failures);
        assert_eq!(report.samples_checked, 1000);
        // the declared lambda = 1 is attained: min eigenvalue approaches -1
        assert!(report.min_convexity_margin >= 0.0);
        assert!(report.min_convexity_margin < 0.3);
    }

    #[test]
    fn quadratic_bowl_gronwall_margin_is_exact() {
        // autonomous energy: power vanishes and the envelope collapses
        let model = builtin("quadratic_bowl", &no_params()).unwrap();
        let report = check_consistency(&model, 100, 3, 10.0);
        assert!(report.passed());
        assert_relative_eq!(report.min_gronwall_margin, 0.0, epsilon = 1e-12);
        assert_eq!(report.max_power_rel_err, 0.0);
    }

    #[test]
    fn allen_cahn_gradient_fd_error_small() {
        let model = builtin("allen_cahn_1d", &params(&[("n", 32.0)])).unwrap();
        let report = check_consistency(&model, 100, 5, 10.0);
        assert!(report.passed(), "failures: {:?}", report.failures);
        assert!(report.max_grad_rel_err < 1e-6);
    }

    #[test]
    fn shifted_energy_at_least_one_on_samples() {
        for name in ["tilted_double_well", "mexican_hat"] {
            let model = builtin(name, &no_params()).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(23);
            for _ in 0..200 {
                if let Some((t, u)) = model.sample_sublevel(6.0, &mut rng) {
                    assert!(model.shifted_energy(t, &u) >= 1.0 - 1e-12);
                }
            }
        }
    }
}
