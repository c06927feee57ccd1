//! Energy-dissipation cost `c_t(U0, U1)` between critical components (and
//! noncritical singletons) at frozen process time: heteroclinic descent
//! orbits, the weighted component graph with shortest-path evaluation, a
//! direct curve-minimization cross-check and the load-balancing
//! reparameterization of transition curves.

use nalgebra::DVector;
use serde::Serialize;
use thiserror::Error;

use crate::atlas::{Atlas, ComponentKind, ComponentRef, CriticalPoint, CRITICAL_TOL};
use crate::energy::EnergyModel;

#[derive(Debug, Error)]
pub enum CostError {
    #[error("endpoint component not found in the atlas at t={0}")]
    UnknownComponent(f64),
    #[error("descent from a noncritical endpoint failed: {0}")]
    DescentFailed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum CurveFlag {
    /// The frozen-time flow left the sublevel `{shifted energy <= rho}`.
    EscapedSublevel,
    /// The arclength budget ran out before the slope tolerance was met.
    BudgetExhausted,
}

/// A discretized admissible transition `theta : [0,1] -> R^d` at frozen
/// time, carrying its parameter values, slope-weighted length
/// `sum (slope_k + slope_{k+1})/2 * |theta_{k+1} - theta_k|` and the
/// discrete noncritical set (nodes with slope above the degeneracy scale).
#[derive(Debug, Clone)]
pub struct TransitionCurve {
    pub t: f64,
    pub nodes: Vec<DVector<f64>>,
    /// Parameter values of the nodes, increasing over [0,1].
    pub params: Vec<f64>,
    pub endpoints: (ComponentRef, ComponentRef),
    pub slope_weighted_length: f64,
    pub noncritical_mask: Vec<bool>,
    pub flags: Vec<CurveFlag>,
}

impl TransitionCurve {
    pub fn constant(model: &EnergyModel, endpoint: &ComponentRef) -> Self {
        let u = endpoint.representative.clone();
        let mask = noncritical(model, endpoint.t, &u);
        TransitionCurve {
            t: endpoint.t,
            nodes: vec![u.clone(), u],
            params: vec![0.0, 1.0],
            endpoints: (endpoint.clone(), endpoint.clone()),
            slope_weighted_length: 0.0,
            noncritical_mask: vec![mask, mask],
            flags: Vec::new(),
        }
    }

    pub fn arclength(&self) -> f64 {
        self.nodes.windows(2).map(|w| (&w[1] - &w[0]).norm()).sum()
    }

    /// Per-segment loads `ds_k + (slope avg) * |dtheta_k|`; the
    /// reparameterization drives their ratio toward 1.
    pub fn segment_loads(&self, model: &EnergyModel) -> Vec<f64> {
        let slopes: Vec<f64> = self.nodes.iter().map(|u| model.slope(self.t, u)).collect();
        (0..self.nodes.len().saturating_sub(1))
            .map(|k| {
                let w = 0.5 * (slopes[k] + slopes[k + 1]) * (&self.nodes[k + 1] - &self.nodes[k]).norm();
                (self.params[k + 1] - self.params[k]) + w
            })
            .collect()
    }

    /// CSV export: `s, theta_1..theta_d, slope, energy`.
    pub fn write_csv<W: std::io::Write>(
        &self,
        model: &EnergyModel,
        mut out: W,
    ) -> std::io::Result<()> {
        let d = self.nodes[0].len();
        let mut header = String::from("s");
        for i in 1..=d {
            header.push_str(&format!(",theta_{i}"));
        }
        header.push_str(",slope,energy");
        writeln!(out, "{header}")?;
        for (k, node) in self.nodes.iter().enumerate() {
            let mut line = format!("{:.16e}", self.params[k]);
            for i in 0..d {
                line.push_str(&format!(",{:.16e}", node[i]));
            }
            line.push_str(&format!(
                ",{:.16e},{:.16e}",
                model.slope(self.t, node),
                model.energy(self.t, node)
            ));
            writeln!(out, "{line}")?;
        }
        Ok(())
    }
}

fn noncritical(model: &EnergyModel, t: f64, u: &DVector<f64>) -> bool {
    model.slope(t, u) > 100.0 * CRITICAL_TOL * (1.0 + u.norm())
}

/// Trapezoid slope-weighted length of a node polyline.
pub fn slope_weighted_length(model: &EnergyModel, t: f64, nodes: &[DVector<f64>]) -> f64 {
    let mut total = 0.0;
    for w in nodes.windows(2) {
        let g0 = model.slope(t, &w[0]);
        let g1 = model.slope(t, &w[1]);
        total += 0.5 * (g0 + g1) * (&w[1] - &w[0]).norm();
    }
    total
}

fn curve_from_nodes(
    model: &EnergyModel,
    t: f64,
    nodes: Vec<DVector<f64>>,
    endpoints: (ComponentRef, ComponentRef),
    flags: Vec<CurveFlag>,
) -> TransitionCurve {
    let n = nodes.len();
    let params = (0..n).map(|k| k as f64 / (n - 1).max(1) as f64).collect();
    let mask = nodes.iter().map(|u| noncritical(model, t, u)).collect();
    let length = slope_weighted_length(model, t, &nodes);
    TransitionCurve {
        t,
        params,
        endpoints,
        slope_weighted_length: length,
        noncritical_mask: mask,
        nodes,
        flags,
    }
}

// ---------------------------------------------------------------------------
// frozen-time descent
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct CostConfig {
    /// Sublevel bound guarding the descent.
    pub rho: f64,
    /// Arclength step of the descent integrator.
    pub descent_step: f64,
    /// Minimum node count of exported transition curves.
    pub resample_nodes: usize,
    /// Maximum node spacing after resampling. The trapezoid rule loses
    /// `O(len^2 |slope''|)` per curve; this cap keeps the discrete
    /// chain-rule estimate within its 1e-8 slack on the corpus.
    pub max_segment: f64,
    /// Arclength budget for a single descent orbit.
    pub arclength_budget: f64,
    /// Run the direct-minimization cross-check inside `cost`.
    pub cross_check: bool,
    pub minimize_nodes: usize,
    pub minimize_iters: usize,
    pub minimize_step: f64,
}

impl Default for CostConfig {
    fn default() -> Self {
        CostConfig {
            rho: 10.0,
            descent_step: 1e-3,
            resample_nodes: 501,
            max_segment: 1.5e-4,
            arclength_budget: 100.0,
            cross_check: true,
            minimize_nodes: 200,
            minimize_iters: 500,
            minimize_step: 1e-2,
        }
    }
}

/// Integrates the frozen-time flow `theta' = -DE(t, theta)` from `start`
/// in arclength parameterization (midpoint rule) until the slope falls
/// under the critical tolerance; a damped Newton endgame finishes the
/// approach once the orbit is close to a critical point.
fn descend(
    model: &EnergyModel,
    t: f64,
    start: &DVector<f64>,
    config: &CostConfig,
) -> (Vec<DVector<f64>>, Vec<CurveFlag>) {
    let mut nodes = vec![start.clone()];
    let mut flags = Vec::new();
    let mut traveled = 0.0;
    let ds = config.descent_step;
    let endgame_scale = 1e-3;
    let min_travel_for_endgame = 0.02 * (1.0 + start.norm());

    loop {
        let u = nodes.last().unwrap().clone();
        let grad = model.gradient(t, &u);
        let slope = grad.norm();
        if slope <= CRITICAL_TOL * (1.0 + u.norm()) {
            break;
        }
        if traveled > config.arclength_budget {
            flags.push(CurveFlag::BudgetExhausted);
            break;
        }
        if model.shifted_energy(t, &u) > config.rho {
            flags.push(CurveFlag::EscapedSublevel);
            break;
        }
        if slope < endgame_scale * (1.0 + u.norm()) && traveled > min_travel_for_endgame {
            // Newton endgame; iterates become curve nodes
            let mut w = u.clone();
            let mut res = slope;
            for _ in 0..60 {
                let g = model.gradient(t, &w);
                res = g.norm();
                if res <= CRITICAL_TOL * (1.0 + w.norm()) {
                    break;
                }
                let hess = model.hessian(t, &w);
                let delta = match hess.clone().lu().solve(&(-&g)) {
                    Some(d) if d.iter().all(|x| x.is_finite()) => d,
                    _ => match hess.svd(true, true).solve(&(-&g), 1e-12) {
                        Ok(d) => d,
                        Err(_) => break,
                    },
                };
                let mut alpha = 1.0;
                let mut moved = false;
                for _ in 0..30 {
                    let candidate = &w + &delta * alpha;
                    if model.slope(t, &candidate) < res {
                        w = candidate;
                        moved = true;
                        break;
                    }
                    alpha *= 0.5;
                }
                if !moved {
                    break;
                }
                nodes.push(w.clone());
            }
            if res > CRITICAL_TOL * (1.0 + w.norm()) {
                flags.push(CurveFlag::BudgetExhausted);
            }
            break;
        }
        // midpoint step of the arclength-normalized descent field
        let dir = -&grad / slope;
        let half = &u + &dir * (0.5 * ds);
        let grad_half = model.gradient(t, &half);
        let slope_half = grad_half.norm();
        let step_dir = if slope_half > 1e-14 {
            -&grad_half / slope_half
        } else {
            dir
        };
        let next = &u + &step_dir * ds;
        traveled += ds;
        nodes.push(next);
    }
    (nodes, flags)
}

fn polyline_length(nodes: &[DVector<f64>]) -> f64 {
    nodes.windows(2).map(|w| (&w[1] - &w[0]).norm()).sum()
}

/// Node count honoring both the minimum count and the segment-length cap.
fn resample_count(nodes: &[DVector<f64>], config: &CostConfig) -> usize {
    let by_spacing = (polyline_length(nodes) / config.max_segment).ceil() as usize + 1;
    config.resample_nodes.max(by_spacing)
}

/// Resamples a polyline to `n` nodes uniformly in arclength; the original
/// vertices are traversed, not approximated.
fn resample_polyline(nodes: &[DVector<f64>], n: usize) -> Vec<DVector<f64>> {
    if nodes.len() <= 2 || n < 2 {
        return nodes.to_vec();
    }
    let mut cumulative = vec![0.0];
    for w in nodes.windows(2) {
        let last = *cumulative.last().unwrap();
        cumulative.push(last + (&w[1] - &w[0]).norm());
    }
    let total = *cumulative.last().unwrap();
    if total <= 0.0 {
        return vec![nodes[0].clone(), nodes[nodes.len() - 1].clone()];
    }
    let mut out = Vec::with_capacity(n);
    let mut seg = 0usize;
    for k in 0..n {
        let target = total * k as f64 / (n - 1) as f64;
        while seg + 1 < cumulative.len() - 1 && cumulative[seg + 1] < target {
            seg += 1;
        }
        let span = cumulative[seg + 1] - cumulative[seg];
        let alpha = if span > 0.0 {
            ((target - cumulative[seg]) / span).clamp(0.0, 1.0)
        } else {
            0.0
        };
        out.push(&nodes[seg] * (1.0 - alpha) + &nodes[seg + 1] * alpha);
    }
    out
}

fn snap_to_component(atlas: &Atlas, model: &EnergyModel, t: f64, u: &DVector<f64>) -> Option<ComponentRef> {
    let components = atlas.components_at(model, t);
    let mut best: Option<(f64, ComponentRef)> = None;
    for c in components {
        let dist = match atlas.loop_samples(&c) {
            Some(samples) => samples
                .iter()
                .map(|s| (&s.u - u).norm())
                .fold(f64::INFINITY, f64::min),
            None => (&c.representative - u).norm(),
        };
        if best.as_ref().map_or(true, |(d, _)| dist < *d) {
            best = Some((dist, c));
        }
    }
    let (dist, c) = best?;
    (dist <= 1e-3 * (1.0 + u.norm())).then_some(c)
}

/// Frozen-time gradient-flow orbit leaving `saddle` along an unstable or
/// kernel direction, run until it settles on a critical component. The
/// returned curve starts at the saddle itself and its terminal node is the
/// converged state; endpoints are snapped to atlas components.
pub fn heterocline(
    model: &EnergyModel,
    atlas: &Atlas,
    t: f64,
    saddle: &CriticalPoint,
    direction: &DVector<f64>,
    config: &CostConfig,
) -> Result<TransitionCurve, CostError> {
    let dir = direction.normalize();
    let delta = 1e-4 * (1.0 + saddle.u.norm());
    let offset = &saddle.u + &dir * delta;
    let (mut raw, flags) = descend(model, t, &offset, config);
    let mut nodes = vec![saddle.u.clone()];
    nodes.append(&mut raw);
    let terminal = nodes.last().unwrap().clone();

    let from = snap_to_component(atlas, model, t, &saddle.u)
        .unwrap_or_else(|| ComponentRef::singleton(t, saddle.u.clone()));
    let to = snap_to_component(atlas, model, t, &terminal)
        .unwrap_or_else(|| ComponentRef::singleton(t, terminal.clone()));

    let resampled = resample_polyline(&nodes, resample_count(&nodes, config));
    Ok(curve_from_nodes(model, t, resampled, (from, to), flags))
}

// ---------------------------------------------------------------------------
// the component graph and the cost
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum CostMethod {
    HeteroclinicGraph,
    DirectMinimization,
}

/// A finite cost value with its minimizer witness. The chain-rule lower
/// bound `value >= |E(t,U1) - E(t,U0)|` is recorded as `lower_bound_gap`.
#[derive(Debug, Clone)]
pub struct CostResult {
    pub value: f64,
    pub curve: TransitionCurve,
    pub method: CostMethod,
    pub lower_bound_gap: f64,
    /// Value of the direct-minimization cross-check, when run; never more
    /// than `value + 1e-6`.
    pub cross_check_value: Option<f64>,
}

/// Cost outcome; `Unreachable` is the explicit marker for `c = +infinity`
/// (no admissible transition found in the heteroclinic graph).
#[derive(Debug, Clone)]
pub enum CostOutcome {
    Reached(CostResult),
    Unreachable,
}

impl CostOutcome {
    pub fn value(&self) -> Option<f64> {
        match self {
            CostOutcome::Reached(r) => Some(r.value),
            CostOutcome::Unreachable => None,
        }
    }

    pub fn unwrap_reached(self) -> CostResult {
        match self {
            CostOutcome::Reached(r) => r,
            CostOutcome::Unreachable => panic!("cost was unreachable"),
        }
    }
}

struct GraphEdge {
    a: usize,
    b: usize,
    weight: f64,
    /// Witness oriented from `a` to `b`.
    curve_nodes: Vec<DVector<f64>>,
}

struct ComponentGraph {
    components: Vec<ComponentRef>,
    energies: Vec<f64>,
    edges: Vec<GraphEdge>,
    adjacency: Vec<Vec<usize>>,
}

fn component_energy(model: &EnergyModel, c: &ComponentRef) -> f64 {
    model.energy(c.t, &c.representative)
}

fn build_graph(
    model: &EnergyModel,
    atlas: &Atlas,
    t: f64,
    config: &CostConfig,
) -> ComponentGraph {
    let components = atlas.components_at(model, t);
    let energies: Vec<f64> = components
        .iter()
        .map(|c| component_energy(model, c))
        .collect();
    let mut edges: Vec<GraphEdge> = Vec::new();

    let locate = |u: &DVector<f64>| -> Option<usize> {
        let mut best: Option<(f64, usize)> = None;
        for (i, c) in components.iter().enumerate() {
            let dist = match atlas.loop_samples(c) {
                Some(samples) => samples
                    .iter()
                    .map(|s| (&s.u - u).norm())
                    .fold(f64::INFINITY, f64::min),
                None => (&c.representative - u).norm(),
            };
            if best.map_or(true, |(d, _)| dist < d) {
                best = Some((dist, i));
            }
        }
        best.and_then(|(d, i)| (d <= 1e-3 * (1.0 + u.norm())).then_some(i))
    };

    for (i, c) in components.iter().enumerate() {
        let cp = CriticalPoint::classify(model, t, c.representative.clone());
        if cp.morse_index == 0 && cp.kernel_dim == 0 {
            continue;
        }
        let hess = model.hessian(t, &c.representative);
        let eig = hess.symmetric_eigen();
        let tol = {
            let radius = eig.eigenvalues.iter().fold(0.0f64, |m, e| m.max(e.abs()));
            1e-6 * (1.0 + radius)
        };
        for (k, lambda) in eig.eigenvalues.iter().enumerate() {
            if *lambda >= -tol && lambda.abs() > tol {
                continue; // stable direction
            }
            let v = eig.eigenvectors.column(k).into_owned();
            for sign in [1.0f64, -1.0] {
                let dir = &v * sign;
                let Ok(curve) = heterocline(model, atlas, t, &cp, &dir, config) else {
                    continue;
                };
                if !curve.flags.is_empty() {
                    continue;
                }
                let Some(j) = locate(curve.nodes.last().unwrap()) else {
                    continue;
                };
                if j == i {
                    continue;
                }
                let weight = (energies[i] - energies[j]).abs();
                let duplicate = edges.iter().any(|e| {
                    (e.a == i && e.b == j || e.a == j && e.b == i)
                        && (e.weight - weight).abs() < 1e-12
                });
                if !duplicate {
                    edges.push(GraphEdge {
                        a: i,
                        b: j,
                        weight,
                        curve_nodes: curve.nodes,
                    });
                }
            }
        }
    }

    let mut adjacency = vec![Vec::new(); components.len()];
    for (idx, e) in edges.iter().enumerate() {
        adjacency[e.a].push(idx);
        adjacency[e.b].push(idx);
    }
    ComponentGraph {
        components,
        energies,
        edges,
        adjacency,
    }
}

fn dijkstra(graph: &ComponentGraph, src: usize, dst: usize) -> Option<(f64, Vec<usize>)> {
    let n = graph.components.len();
    let mut dist = vec![f64::INFINITY; n];
    let mut prev_edge: Vec<Option<usize>> = vec![None; n];
    let mut visited = vec![false; n];
    dist[src] = 0.0;
    for _ in 0..n {
        let mut current = None;
        let mut best = f64::INFINITY;
        for v in 0..n {
            if !visited[v] && dist[v] < best {
                best = dist[v];
                current = Some(v);
            }
        }
        let Some(v) = current else { break };
        if v == dst {
            break;
        }
        visited[v] = true;
        for &ei in &graph.adjacency[v] {
            let e = &graph.edges[ei];
            let w = if e.a == v { e.b } else { e.a };
            if dist[v] + e.weight < dist[w] {
                dist[w] = dist[v] + e.weight;
                prev_edge[w] = Some(ei);
            }
        }
    }
    if !dist[dst].is_finite() {
        return None;
    }
    let mut path = Vec::new();
    let mut v = dst;
    while v != src {
        let ei = prev_edge[v]?;
        path.push(ei);
        let e = &graph.edges[ei];
        v = if e.a == v { e.b } else { e.a };
    }
    path.reverse();
    Some((dist[dst], path))
}

/// Walks loop samples along the shorter arc between the points `from` and
/// `to` of a loop component.
fn thread_loop(atlas: &Atlas, c: &ComponentRef, from: &DVector<f64>, to: &DVector<f64>) -> Vec<DVector<f64>> {
    let Some(samples) = atlas.loop_samples(c) else {
        return Vec::new();
    };
    let nearest = |u: &DVector<f64>| -> usize {
        samples
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| {
                (&a.u - u)
                    .norm()
                    .partial_cmp(&(&b.u - u).norm())
                    .unwrap()
            })
            .map(|(i, _)| i)
            .unwrap_or(0)
    };
    let i = nearest(from);
    let j = nearest(to);
    let n = samples.len();
    if i == j || n < 2 {
        return Vec::new();
    }
    // forward and backward arc lengths on the cyclic index set
    let forward: Vec<usize> = if i <= j {
        (i..=j).collect()
    } else {
        (i..n).chain(0..=j).collect()
    };
    let backward: Vec<usize> = if j <= i {
        (j..=i).rev().collect()
    } else {
        (0..=i).rev().chain((j..n).rev()).collect()
    };
    let arc_len = |idx: &[usize]| -> f64 {
        idx.windows(2)
            .map(|w| (&samples[w[1]].u - &samples[w[0]].u).norm())
            .sum()
    };
    let chosen = if arc_len(&forward) <= arc_len(&backward) {
        forward
    } else {
        backward
    };
    chosen.into_iter().map(|k| samples[k].u.clone()).collect()
}

/// Energy-dissipation cost between two components (or noncritical
/// singletons) at time `t`, via shortest paths in the heteroclinic
/// component graph; edge weights are the energy gaps `|E(t,a) - E(t,b)|`,
/// which realizes the symmetry of the cost. Noncritical singletons are
/// first connected to their basin by frozen-time descent. Unreachable
/// endpoints produce the explicit `Unreachable` marker.
pub fn cost(
    model: &EnergyModel,
    atlas: &Atlas,
    t: f64,
    u0: &ComponentRef,
    u1: &ComponentRef,
    config: &CostConfig,
) -> Result<CostOutcome, CostError> {
    if u0.same_component(u1) {
        return Ok(CostOutcome::Reached(CostResult {
            value: 0.0,
            curve: TransitionCurve::constant(model, u0),
            method: CostMethod::HeteroclinicGraph,
            lower_bound_gap: 0.0,
            cross_check_value: None,
        }));
    }

    let mut graph = build_graph(model, atlas, t, config);

    // attach endpoints; noncritical singletons get a descent edge into
    // their basin component
    let attach = |endpoint: &ComponentRef,
                  graph: &mut ComponentGraph|
     -> Result<usize, CostError> {
        if endpoint.kind == ComponentKind::CriticalComponent {
            return graph
                .components
                .iter()
                .position(|c| c.same_component(endpoint))
                .ok_or(CostError::UnknownComponent(t));
        }
        let idx = graph.components.len();
        graph.components.push(endpoint.clone());
        graph
            .energies
            .push(model.energy(t, &endpoint.representative));
        graph.adjacency.push(Vec::new());
        let (nodes, flags) = descend(model, t, &endpoint.representative, config);
        if !flags.is_empty() {
            return Err(CostError::DescentFailed(format!("{flags:?}")));
        }
        let terminal = nodes.last().unwrap().clone();
        let basin = graph
            .components
            .iter()
            .position(|c| {
                let dist = match atlas.loop_samples(c) {
                    Some(samples) => samples
                        .iter()
                        .map(|s| (&s.u - &terminal).norm())
                        .fold(f64::INFINITY, f64::min),
                    None => (&c.representative - &terminal).norm(),
                };
                c.kind == ComponentKind::CriticalComponent
                    && dist <= 1e-3 * (1.0 + terminal.norm())
            })
            .ok_or_else(|| CostError::DescentFailed("basin not in atlas".to_string()))?;
        let weight = graph.energies[idx] - graph.energies[basin];
        let ei = graph.edges.len();
        graph.edges.push(GraphEdge {
            a: idx,
            b: basin,
            weight: weight.max(0.0),
            curve_nodes: nodes,
        });
        graph.adjacency[idx].push(ei);
        graph.adjacency[basin].push(ei);
        Ok(idx)
    };

    let src = attach(u0, &mut graph)?;
    let dst = attach(u1, &mut graph)?;

    let Some((value, path)) = dijkstra(&graph, src, dst) else {
        return Ok(CostOutcome::Unreachable);
    };

    // assemble the witness: concatenated heteroclines, reversed where
    // needed, threaded through loop components between legs
    let mut nodes: Vec<DVector<f64>> = vec![u0.representative.clone()];
    let mut at = src;
    for &ei in &path {
        let e = &graph.edges[ei];
        let (leg, next): (Vec<DVector<f64>>, usize) = if e.a == at {
            (e.curve_nodes.clone(), e.b)
        } else {
            (e.curve_nodes.iter().rev().cloned().collect(), e.a)
        };
        let entry = leg.first().unwrap();
        if let Some(last) = nodes.last() {
            if (last - entry).norm() > 1e-10 {
                let thread = thread_loop(atlas, &graph.components[at], last, entry);
                nodes.extend(thread);
            }
        }
        nodes.extend(leg);
        at = next;
    }
    if at != dst {
        return Ok(CostOutcome::Unreachable);
    }

    let resampled = resample_polyline(&nodes, resample_count(&nodes, config));
    let curve = curve_from_nodes(model, t, resampled, (u0.clone(), u1.clone()), Vec::new());
    let energy_gap = (model.energy(t, &u1.representative) - model.energy(t, &u0.representative)).abs();
    let cross_check_value = if config.cross_check {
        Some(direct_minimization(model, &curve, config).1)
    } else {
        None
    };
    Ok(CostOutcome::Reached(CostResult {
        value,
        curve,
        method: CostMethod::HeteroclinicGraph,
        lower_bound_gap: value - energy_gap,
        cross_check_value,
    }))
}

/// Local descent on the discrete slope-weighted length over interior node
/// positions (endpoints pinned), applied after the arclength
/// reparameterization. An upper-bound cross-check, never the primary
/// value: the discretized functional is nonsmooth near the critical set.
pub fn direct_minimization(
    model: &EnergyModel,
    curve: &TransitionCurve,
    config: &CostConfig,
) -> (TransitionCurve, f64) {
    let t = curve.t;
    let mut nodes = resample_polyline(&curve.nodes, config.minimize_nodes);
    let n = nodes.len();
    if n < 3 {
        return (curve.clone(), curve.slope_weighted_length);
    }
    let objective = |nodes: &[DVector<f64>]| slope_weighted_length(model, t, nodes);
    let mut value = objective(&nodes);
    let mut step = config.minimize_step;
    for _ in 0..config.minimize_iters {
        // analytic gradient of sum 1/2 (g_k + g_{k+1}) |d_k| in the nodes
        let slopes: Vec<f64> = nodes.iter().map(|u| model.slope(t, u)).collect();
        let mut grad: Vec<DVector<f64>> = Vec::with_capacity(n);
        for i in 0..n {
            if i == 0 || i == n - 1 {
                grad.push(DVector::zeros(nodes[0].len()));
                continue;
            }
            let back = &nodes[i] - &nodes[i - 1];
            let fwd = &nodes[i + 1] - &nodes[i];
            let lb = back.norm().max(1e-14);
            let lf = fwd.norm().max(1e-14);
            let g = model.gradient(t, &nodes[i]);
            let gn = slopes[i].max(1e-14);
            let dslope = model.hessian(t, &nodes[i]) * &g / gn;
            let mut gi = &dslope * (0.5 * (lb + lf));
            gi += &back * (0.5 * (slopes[i - 1] + slopes[i]) / lb);
            gi -= &fwd * (0.5 * (slopes[i] + slopes[i + 1]) / lf);
            grad.push(gi);
        }
        let gnorm: f64 = grad.iter().map(|g| g.norm_squared()).sum::<f64>().sqrt();
        if gnorm < 1e-12 {
            break;
        }
        let mut improved = false;
        let mut alpha = step;
        for _ in 0..25 {
            let candidate: Vec<DVector<f64>> = nodes
                .iter()
                .zip(grad.iter())
                .map(|(u, g)| u - g * alpha)
                .collect();
            let cand_value = objective(&candidate);
            if cand_value < value {
                nodes = candidate;
                value = cand_value;
                improved = true;
                break;
            }
            alpha *= 0.5;
        }
        if !improved {
            break;
        }
        step = (alpha * 1.5).min(config.minimize_step);
    }
    let refined = curve_from_nodes(model, t, nodes, curve.endpoints.clone(), curve.flags.clone());
    let v = refined.slope_weighted_length;
    (refined, v)
}

/// Redistributes the curve parameter so that the per-segment load
/// `ds_k + slope * |dtheta_k|` is as uniform as the fixed node geometry
/// allows; node positions are untouched, so the slope-weighted length is
/// exactly preserved.
pub fn reparameterize(model: &EnergyModel, curve: &TransitionCurve) -> TransitionCurve {
    let n = curve.nodes.len();
    if n < 2 {
        return curve.clone();
    }
    let slopes: Vec<f64> = curve.nodes.iter().map(|u| model.slope(curve.t, u)).collect();
    let weights: Vec<f64> = (0..n - 1)
        .map(|k| 0.5 * (slopes[k] + slopes[k + 1]) * (&curve.nodes[k + 1] - &curve.nodes[k]).norm())
        .collect();
    let total: f64 = weights.iter().sum();
    let target = (1.0 + total) / (n - 1) as f64;
    let mut gaps: Vec<f64> = weights.iter().map(|w| (target - w).max(0.0)).collect();
    let gap_sum: f64 = gaps.iter().sum();
    if gap_sum > 0.0 {
        for g in &mut gaps {
            *g /= gap_sum;
        }
    } else {
        for g in &mut gaps {
            *g = 1.0 / (n - 1) as f64;
        }
    }
    let mut params = Vec::with_capacity(n);
    params.push(0.0);
    for g in &gaps {
        let last = *params.last().unwrap();
        params.push(last + g);
    }
    let last = *params.last().unwrap();
    if last > 0.0 {
        for p in &mut params {
            *p /= last;
        }
    }
    TransitionCurve {
        params,
        ..curve.clone()
    }
}
