//! Ambiguity sets around a reference distribution over atoms, and the exact
//! inner problem
//!
//! ```text
//! w* = argmin { ⟨c, w⟩ : w ∈ Δ, D(w, w_ref) ≤ ε }
//! ```
//!
//! for `D` one of KL, total variation (half L1) and the 1-Wasserstein
//! distance under a finite ground metric.
//!
//! * KL: the minimiser is the Gibbs tilt `w_i ∝ w_ref,i·exp(−c_i/η)`; `η` is
//!   found by bisection (in `ln η`) on the budget equation `KL(η) = ε`.
//! * TV: move up to `ε` mass from the most expensive atoms onto the cheapest.
//! * W1: a fractional multiple-choice knapsack. Each source atom walks down
//!   the lower convex hull of its (transport cost, value) options; segments
//!   are taken steepest first until the transport budget is spent.
//!
//! [`solve_inner_oracle`] is an independent brute-force/dual check used by
//! the tests.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::WeightVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Divergence {
    Kl,
    Tv,
    W1,
}

impl std::str::FromStr for Divergence {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "kl" => Ok(Divergence::Kl),
            "tv" => Ok(Divergence::Tv),
            "w1" | "wasserstein" => Ok(Divergence::W1),
            other => Err(Error::config("divergence", format!("unknown divergence `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmbiguitySpec {
    pub divergence: Divergence,
    pub epsilon: f64,
    /// Pairwise atom distances for W1. The 0/1 metric is used when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_metric: Option<Vec<Vec<f64>>>,
}

impl AmbiguitySpec {
    pub fn kl(epsilon: f64) -> Self {
        Self {
            divergence: Divergence::Kl,
            epsilon,
            ground_metric: None,
        }
    }

    pub fn tv(epsilon: f64) -> Self {
        Self {
            divergence: Divergence::Tv,
            epsilon,
            ground_metric: None,
        }
    }

    pub fn w1(epsilon: f64, metric: Vec<Vec<f64>>) -> Self {
        Self {
            divergence: Divergence::W1,
            epsilon,
            ground_metric: Some(metric),
        }
    }

    pub fn with_epsilon(&self, epsilon: f64) -> Self {
        Self {
            epsilon,
            ..self.clone()
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(Error::config("epsilon", "must be finite and >= 0"));
        }
        if let Some(m) = &self.ground_metric {
            validate_metric(m)?;
            if m.len() != n {
                return Err(Error::Dimension {
                    context: "ground metric",
                    expected: n,
                    found: m.len(),
                });
            }
        }
        Ok(())
    }

    /// Spec over the sub-simplex spanned by `atoms`.
    pub fn restrict(&self, atoms: &[usize]) -> Self {
        let ground_metric = self.ground_metric.as_ref().map(|m| {
            atoms
                .iter()
                .map(|&i| atoms.iter().map(|&j| m[i][j]).collect())
                .collect()
        });
        Self {
            divergence: self.divergence,
            epsilon: self.epsilon,
            ground_metric,
        }
    }

    fn metric(&self, i: usize, j: usize) -> f64 {
        match &self.ground_metric {
            Some(m) => m[i][j],
            None => {
                if i == j {
                    0.0
                } else {
                    1.0
                }
            }
        }
    }
}

/// Checks that `metric` is square, symmetric, finite, non-negative and has a
/// zero diagonal.
pub fn validate_metric(metric: &[Vec<f64>]) -> Result<()> {
    let n = metric.len();
    for (i, row) in metric.iter().enumerate() {
        if row.len() != n {
            return Err(Error::Dimension {
                context: "ground metric row",
                expected: n,
                found: row.len(),
            });
        }
        for (j, v) in row.iter().enumerate() {
            if !v.is_finite() || *v < 0.0 {
                return Err(Error::Invariant(format!("ground metric entry ({i},{j}) = {v}")));
            }
            if i == j && *v != 0.0 {
                return Err(Error::Invariant(format!("ground metric diagonal ({i},{i}) = {v}")));
            }
            if (metric[j][i] - v).abs() > 1e-12 {
                return Err(Error::Invariant(format!("ground metric not symmetric at ({i},{j})")));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct InnerSolution {
    pub w_star: WeightVector,
    pub value: f64,
    /// Lagrange multiplier of the budget constraint (`η` for KL, the price
    /// per unit of transport for TV and W1); zero when the ball is inactive.
    pub multiplier: f64,
}

fn check_inputs(ucb: &[f64], w_ref: &WeightVector, spec: &AmbiguitySpec) -> Result<()> {
    if ucb.len() != w_ref.len() {
        return Err(Error::Dimension {
            context: "inner problem",
            expected: w_ref.len(),
            found: ucb.len(),
        });
    }
    if ucb.iter().any(|c| !c.is_finite()) {
        return Err(Error::Precondition(format!("non-finite acquisition vector {ucb:?}")));
    }
    spec.validate(ucb.len())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimises `⟨ucb, w⟩` over the ambiguity ball around `w_ref`.
pub fn solve_inner(ucb: &[f64], w_ref: &WeightVector, spec: &AmbiguitySpec) -> Result<InnerSolution> {
    check_inputs(ucb, w_ref, spec)?;
    if spec.epsilon == 0.0 {
        return Ok(InnerSolution {
            w_star: w_ref.clone(),
            value: w_ref.dot(ucb),
            multiplier: 0.0,
        });
    }
    let w = match spec.divergence {
        Divergence::Kl => return solve_kl(ucb, w_ref.as_slice(), spec.epsilon),
        Divergence::Tv => solve_tv(ucb, w_ref.as_slice(), spec.epsilon),
        Divergence::W1 => solve_transport(ucb, w_ref.as_slice(), spec),
    }?;
    Ok(w)
}

fn finish(w: Vec<f64>, ucb: &[f64], multiplier: f64) -> Result<InnerSolution> {
    let w_star = WeightVector::normalized(w)?;
    let value = w_star.dot(ucb);
    Ok(InnerSolution {
        w_star,
        value,
        multiplier,
    })
}

/// Gibbs tilt of `q` at temperature `eta`, with the KL divergence it spends.
fn gibbs(c: &[f64], q: &[f64], c_min: f64, eta: f64) -> (Vec<f64>, f64) {
    let t: Vec<f64> = c
        .iter()
        .zip(q)
        .map(|(ci, qi)| if *qi > 0.0 { -(ci - c_min) / eta } else { f64::NEG_INFINITY })
        .collect();
    let t_max = t.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = t.iter().zip(q).map(|(ti, qi)| qi * (ti - t_max).exp()).sum();
    let log_z = t_max + z.ln();
    let w: Vec<f64> = t
        .iter()
        .zip(q)
        .map(|(ti, qi)| if *qi > 0.0 { qi * (ti - log_z).exp() } else { 0.0 })
        .collect();
    let kl = w
        .iter()
        .zip(&t)
        .filter(|(wi, _)| **wi > 0.0)
        .map(|(wi, ti)| wi * ti)
        .sum::<f64>()
        - log_z;
    (w, kl.max(0.0))
}

const KL_BISECTION_TOL: f64 = 1e-10;
const KL_BISECTION_ITERS: usize = 200;

fn solve_kl(c: &[f64], q: &[f64], epsilon: f64) -> Result<InnerSolution> {
    let support: Vec<usize> = (0..q.len()).filter(|&i| q[i] > 0.0).collect();
    let c_min = support.iter().map(|&i| c[i]).fold(f64::INFINITY, f64::min);
    let c_max = support.iter().map(|&i| c[i]).fold(f64::NEG_INFINITY, f64::max);
    let argmin_mass: f64 = support.iter().filter(|&&i| c[i] == c_min).map(|&i| q[i]).sum();
    // Budget large enough to reach the cheapest atoms inside the support.
    if epsilon >= -argmin_mass.ln() || c_max == c_min {
        let w: Vec<f64> = (0..q.len())
            .map(|i| if q[i] > 0.0 && c[i] == c_min { q[i] / argmin_mass } else { 0.0 })
            .collect();
        return finish(w, c, 0.0);
    }
    // Bracket for ln η, scaled to the spread of the objective.
    let spread = c_max - c_min;
    let mut lo = (1e-8 * spread).ln();
    let mut hi = (1e8 * spread).ln();
    let (w_lo, kl_lo) = gibbs(c, q, c_min, lo.exp());
    if kl_lo <= epsilon {
        return finish(w_lo, c, lo.exp());
    }
    if gibbs(c, q, c_min, hi.exp()).1 > epsilon {
        // Budget below floating-point resolution of the tilt.
        return finish(q.to_vec(), c, f64::INFINITY);
    }
    for _ in 0..KL_BISECTION_ITERS {
        let mid = 0.5 * (lo + hi);
        let (_, kl) = gibbs(c, q, c_min, mid.exp());
        if kl > epsilon {
            lo = mid;
        } else {
            hi = mid;
            if epsilon - kl <= KL_BISECTION_TOL {
                break;
            }
        }
    }
    let eta = hi.exp();
    let (w, _) = gibbs(c, q, c_min, eta);
    finish(w, c, eta)
}

/// Maximal deviation from stationarity of a KL solution: for atoms in the
/// support of `w`, `c_i + η·ln(w_i / w_ref,i)` must be constant.
pub fn kl_kkt_residual(ucb: &[f64], w_ref: &WeightVector, solution: &InnerSolution) -> f64 {
    let eta = solution.multiplier;
    if eta == 0.0 || !eta.is_finite() {
        return 0.0;
    }
    let terms: Vec<f64> = ucb
        .iter()
        .zip(w_ref.as_slice())
        .zip(solution.w_star.as_slice())
        .filter(|((_, q), w)| **q > 0.0 && **w > 0.0)
        .map(|((c, q), w)| c + eta * (w / q).ln())
        .collect();
    let mean = terms.iter().sum::<f64>() / terms.len() as f64;
    terms.iter().map(|t| (t - mean).abs()).fold(0.0, f64::max)
}

fn argmin_index(c: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in c.iter().enumerate() {
        if *v < c[best] {
            best = i;
        }
    }
    best
}

fn solve_tv(c: &[f64], q: &[f64], epsilon: f64) -> Result<InnerSolution> {
    let sink = argmin_index(c);
    let mut order: Vec<usize> = (0..c.len()).filter(|&i| c[i] > c[sink]).collect();
    order.sort_by(|&a, &b| c[b].total_cmp(&c[a]).then(a.cmp(&b)));
    let mut w = q.to_vec();
    let mut remaining = epsilon;
    let mut price = 0.0;
    for i in order {
        if remaining <= 0.0 {
            break;
        }
        let take = w[i].min(remaining);
        if take > 0.0 {
            w[i] -= take;
            w[sink] += take;
            remaining -= take;
            price = c[i] - c[sink];
        }
    }
    if remaining > 0.0 {
        price = 0.0;
    }
    finish(w, c, price)
}

#[derive(Debug, Clone, Copy)]
struct Segment {
    source: usize,
    from: usize,
    to: usize,
    slope: f64,
    length: f64,
    rank: usize,
}

/// Lower-left convex chain of the `(cost, value)` options of one source,
/// starting at its cheapest option.
fn descent_chain(costs: &[f64], values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..costs.len()).collect();
    idx.sort_by(|&a, &b| {
        costs[a]
            .total_cmp(&costs[b])
            .then(values[a].total_cmp(&values[b]))
            .then(a.cmp(&b))
    });
    let mut chain: Vec<usize> = Vec::new();
    for &j in &idx {
        if let Some(&last) = chain.last() {
            // Only options that strictly improve the value are useful.
            if values[j] >= values[last] {
                continue;
            }
            if costs[j] == costs[last] {
                continue;
            }
        }
        while chain.len() >= 2 {
            let a = chain[chain.len() - 2];
            let b = chain[chain.len() - 1];
            // Drop b if it lies on or above segment a -> j.
            let cross = (costs[b] - costs[a]) * (values[j] - values[a])
                - (values[b] - values[a]) * (costs[j] - costs[a]);
            if cross <= 0.0 {
                chain.pop();
            } else {
                break;
            }
        }
        chain.push(j);
    }
    chain
}

fn solve_transport(c: &[f64], q: &[f64], spec: &AmbiguitySpec) -> Result<InnerSolution> {
    let n = c.len();
    let mut position = vec![0usize; n];
    let mut segments = Vec::new();
    for i in 0..n {
        let costs: Vec<f64> = (0..n).map(|j| spec.metric(i, j)).collect();
        let chain = descent_chain(&costs, c);
        position[i] = chain[0];
        if q[i] <= 0.0 {
            continue;
        }
        for (rank, pair) in chain.windows(2).enumerate() {
            let (a, b) = (pair[0], pair[1]);
            let length = costs[b] - costs[a];
            segments.push(Segment {
                source: i,
                from: a,
                to: b,
                slope: (c[b] - c[a]) / length,
                length,
                rank,
            });
        }
    }
    segments.sort_by(|x, y| {
        x.slope
            .total_cmp(&y.slope)
            .then(x.source.cmp(&y.source))
            .then(x.rank.cmp(&y.rank))
    });
    let mut w = vec![0.0; n];
    let mut remaining = spec.epsilon;
    let mut split: Option<(usize, usize, usize, f64)> = None;
    let mut price = 0.0;
    for seg in &segments {
        if remaining <= 0.0 {
            break;
        }
        debug_assert_eq!(position[seg.source], seg.from);
        let cost = q[seg.source] * seg.length;
        price = -seg.slope;
        if cost <= remaining {
            remaining -= cost;
            position[seg.source] = seg.to;
        } else {
            split = Some((seg.source, seg.from, seg.to, remaining / cost));
            remaining = 0.0;
        }
    }
    if remaining > 0.0 {
        price = 0.0;
    }
    for i in 0..n {
        match split {
            Some((s, from, to, frac)) if s == i => {
                w[from] += q[i] * (1.0 - frac);
                w[to] += q[i] * frac;
            }
            _ => w[position[i]] += q[i],
        }
    }
    finish(w, c, price)
}

/// Divergence of `w` from `w_ref`. KL returns `f64::INFINITY` when `w` puts
/// mass outside the support of `w_ref`.
pub fn divergence_value(w: &WeightVector, w_ref: &WeightVector, spec: &AmbiguitySpec) -> Result<f64> {
    if w.len() != w_ref.len() {
        return Err(Error::Dimension {
            context: "divergence",
            expected: w_ref.len(),
            found: w.len(),
        });
    }
    spec.validate(w.len())?;
    let (w, q) = (w.as_slice(), w_ref.as_slice());
    Ok(match spec.divergence {
        Divergence::Kl => kl_divergence(w, q),
        Divergence::Tv => 0.5 * w.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>(),
        Divergence::W1 => {
            let n = w.len();
            let cost: Vec<Vec<f64>> =
                (0..n).map(|i| (0..n).map(|j| spec.metric(i, j)).collect()).collect();
            transport_cost(q, w, &cost)
        }
    })
}

pub(crate) fn kl_divergence(w: &[f64], q: &[f64]) -> f64 {
    let mut total = 0.0;
    for (wi, qi) in w.iter().zip(q) {
        if *wi > 0.0 {
            if *qi <= 0.0 {
                return f64::INFINITY;
            }
            total += wi * (wi / qi).ln();
        }
    }
    total.max(0.0)
}

/// Optimal transport cost from `supply` to `demand` under `cost`, solved as a
/// min-cost flow by successive shortest paths.
pub fn transport_cost(supply: &[f64], demand: &[f64], cost: &[Vec<f64>]) -> f64 {
    let n = supply.len();
    // Nodes: 0 source, 1..=n supply atoms, n+1..=2n demand atoms, 2n+1 sink.
    let nodes = 2 * n + 2;
    let (s, t) = (0, 2 * n + 1);
    struct Edge {
        to: usize,
        cap: f64,
        cost: f64,
    }
    let mut edges: Vec<Edge> = Vec::new();
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); nodes];
    let add = |edges: &mut Vec<Edge>, adj: &mut Vec<Vec<usize>>, u: usize, v: usize, cap: f64, c: f64| {
        adj[u].push(edges.len());
        edges.push(Edge { to: v, cap, cost: c });
        adj[v].push(edges.len());
        edges.push(Edge { to: u, cap: 0.0, cost: -c });
    };
    for i in 0..n {
        add(&mut edges, &mut adj, s, 1 + i, supply[i], 0.0);
        add(&mut edges, &mut adj, 1 + n + i, t, demand[i], 0.0);
        for j in 0..n {
            add(&mut edges, &mut adj, 1 + i, 1 + n + j, f64::INFINITY, cost[i][j]);
        }
    }
    const EPS_FLOW: f64 = 1e-15;
    let target: f64 = supply.iter().sum::<f64>().min(demand.iter().sum());
    let mut flow = 0.0;
    let mut total = 0.0;
    for _ in 0..(4 * n * n + 16) {
        if target - flow <= EPS_FLOW {
            break;
        }
        // Bellman-Ford on the residual graph.
        let mut dist = vec![f64::INFINITY; nodes];
        let mut prev: Vec<Option<usize>> = vec![None; nodes];
        dist[s] = 0.0;
        for _ in 0..nodes {
            let mut changed = false;
            for u in 0..nodes {
                if dist[u] == f64::INFINITY {
                    continue;
                }
                for &e in &adj[u] {
                    let edge = &edges[e];
                    if edge.cap > EPS_FLOW && dist[u] + edge.cost < dist[edge.to] - 1e-15 {
                        dist[edge.to] = dist[u] + edge.cost;
                        prev[edge.to] = Some(e);
                        changed = true;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        if dist[t] == f64::INFINITY {
            break;
        }
        let mut bottleneck = target - flow;
        let mut v = t;
        while let Some(e) = prev[v] {
            bottleneck = bottleneck.min(edges[e].cap);
            v = edges[e ^ 1].to;
        }
        let mut v = t;
        while let Some(e) = prev[v] {
            edges[e].cap -= bottleneck;
            edges[e ^ 1].cap += bottleneck;
            v = edges[e ^ 1].to;
        }
        flow += bottleneck;
        total += bottleneck * dist[t];
    }
    total.max(0.0)
}

/// Which brute-force route produced an oracle value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleMethod {
    /// The ball is a single point.
    Trivial,
    /// Exhaustive scan of the 1-simplex at step `1e-5`.
    Grid,
    /// One-dimensional maximisation of the Lagrangian dual.
    Dual,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleSolution {
    pub value: f64,
    /// Primal minimiser when the route recovers one.
    pub w_star: Option<WeightVector>,
    pub method: OracleMethod,
}

const GRID_STEPS: usize = 100_000;

/// Reference solver for tests: a fine grid over the 1-simplex for two atoms,
/// otherwise the Lagrangian dual maximised by golden-section search (KL) or
/// by enumerating its breakpoints (TV, W1).
pub fn solve_inner_oracle(
    ucb: &[f64],
    w_ref: &WeightVector,
    spec: &AmbiguitySpec,
) -> Result<OracleSolution> {
    check_inputs(ucb, w_ref, spec)?;
    let q = w_ref.as_slice();
    let n = q.len();
    if spec.epsilon == 0.0 || n == 1 {
        return Ok(OracleSolution {
            value: dot(ucb, q),
            w_star: Some(w_ref.clone()),
            method: OracleMethod::Trivial,
        });
    }
    let metric = |i: usize, j: usize| spec.metric(i, j);
    if n == 2 {
        let mut best = (f64::INFINITY, 0.0);
        for k in 0..=GRID_STEPS {
            let w0 = k as f64 / GRID_STEPS as f64;
            let w = [w0, 1.0 - w0];
            let div = match spec.divergence {
                Divergence::Kl => {
                    let mut acc = 0.0;
                    let mut infinite = false;
                    for i in 0..2 {
                        if w[i] > 0.0 {
                            if q[i] == 0.0 {
                                infinite = true;
                            } else {
                                acc += w[i] * (w[i] / q[i]).ln();
                            }
                        }
                    }
                    if infinite {
                        f64::INFINITY
                    } else {
                        acc
                    }
                }
                Divergence::Tv => (w0 - q[0]).abs(),
                Divergence::W1 => (w0 - q[0]).abs() * metric(0, 1),
            };
            if div <= spec.epsilon {
                let v = ucb[0] * w[0] + ucb[1] * w[1];
                if v < best.0 {
                    best = (v, w0);
                }
            }
        }
        // The reference point itself is always feasible but may be off-grid.
        let v_ref = dot(ucb, q);
        if v_ref < best.0 {
            best = (v_ref, q[0]);
        }
        return Ok(OracleSolution {
            value: best.0,
            w_star: Some(WeightVector::normalized(vec![best.1, 1.0 - best.1])?),
            method: OracleMethod::Grid,
        });
    }
    match spec.divergence {
        Divergence::Kl => {
            let c_min = (0..n).filter(|&i| q[i] > 0.0).map(|i| ucb[i]).fold(f64::INFINITY, f64::min);
            let dual = |t: f64| {
                let eta = t.exp();
                let s: f64 = (0..n)
                    .filter(|&i| q[i] > 0.0)
                    .map(|i| q[i] * (-(ucb[i] - c_min) / eta).exp())
                    .sum();
                c_min - eta * s.ln() - eta * spec.epsilon
            };
            let phi = (5f64.sqrt() - 1.0) / 2.0;
            let (mut a, mut b) = (-40.0f64, 40.0f64);
            let mut x1 = b - phi * (b - a);
            let mut x2 = a + phi * (b - a);
            let (mut f1, mut f2) = (dual(x1), dual(x2));
            for _ in 0..300 {
                if f1 < f2 {
                    a = x1;
                    x1 = x2;
                    f1 = f2;
                    x2 = a + phi * (b - a);
                    f2 = dual(x2);
                } else {
                    b = x2;
                    x2 = x1;
                    f2 = f1;
                    x1 = b - phi * (b - a);
                    f1 = dual(x1);
                }
            }
            let t_star = 0.5 * (a + b);
            let value = dual(t_star).max(dual(-40.0)).max(dual(40.0));
            let eta = t_star.exp();
            let w: Vec<f64> = (0..n)
                .map(|i| if q[i] > 0.0 { q[i] * (-(ucb[i] - c_min) / eta).exp() } else { 0.0 })
                .collect();
            Ok(OracleSolution {
                value,
                w_star: WeightVector::normalized(w).ok(),
                method: OracleMethod::Dual,
            })
        }
        Divergence::Tv | Divergence::W1 => {
            let dual = |lambda: f64| {
                (0..n)
                    .map(|i| {
                        q[i] * (0..n)
                            .map(|j| ucb[j] + lambda * metric(i, j))
                            .fold(f64::INFINITY, f64::min)
                    })
                    .sum::<f64>()
                    - lambda * spec.epsilon
            };
            let mut candidates = vec![0.0];
            for i in 0..n {
                for j in 0..n {
                    for k in 0..n {
                        let dd = metric(i, j) - metric(i, k);
                        if dd != 0.0 {
                            let lambda = (ucb[k] - ucb[j]) / dd;
                            if lambda > 0.0 && lambda.is_finite() {
                                candidates.push(lambda);
                            }
                        }
                    }
                }
            }
            let value = candidates
                .into_iter()
                .map(dual)
                .fold(f64::NEG_INFINITY, f64::max);
            Ok(OracleSolution {
                value,
                w_star: None,
                method: OracleMethod::Dual,
            })
        }
    }
}
