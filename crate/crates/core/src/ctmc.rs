//! Continuous-time Markov chains on a directed graph: control matrices,
//! connectivity certificates, exact steering constructions, and stationary
//! rate synthesis.
//!
//! Vertices are 0-based in this API. The text edge-list format is 1-based.

use std::collections::VecDeque;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::linalg::{compensated_sum, expm};

/// Directed graph without self-loops or repeated edges.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransitionGraph {
    n: usize,
    edges: Vec<(usize, usize)>,
}

impl TransitionGraph {
    pub fn new(n: usize, edges: Vec<(usize, usize)>) -> Result<Self> {
        if n == 0 {
            return Err(Error::Graph("graph needs at least one vertex".into()));
        }
        for (k, &(s, t)) in edges.iter().enumerate() {
            if s >= n || t >= n {
                return Err(Error::Graph(format!("edge {k} ({s}, {t}) out of range for {n} vertices")));
            }
            if s == t {
                return Err(Error::Graph(format!("self-loop at vertex {s}")));
            }
            if edges[..k].contains(&(s, t)) {
                return Err(Error::Graph(format!("repeated edge ({s}, {t})")));
            }
        }
        Ok(Self { n, edges })
    }

    /// Directed cycle `0 -> 1 -> ... -> n-1 -> 0`.
    pub fn cycle(n: usize) -> Result<Self> {
        Self::new(n, (0..n).map(|i| (i, (i + 1) % n)).collect())
    }

    /// Path with both directions on every link.
    pub fn bidirected_path(n: usize) -> Result<Self> {
        let mut e = Vec::new();
        for i in 0..n.saturating_sub(1) {
            e.push((i, i + 1));
            e.push((i + 1, i));
        }
        Self::new(n, e)
    }

    /// Parses one `i j` pair per line, 1-based. Blank lines and `#` comments
    /// are skipped. The vertex count is the largest index unless given.
    pub fn parse_edge_list(text: &str, n: Option<usize>) -> Result<Self> {
        let mut edges = Vec::new();
        let mut max = 0;
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(|c: char| c.is_whitespace() || c == ',').filter(|s| !s.is_empty()).collect();
            let parse = |s: &str| {
                s.parse::<usize>()
                    .ok()
                    .filter(|v| *v >= 1)
                    .ok_or_else(|| Error::Graph(format!("line {}: bad vertex {s:?}", ln + 1)))
            };
            if parts.len() != 2 {
                return Err(Error::Graph(format!("line {}: expected two vertices", ln + 1)));
            }
            let (s, t) = (parse(parts[0])?, parse(parts[1])?);
            max = max.max(s).max(t);
            edges.push((s - 1, t - 1));
        }
        Self::new(n.unwrap_or(max), edges)
    }

    pub fn to_edge_list(&self) -> String {
        let mut s = String::new();
        for (a, b) in &self.edges {
            let _ = writeln!(s, "{} {}", a + 1, b + 1);
        }
        s
    }

    pub fn n_vertices(&self) -> usize {
        self.n
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn edge(&self, e: usize) -> (usize, usize) {
        self.edges[e]
    }

    pub fn edge_index(&self, s: usize, t: usize) -> Option<usize> {
        self.edges.iter().position(|&x| x == (s, t))
    }

    pub fn out_edges(&self, v: usize) -> impl Iterator<Item = usize> + '_ {
        self.edges.iter().enumerate().filter(move |(_, e)| e.0 == v).map(|(k, _)| k)
    }

    /// Every edge has its reverse in the graph.
    pub fn is_bidirected(&self) -> bool {
        self.edges.iter().all(|&(s, t)| self.edge_index(t, s).is_some())
    }

    fn bfs(&self, start: usize, forward: bool) -> (Vec<bool>, Vec<Option<usize>>) {
        let mut seen = vec![false; self.n];
        let mut via = vec![None; self.n];
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(v) = queue.pop_front() {
            for (k, &(s, t)) in self.edges.iter().enumerate() {
                let (from, to) = if forward { (s, t) } else { (t, s) };
                if from == v && !seen[to] {
                    seen[to] = true;
                    via[to] = Some(k);
                    queue.push_back(to);
                }
            }
        }
        (seen, via)
    }

    /// Vertices reachable from `v` (including `v`).
    pub fn reachable_from(&self, v: usize) -> Vec<usize> {
        let (seen, _) = self.bfs(v, true);
        (0..self.n).filter(|&u| seen[u]).collect()
    }

    /// Vertices from which `v` is reachable (including `v`).
    pub fn reaching(&self, v: usize) -> Vec<usize> {
        let (seen, _) = self.bfs(v, false);
        (0..self.n).filter(|&u| seen[u]).collect()
    }

    /// Edge sequence of a shortest path `from -> to`, if any.
    pub fn shortest_path(&self, from: usize, to: usize) -> Option<Vec<usize>> {
        let (seen, via) = self.bfs(from, true);
        if !seen[to] {
            return None;
        }
        let mut path = Vec::new();
        let mut cur = to;
        while cur != from {
            let e = via[cur].expect("reached vertices carry a parent edge");
            path.push(e);
            cur = self.edges[e].0;
        }
        path.reverse();
        Some(path)
    }

    /// Subgraph induced on `vertices`, relabelled in the given order.
    pub fn induced(&self, vertices: &[usize]) -> Result<(Self, Vec<usize>)> {
        let mut label = vec![usize::MAX; self.n];
        for (k, &v) in vertices.iter().enumerate() {
            label[v] = k;
        }
        let mut edges = Vec::new();
        let mut original = Vec::new();
        for (k, &(s, t)) in self.edges.iter().enumerate() {
            if label[s] != usize::MAX && label[t] != usize::MAX {
                edges.push((label[s], label[t]));
                original.push(k);
            }
        }
        Ok((Self::new(vertices.len(), edges)?, original))
    }
}

/// `Q_e`: `-1` at `(S, S)` and `+1` at `(T, S)`.
pub fn build_q(edge: (usize, usize), n: usize) -> Result<DMatrix<f64>> {
    let (s, t) = edge;
    if n < 2 {
        return Err(Error::Graph(format!("need at least 2 vertices, got {n}")));
    }
    if s == t {
        return Err(Error::Graph(format!("self-loop at vertex {s}")));
    }
    if s >= n || t >= n {
        return Err(Error::Graph(format!("edge ({s}, {t}) out of range")));
    }
    let mut q = DMatrix::zeros(n, n);
    q[(s, s)] = -1.0;
    q[(t, s)] = 1.0;
    Ok(q)
}

/// `Σ_e u_e Q_e`.
pub fn rate_matrix(g: &TransitionGraph, rates: &[f64]) -> DMatrix<f64> {
    let mut q = DMatrix::zeros(g.n, g.n);
    for (&(s, t), &u) in g.edges.iter().zip(rates) {
        q[(s, s)] -= u;
        q[(t, s)] += u;
    }
    q
}

/// Strongly connected components (Tarjan), in reverse topological order.
pub fn strongly_connected_components(g: &TransitionGraph) -> Vec<Vec<usize>> {
    let n = g.n;
    let adj: Vec<Vec<usize>> =
        (0..n).map(|v| g.edges.iter().filter(|e| e.0 == v).map(|e| e.1).collect()).collect();
    let mut index = vec![usize::MAX; n];
    let mut low = vec![0; n];
    let mut on_stack = vec![false; n];
    let mut stack = Vec::new();
    let mut comps = Vec::new();
    let mut next = 0;
    for root in 0..n {
        if index[root] != usize::MAX {
            continue;
        }
        // explicit DFS stack of (vertex, next neighbour position)
        let mut work = vec![(root, 0usize)];
        index[root] = next;
        low[root] = next;
        next += 1;
        stack.push(root);
        on_stack[root] = true;
        while let Some(&mut (v, ref mut pos)) = work.last_mut() {
            if *pos < adj[v].len() {
                let w = adj[v][*pos];
                *pos += 1;
                if index[w] == usize::MAX {
                    index[w] = next;
                    low[w] = next;
                    next += 1;
                    stack.push(w);
                    on_stack[w] = true;
                    work.push((w, 0));
                } else if on_stack[w] {
                    low[v] = low[v].min(index[w]);
                }
            } else {
                work.pop();
                if let Some(&(parent, _)) = work.last() {
                    low[parent] = low[parent].min(low[v]);
                }
                if low[v] == index[v] {
                    let mut comp = Vec::new();
                    loop {
                        let w = stack.pop().expect("component root is on the stack");
                        on_stack[w] = false;
                        comp.push(w);
                        if w == v {
                            break;
                        }
                    }
                    comp.sort_unstable();
                    comps.push(comp);
                }
            }
        }
    }
    comps
}

pub fn is_strongly_connected(g: &TransitionGraph) -> bool {
    strongly_connected_components(g).len() == 1
}

/// Witness that a graph is not strongly connected.
///
/// No edge enters `v1` from outside and no edge leaves `v2`, so
/// `φ(μ) = Σ_{v2} μ - Σ_{v1} μ` never decreases.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MonotoneCertificate {
    pub v1: Vec<usize>,
    pub v2: Vec<usize>,
}

impl MonotoneCertificate {
    pub fn phi(&self, mu: &[f64]) -> f64 {
        self.v2.iter().map(|&v| mu[v]).sum::<f64>() - self.v1.iter().map(|&v| mu[v]).sum::<f64>()
    }

    pub fn into_error(self) -> Error {
        Error::NotStronglyConnected { v1: self.v1, v2: self.v2 }
    }
}

pub fn monotone_certificate(g: &TransitionGraph) -> Result<MonotoneCertificate> {
    for v2 in 0..g.n {
        let (seen, _) = g.bfs(v2, true);
        if let Some(v1) = (0..g.n).find(|&u| !seen[u]) {
            return Ok(MonotoneCertificate { v1: g.reaching(v1), v2: g.reachable_from(v2) });
        }
    }
    Err(Error::Graph("graph is strongly connected; no monotone certificate exists".into()))
}

fn require_strongly_connected(g: &TransitionGraph) -> Result<()> {
    match monotone_certificate(g) {
        Ok(cert) => Err(cert.into_error()),
        Err(_) => Ok(()),
    }
}

/// Closed walk from `v0` that visits every vertex.
///
/// Depth-first preorder fixes the visiting order; consecutive targets are
/// joined by shortest paths, and a final shortest path returns to `v0`.
pub fn find_covering_closed_walk(g: &TransitionGraph, v0: usize) -> Result<Vec<usize>> {
    if v0 >= g.n {
        return Err(Error::Graph(format!("start vertex {v0} out of range")));
    }
    require_strongly_connected(g)?;
    if g.n == 1 {
        return Ok(Vec::new());
    }
    let mut order = Vec::with_capacity(g.n);
    let mut seen = vec![false; g.n];
    let mut stack = vec![v0];
    while let Some(v) = stack.pop() {
        if seen[v] {
            continue;
        }
        seen[v] = true;
        order.push(v);
        let succ: Vec<usize> = g.out_edges(v).map(|e| g.edges[e].1).collect();
        for &w in succ.iter().rev() {
            if !seen[w] {
                stack.push(w);
            }
        }
    }
    let mut visited = vec![false; g.n];
    visited[v0] = true;
    let mut walk = Vec::new();
    let mut cur = v0;
    for &target in &order[1..] {
        if visited[target] {
            continue;
        }
        let path = g.shortest_path(cur, target).expect("strongly connected");
        for &e in &path {
            visited[g.edges[e].1] = true;
        }
        walk.extend(path);
        cur = target;
    }
    walk.extend(g.shortest_path(cur, v0).expect("strongly connected"));
    Ok(walk)
}

/// Checks the covering closed-walk contract.
pub fn validate_walk(g: &TransitionGraph, walk: &[usize], v0: usize) -> Result<()> {
    let bad = |m: String| Err(Error::Graph(m));
    if walk.is_empty() {
        return if g.n == 1 { Ok(()) } else { bad("empty walk".into()) };
    }
    if walk.iter().any(|&e| e >= g.n_edges()) {
        return bad("walk references an unknown edge".into());
    }
    if g.edges[walk[0]].0 != v0 || g.edges[*walk.last().unwrap()].1 != v0 {
        return bad("walk does not start and end at v0".into());
    }
    for w in walk.windows(2) {
        if g.edges[w[0]].1 != g.edges[w[1]].0 {
            return bad("consecutive edges are not adjacent".into());
        }
    }
    let mut hit = vec![false; g.n];
    hit[v0] = true;
    walk.iter().for_each(|&e| hit[g.edges[e].1] = true);
    if let Some(v) = hit.iter().position(|h| !h) {
        return bad(format!("vertex {v} is never visited"));
    }
    Ok(())
}

/// Time-piecewise constant edge rates.
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseConstantControl {
    /// `t_0 < t_1 < ... < t_K`.
    pub breakpoints: Vec<f64>,
    /// `rates[k][e]` is active on `[t_k, t_{k+1})`.
    pub rates: Vec<Vec<f64>>,
}

impl PiecewiseConstantControl {
    pub fn zero(n_edges: usize, duration: f64) -> Self {
        Self { breakpoints: vec![0.0, duration], rates: vec![vec![0.0; n_edges]] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.breakpoints.len() != self.rates.len() + 1 {
            return Err(Error::Plan("breakpoint and interval counts disagree".into()));
        }
        if self.breakpoints.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Plan("breakpoints must increase strictly".into()));
        }
        if self.rates.iter().flatten().any(|u| !(u.is_finite() && *u >= 0.0)) {
            return Err(Error::Plan("rates must be finite and nonnegative".into()));
        }
        Ok(())
    }

    pub fn duration(&self) -> f64 {
        self.breakpoints.last().copied().unwrap_or(0.0) - self.breakpoints[0]
    }

    pub fn n_intervals(&self) -> usize {
        self.rates.len()
    }

    pub fn max_rate(&self) -> f64 {
        self.rates.iter().flatten().fold(0.0, |m, u| m.max(*u))
    }

    /// Appends `other`, shifted to start where `self` ends.
    pub fn append(&mut self, other: &PiecewiseConstantControl) {
        let shift = self.breakpoints.last().copied().unwrap_or(0.0) - other.breakpoints[0];
        self.breakpoints.extend(other.breakpoints[1..].iter().map(|t| t + shift));
        self.rates.extend(other.rates.iter().cloned());
    }

    /// Rates in effect at time `t` (right-continuous, last interval closed).
    pub fn rates_at(&self, t: f64) -> &[f64] {
        let k = self.breakpoints[1..].partition_point(|&b| b <= t).min(self.rates.len() - 1);
        &self.rates[k]
    }

    /// CSV with columns `t_start,t_end,edge,rate`; edges as 1-based `s->t`.
    pub fn to_csv(&self, g: &TransitionGraph) -> String {
        let mut s = String::from("t_start,t_end,edge,rate\n");
        for (k, r) in self.rates.iter().enumerate() {
            for (e, u) in r.iter().enumerate() {
                let (a, b) = g.edge(e);
                let _ = writeln!(
                    s,
                    "{:?},{:?},{}->{},{:?}",
                    self.breakpoints[k],
                    self.breakpoints[k + 1],
                    a + 1,
                    b + 1,
                    u
                );
            }
        }
        s
    }
}

/// Validates a probability vector.
pub fn check_simplex(mu: &[f64]) -> Result<()> {
    if let Some(v) = mu.iter().position(|x| !(x.is_finite() && *x >= 0.0)) {
        return Err(Error::Config(format!("coordinate {v} is {} (must be nonnegative)", mu[v])));
    }
    let s = compensated_sum(mu.iter().copied());
    if (s - 1.0).abs() > 1e-12 {
        return Err(Error::MassMismatch { found: s, expected: 1.0 });
    }
    Ok(())
}

fn check_interior(mu: &[f64]) -> Result<()> {
    check_simplex(mu)?;
    let min = mu.iter().copied().fold(f64::INFINITY, f64::min);
    if !(min > 0.0) {
        return Err(Error::NotInterior { min });
    }
    Ok(())
}

/// States at every breakpoint, starting with `μ0`.
pub fn propagate(
    g: &TransitionGraph,
    mu0: &[f64],
    ctrl: &PiecewiseConstantControl,
) -> Result<Vec<Vec<f64>>> {
    if mu0.len() != g.n {
        return Err(Error::Config(format!("state has {} entries for {} vertices", mu0.len(), g.n)));
    }
    ctrl.validate()?;
    let mut out = Vec::with_capacity(ctrl.n_intervals() + 1);
    let mut mu = DVector::from_column_slice(mu0);
    out.push(mu0.to_vec());
    for (k, r) in ctrl.rates.iter().enumerate() {
        let dt = ctrl.breakpoints[k + 1] - ctrl.breakpoints[k];
        if r.iter().any(|u| *u != 0.0) {
            mu = expm(&(rate_matrix(g, r) * dt)) * mu;
        }
        out.push(mu.iter().copied().collect());
    }
    Ok(out)
}

/// Bookkeeping of one local step.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalStepCertificate {
    pub v0: usize,
    pub walk: Vec<usize>,
    /// `delta[i]`: edge `i` is the last departure from its source.
    pub delta: Vec<bool>,
    /// `sigma[0] = 0`, `sigma[i]` after edge `i` (length `s + 1`).
    pub sigma: Vec<f64>,
    pub rho: f64,
    pub delta_mu: Vec<f64>,
    pub dt: f64,
}

impl LocalStepCertificate {
    /// State predicted at breakpoint `i` (after `i` intervals).
    pub fn breakpoint_state(&self, g: &TransitionGraph, mu0: &[f64], i: usize) -> Vec<f64> {
        let mut y = mu0.to_vec();
        y[self.v0] -= self.rho;
        let at = if i == 0 { self.v0 } else { g.edge(self.walk[i - 1]).1 };
        y[at] += self.rho - self.sigma[i];
        for k in 0..i {
            if self.delta[k] {
                let s = g.edge(self.walk[k]).0;
                y[s] += self.delta_mu[s];
            }
        }
        y
    }
}

fn last_departures(g: &TransitionGraph, walk: &[usize]) -> Vec<bool> {
    let mut delta = vec![false; walk.len()];
    let mut seen = vec![false; g.n];
    for (i, &e) in walk.iter().enumerate().rev() {
        let s = g.edge(e).0;
        if !seen[s] {
            seen[s] = true;
            delta[i] = true;
        }
    }
    delta
}

/// Local step along `walk` with a caller-chosen carried mass `rho`.
///
/// Only the exact feasibility of every interval is checked; the box bound on
/// the variation is the caller's business.
fn walk_control(
    g: &TransitionGraph,
    mu0: &[f64],
    delta_mu: &[f64],
    duration: f64,
    walk: &[usize],
    rho: f64,
) -> Result<(PiecewiseConstantControl, LocalStepCertificate)> {
    let s = walk.len();
    let v0 = g.edge(walk[0]).0;
    let dt = duration / s as f64;
    let delta = last_departures(g, walk);
    let mut sigma = vec![0.0; s + 1];
    for i in 0..s {
        let src = g.edge(walk[i]).0;
        sigma[i + 1] = sigma[i] + if delta[i] { delta_mu[src] } else { 0.0 };
    }
    let mut y0 = mu0.to_vec();
    y0[v0] -= rho;

    let mut rates = Vec::with_capacity(s);
    for i in 1..=s {
        let src = g.edge(walk[i - 1]).0;
        let moved = rho - sigma[i];
        let held = y0[src] + rho - sigma[i - 1];
        let argument = 1.0 - moved / held;
        if !(held > 0.0 && moved >= 0.0 && argument > 0.0 && argument <= 1.0) {
            return Err(Error::InfeasibleVariation { step: i, argument });
        }
        let mut r = vec![0.0; g.n_edges()];
        r[walk[i - 1]] = -argument.ln() / dt;
        rates.push(r);
    }
    let breakpoints = (0..=s).map(|i| if i == s { duration } else { i as f64 * dt }).collect();
    let ctrl = PiecewiseConstantControl { breakpoints, rates };
    ctrl.validate()?;
    let cert = LocalStepCertificate {
        v0,
        walk: walk.to_vec(),
        delta,
        sigma,
        rho,
        delta_mu: delta_mu.to_vec(),
        dt,
    };
    Ok((ctrl, cert))
}

/// `ρ = min(μ)/2 - 1e-9`.
pub fn carried_mass(mu: &[f64]) -> f64 {
    0.5 * mu.iter().copied().fold(f64::INFINITY, f64::min) - 1e-9
}

/// Steers `μ0` to `μ0 + Δμ` in time `duration` along a covering closed walk.
pub fn local_step_control(
    g: &TransitionGraph,
    mu0: &[f64],
    delta_mu: &[f64],
    duration: f64,
    walk: &[usize],
) -> Result<(PiecewiseConstantControl, LocalStepCertificate)> {
    check_interior(mu0)?;
    if delta_mu.len() != g.n {
        return Err(Error::Config("variation length differs from vertex count".into()));
    }
    if !(duration > 0.0) {
        return Err(Error::Config(format!("duration must be positive (got {duration})")));
    }
    let v0 = walk.first().map(|&e| g.edge(e).0).unwrap_or(0);
    validate_walk(g, walk, v0)?;
    let rho = carried_mass(mu0);
    if !(rho > 0.0) {
        return Err(Error::NotInterior { min: 2.0 * (rho + 1e-9) });
    }
    let sum = compensated_sum(delta_mu.iter().copied());
    if sum.abs() > 1e-12 {
        return Err(Error::MassMismatch { found: sum, expected: 0.0 });
    }
    let norm = delta_mu.iter().fold(0.0_f64, |m, d| m.max(d.abs()));
    let bound = rho / g.n as f64;
    if norm > bound {
        return Err(Error::StepTooLarge { norm, bound });
    }
    walk_control(g, mu0, delta_mu, duration, walk, rho)
}

/// Result of a segmented transfer.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalTransfer {
    pub control: PiecewiseConstantControl,
    pub rho: f64,
    pub length: f64,
    pub segments: usize,
    /// Duration spent on the uniform-rate preconditioning interval, if any.
    pub preconditioning: f64,
}

/// Segmented transfer between two interior points.
pub fn global_transfer_plan(
    g: &TransitionGraph,
    mu0: &[f64],
    mu_t: &[f64],
    duration: f64,
) -> Result<GlobalTransfer> {
    check_interior(mu0)?;
    check_interior(mu_t)?;
    if mu0.len() != g.n || mu_t.len() != g.n {
        return Err(Error::Config("state length differs from vertex count".into()));
    }
    if !(duration > 0.0) {
        return Err(Error::Config(format!("duration must be positive (got {duration})")));
    }
    require_strongly_connected(g)?;
    let min0 = mu0.iter().chain(mu_t).copied().fold(f64::INFINITY, f64::min);
    let rho = 0.5 * min0;
    let length: f64 = mu0.iter().zip(mu_t).map(|(a, b)| (b - a).abs()).sum();
    let segments = (length / rho).ceil() as usize;
    if segments == 0 {
        return Ok(GlobalTransfer {
            control: PiecewiseConstantControl::zero(g.n_edges(), duration),
            rho,
            length,
            segments,
            preconditioning: 0.0,
        });
    }
    let walk = find_covering_closed_walk(g, 0)?;
    let seg_t = duration / segments as f64;
    let waypoint = |k: usize| -> Vec<f64> {
        let s = k as f64 / segments as f64;
        mu0.iter().zip(mu_t).map(|(a, b)| a + s * (b - a)).collect()
    };
    let mut control: Option<PiecewiseConstantControl> = None;
    for k in 0..segments {
        let (from, to) = (waypoint(k), waypoint(k + 1));
        let step: Vec<f64> = from.iter().zip(&to).map(|(a, b)| b - a).collect();
        let (c, _) = walk_control(g, &from, &step, seg_t, &walk, carried_mass(&from))?;
        match control.as_mut() {
            None => control = Some(c),
            Some(acc) => acc.append(&c),
        }
    }
    let mut control = control.expect("at least one segment");
    *control.breakpoints.last_mut().unwrap() = duration;
    Ok(GlobalTransfer { control, rho, length, segments, preconditioning: 0.0 })
}

/// Uniform unit rates until every coordinate reaches `threshold`.
///
/// Tries durations `max_duration * 2^-k` from short to long and keeps the
/// shortest that works; returns the control and the state it reaches.
pub fn enter_interior(
    g: &TransitionGraph,
    mu0: &[f64],
    threshold: f64,
    max_duration: f64,
) -> Result<(PiecewiseConstantControl, Vec<f64>)> {
    check_simplex(mu0)?;
    require_strongly_connected(g)?;
    let q = rate_matrix(g, &vec![1.0; g.n_edges()]);
    let mu = DVector::from_column_slice(mu0);
    let mut best = None;
    for k in (0..40).rev() {
        let tau = max_duration * 0.5_f64.powi(k);
        let next = expm(&(&q * tau)) * &mu;
        let min = next.min();
        if min >= threshold || k == 0 {
            best = Some((tau, next, min));
            break;
        }
    }
    let (tau, next, min) = best.expect("loop always yields a candidate");
    if !(min > 0.0) {
        return Err(Error::NotInterior { min });
    }
    let ctrl = PiecewiseConstantControl {
        breakpoints: vec![0.0, tau],
        rates: vec![vec![1.0; g.n_edges()]],
    };
    Ok((ctrl, next.iter().copied().collect()))
}

/// Global transfer that first pushes a boundary start into the interior.
///
/// The preconditioning interval uses at most a quarter of the horizon and
/// aims for `min μ ≥ max(1e-6, min(μT)/4)` so that the segment count stays
/// comparable to an interior start.
pub fn global_transfer_from_boundary(
    g: &TransitionGraph,
    mu0: &[f64],
    mu_t: &[f64],
    duration: f64,
) -> Result<GlobalTransfer> {
    check_simplex(mu0)?;
    check_interior(mu_t)?;
    let min0 = mu0.iter().copied().fold(f64::INFINITY, f64::min);
    if min0 > 0.0 {
        return global_transfer_plan(g, mu0, mu_t, duration);
    }
    let target_min = mu_t.iter().copied().fold(f64::INFINITY, f64::min);
    let threshold = (0.25 * target_min).max(1e-6);
    let (mut pre, inside) = enter_interior(g, mu0, threshold, 0.25 * duration)?;
    let tau = pre.duration();
    let rest = global_transfer_plan(g, &renormalize(&inside), mu_t, duration - tau)?;
    pre.append(&rest.control);
    *pre.breakpoints.last_mut().unwrap() = duration;
    Ok(GlobalTransfer { control: pre, preconditioning: tau, ..rest })
}

fn renormalize(mu: &[f64]) -> Vec<f64> {
    let s = compensated_sum(mu.iter().copied());
    mu.iter().map(|v| v / s).collect()
}

/// Positive rates making `μeq` stationary.
///
/// Bidirected graphs get the detailed-balance choice
/// `q_(i,j) = max(1, μ_j/μ_i)`. Other graphs solve
/// `min ||q - 1||^2` subject to `(Σ q_e Q_e) μeq = 0`, `q ≥ 1e-3`.
pub fn synthesize_stationary_rates(g: &TransitionGraph, mu_eq: &[f64]) -> Result<Vec<f64>> {
    check_interior(mu_eq)?;
    if mu_eq.len() != g.n {
        return Err(Error::Config("state length differs from vertex count".into()));
    }
    require_strongly_connected(g)?;
    let q = if g.is_bidirected() {
        g.edges.iter().map(|&(i, j)| (mu_eq[j] / mu_eq[i]).max(1.0)).collect()
    } else {
        stationary_qp(g, mu_eq, 1e-3)?
    };
    let residual = stationarity_residual(g, &q, mu_eq);
    if !(residual <= 1e-12) || q.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::Synthesis { residual });
    }
    Ok(q)
}

/// `||(Σ q_e Q_e) μ||_∞`.
pub fn stationarity_residual(g: &TransitionGraph, q: &[f64], mu: &[f64]) -> f64 {
    let r = rate_matrix(g, q) * DVector::from_column_slice(mu);
    r.amax()
}

/// Circulation with every edge flow at least one: each edge is closed into a
/// cycle by a shortest return path, and unit flow is pushed around it.
fn positive_circulation(g: &TransitionGraph) -> Vec<f64> {
    let mut c = vec![0.0; g.n_edges()];
    for (k, &(s, t)) in g.edges.iter().enumerate() {
        c[k] += 1.0;
        for e in g.shortest_path(t, s).expect("strongly connected") {
            c[e] += 1.0;
        }
    }
    c
}

fn stationary_qp(g: &TransitionGraph, mu: &[f64], q_min: f64) -> Result<Vec<f64>> {
    let (n, m) = (g.n, g.n_edges());
    // column e of A is Q_e μ
    let mut a = DMatrix::<f64>::zeros(n, m);
    for (k, &(s, t)) in g.edges.iter().enumerate() {
        a[(s, k)] = -mu[s];
        a[(t, k)] = mu[s];
    }
    let circ = positive_circulation(g);
    let mut q: Vec<f64> = g.edges.iter().zip(&circ).map(|(&(s, _), c)| c / mu[s]).collect();
    let lo = q.iter().copied().fold(f64::INFINITY, f64::min);
    if lo < q_min {
        q.iter_mut().for_each(|v| *v *= q_min / lo);
    }
    let mut active = vec![false; m];

    for _ in 0..(10 * m + 50) {
        let free: Vec<usize> = (0..m).filter(|&k| !active[k]).collect();
        // minimise ||p_F - 1||^2 s.t. A_F p_F = -A_W q_min
        let af = DMatrix::from_fn(n, free.len(), |i, j| a[(i, free[j])]);
        let mut b = DVector::zeros(n);
        for k in (0..m).filter(|&k| active[k]) {
            b -= a.column(k) * q_min;
        }
        let ones = DVector::from_element(free.len(), 1.0);
        let gram = &af * af.transpose();
        let pinv = gram.pseudo_inverse(1e-12).map_err(|_| Error::Synthesis { residual: f64::NAN })?;
        let nu = pinv * (&b - &af * &ones);
        let pf = &ones + af.transpose() * &nu;

        let mut p = q.clone();
        for (j, &k) in free.iter().enumerate() {
            p[k] = pf[j];
        }
        for k in (0..m).filter(|&k| active[k]) {
            p[k] = q_min;
        }
        // longest feasible move toward p
        let mut alpha = 1.0;
        let mut blocking = None;
        for &k in &free {
            if p[k] < q_min && p[k] < q[k] {
                let step = (q[k] - q_min) / (q[k] - p[k]);
                if step < alpha {
                    alpha = step;
                    blocking = Some(k);
                }
            }
        }
        for k in 0..m {
            q[k] += alpha * (p[k] - q[k]);
        }
        if let Some(k) = blocking {
            q[k] = q_min;
            active[k] = true;
            continue;
        }
        // multipliers of the active bounds: (q - 1 - A^T nu)_k must be >= 0
        let atnu = a.transpose() * &nu;
        let worst = (0..m)
            .filter(|&k| active[k])
            .map(|k| (k, q[k] - 1.0 - atnu[k]))
            .min_by(|x, y| x.1.partial_cmp(&y.1).unwrap());
        match worst {
            Some((k, lambda)) if lambda < -1e-12 => active[k] = false,
            _ => return Ok(q),
        }
    }
    Err(Error::Synthesis { residual: stationarity_residual(g, &q, mu) })
}

/// Eigenvalues of `Σ q_e Q_e`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumReport {
    /// Sorted by decreasing real part.
    pub eigenvalues: Vec<Complex64>,
    pub max_real: f64,
    /// `-Re λ_2`; zero when the zero eigenvalue is not simple.
    pub gap: f64,
    pub zero_multiplicity: usize,
}

impl SpectrumReport {
    pub fn from_matrix(m: &DMatrix<f64>, zero_tol: f64) -> Self {
        let mut eigenvalues: Vec<Complex64> = m.complex_eigenvalues().iter().copied().collect();
        eigenvalues.sort_by(|a, b| b.re.partial_cmp(&a.re).unwrap_or(std::cmp::Ordering::Equal));
        let max_real = eigenvalues.first().map_or(0.0, |z| z.re);
        let zero_multiplicity = eigenvalues.iter().filter(|z| z.norm() <= zero_tol).count();
        let gap = eigenvalues.get(1).map_or(0.0, |z| -z.re).max(0.0);
        Self { eigenvalues, max_real, gap, zero_multiplicity }
    }

    pub fn is_stable(&self, tol: f64) -> bool {
        self.max_real <= tol
    }
}

pub fn spectrum_check(g: &TransitionGraph, rates: &[f64]) -> Result<SpectrumReport> {
    if rates.len() != g.n_edges() {
        return Err(Error::Config("one rate per edge expected".into()));
    }
    if let Some(e) = rates.iter().position(|u| !(u.is_finite() && *u >= 0.0)) {
        return Err(Error::Config(format!("rate {e} is {} (must be nonnegative)", rates[e])));
    }
    let m = rate_matrix(g, rates);
    let scale = m.amax().max(1.0);
    Ok(SpectrumReport::from_matrix(&m, 1e-9 * scale))
}
