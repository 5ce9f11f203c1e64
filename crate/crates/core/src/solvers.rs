//! Exact dynamic-programming oracles.
//!
//! Everything here is deterministic and dense. Contraction iterations start at
//! zero and stop once the successive sup-norm difference is at most
//! `tol·(1−γ)/(2γ)`, which bounds the distance to the fixed point by `tol/2`.

use nalgebra::{DMatrix, DVector};
use petgraph::algo::tarjan_scc;
use petgraph::graph::{DiGraph, NodeIndex};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::mdp::{agent_marginal, FactoredMdp, JointPolicy, Table};

pub type QTable = Table;
pub type LocalQTable = Table;

pub const DEFAULT_TOL: f64 = 1e-10;
pub const MAX_ITERS: usize = 1_000_000;

fn stop_threshold(tol: f64, gamma: f64) -> f64 {
    tol * (1.0 - gamma) / (2.0 * gamma)
}

fn check_tol(tol: f64) -> Result<()> {
    if tol > 0.0 && tol.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("tolerance {tol} must be positive")))
    }
}

/// `(T*Q)(s,a) = R(s,a) + γ Σ_{s'} P_a(s,s') max_{a'} Q(s',a')`.
pub fn bellman_optimality(mdp: &FactoredMdp, q: &Table) -> Table {
    let v: Vec<f64> = (0..q.rows()).map(|s| q.row(s)[q.argmax_row(s)]).collect();
    backup(mdp, &v)
}

/// `R(s,a) + γ Σ_{s'} P_a(s,s') v(s')`.
pub fn backup(mdp: &FactoredMdp, v: &[f64]) -> Table {
    let (ns, na) = (mdp.num_states(), mdp.num_actions());
    let r = mdp.expected_rewards();
    let g = mdp.gamma();
    Table::from_fn(ns, na, |s, a| {
        let ev: f64 = mdp.row(a, s).iter().zip(v).map(|(p, x)| p * x).sum();
        r[s * na + a] + g * ev
    })
}

pub struct ValueIterationTrace {
    pub q: QTable,
    /// Successive sup-norm differences, one per sweep.
    pub diffs: Vec<f64>,
}

pub fn value_iteration(mdp: &FactoredMdp, tol: f64) -> Result<QTable> {
    value_iteration_trace(mdp, tol).map(|t| t.q)
}

pub fn value_iteration_trace(mdp: &FactoredMdp, tol: f64) -> Result<ValueIterationTrace> {
    check_tol(tol)?;
    let stop = stop_threshold(tol, mdp.gamma());
    let mut q = Table::zeros(mdp.num_states(), mdp.num_actions());
    let mut diffs = Vec::new();
    for _ in 0..MAX_ITERS {
        let next = bellman_optimality(mdp, &q);
        let d = next.max_abs_diff(&q);
        q = next;
        diffs.push(d);
        if d <= stop {
            return Ok(ValueIterationTrace { q, diffs });
        }
    }
    Err(Error::Solver("value iteration hit the iteration cap".into()))
}

/// Point mass on the argmax action, lowest joint index on ties.
pub fn greedy_policy(q: &QTable) -> JointPolicy {
    let actions: Vec<usize> = (0..q.rows()).map(|s| q.argmax_row(s)).collect();
    JointPolicy::deterministic(&actions, q.cols())
}

fn check_policy(mdp: &FactoredMdp, pi: &JointPolicy) -> Result<()> {
    if pi.num_states() != mdp.num_states() || pi.num_actions() != mdp.num_actions() {
        return Err(Error::DimensionMismatch(format!(
            "policy is {}x{}, MDP is {}x{}",
            pi.num_states(),
            pi.num_actions(),
            mdp.num_states(),
            mdp.num_actions()
        )));
    }
    Ok(())
}

/// State chain `P_π` (row-major `S×S`) and reward `r_π`.
pub fn induced_chain(mdp: &FactoredMdp, pi: &JointPolicy) -> (Vec<f64>, Vec<f64>) {
    let (ns, na) = (mdp.num_states(), mdp.num_actions());
    let r = mdp.expected_rewards();
    let mut p = vec![0.0; ns * ns];
    let mut rp = vec![0.0; ns];
    for s in 0..ns {
        let out = &mut p[s * ns..(s + 1) * ns];
        for (a, &w) in pi.row(s).iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            rp[s] += w * r[s * na + a];
            for (o, x) in out.iter_mut().zip(mdp.row(a, s)) {
                *o += w * x;
            }
        }
    }
    (p, rp)
}

/// `(T_π Q)(s,a) = R(s,a) + γ Σ_{s'} P_a(s,s') Σ_{a'} π(a'|s') Q(s',a')`.
pub fn bellman_evaluation(mdp: &FactoredMdp, pi: &JointPolicy, q: &Table) -> Table {
    let v: Vec<f64> = (0..q.rows())
        .map(|s| q.row(s).iter().zip(pi.row(s)).map(|(x, p)| x * p).sum())
        .collect();
    backup(mdp, &v)
}

/// `Q_π`, by a direct solve of `(I − γP_π)V = r_π` with a fixed-point fallback.
pub fn policy_q(mdp: &FactoredMdp, pi: &JointPolicy, tol: f64) -> Result<QTable> {
    check_tol(tol)?;
    check_policy(mdp, pi)?;
    let ns = mdp.num_states();
    let g = mdp.gamma();
    let (p, rp) = induced_chain(mdp, pi);
    let a = DMatrix::from_fn(ns, ns, |i, j| f64::from(u8::from(i == j)) - g * p[i * ns + j]);
    if let Some(v) = a.lu().solve(&DVector::from_vec(rp)) {
        let q = backup(mdp, v.as_slice());
        if bellman_evaluation(mdp, pi, &q).max_abs_diff(&q) <= tol * (1.0 - g) / 2.0 {
            return Ok(q);
        }
    }
    let stop = stop_threshold(tol, g);
    let mut q = Table::zeros(ns, mdp.num_actions());
    for _ in 0..MAX_ITERS {
        let next = bellman_evaluation(mdp, pi, &q);
        let d = next.max_abs_diff(&q);
        q = next;
        if d <= stop {
            return Ok(q);
        }
    }
    Err(Error::Solver("policy evaluation hit the iteration cap".into()))
}

/// `V_π(s) = Σ_a π(a|s) Q_π(s,a)`.
pub fn policy_value(mdp: &FactoredMdp, pi: &JointPolicy, tol: f64) -> Result<Vec<f64>> {
    let q = policy_q(mdp, pi, tol)?;
    Ok((0..q.rows())
        .map(|s| q.row(s).iter().zip(pi.row(s)).map(|(x, p)| x * p).sum())
        .collect())
}

/// Stationary distribution of the state-action chain induced by a policy.
#[derive(Debug, Clone, Serialize)]
pub struct StationaryDist {
    /// Mass on joint states.
    pub state: Vec<f64>,
    /// `d(s,a) = d(s) π(a|s)`.
    pub d: Table,
    /// `min_{s,a} d(s,a)` over the whole joint space.
    pub sigma: f64,
    /// `min_{i,s^i,a^i} d'(s^i,a^i)` over every agent's local cells.
    pub sigma_prime: f64,
    /// Joint states the analysis covered (the class reached from the starts).
    pub support: Vec<usize>,
}

impl StationaryDist {
    /// `d'(s^i, a^i)`: the mass of agent `i`'s local cells.
    pub fn marginal(&self, mdp: &FactoredMdp, i: usize) -> Table {
        cell_mass(mdp, i, &self.d)
    }
}

/// Mass of agent `i`'s cells under the weighting `d[s][a]`.
pub fn cell_mass(mdp: &FactoredMdp, i: usize, d: &Table) -> Table {
    let mut out = Table::zeros(mdp.state_sizes()[i], mdp.action_sizes()[i]);
    for s in 0..d.rows() {
        let si = mdp.local_state(s, i);
        for (a, &w) in d.row(s).iter().enumerate() {
            let ai = mdp.local_action(a, i);
            out.set(si, ai, out.get(si, ai) + w);
        }
    }
    out
}

struct Chain {
    ns: usize,
    p: Vec<f64>,
}

impl Chain {
    fn graph(&self) -> DiGraph<(), ()> {
        let mut g = DiGraph::with_capacity(self.ns, 0);
        let nodes: Vec<NodeIndex> = (0..self.ns).map(|_| g.add_node(())).collect();
        for i in 0..self.ns {
            for j in 0..self.ns {
                if self.p[i * self.ns + j] > 0.0 {
                    g.add_edge(nodes[i], nodes[j], ());
                }
            }
        }
        g
    }

    fn reachable(&self, starts: &[usize]) -> Vec<bool> {
        let mut seen = vec![false; self.ns];
        let mut stack: Vec<usize> = starts.to_vec();
        for &s in starts {
            seen[s] = true;
        }
        while let Some(u) = stack.pop() {
            for v in 0..self.ns {
                if !seen[v] && self.p[u * self.ns + v] > 0.0 {
                    seen[v] = true;
                    stack.push(v);
                }
            }
        }
        seen
    }

    /// Strongly connected components, each tagged closed or not.
    fn classes(&self) -> Vec<(Vec<usize>, bool)> {
        let g = self.graph();
        let mut comp = vec![0; self.ns];
        let sccs = tarjan_scc(&g);
        for (c, members) in sccs.iter().enumerate() {
            for n in members {
                comp[n.index()] = c;
            }
        }
        let mut out: Vec<(Vec<usize>, bool)> = sccs
            .iter()
            .enumerate()
            .map(|(c, members)| {
                let mut m: Vec<usize> = members.iter().map(|n| n.index()).collect();
                m.sort_unstable();
                let closed = m.iter().all(|&u| {
                    (0..self.ns).all(|v| self.p[u * self.ns + v] == 0.0 || comp[v] == c)
                });
                (m, closed)
            })
            .collect();
        out.sort_by_key(|(m, _)| m[0]);
        out
    }

    /// Period of an irreducible class via BFS levels.
    fn period(&self, class: &[usize]) -> usize {
        let mut level = vec![usize::MAX; self.ns];
        let mut queue = std::collections::VecDeque::new();
        level[class[0]] = 0;
        queue.push_back(class[0]);
        let mut g = 0usize;
        while let Some(u) = queue.pop_front() {
            for &v in class {
                if self.p[u * self.ns + v] > 0.0 {
                    if level[v] == usize::MAX {
                        level[v] = level[u] + 1;
                        queue.push_back(v);
                    } else {
                        g = gcd(g, (level[u] + 1).abs_diff(level[v]));
                    }
                }
            }
        }
        g.max(1)
    }

    /// Stationary vector of an irreducible class, by a direct solve polished
    /// with power iteration.
    fn class_stationary(&self, class: &[usize], tol: f64) -> Result<Vec<f64>> {
        let m = class.len();
        let sub = |i: usize, j: usize| self.p[class[i] * self.ns + class[j]];
        // rows of (I − P)ᵀ, last equation replaced by Σ d = 1
        let mut a = DMatrix::from_fn(m, m, |i, j| f64::from(u8::from(i == j)) - sub(j, i));
        for j in 0..m {
            a[(m - 1, j)] = 1.0;
        }
        let mut b = DVector::zeros(m);
        b[m - 1] = 1.0;
        let mut d: Vec<f64> = match a.lu().solve(&b) {
            Some(x) => x.iter().map(|v| v.max(0.0)).collect(),
            None => vec![1.0 / m as f64; m],
        };
        let step = |d: &[f64]| -> Vec<f64> {
            let mut out = vec![0.0; m];
            for i in 0..m {
                for j in 0..m {
                    out[j] += d[i] * sub(i, j);
                }
            }
            out
        };
        for _ in 0..MAX_ITERS {
            let z: f64 = d.iter().sum();
            d.iter_mut().for_each(|x| *x /= z);
            let next = step(&d);
            let res: f64 = next.iter().zip(&d).map(|(x, y)| (x - y).abs()).sum();
            if res <= tol {
                return Ok(d);
            }
            // lazy step keeps power iteration convergent on periodic classes
            d = d.iter().zip(&next).map(|(x, y)| 0.5 * (x + y)).collect();
        }
        Err(Error::Solver("stationary power iteration hit the iteration cap".into()))
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Stationary distribution of the chain induced by `pi`, restricted to the
/// states reachable from the MDP's start set (all states unless the MDP names
/// a start set). The reachable states must form one aperiodic closed class.
pub fn stationary_distribution(mdp: &FactoredMdp, pi: &JointPolicy, tol: f64) -> Result<StationaryDist> {
    stationary_distribution_from(mdp, pi, mdp.start_states(), tol)
}

pub fn stationary_distribution_from(
    mdp: &FactoredMdp,
    pi: &JointPolicy,
    starts: &[usize],
    tol: f64,
) -> Result<StationaryDist> {
    check_tol(tol)?;
    check_policy(mdp, pi)?;
    let ns = mdp.num_states();
    let (p, _) = induced_chain(mdp, pi);
    let chain = Chain { ns, p };
    let reach = chain.reachable(starts);
    let classes: Vec<(Vec<usize>, bool)> = chain
        .classes()
        .into_iter()
        .filter(|(m, _)| reach[m[0]])
        .collect();
    if classes.len() != 1 {
        let closed = classes.iter().filter(|c| c.1).count();
        let transient = classes.iter().filter(|c| !c.1).map(|c| c.0.len()).sum();
        return Err(Error::ReducibleChain {
            closed_classes: closed,
            transient,
        });
    }
    let support = classes.into_iter().next().map(|c| c.0).unwrap_or_default();
    let period = chain.period(&support);
    if period > 1 {
        return Err(Error::Periodic(period));
    }
    let dc = chain.class_stationary(&support, tol)?;
    let mut state = vec![0.0; ns];
    for (&s, &x) in support.iter().zip(&dc) {
        state[s] = x;
    }
    Ok(assemble(mdp, pi, state, support))
}

fn assemble(mdp: &FactoredMdp, pi: &JointPolicy, state: Vec<f64>, support: Vec<usize>) -> StationaryDist {
    let d = Table::from_fn(mdp.num_states(), mdp.num_actions(), |s, a| state[s] * pi.prob(s, a));
    let sigma = d.min();
    let sigma_prime = (0..mdp.n())
        .map(|i| cell_mass(mdp, i, &d).min())
        .fold(f64::INFINITY, f64::min);
    StationaryDist {
        state,
        d,
        sigma,
        sigma_prime,
        support,
    }
}

/// Normalized discounted occupancy `(1−γ) Σ_k γ^k μ P_π^k` from the start
/// distribution, as a state-action weighting. Defined for any chain.
pub fn discounted_occupancy(mdp: &FactoredMdp, pi: &JointPolicy, start: &[f64]) -> Result<Table> {
    check_policy(mdp, pi)?;
    let ns = mdp.num_states();
    let g = mdp.gamma();
    let (p, _) = induced_chain(mdp, pi);
    // ν (I − γP) = (1−γ) μ
    let a = DMatrix::from_fn(ns, ns, |i, j| f64::from(u8::from(i == j)) - g * p[j * ns + i]);
    let b = DVector::from_iterator(ns, start.iter().map(|x| (1.0 - g) * x));
    let nu = a
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::Solver("singular occupancy system".into()))?;
    Ok(Table::from_fn(ns, mdp.num_actions(), |s, a| nu[s].max(0.0) * pi.prob(s, a)))
}

/// Transition mass below this is treated as zero when classifying the chain
/// for average rewards. Near-deterministic policies leave leaks of order
/// `1e-300` that make a class look transient while `I − P_TT` is singular in
/// floating point.
pub const NEGLIGIBLE_MASS: f64 = 1e-14;

fn drop_negligible(p: &mut [f64], ns: usize) {
    for row in p.chunks_mut(ns) {
        if row.iter().any(|&x| x > 0.0 && x < NEGLIGIBLE_MASS) {
            row.iter_mut().for_each(|x| {
                if *x < NEGLIGIBLE_MASS {
                    *x = 0.0;
                }
            });
            let z: f64 = row.iter().sum();
            row.iter_mut().for_each(|x| *x /= z);
        }
    }
}

/// Long-run average reward of `pi` from the MDP's start distribution. Each
/// closed class contributes its stationary average weighted by the
/// probability of being absorbed into it.
pub fn average_reward(mdp: &FactoredMdp, pi: &JointPolicy, tol: f64) -> Result<f64> {
    check_tol(tol)?;
    check_policy(mdp, pi)?;
    let ns = mdp.num_states();
    let (mut p, rp) = induced_chain(mdp, pi);
    drop_negligible(&mut p, ns);
    let chain = Chain { ns, p };
    let classes = chain.classes();
    // per state: average reward of the closed class it sits in, if any
    let mut gain = vec![f64::NAN; ns];
    for (members, closed) in &classes {
        if *closed {
            let d = chain.class_stationary(members, tol)?;
            let avg: f64 = members.iter().zip(&d).map(|(&s, x)| x * rp[s]).sum();
            for &s in members {
                gain[s] = avg;
            }
        }
    }
    let transient: Vec<usize> = (0..ns).filter(|&s| gain[s].is_nan()).collect();
    if !transient.is_empty() {
        // h = P_TT h + P_TC g
        let m = transient.len();
        let a = DMatrix::from_fn(m, m, |i, j| {
            f64::from(u8::from(i == j)) - chain.p[transient[i] * ns + transient[j]]
        });
        let b = DVector::from_fn(m, |i, _| {
            (0..ns)
                .filter(|s| !gain[*s].is_nan())
                .map(|s| chain.p[transient[i] * ns + s] * gain[s])
                .sum::<f64>()
        });
        let h = a
            .lu()
            .solve(&b)
            .ok_or_else(|| Error::Solver("singular absorption system".into()))?;
        for (i, &s) in transient.iter().enumerate() {
            gain[s] = h[i];
        }
    }
    Ok(mdp
        .start_distribution()
        .iter()
        .zip(&gain)
        .map(|(w, g)| w * g)
        .sum())
}

/// Long-run average reward of the greedy policy of `Q*`, from the MDP's
/// start distribution.
pub fn optimal_average_reward(mdp: &FactoredMdp) -> Result<f64> {
    let q = value_iteration(mdp, DEFAULT_TOL)?;
    average_reward(mdp, &greedy_policy(&q), DEFAULT_TOL)
}

#[derive(Debug, Clone, Serialize)]
pub struct MixingProfile {
    pub m1_hat: f64,
    pub m2_hat: f64,
    pub sigma: f64,
    pub sigma_prime: f64,
    /// `(k, max_s TV(P_π^k(s,·), d))` for `k = 0..=horizon`.
    pub decay_curve: Vec<(usize, f64)>,
}

/// Exact worst-case mixing gap and a fitted `M1 exp(−k/M2)` envelope.
///
/// The fit is least squares on `log gap` over the tail half of the horizon
/// where `gap > 1e-12`; `M2 = max(1, −1/slope)` and `M1` is the smallest
/// constant making the envelope dominate every tail point. With no tail
/// points the chain has mixed exactly and `(M1, M2) = (0, 1)`.
pub fn mixing_profile(mdp: &FactoredMdp, pi: &JointPolicy, horizon: usize) -> Result<MixingProfile> {
    let st = stationary_distribution(mdp, pi, DEFAULT_TOL)?;
    let ns = mdp.num_states();
    let (p, _) = induced_chain(mdp, pi);
    let sup = &st.support;
    let m = sup.len();
    let pm = DMatrix::from_fn(m, m, |i, j| p[sup[i] * ns + sup[j]]);
    let mut dist = DMatrix::<f64>::identity(m, m);
    let mut curve = Vec::with_capacity(horizon + 1);
    for k in 0..=horizon {
        let gap = (0..m)
            .map(|r| {
                0.5 * (0..m)
                    .map(|c| (dist[(r, c)] - st.state[sup[c]]).abs())
                    .sum::<f64>()
            })
            .fold(0.0, f64::max);
        curve.push((k, gap));
        dist = &dist * &pm;
    }
    let (m1_hat, m2_hat) = fit_decay(&curve);
    Ok(MixingProfile {
        m1_hat,
        m2_hat,
        sigma: st.sigma,
        sigma_prime: st.sigma_prime,
        decay_curve: curve,
    })
}

fn fit_decay(curve: &[(usize, f64)]) -> (f64, f64) {
    let horizon = curve.last().map_or(0, |c| c.0);
    let tail: Vec<(f64, f64)> = curve
        .iter()
        .filter(|(k, g)| 2 * k >= horizon && *g > 1e-12)
        .map(|&(k, g)| (k as f64, g.ln()))
        .collect();
    if tail.is_empty() {
        return (0.0, 1.0);
    }
    let m2 = if tail.len() < 2 {
        1.0
    } else {
        let nf = tail.len() as f64;
        let mx = tail.iter().map(|t| t.0).sum::<f64>() / nf;
        let my = tail.iter().map(|t| t.1).sum::<f64>() / nf;
        let sxy: f64 = tail.iter().map(|t| (t.0 - mx) * (t.1 - my)).sum();
        let sxx: f64 = tail.iter().map(|t| (t.0 - mx).powi(2)).sum();
        let slope = sxy / sxx;
        if slope < 0.0 {
            (-1.0 / slope).max(1.0)
        } else {
            // no measurable decay inside the horizon
            (horizon as f64).max(1.0)
        }
    };
    let m1 = tail
        .iter()
        .map(|&(k, lg)| (lg + k / m2).exp())
        .fold(0.0, f64::max);
    (m1, m2)
}

/// Which operator `F^i` the aggregated fixed point uses.
#[derive(Debug, Clone, Copy)]
pub enum OperatorKind<'a> {
    /// `R^i(s,a) + γ E_{s'} max_{a^i} x(s'^i, a^i)`, the IQL target.
    Optimality,
    /// `R^i(s,a) + γ E_{s'} Σ_{ā} π(ā|s') x(s'^i, ā^i)`, the ITD target.
    Evaluation(&'a JointPolicy),
}

/// `Π` for agent `i`: the `d`-weighted average of a joint table over each
/// local cell.
pub fn aggregate(mdp: &FactoredMdp, i: usize, weights: &Table, q: &Table) -> Result<Table> {
    let mass = cell_mass(mdp, i, weights);
    check_cells(i, &mass)?;
    let mut out = Table::zeros(mass.rows(), mass.cols());
    for s in 0..q.rows() {
        let si = mdp.local_state(s, i);
        for a in 0..q.cols() {
            let ai = mdp.local_action(a, i);
            let w = weights.get(s, a) / mass.get(si, ai);
            out.set(si, ai, out.get(si, ai) + w * q.get(s, a));
        }
    }
    Ok(out)
}

/// `Φ^i`: copies a local table onto the joint space.
pub fn lift(mdp: &FactoredMdp, i: usize, local: &Table) -> Table {
    Table::from_fn(mdp.num_states(), mdp.num_actions(), |s, a| {
        local.get(mdp.local_state(s, i), mdp.local_action(a, i))
    })
}

fn check_cells(i: usize, mass: &Table) -> Result<()> {
    for s in 0..mass.rows() {
        for a in 0..mass.cols() {
            if mass.get(s, a) <= 0.0 {
                return Err(Error::ZeroCellMass {
                    agent: i,
                    state: s,
                    action: a,
                });
            }
        }
    }
    Ok(())
}

/// Solves `x = Π F^i(Φ^i x)` by fixed-point iteration.
pub fn aggregated_fixed_point(
    mdp: &FactoredMdp,
    agent: usize,
    weights: &Table,
    kind: OperatorKind<'_>,
    tol: f64,
) -> Result<LocalQTable> {
    check_tol(tol)?;
    if agent >= mdp.n() {
        return Err(Error::Index {
            what: "agent",
            index: agent,
            bound: mdp.n(),
        });
    }
    if weights.rows() != mdp.num_states() || weights.cols() != mdp.num_actions() {
        return Err(Error::DimensionMismatch("weighting shape".into()));
    }
    let (ns, na) = (mdp.num_states(), mdp.num_actions());
    let (mi, ai_n) = (mdp.state_sizes()[agent], mdp.action_sizes()[agent]);
    let mass = cell_mass(mdp, agent, weights);
    check_cells(agent, &mass)?;
    let cells = mi * ai_n;

    // averaged reward and next-state law per cell
    let mut rbar = vec![0.0; cells];
    let mut next = vec![0.0; cells * ns];
    for s in 0..ns {
        let si = mdp.local_state(s, agent);
        for a in 0..na {
            let w = weights.get(s, a);
            if w == 0.0 {
                continue;
            }
            let c = si * ai_n + mdp.local_action(a, agent);
            let w = w / mass.as_slice()[c];
            rbar[c] += w * mdp.expected_local_reward(agent, s, a);
            for (o, p) in next[c * ns..(c + 1) * ns].iter_mut().zip(mdp.row(a, s)) {
                *o += w * p;
            }
        }
    }
    // next-action weights of agent i at each joint next state
    let act_w: Option<Vec<Vec<f64>>> = match kind {
        OperatorKind::Optimality => None,
        OperatorKind::Evaluation(pi) => {
            check_policy(mdp, pi)?;
            Some((0..ns).map(|s| agent_marginal(mdp, pi, s, agent)).collect())
        }
    };

    let g = mdp.gamma();
    let stop = stop_threshold(tol, g);
    let mut x = Table::zeros(mi, ai_n);
    let mut gv = vec![0.0; ns];
    for _ in 0..MAX_ITERS {
        for (s, out) in gv.iter_mut().enumerate() {
            let row = x.row(mdp.local_state(s, agent));
            *out = match &act_w {
                None => row[crate::mdp::argmax(row)],
                Some(w) => row.iter().zip(&w[s]).map(|(q, p)| q * p).sum(),
            };
        }
        let mut y = Table::zeros(mi, ai_n);
        for (c, out) in y.as_mut_slice().iter_mut().enumerate() {
            let ev: f64 = next[c * ns..(c + 1) * ns].iter().zip(&gv).map(|(p, v)| p * v).sum();
            *out = rbar[c] + g * ev;
        }
        let d = y.max_abs_diff(&x);
        x = y;
        if d <= stop {
            return Ok(x);
        }
    }
    Err(Error::Solver("aggregated fixed point hit the iteration cap".into()))
}

/// Residual `‖Π F^i(Φ^i x) − x‖∞`.
pub fn aggregated_residual(
    mdp: &FactoredMdp,
    agent: usize,
    weights: &Table,
    kind: OperatorKind<'_>,
    x: &Table,
) -> Result<f64> {
    let v: Vec<f64> = (0..mdp.num_states())
        .map(|s| {
            let row = x.row(mdp.local_state(s, agent));
            match kind {
                OperatorKind::Optimality => row[crate::mdp::argmax(row)],
                OperatorKind::Evaluation(pi) => row
                    .iter()
                    .zip(agent_marginal(mdp, pi, s, agent))
                    .map(|(q, p)| q * p)
                    .sum(),
            }
        })
        .collect();
    let (ns, na) = (mdp.num_states(), mdp.num_actions());
    let g = mdp.gamma();
    let f = Table::from_fn(ns, na, |s, a| {
        let ev: f64 = mdp.row(a, s).iter().zip(&v).map(|(p, y)| p * y).sum();
        mdp.expected_local_reward(agent, s, a) + g * ev
    });
    Ok(aggregate(mdp, agent, weights, &f)?.max_abs_diff(x))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::rng::RngStream;

    fn chain_mdp(t: Vec<f64>, ns: usize, r: Vec<f64>, gamma: f64) -> FactoredMdp {
        let na = t.len() / (ns * ns);
        let rewards = Table::from_vec(ns, na, r).unwrap();
        FactoredMdp::from_dense(vec![ns], vec![na], gamma, vec![rewards], t).unwrap()
    }

    #[test]
    fn value_iteration_geometric_series() {
        let m = chain_mdp(vec![1.0], 1, vec![1.0], 0.9);
        let q = value_iteration(&m, 1e-10).unwrap();
        assert!((q.get(0, 0) - 10.0).abs() <= 1e-10);
    }

    #[test]
    fn value_iteration_zero_reward() {
        let m = chain_mdp(vec![0.5, 0.5, 0.2, 0.8, 1.0, 0.0, 0.0, 1.0], 2, vec![0.0; 4], 0.95);
        assert_eq!(value_iteration(&m, 1e-10).unwrap().sup_norm(), 0.0);
    }

    #[test]
    fn value_iteration_residual_and_contraction() {
        let m = random_single(4, 3, 0.9, 17);
        let tr = value_iteration_trace(&m, 1e-10).unwrap();
        assert!(bellman_optimality(&m, &tr.q).max_abs_diff(&tr.q) <= 1e-10);
        // slack of a few ulps of ‖Q‖ absorbs rounding in the sweep
        let slack = 16.0 * f64::EPSILON * tr.q.sup_norm();
        for w in tr.diffs.windows(2) {
            assert!(w[1] <= 0.9 * w[0] + slack, "{} {}", w[0], w[1]);
        }
    }

    #[test]
    fn greedy_examples() {
        let q = Table::from_vec(2, 2, vec![1.0, 2.0, 3.0, 3.0]).unwrap();
        let pi = greedy_policy(&q);
        assert_eq!(pi.row(0), &[0.0, 1.0]);
        assert_eq!(pi.row(1), &[1.0, 0.0]);
    }

    #[test]
    fn greedy_picks_dominating_action() {
        // 2 states, action 1 pays 1 and action 0 pays 0, same dynamics
        let t = vec![0.3, 0.7, 0.6, 0.4, 0.3, 0.7, 0.6, 0.4];
        let m = chain_mdp(t, 2, vec![0.0, 1.0, 0.0, 1.0], 0.9);
        let q = value_iteration(&m, 1e-10).unwrap();
        // same continuation under either action, so Q(s,1) − Q(s,0) = 1 exactly
        for s in 0..2 {
            assert!((q.get(s, 1) - q.get(s, 0) - 1.0).abs() < 1e-9);
        }
        assert_eq!(greedy_policy(&q).modes(), vec![1, 1]);
    }

    #[test]
    fn policy_q_closed_form() {
        let m = chain_mdp(vec![1.0, 1.0], 1, vec![0.0, 1.0], 0.5);
        let pi = JointPolicy::uniform(1, 2);
        let q = policy_q(&m, &pi, 1e-12).unwrap();
        assert!((q.get(0, 0) - 0.5).abs() < 1e-12);
        assert!((q.get(0, 1) - 1.5).abs() < 1e-12);
        let v = policy_value(&m, &pi, 1e-12).unwrap();
        assert!((v[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn policy_q_residual() {
        let m = random_single(5, 3, 0.95, 3);
        let pi = JointPolicy::uniform(5, 3);
        let q = policy_q(&m, &pi, 1e-10).unwrap();
        assert!(bellman_evaluation(&m, &pi, &q).max_abs_diff(&q) <= 1e-10);
    }

    pub(crate) fn random_single(ns: usize, na: usize, gamma: f64, seed: u64) -> FactoredMdp {
        let mut rng = RngStream::derive(seed, 0, 0);
        let mut t = Vec::new();
        for _ in 0..na * ns {
            let row: Vec<f64> = (0..ns).map(|_| rng.uniform() + 0.05).collect();
            let z: f64 = row.iter().sum();
            t.extend(row.iter().map(|x| x / z));
        }
        let r = (0..ns * na).map(|_| rng.uniform()).collect();
        chain_mdp(t, ns, r, gamma)
    }

    #[test]
    fn stationary_symmetric_flip() {
        let m = chain_mdp(vec![0.5, 0.5, 0.5, 0.5], 2, vec![0.0; 2], 0.9);
        let st = stationary_distribution(&m, &JointPolicy::uniform(2, 1), 1e-12).unwrap();
        assert!((st.state[0] - 0.5).abs() < 1e-12);
        assert!(st.sigma <= st.sigma_prime);
    }

    #[test]
    fn stationary_absorbing_is_reducible() {
        let m = chain_mdp(vec![1.0, 0.0, 0.0, 1.0], 2, vec![0.0; 2], 0.9);
        let pi = JointPolicy::uniform(2, 1);
        assert!(matches!(
            stationary_distribution(&m, &pi, 1e-12),
            Err(Error::ReducibleChain { closed_classes: 2, .. })
        ));
        let restricted = m.with_start_states(vec![1]).unwrap();
        let st = stationary_distribution(&restricted, &pi, 1e-12).unwrap();
        assert_eq!(st.state, vec![0.0, 1.0]);
    }

    #[test]
    fn stationary_periodic_detected() {
        let m = chain_mdp(vec![0.0, 1.0, 1.0, 0.0], 2, vec![0.0; 2], 0.9);
        assert!(matches!(
            stationary_distribution(&m, &JointPolicy::uniform(2, 1), 1e-12),
            Err(Error::Periodic(2))
        ));
    }

    #[test]
    fn stationary_matches_dense_eigensolve() {
        let m = random_single(5, 2, 0.9, 8);
        let pi = JointPolicy::uniform(5, 2);
        let st = stationary_distribution(&m, &pi, 1e-13).unwrap();
        // oracle: left eigenvector for eigenvalue 1 via nalgebra's Schur-free
        // approach: null space of (P_π − I)ᵀ from the SVD
        let (p, _) = induced_chain(&m, &pi);
        let a = DMatrix::from_fn(5, 5, |i, j| p[j * 5 + i] - f64::from(u8::from(i == j)));
        let svd = a.svd(true, true);
        let vt = svd.v_t.unwrap();
        let k = (0..5)
            .min_by(|&x, &y| svd.singular_values[x].total_cmp(&svd.singular_values[y]))
            .unwrap();
        let v: Vec<f64> = (0..5).map(|j| vt[(k, j)]).collect();
        let z: f64 = v.iter().sum();
        for s in 0..5 {
            assert!((v[s] / z - st.state[s]).abs() < 1e-10);
        }
    }

    #[test]
    fn mixing_iid_chain() {
        let row = [0.2, 0.3, 0.5];
        let t: Vec<f64> = (0..3).flat_map(|_| row).collect();
        let m = chain_mdp(t, 3, vec![0.0; 3], 0.9);
        let prof = mixing_profile(&m, &JointPolicy::uniform(3, 1), 10).unwrap();
        assert!(prof.decay_curve[1..].iter().all(|&(_, g)| g < 1e-12));
        assert_eq!(prof.m1_hat, 0.0);
        assert_eq!(prof.m2_hat, 1.0);
    }

    #[test]
    fn mixing_geometric_decay_recovers_rate() {
        // lazy flip chain: gap_k = 0.5·|1 − 2p|^k with p = 0.2
        let t = vec![0.8, 0.2, 0.2, 0.8];
        let m = chain_mdp(t, 2, vec![0.0; 2], 0.9);
        let prof = mixing_profile(&m, &JointPolicy::uniform(2, 1), 40).unwrap();
        for &(k, g) in &prof.decay_curve {
            assert!((g - 0.5 * 0.6f64.powi(k as i32)).abs() < 1e-12);
        }
        let want = -1.0 / 0.6f64.ln();
        assert!((prof.m2_hat - want).abs() < 1e-6 * want);
        assert!((prof.m1_hat - 0.5).abs() < 1e-6);
    }

    #[test]
    fn average_reward_ignores_vanishing_leaks() {
        // action 0 stays, action 1 jumps to the absorbing state 1
        let t = vec![1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0];
        let m = FactoredMdp::from_dense(vec![2], vec![2], 0.9, vec![Table::from_vec(2, 2, vec![1.0, 1.0, 0.0, 0.0]).unwrap()], t)
            .unwrap()
            .with_start_states(vec![0])
            .unwrap();
        let pi = JointPolicy::new(Table::from_vec(2, 2, vec![1.0, 1e-300, 1.0, 0.0]).unwrap()).unwrap();
        assert!((average_reward(&m, &pi, 1e-12).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn average_reward_of_reducible_chain() {
        // state 0 moves to absorbing 1 (reward 1) or 2 (reward 0) evenly
        let t = vec![0.0, 0.5, 0.5, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let m = chain_mdp(t, 3, vec![0.3, 1.0, 0.0], 0.9)
            .with_start_states(vec![0])
            .unwrap();
        let g = average_reward(&m, &JointPolicy::uniform(3, 1), 1e-12).unwrap();
        assert!((g - 0.5).abs() < 1e-12);
    }

    #[test]
    fn aggregation_identity_for_single_agent() {
        let m = random_single(4, 3, 0.9, 21);
        let pi = JointPolicy::uniform(4, 3);
        let st = stationary_distribution(&m, &pi, 1e-13).unwrap();
        let xe = aggregated_fixed_point(&m, 0, &st.d, OperatorKind::Evaluation(&pi), 1e-10).unwrap();
        let qe = policy_q(&m, &pi, 1e-10).unwrap();
        assert!(xe.max_abs_diff(&qe) <= 2e-10);
        let xo = aggregated_fixed_point(&m, 0, &st.d, OperatorKind::Optimality, 1e-10).unwrap();
        let qo = value_iteration(&m, 1e-10).unwrap();
        assert!(xo.max_abs_diff(&qo) <= 2e-10);
        let res = aggregated_residual(&m, 0, &st.d, OperatorKind::Optimality, &xo).unwrap();
        assert!(res <= 1e-10);
    }

    #[test]
    fn aggregation_rejects_empty_cells() {
        let m = random_single(2, 2, 0.9, 1);
        let pi = JointPolicy::deterministic(&[0, 0], 2);
        let st = stationary_distribution(&m, &pi, 1e-12).unwrap();
        assert!(matches!(
            aggregated_fixed_point(&m, 0, &st.d, OperatorKind::Optimality, 1e-8),
            Err(Error::ZeroCellMass { agent: 0, action: 1, .. })
        ));
    }

    #[test]
    fn projection_is_nonexpansive() {
        let mut rng = RngStream::derive(4, 0, 0);
        let t: Vec<f64> = (0..64).map(|k| if k % 4 == (k / 4) % 4 { 1.0 } else { 0.0 }).collect();
        let m = FactoredMdp::from_dense(
            vec![2, 2],
            vec![2, 2],
            0.9,
            vec![Table::zeros(2, 2), Table::zeros(2, 2)],
            t,
        )
        .unwrap();
        for _ in 0..200 {
            let q = Table::from_fn(4, 4, |_, _| 10.0 * (rng.uniform() - 0.5));
            let d = Table::from_fn(4, 4, |_, _| rng.uniform() + 1e-3);
            for i in 0..2 {
                let pq = lift(&m, i, &aggregate(&m, i, &d, &q).unwrap());
                assert!(pq.sup_norm() <= q.sup_norm() + 1e-12);
            }
        }
    }
}
