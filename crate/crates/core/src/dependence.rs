//! Dependence level of a factored MDP.
//!
//! `E = min_{P̂ separable} max_{s,a} TV(P_a(s,·), P̂_a(s,·))` where a separable
//! kernel has rows `P̂_a(s,s') = Π_i P̂^i_{a^i}(s^i, s'^i)`.
//!
//! Two facts drive the optimizer. First, with every agent but `i` frozen,
//! each row `(a^i, s^i)` of agent `i`'s kernel only enters the product rows
//! whose local indices match it, so the per-agent problem splits into one
//! small convex problem per row. Second, the marginal of a product row on
//! agent `i`'s next state is exactly that agent's kernel row, and
//! marginalization never increases TV. Two true rows sharing `(s^i, a^i)` but
//! with marginals `m`, `m'` therefore force `E ≥ TV(m, m')/2`, which is the
//! certified lower bound reported alongside every estimate.

use microlp::{ComparisonOp, OptimizationDirection, Problem};
use rand::Rng;
use rand_distr::Exp1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{Builder, FactoredMdp, Table, ROW_TOL};
use crate::rng::{RngStream, GEN_LANE};

/// One stochastic matrix per agent per local action: `agents[i][a^i][s^i][s'^i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparableKernel {
    agents: Vec<Vec<Table>>,
}

impl SeparableKernel {
    pub fn new(agents: Vec<Vec<Table>>) -> Result<Self> {
        for (i, per_action) in agents.iter().enumerate() {
            for (a, t) in per_action.iter().enumerate() {
                if t.rows() != t.cols() {
                    return Err(Error::DimensionMismatch(format!(
                        "kernel of agent {i}, action {a} is not square"
                    )));
                }
                for s in 0..t.rows() {
                    let row = t.row(s);
                    let sum: f64 = row.iter().sum();
                    if row.iter().any(|p| !(0.0..=1.0).contains(p)) || (sum - 1.0).abs() > ROW_TOL {
                        return Err(Error::NotADistribution(format!(
                            "kernel row agent {i}, action {a}, state {s} (sum {sum})"
                        )));
                    }
                }
            }
        }
        Ok(Self { agents })
    }

    pub fn uniform(mdp: &FactoredMdp) -> Self {
        Self::from_fn(mdp, |i, _, _| {
            let m = mdp.state_sizes()[i];
            vec![1.0 / m as f64; m]
        })
    }

    /// Builds every row with `f(agent, a^i, s^i)`; rows are not checked.
    pub(crate) fn from_fn(mdp: &FactoredMdp, mut f: impl FnMut(usize, usize, usize) -> Vec<f64>) -> Self {
        let agents = (0..mdp.n())
            .map(|i| {
                let m = mdp.state_sizes()[i];
                (0..mdp.action_sizes()[i])
                    .map(|a| {
                        let data = (0..m).flat_map(|s| f(i, a, s)).collect();
                        Table::from_vec(m, m, data).expect("row length")
                    })
                    .collect()
            })
            .collect();
        Self { agents }
    }

    pub fn n(&self) -> usize {
        self.agents.len()
    }

    pub fn agent(&self, i: usize) -> &[Table] {
        &self.agents[i]
    }

    /// `P̂^i_{a^i}(s^i, ·)`.
    #[inline]
    pub fn row(&self, i: usize, ai: usize, si: usize) -> &[f64] {
        self.agents[i][ai].row(si)
    }

    fn row_mut(&mut self, i: usize, ai: usize, si: usize) -> &mut [f64] {
        self.agents[i][ai].row_mut(si)
    }

    pub fn check_fits(&self, mdp: &FactoredMdp) -> Result<()> {
        let ok = self.n() == mdp.n()
            && self.agents.iter().enumerate().all(|(i, per_action)| {
                per_action.len() == mdp.action_sizes()[i]
                    && per_action.iter().all(|t| t.rows() == mdp.state_sizes()[i])
            });
        if ok {
            Ok(())
        } else {
            Err(Error::DimensionMismatch("kernel does not fit the MDP".into()))
        }
    }

    /// Writes the product row `P̂_a(s, ·)` into `out`.
    pub fn product_row(&self, mdp: &FactoredMdp, s: usize, a: usize, out: &mut Vec<f64>) {
        let mut next = Vec::with_capacity(mdp.num_states());
        out.clear();
        out.push(1.0);
        for i in 0..self.n() {
            let row = self.row(i, mdp.local_action(a, i), mdp.local_state(s, i));
            next.clear();
            for &p in out.iter() {
                next.extend(row.iter().map(|q| p * q));
            }
            std::mem::swap(out, &mut next);
        }
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let mut text = serde_json::to_string(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let k: SeparableKernel = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        Self::new(k.agents)
    }
}

/// `(1/2) Σ_j |p_j − q_j|`.
pub fn tv_distance(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::DimensionMismatch(format!("lengths {} and {}", p.len(), q.len())));
    }
    for (name, v) in [("p", p), ("q", q)] {
        let sum: f64 = v.iter().sum();
        if v.iter().any(|x| !(*x >= 0.0)) || (sum - 1.0).abs() > 1e-10 {
            return Err(Error::NotADistribution(format!("{name} sums to {sum}")));
        }
    }
    Ok(tv(p, q))
}

#[inline]
fn tv(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

/// `max_{s,a} TV(P_a(s,·), P̂_a(s,·))`.
pub fn max_tv_gap(mdp: &FactoredMdp, kernel: &SeparableKernel) -> Result<f64> {
    kernel.check_fits(mdp)?;
    let mut buf = Vec::with_capacity(mdp.num_states());
    let mut worst = 0.0f64;
    for a in 0..mdp.num_actions() {
        for s in 0..mdp.num_states() {
            kernel.product_row(mdp, s, a, &mut buf);
            worst = worst.max(tv(mdp.row(a, s), &buf));
        }
    }
    Ok(worst)
}

/// The separable MDP `M̂`: the input with every row replaced by the product
/// row. Rewards are kept, so realized transition rewards are averaged under
/// `P̂` by the exact solvers.
pub fn build_separable_mdp(mdp: &FactoredMdp, kernel: &SeparableKernel) -> Result<FactoredMdp> {
    kernel.check_fits(mdp)?;
    let mut spec = mdp.to_spec();
    let mut buf = Vec::new();
    for (a, block) in spec.transition.iter_mut().enumerate() {
        for (s, row) in block.iter_mut().enumerate() {
            kernel.product_row(mdp, s, a, &mut buf);
            row.clone_from(&buf);
        }
    }
    FactoredMdp::new(&spec)
}

/// Agent `i`'s decoupled MDP under the kernel: dynamics `P̂^i`, reward `R^i`.
pub fn factor_mdp(mdp: &FactoredMdp, kernel: &SeparableKernel, i: usize) -> Result<FactoredMdp> {
    kernel.check_fits(mdp)?;
    let (m, k) = (mdp.state_sizes()[i], mdp.action_sizes()[i]);
    let mut t = Vec::with_capacity(k * m * m);
    for a in 0..k {
        t.extend_from_slice(kernel.agent(i)[a].as_slice());
    }
    let mut b = Builder::new(vec![m], vec![k], mdp.gamma(), vec![mdp.rewards(i).clone()], t)
        .reward_caps(vec![mdp.reward_cap(i)]);
    if mdp.has_transition_rewards() {
        let mut tr = Vec::with_capacity(m * k * m);
        for s in 0..m {
            for a in 0..k {
                tr.extend_from_slice(mdp.transition_reward_row(i, s, a).unwrap_or(&[]));
            }
        }
        b = b.transition_rewards(vec![tr]);
    }
    b.build()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DependenceConfig {
    /// Random starts on top of the uniform and marginalized ones.
    pub starts: usize,
    pub passes: usize,
    /// Subgradient iterations per row per pass.
    pub iters: usize,
    /// Subgradient step is `step / sqrt(t + 1)`.
    pub step: f64,
    /// Exact LP re-solve of every row after its subgradient run.
    pub polish: bool,
    /// Brute-force resolution for the certified bracket, when the instance
    /// is small enough.
    pub bracket_resolution: Option<usize>,
    pub seed: u64,
}

impl Default for DependenceConfig {
    fn default() -> Self {
        Self {
            starts: 4,
            passes: 5,
            iters: 500,
            step: 0.5,
            polish: true,
            bracket_resolution: Some(32),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DependenceEstimate {
    /// Upper bound on `E`, achieved by `kernel`.
    pub value: f64,
    #[serde(skip)]
    pub kernel: SeparableKernel,
    pub certified_lower: Option<f64>,
    pub method: String,
}

/// Index helpers for agent `i`: local next state and the index of the other
/// agents' coordinates, for every joint state.
struct Split {
    loc: Vec<usize>,
    rest: Vec<usize>,
}

impl Split {
    fn new(mdp: &FactoredMdp, i: usize) -> Self {
        let ns = mdp.num_states();
        let mut loc = Vec::with_capacity(ns);
        let mut rest = Vec::with_capacity(ns);
        for s in 0..ns {
            loc.push(mdp.local_state(s, i));
            let mut r = 0;
            for j in (0..mdp.n()).filter(|&j| j != i) {
                r = r * mdp.state_sizes()[j] + mdp.local_state(s, j);
            }
            rest.push(r);
        }
        Self { loc, rest }
    }
}

/// Product of the other agents' rows at `(s, a)`, over the rest index.
fn others_product(mdp: &FactoredMdp, k: &SeparableKernel, i: usize, s: usize, a: usize) -> Vec<f64> {
    let mut out = vec![1.0];
    for j in (0..mdp.n()).filter(|&j| j != i) {
        let row = k.row(j, mdp.local_action(a, j), mdp.local_state(s, j));
        out = out.iter().flat_map(|&p| row.iter().map(move |q| p * q)).collect();
    }
    out
}

/// Joint `(s, a)` pairs whose agent-`i` locals are `(s^i, a^i)`, per row.
fn row_members(mdp: &FactoredMdp, i: usize) -> Vec<Vec<(usize, usize)>> {
    let (m, k) = (mdp.state_sizes()[i], mdp.action_sizes()[i]);
    let mut out = vec![Vec::new(); k * m];
    for a in 0..mdp.num_actions() {
        for s in 0..mdp.num_states() {
            out[mdp.local_action(a, i) * m + mdp.local_state(s, i)].push((s, a));
        }
    }
    out
}

struct RowProblem<'a> {
    split: &'a Split,
    rows: Vec<&'a [f64]>,
    others: Vec<Vec<f64>>,
}

impl RowProblem<'_> {
    fn member_tv(&self, k: &[f64], m: usize) -> f64 {
        let (p, o) = (self.rows[m], &self.others[m]);
        0.5 * p
            .iter()
            .enumerate()
            .map(|(t, &x)| (x - k[self.split.loc[t]] * o[self.split.rest[t]]).abs())
            .sum::<f64>()
    }

    fn value(&self, k: &[f64]) -> (f64, usize) {
        let mut best = (f64::NEG_INFINITY, 0);
        for m in 0..self.rows.len() {
            let v = self.member_tv(k, m);
            if v > best.0 {
                best = (v, m);
            }
        }
        best
    }

    fn subgradient(&self, k: &[f64], m: usize) -> Vec<f64> {
        let (p, o) = (self.rows[m], &self.others[m]);
        let mut g = vec![0.0; k.len()];
        for (t, &x) in p.iter().enumerate() {
            let (l, r) = (self.split.loc[t], self.split.rest[t]);
            let diff = k[l] * o[r] - x;
            if diff != 0.0 {
                g[l] += 0.5 * diff.signum() * o[r];
            }
        }
        g
    }

    fn descend(&self, start: &[f64], iters: usize, step: f64) -> Vec<f64> {
        let mut k = start.to_vec();
        let mut best = k.clone();
        let mut best_v = self.value(&k).0;
        for t in 0..iters {
            let (_, m) = self.value(&k);
            let g = self.subgradient(&k, m);
            let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                break;
            }
            let eta = step / ((t + 1) as f64).sqrt() / norm;
            for (x, gx) in k.iter_mut().zip(&g) {
                *x -= eta * gx;
            }
            project_simplex(&mut k);
            let v = self.value(&k).0;
            if v < best_v {
                best_v = v;
                best.clone_from(&k);
            }
        }
        best
    }

    /// Exact row minimizer: min t s.t. ½ Σ u_{m,s'} ≤ t, u ≥ |P − k⊗O|.
    fn solve_lp(&self) -> Option<Vec<f64>> {
        let ki = self.split.loc.iter().copied().max().map_or(0, |x| x + 1);
        let mut pb = Problem::new(OptimizationDirection::Minimize);
        let t = pb.add_var(1.0, (0.0, f64::INFINITY));
        let k: Vec<_> = (0..ki).map(|_| pb.add_var(0.0, (0.0, 1.0))).collect();
        pb.add_constraint(k.iter().map(|&v| (v, 1.0)).collect::<Vec<_>>(), ComparisonOp::Eq, 1.0);
        for (m, &p) in self.rows.iter().enumerate() {
            let o = &self.others[m];
            let mut sum = vec![(t, -1.0)];
            for (s, &x) in p.iter().enumerate() {
                let u = pb.add_var(0.0, (0.0, f64::INFINITY));
                let coef = o[self.split.rest[s]];
                let kv = k[self.split.loc[s]];
                pb.add_constraint([(u, 1.0), (kv, coef)], ComparisonOp::Ge, x);
                pb.add_constraint([(u, 1.0), (kv, -coef)], ComparisonOp::Ge, -x);
                sum.push((u, 0.5));
            }
            pb.add_constraint(sum, ComparisonOp::Le, 0.0);
        }
        let sol = pb.solve().ok()?.into_solution().ok()?;
        let mut out: Vec<f64> = k.iter().map(|&v| sol.var_value(v).max(0.0)).collect();
        let z: f64 = out.iter().sum();
        if !(z > 0.0) {
            return None;
        }
        out.iter_mut().for_each(|x| *x /= z);
        Some(out)
    }
}

/// Euclidean projection onto the probability simplex.
pub fn project_simplex(v: &mut [f64]) {
    let mut u: Vec<f64> = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (j, &x) in u.iter().enumerate() {
        cum += x;
        let t = (cum - 1.0) / (j + 1) as f64;
        if x - t > 0.0 {
            theta = t;
        }
    }
    for x in v.iter_mut() {
        *x = (*x - theta).max(0.0);
    }
    let z: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= z);
}

/// Per-agent next-state marginal of the true row `P_a(s,·)`.
fn true_marginal(mdp: &FactoredMdp, split: &Split, m: usize, s: usize, a: usize) -> Vec<f64> {
    let mut out = vec![0.0; m];
    for (t, p) in mdp.row(a, s).iter().enumerate() {
        out[split.loc[t]] += p;
    }
    out
}

/// Marginalized start: each agent's row is the uniform average of the true
/// next-state marginals over the joint pairs sharing its local indices.
pub fn marginalized_kernel(mdp: &FactoredMdp) -> SeparableKernel {
    let splits: Vec<Split> = (0..mdp.n()).map(|i| Split::new(mdp, i)).collect();
    let members: Vec<_> = (0..mdp.n()).map(|i| row_members(mdp, i)).collect();
    SeparableKernel::from_fn(mdp, |i, a, s| {
        let m = mdp.state_sizes()[i];
        let group = &members[i][a * m + s];
        let mut acc = vec![0.0; m];
        for &(js, ja) in group {
            for (x, y) in acc.iter_mut().zip(true_marginal(mdp, &splits[i], m, js, ja)) {
                *x += y;
            }
        }
        let z: f64 = acc.iter().sum();
        acc.iter_mut().for_each(|x| *x /= z);
        acc
    })
}

fn random_kernel(mdp: &FactoredMdp, rng: &mut RngStream) -> SeparableKernel {
    SeparableKernel::from_fn(mdp, |i, _, _| {
        let mut row: Vec<f64> = (0..mdp.state_sizes()[i]).map(|_| rng.sample::<f64, _>(Exp1)).collect();
        let z: f64 = row.iter().sum();
        row.iter_mut().for_each(|x| *x /= z);
        row
    })
}

/// `max_{i, (s^i,a^i)} max_{pairs} TV(m, m')/2` over true marginals.
pub fn marginal_lower_bound(mdp: &FactoredMdp) -> f64 {
    let mut lb = 0.0f64;
    for i in 0..mdp.n() {
        let split = Split::new(mdp, i);
        let m = mdp.state_sizes()[i];
        for group in row_members(mdp, i) {
            let margs: Vec<Vec<f64>> = group
                .iter()
                .map(|&(s, a)| true_marginal(mdp, &split, m, s, a))
                .collect();
            for x in 0..margs.len() {
                for y in x + 1..margs.len() {
                    lb = lb.max(0.5 * tv(&margs[x], &margs[y]));
                }
            }
        }
    }
    lb
}

fn coordinate_descent(mdp: &FactoredMdp, mut k: SeparableKernel, cfg: &DependenceConfig) -> SeparableKernel {
    let splits: Vec<Split> = (0..mdp.n()).map(|i| Split::new(mdp, i)).collect();
    let members: Vec<_> = (0..mdp.n()).map(|i| row_members(mdp, i)).collect();
    for _ in 0..cfg.passes {
        for i in 0..mdp.n() {
            let m = mdp.state_sizes()[i];
            for (r, group) in members[i].iter().enumerate() {
                let (ai, si) = (r / m, r % m);
                let prob = RowProblem {
                    split: &splits[i],
                    rows: group.iter().map(|&(s, a)| mdp.row(a, s)).collect(),
                    others: group.iter().map(|&(s, a)| others_product(mdp, &k, i, s, a)).collect(),
                };
                let current = k.row(i, ai, si).to_vec();
                let mut best_v = prob.value(&current).0;
                let mut best = current.clone();
                let sg = prob.descend(&current, cfg.iters, cfg.step);
                let v = prob.value(&sg).0;
                if v < best_v {
                    best_v = v;
                    best = sg;
                }
                if cfg.polish {
                    if let Some(lp) = prob.solve_lp() {
                        if prob.value(&lp).0 < best_v {
                            best = lp;
                        }
                    }
                }
                k.row_mut(i, ai, si).copy_from_slice(&best);
            }
        }
    }
    k
}

/// Multi-start coordinate descent on Eq. (1). Returns an upper bound on `E`
/// with its kernel, plus a certified lower bound.
pub fn optimize_dependence(mdp: &FactoredMdp, cfg: &DependenceConfig) -> Result<DependenceEstimate> {
    let total = 2 + cfg.starts;
    let results: Vec<(f64, SeparableKernel)> = (0..total)
        .into_par_iter()
        .map(|start| {
            let init = match start {
                0 => SeparableKernel::uniform(mdp),
                1 => marginalized_kernel(mdp),
                _ => random_kernel(mdp, &mut RngStream::derive(cfg.seed, start as u64, GEN_LANE)),
            };
            let k = coordinate_descent(mdp, init, cfg);
            let v = max_tv_gap(mdp, &k)?;
            Ok((v, k))
        })
        .collect::<Result<_>>()?;
    let mut best = 0;
    for (j, r) in results.iter().enumerate() {
        if r.0 < results[best].0 {
            best = j;
        }
    }
    let (value, kernel) = results.into_iter().nth(best).expect("at least two starts");

    let mut lower = marginal_lower_bound(mdp);
    let mut method = String::from(if cfg.polish {
        "coordinate-descent+lp"
    } else {
        "coordinate-descent"
    });
    if let Some(res) = cfg.bracket_resolution {
        if let Ok((lo, _)) = brute_force_dependence(mdp, res) {
            lower = lower.max(lo);
            method.push_str("+grid-bracket");
        }
    }
    Ok(DependenceEstimate {
        value,
        kernel,
        certified_lower: Some(lower.min(value)),
        method,
    })
}

/// Free kernel parameters, `Σ_i |A^i| |S^i| (|S^i| − 1)`.
pub fn kernel_parameter_count(mdp: &FactoredMdp) -> usize {
    (0..mdp.n())
        .map(|i| mdp.action_sizes()[i] * mdp.state_sizes()[i] * (mdp.state_sizes()[i] - 1))
        .sum()
}

pub const BRUTE_FORCE_MAX_PARAMS: usize = 12;
const BRUTE_FORCE_MAX_WORK: f64 = 4e9;

/// Worst-case L1 distance from a point of the `m`-simplex to the nearest
/// point of the resolution-`r` grid.
///
/// Round every coordinate down, then round up the `D` coordinates with the
/// largest fractional parts, where `D` is the total deficit. The down moves
/// lose the `m − D` smallest fractions and the up moves gain `1 − f` on the
/// `D` largest, so the L1 error is at most `2D(m − D)/m` grid units, which
/// peaks at `D = ⌊m/2⌋`.
pub fn grid_mesh(m: usize, r: usize) -> f64 {
    let d = m / 2;
    2.0 * (d * (m - d)) as f64 / (m as f64 * r as f64)
}

fn simplex_grid(m: usize, r: usize) -> Vec<Vec<f64>> {
    fn rec(m: usize, left: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() + 1 == m {
            cur.push(left);
            out.push(cur.clone());
            cur.pop();
            return;
        }
        for x in 0..=left {
            cur.push(x);
            rec(m, left - x, cur, out);
            cur.pop();
        }
    }
    let mut pts = Vec::new();
    rec(m, r, &mut Vec::new(), &mut pts);
    pts.into_iter()
        .map(|p| p.into_iter().map(|x| x as f64 / r as f64).collect())
        .collect()
}

/// Grid search over all separable kernels with entries in `{0, 1/r, …, 1}`.
///
/// Returns `(lower, upper)` with `lower ≤ E ≤ upper`. Moving each agent's row
/// by `δ_i` in L1 moves a product row by at most `Σ_i ‖δ_i‖₁` in L1, hence
/// the max-TV objective by at most `½ Σ_i ‖δ_i‖₁`. Every kernel has a grid
/// neighbour with `‖δ_i‖₁ ≤ grid_mesh(|S^i|, r)`, so
/// `lower = upper − ½ Σ_i grid_mesh(|S^i|, r)`.
///
/// The last agent's rows decouple once the others are fixed, so they are
/// optimized row by row instead of jointly.
pub fn brute_force_dependence(mdp: &FactoredMdp, resolution: usize) -> Result<(f64, f64)> {
    if resolution == 0 {
        return Err(Error::Config("resolution must be positive".into()));
    }
    let params = kernel_parameter_count(mdp);
    if params > BRUTE_FORCE_MAX_PARAMS {
        return Err(Error::TooLarge(format!(
            "{params} kernel parameters, cap is {BRUTE_FORCE_MAX_PARAMS}"
        )));
    }
    let n = mdp.n();
    let last = n - 1;
    let grids: Vec<Vec<Vec<f64>>> = (0..n)
        .map(|i| simplex_grid(mdp.state_sizes()[i], resolution))
        .collect();
    // rows of the leading agents, enumerated jointly
    let lead_rows: Vec<(usize, usize, usize)> = (0..last)
        .flat_map(|i| {
            let m = mdp.state_sizes()[i];
            (0..mdp.action_sizes()[i] * m).map(move |r| (i, r / m, r % m))
        })
        .collect();
    let combos: f64 = lead_rows.iter().map(|&(i, _, _)| grids[i].len() as f64).product();
    let work = combos
        * grids[last].len() as f64
        * (mdp.num_states() * mdp.num_actions() * mdp.num_states()) as f64;
    if work > BRUTE_FORCE_MAX_WORK {
        return Err(Error::TooLarge(format!("grid search needs ~{work:.2e} operations")));
    }

    let split = Split::new(mdp, last);
    let members = row_members(mdp, last);
    let mut kernel = SeparableKernel::uniform(mdp);
    let mut odo = vec![0usize; lead_rows.len()];
    let mut upper = f64::INFINITY;
    loop {
        for (slot, &(i, a, s)) in lead_rows.iter().enumerate() {
            kernel.row_mut(i, a, s).copy_from_slice(&grids[i][odo[slot]]);
        }
        let mut worst = 0.0f64;
        for group in &members {
            let prob = RowProblem {
                split: &split,
                rows: group.iter().map(|&(s, a)| mdp.row(a, s)).collect(),
                others: group
                    .iter()
                    .map(|&(s, a)| others_product(mdp, &kernel, last, s, a))
                    .collect(),
            };
            let best = grids[last]
                .iter()
                .map(|g| prob.value(g).0)
                .fold(f64::INFINITY, f64::min);
            worst = worst.max(best);
            if worst >= upper {
                break;
            }
        }
        upper = upper.min(worst);
        // odometer over the leading rows
        let mut j = 0;
        while j < odo.len() {
            odo[j] += 1;
            if odo[j] < grids[lead_rows[j].0].len() {
                break;
            }
            odo[j] = 0;
            j += 1;
        }
        if j == odo.len() {
            break;
        }
    }
    let slack: f64 = 0.5
        * (0..n)
            .map(|i| grid_mesh(mdp.state_sizes()[i], resolution))
            .sum::<f64>();
    Ok(((upper - slack).max(0.0), upper))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::Table;
    use proptest::prelude::*;

    /// Separable 2-agent MDP from explicit factors.
    fn separable(k1: &[Table], k2: &[Table]) -> FactoredMdp {
        let (m1, m2) = (k1[0].rows(), k2[0].rows());
        let (a1, a2) = (k1.len(), k2.len());
        let ns = m1 * m2;
        let mut t = vec![0.0; a1 * a2 * ns * ns];
        for a in 0..a1 * a2 {
            for s in 0..ns {
                for sn in 0..ns {
                    t[(a * ns + s) * ns + sn] =
                        k1[a / a2].get(s / m2, sn / m2) * k2[a % a2].get(s % m2, sn % m2);
                }
            }
        }
        FactoredMdp::from_dense(
            vec![m1, m2],
            vec![a1, a2],
            0.9,
            vec![Table::zeros(m1, a1), Table::zeros(m2, a2)],
            t,
        )
        .unwrap()
    }

    fn stoch(m: usize, vals: &[f64]) -> Table {
        Table::from_vec(m, m, vals.to_vec()).unwrap()
    }

    fn toy_factors() -> (Vec<Table>, Vec<Table>) {
        (
            vec![stoch(2, &[0.9, 0.1, 0.3, 0.7]), stoch(2, &[0.5, 0.5, 0.2, 0.8])],
            vec![stoch(3, &[0.2, 0.3, 0.5, 1.0, 0.0, 0.0, 0.1, 0.1, 0.8])],
        )
    }

    #[test]
    fn tv_examples() {
        assert_eq!(tv_distance(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert_eq!(tv_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert_eq!(tv_distance(&[0.5, 0.5], &[1.0, 0.0]).unwrap(), 0.5);
        assert!(matches!(tv_distance(&[1.0], &[0.5, 0.5]), Err(Error::DimensionMismatch(_))));
        assert!(matches!(tv_distance(&[0.5, 0.4], &[0.5, 0.5]), Err(Error::NotADistribution(_))));
    }

    #[test]
    fn gap_zero_on_own_factors() {
        let (k1, k2) = toy_factors();
        let m = separable(&k1, &k2);
        let k = SeparableKernel::new(vec![k1, k2]).unwrap();
        assert!(max_tv_gap(&m, &k).unwrap() < 1e-15);
        let back = build_separable_mdp(&m, &k).unwrap();
        for (x, y) in back.transition().iter().zip(m.transition()) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn gap_point_mass_vs_uniform() {
        let t = vec![1.0, 0.0, 0.0, 1.0];
        let m = FactoredMdp::from_dense(vec![2], vec![1], 0.9, vec![Table::zeros(2, 1)], t).unwrap();
        let k = SeparableKernel::uniform(&m);
        assert_eq!(max_tv_gap(&m, &k).unwrap(), 0.5);
        let u = build_separable_mdp(&m, &k).unwrap();
        assert!(u.transition().iter().all(|&p| p == 0.5));
    }

    #[test]
    fn optimizer_recovers_separable() {
        let (k1, k2) = toy_factors();
        let m = separable(&k1, &k2);
        let est = optimize_dependence(&m, &DependenceConfig::default()).unwrap();
        assert!(est.value <= 1e-8, "{}", est.value);
        assert!(est.certified_lower.unwrap() <= est.value);
    }

    #[test]
    fn product_rows_factorize() {
        let (k1, k2) = toy_factors();
        let m = separable(&k1, &k2);
        let k = SeparableKernel::new(vec![k1.clone(), k2.clone()]).unwrap();
        let sep = build_separable_mdp(&m, &k).unwrap();
        for a in 0..m.num_actions() {
            for s in 0..m.num_states() {
                let row = sep.row(a, s);
                assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                let mut marg = vec![0.0; 2];
                for (t, p) in row.iter().enumerate() {
                    marg[t / 3] += p;
                }
                let want = k.row(0, m.local_action(a, 0), m.local_state(s, 0));
                for j in 0..2 {
                    assert!((marg[j] - want[j]).abs() <= 1e-12);
                }
            }
        }
    }

    /// 2 agents, 2 states each, 1 action, rows mixing a product and a
    /// correlated kernel.
    fn coupled_2x2(seed: u64, lambda: f64) -> FactoredMdp {
        let mut rng = RngStream::derive(seed, 0, 0);
        let mut t = Vec::new();
        for _ in 0..4 {
            let p1 = rng.uniform();
            let p2 = rng.uniform();
            let prod = [p1 * p2, p1 * (1.0 - p2), (1.0 - p1) * p2, (1.0 - p1) * (1.0 - p2)];
            let mut j: Vec<f64> = (0..4).map(|_| rng.uniform()).collect();
            let z: f64 = j.iter().sum();
            j.iter_mut().for_each(|x| *x /= z);
            t.extend((0..4).map(|k| (1.0 - lambda) * prod[k] + lambda * j[k]));
        }
        FactoredMdp::from_dense(
            vec![2, 2],
            vec![1, 1],
            0.9,
            vec![Table::zeros(2, 1), Table::zeros(2, 1)],
            t,
        )
        .unwrap()
    }

    #[test]
    fn optimizer_inside_grid_bracket() {
        for seed in 0..3 {
            let m = coupled_2x2(seed, 0.6);
            let (lo, hi) = brute_force_dependence(&m, 64).unwrap();
            let est = optimize_dependence(&m, &DependenceConfig::default()).unwrap();
            assert!(lo <= est.value + 1e-9 && est.value <= hi + 1e-9, "{lo} {} {hi}", est.value);
            // the midpoint is within the bracket half-width
            assert!((est.value - 0.5 * (lo + hi)).abs() <= 0.5 * (hi - lo) + 1e-9);
        }
    }

    #[test]
    fn brute_force_separable_single_agent() {
        let t = vec![0.3, 0.7, 0.55, 0.45];
        let m = FactoredMdp::from_dense(vec![2], vec![1], 0.9, vec![Table::zeros(2, 1)], t).unwrap();
        let (lo, hi) = brute_force_dependence(&m, 32).unwrap();
        assert_eq!(lo, 0.0);
        assert!(hi <= 0.5 * grid_mesh(2, 32) + 1e-12);
    }

    #[test]
    fn brute_force_cap() {
        let m = FactoredMdp::from_dense(
            vec![4],
            vec![2],
            0.9,
            vec![Table::zeros(4, 2)],
            vec![0.25; 32],
        )
        .unwrap();
        assert!(matches!(brute_force_dependence(&m, 8), Err(Error::TooLarge(_))));
    }

    #[test]
    fn grid_mesh_is_attained_bound() {
        // brute check of the nearest-grid-point claim on small simplices
        let mut rng = RngStream::derive(9, 0, 0);
        for m in 2..5 {
            let r = 7;
            let grid = simplex_grid(m, r);
            for _ in 0..200 {
                let mut x: Vec<f64> = (0..m).map(|_| rng.uniform()).collect();
                let z: f64 = x.iter().sum();
                x.iter_mut().for_each(|v| *v /= z);
                let d = grid
                    .iter()
                    .map(|g| g.iter().zip(&x).map(|(a, b)| (a - b).abs()).sum::<f64>())
                    .fold(f64::INFINITY, f64::min);
                assert!(d <= grid_mesh(m, r) + 1e-12);
            }
        }
    }

    #[test]
    fn gap_zero_iff_equal() {
        let m = coupled_2x2(4, 0.5);
        let k = marginalized_kernel(&m);
        let sep = build_separable_mdp(&m, &k).unwrap();
        let differs = sep
            .transition()
            .iter()
            .zip(m.transition())
            .any(|(a, b)| (a - b).abs() > 1e-12);
        assert_eq!(max_tv_gap(&m, &k).unwrap() > 1e-12, differs);
        assert_eq!(max_tv_gap(&sep, &k).unwrap(), 0.0);
    }

    proptest! {
        #[test]
        fn projection_lands_on_simplex(v in prop::collection::vec(-5.0f64..5.0, 1..8)) {
            let mut w = v.clone();
            project_simplex(&mut w);
            prop_assert!(w.iter().all(|&x| x >= 0.0));
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn optimizer_never_worse_than_candidates(seed in 0u64..1000, lambda in 0.0f64..1.0) {
            let m = coupled_2x2(seed, lambda);
            let cfg = DependenceConfig { starts: 1, passes: 2, iters: 100, bracket_resolution: None, ..Default::default() };
            let est = optimize_dependence(&m, &cfg).unwrap();
            prop_assert!(est.value <= max_tv_gap(&m, &SeparableKernel::uniform(&m)).unwrap() + 1e-12);
            prop_assert!(est.value <= max_tv_gap(&m, &marginalized_kernel(&m)).unwrap() + 1e-12);
            prop_assert!(est.certified_lower.unwrap() <= est.value + 1e-12);
        }
    }
}
