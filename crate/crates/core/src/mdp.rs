//! Factored MDP data model.
//!
//! Joint indices are mixed-radix with agent 0 most significant, so for sizes
//! `(2, 3)` the local tuple `(1, 0)` is joint index 3. The transition kernel is
//! stored densely as `P[a][s][s']`.
//!
//! Rewards have two parts. `R^i[s^i][a^i]` is paid on taking `a^i` in `s^i`.
//! The optional `T^i[s^i][a^i][s'^i]` is paid on the realized local
//! transition; it lets persistence-style rewards ("one unit if the bit stays")
//! be written exactly. Exact solvers use the expectation of `T^i` under `P`.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Row-sum tolerance applied when loading kernels.
pub const ROW_TOL: f64 = 1e-12;
/// Row-sum tolerance for policy tables built by arithmetic.
pub const POLICY_TOL: f64 = 1e-10;

/// Dense row-major matrix of `f64`. Serializes as an array of rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "Vec<Vec<f64>>", try_from = "Vec<Vec<f64>>")]
pub struct Table {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Table {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "table {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn sup_norm(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    /// Sup-norm distance. Panics on shape mismatch.
    pub fn max_abs_diff(&self, other: &Table) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Column of the row maximum, lowest index on ties.
    pub fn argmax_row(&self, r: usize) -> usize {
        argmax(self.row(r))
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

impl From<Table> for Vec<Vec<f64>> {
    fn from(t: Table) -> Self {
        t.data.chunks(t.cols.max(1)).map(<[f64]>::to_vec).collect()
    }
}

impl TryFrom<Vec<Vec<f64>>> for Table {
    type Error = String;

    fn try_from(rows: Vec<Vec<f64>>) -> std::result::Result<Self, String> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err("ragged table".into());
        }
        Ok(Table {
            rows: rows.len(),
            cols,
            data: rows.into_iter().flatten().collect(),
        })
    }
}

/// Index of the maximum, lowest index on ties. NaNs are never selected.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (j, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = j;
        }
    }
    best
}

pub fn compose_index(locals: &[usize], sizes: &[usize]) -> Result<usize> {
    if locals.len() != sizes.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} local indices for {} agents",
            locals.len(),
            sizes.len()
        )));
    }
    let mut j = 0;
    for (&l, &m) in locals.iter().zip(sizes) {
        if l >= m {
            return Err(Error::Index {
                what: "local index",
                index: l,
                bound: m,
            });
        }
        j = j * m + l;
    }
    Ok(j)
}

pub fn decompose_index(joint: usize, sizes: &[usize]) -> Result<Vec<usize>> {
    let total: usize = sizes.iter().product();
    if joint >= total {
        return Err(Error::Index {
            what: "joint index",
            index: joint,
            bound: total,
        });
    }
    let mut out = vec![0; sizes.len()];
    let mut rest = joint;
    for (slot, &m) in out.iter_mut().zip(sizes).rev() {
        *slot = rest % m;
        rest /= m;
    }
    Ok(out)
}

/// Serialized MDP. See the crate README for the format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdpSpec {
    pub n: usize,
    pub local_state_sizes: Vec<usize>,
    pub local_action_sizes: Vec<usize>,
    pub gamma: f64,
    /// Per agent, `[s^i][a^i]`.
    pub rewards: Vec<Vec<Vec<f64>>>,
    /// `[a][s][s']` over joint indices.
    pub transition: Vec<Vec<Vec<f64>>>,
    /// Per agent, `[s^i][a^i][s'^i]`, paid on the realized transition.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transition_rewards: Option<Vec<Vec<Vec<Vec<f64>>>>>,
    /// Per agent upper bound on the one-step local reward. Defaults to 1.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reward_caps: Option<Vec<f64>>,
    /// Joint states the start distribution is uniform over. Defaults to all.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start_states: Option<Vec<usize>>,
}

/// Every violated invariant found by [`validate`], in discovery order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub issues: Vec<String>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.issues.is_empty()
    }

    fn push(&mut self, msg: String) {
        self.issues.push(msg);
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for issue in &self.issues {
            writeln!(f, "- {issue}")?;
        }
        Ok(())
    }
}

/// Checks every invariant of a serialized MDP without building it.
pub fn validate(spec: &MdpSpec) -> ValidationReport {
    match flatten(spec) {
        Ok(parts) => parts.check(),
        Err(report) => report,
    }
}

struct Parts {
    state_sizes: Vec<usize>,
    action_sizes: Vec<usize>,
    gamma: f64,
    rewards: Vec<Table>,
    transition: Vec<f64>,
    transition_rewards: Option<Vec<Vec<f64>>>,
    reward_caps: Vec<f64>,
    start_states: Option<Vec<usize>>,
}

fn flatten(spec: &MdpSpec) -> std::result::Result<Parts, ValidationReport> {
    let mut rep = ValidationReport::default();
    let n = spec.n;
    if n == 0 {
        rep.push("n must be positive".into());
    }
    if spec.local_state_sizes.len() != n {
        rep.push(format!(
            "local_state_sizes has {} entries, expected n = {n}",
            spec.local_state_sizes.len()
        ));
    }
    if spec.local_action_sizes.len() != n {
        rep.push(format!(
            "local_action_sizes has {} entries, expected n = {n}",
            spec.local_action_sizes.len()
        ));
    }
    for (i, &m) in spec.local_state_sizes.iter().enumerate() {
        if m == 0 {
            rep.push(format!("agent {i}: local state size must be positive"));
        }
    }
    for (i, &m) in spec.local_action_sizes.iter().enumerate() {
        if m == 0 {
            rep.push(format!("agent {i}: local action size must be positive"));
        }
    }
    if !rep.is_valid() {
        return Err(rep);
    }
    let ns: usize = spec.local_state_sizes.iter().product();
    let na: usize = spec.local_action_sizes.iter().product();

    let mut rewards = Vec::with_capacity(n);
    if spec.rewards.len() != n {
        rep.push(format!("rewards has {} agents, expected {n}", spec.rewards.len()));
    } else {
        for (i, r) in spec.rewards.iter().enumerate() {
            let (si, ai) = (spec.local_state_sizes[i], spec.local_action_sizes[i]);
            if r.len() != si || r.iter().any(|row| row.len() != ai) {
                rep.push(format!("agent {i}: rewards must have shape {si}x{ai}"));
            } else {
                rewards.push(Table::from_fn(si, ai, |s, a| r[s][a]));
            }
        }
    }

    let mut transition = Vec::with_capacity(na * ns * ns);
    if spec.transition.len() != na {
        rep.push(format!(
            "transition has {} actions, expected |A| = {na}",
            spec.transition.len()
        ));
    } else {
        for (a, block) in spec.transition.iter().enumerate() {
            if block.len() != ns || block.iter().any(|row| row.len() != ns) {
                rep.push(format!("transition[{a}] must have shape {ns}x{ns}"));
            } else {
                transition.extend(block.iter().flatten());
            }
        }
    }

    let transition_rewards = match &spec.transition_rewards {
        None => None,
        Some(tr) if tr.len() != n => {
            rep.push(format!("transition_rewards has {} agents, expected {n}", tr.len()));
            None
        }
        Some(tr) => {
            let mut out = Vec::with_capacity(n);
            for (i, t) in tr.iter().enumerate() {
                let (si, ai) = (spec.local_state_sizes[i], spec.local_action_sizes[i]);
                let ok = t.len() == si
                    && t.iter()
                        .all(|x| x.len() == ai && x.iter().all(|y| y.len() == si));
                if ok {
                    out.push(t.iter().flatten().flatten().copied().collect());
                } else {
                    rep.push(format!(
                        "agent {i}: transition_rewards must have shape {si}x{ai}x{si}"
                    ));
                }
            }
            Some(out)
        }
    };

    let reward_caps = match &spec.reward_caps {
        None => vec![1.0; n],
        Some(c) if c.len() != n => {
            rep.push(format!("reward_caps has {} entries, expected {n}", c.len()));
            vec![1.0; n]
        }
        Some(c) => c.clone(),
    };

    if !rep.is_valid() {
        return Err(rep);
    }
    Ok(Parts {
        state_sizes: spec.local_state_sizes.clone(),
        action_sizes: spec.local_action_sizes.clone(),
        gamma: spec.gamma,
        rewards,
        transition,
        transition_rewards,
        reward_caps,
        start_states: spec.start_states.clone(),
    })
}

impl Parts {
    fn check(&self) -> ValidationReport {
        let mut rep = ValidationReport::default();
        let n = self.state_sizes.len();
        let ns: usize = self.state_sizes.iter().product();
        let na: usize = self.action_sizes.iter().product();

        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            rep.push(format!("gamma = {} is not in (0, 1)", self.gamma));
        }
        if self.rewards.len() != n || self.transition.len() != na * ns * ns {
            rep.push("dimension mismatch between sizes and arrays".into());
            return rep;
        }
        for a in 0..na {
            for s in 0..ns {
                let row = &self.transition[(a * ns + s) * ns..(a * ns + s + 1) * ns];
                if let Some(j) = row.iter().position(|p| !(0.0..=1.0).contains(p)) {
                    rep.push(format!(
                        "transition[a={a}][s={s}][{j}] = {} is not a probability",
                        row[j]
                    ));
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > ROW_TOL {
                    rep.push(format!("transition row a={a}, s={s} sums to {sum}"));
                }
            }
        }
        for (i, cap) in self.reward_caps.iter().enumerate() {
            if !(cap.is_finite() && *cap > 0.0) {
                rep.push(format!("agent {i}: reward cap {cap} must be positive"));
            }
        }
        for (i, r) in self.rewards.iter().enumerate() {
            let cap = self.reward_caps[i];
            for s in 0..r.rows() {
                for a in 0..r.cols() {
                    let mut lo = r.get(s, a);
                    let mut hi = lo;
                    if let Some(tr) = &self.transition_rewards {
                        let si = self.state_sizes[i];
                        let ai = self.action_sizes[i];
                        let base = (s * ai + a) * si;
                        for (t, &x) in tr[i][base..base + si].iter().enumerate() {
                            if !(x >= 0.0 && x.is_finite()) {
                                rep.push(format!(
                                    "agent {i}: transition reward at (s={s}, a={a}, s'={t}) is {x}"
                                ));
                            }
                        }
                        let slice = &tr[i][base..base + si];
                        lo += slice.iter().copied().fold(f64::INFINITY, f64::min);
                        hi += slice.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    }
                    if !(lo >= 0.0 && hi <= cap) {
                        rep.push(format!(
                            "agent {i}: reward at (s={s}, a={a}) spans [{lo}, {hi}], outside [0, {cap}]"
                        ));
                    }
                }
            }
        }
        if let Some(starts) = &self.start_states {
            if starts.is_empty() {
                rep.push("start_states is empty".into());
            }
            for &s in starts {
                if s >= ns {
                    rep.push(format!("start state {s} out of range (|S| = {ns})"));
                }
            }
        }
        rep
    }
}

/// Validated factored MDP. Immutable after construction.
#[derive(Debug, Clone)]
pub struct FactoredMdp {
    state_sizes: Vec<usize>,
    action_sizes: Vec<usize>,
    gamma: f64,
    rewards: Vec<Table>,
    transition_rewards: Option<Vec<Vec<f64>>>,
    reward_caps: Vec<f64>,
    start_states: Vec<usize>,
    explicit_starts: bool,
    transition: Vec<f64>,
    ns: usize,
    na: usize,
    state_locals: Vec<usize>,
    action_locals: Vec<usize>,
    expected_local: Vec<Vec<f64>>,
    expected_total: Vec<f64>,
}

impl FactoredMdp {
    pub fn new(spec: &MdpSpec) -> Result<Self> {
        let parts = flatten(spec).map_err(Error::InvalidMdp)?;
        Self::from_parts(parts)
    }

    /// Builds from a flat `[a][s][s']` kernel and per-agent reward tables.
    pub fn from_dense(
        state_sizes: Vec<usize>,
        action_sizes: Vec<usize>,
        gamma: f64,
        rewards: Vec<Table>,
        transition: Vec<f64>,
    ) -> Result<Self> {
        Builder::new(state_sizes, action_sizes, gamma, rewards, transition).build()
    }

    fn from_parts(mut p: Parts) -> Result<Self> {
        let rep = p.check();
        if !rep.is_valid() {
            return Err(Error::InvalidMdp(rep));
        }
        let n = p.state_sizes.len();
        let ns: usize = p.state_sizes.iter().product();
        let na: usize = p.action_sizes.iter().product();
        for row in p.transition.chunks_mut(ns) {
            let sum: f64 = row.iter().sum();
            if sum != 1.0 {
                row.iter_mut().for_each(|x| *x /= sum);
            }
        }
        let mut state_locals = Vec::with_capacity(ns * n);
        for s in 0..ns {
            state_locals.extend(decompose_index(s, &p.state_sizes)?);
        }
        let mut action_locals = Vec::with_capacity(na * n);
        for a in 0..na {
            action_locals.extend(decompose_index(a, &p.action_sizes)?);
        }
        let explicit_starts = p.start_states.is_some();
        let start_states = p.start_states.take().unwrap_or_else(|| (0..ns).collect());
        let mut mdp = FactoredMdp {
            state_sizes: p.state_sizes,
            action_sizes: p.action_sizes,
            gamma: p.gamma,
            rewards: p.rewards,
            transition_rewards: p.transition_rewards,
            reward_caps: p.reward_caps,
            start_states,
            explicit_starts,
            transition: p.transition,
            ns,
            na,
            state_locals,
            action_locals,
            expected_local: Vec::new(),
            expected_total: Vec::new(),
        };
        mdp.expected_local = (0..n)
            .map(|i| {
                let mut out = vec![0.0; ns * na];
                for s in 0..ns {
                    for a in 0..na {
                        out[s * na + a] = mdp.expected_local_reward_uncached(i, s, a);
                    }
                }
                out
            })
            .collect();
        mdp.expected_total = (0..ns * na)
            .map(|k| mdp.expected_local.iter().map(|r| r[k]).sum())
            .collect();
        Ok(mdp)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let spec: MdpSpec = serde_json::from_str(s)?;
        Self::new(&spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = serde_json::to_string(&self.to_spec())?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn to_spec(&self) -> MdpSpec {
        let n = self.n();
        let rewards = self.rewards.iter().map(|t| t.clone().into()).collect();
        let transition = (0..self.na)
            .map(|a| (0..self.ns).map(|s| self.row(a, s).to_vec()).collect())
            .collect();
        let transition_rewards = self.transition_rewards.as_ref().map(|tr| {
            (0..n)
                .map(|i| {
                    let (si, ai) = (self.state_sizes[i], self.action_sizes[i]);
                    (0..si)
                        .map(|s| {
                            (0..ai)
                                .map(|a| tr[i][(s * ai + a) * si..(s * ai + a + 1) * si].to_vec())
                                .collect()
                        })
                        .collect()
                })
                .collect()
        });
        let reward_caps = self
            .reward_caps
            .iter()
            .any(|&c| c != 1.0)
            .then(|| self.reward_caps.clone());
        MdpSpec {
            n,
            local_state_sizes: self.state_sizes.clone(),
            local_action_sizes: self.action_sizes.clone(),
            gamma: self.gamma,
            rewards,
            transition,
            transition_rewards,
            reward_caps,
            start_states: self.explicit_starts.then(|| self.start_states.clone()),
        }
    }

    pub fn n(&self) -> usize {
        self.state_sizes.len()
    }

    pub fn state_sizes(&self) -> &[usize] {
        &self.state_sizes
    }

    pub fn action_sizes(&self) -> &[usize] {
        &self.action_sizes
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn num_states(&self) -> usize {
        self.ns
    }

    pub fn num_actions(&self) -> usize {
        self.na
    }

    /// Returns a copy with a different discount factor.
    pub fn with_gamma(&self, gamma: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::Config(format!("gamma = {gamma} is not in (0, 1)")));
        }
        let mut out = self.clone();
        out.gamma = gamma;
        Ok(out)
    }

    /// Returns a copy with a different start set.
    pub fn with_start_states(&self, starts: Vec<usize>) -> Result<Self> {
        if starts.is_empty() || starts.iter().any(|&s| s >= self.ns) {
            return Err(Error::Config("start states empty or out of range".into()));
        }
        let mut out = self.clone();
        out.start_states = starts;
        out.explicit_starts = true;
        Ok(out)
    }

    pub fn rewards(&self, i: usize) -> &Table {
        &self.rewards[i]
    }

    pub fn has_transition_rewards(&self) -> bool {
        self.transition_rewards.is_some()
    }

    /// `T^i(s^i, a^i, ·)`, if present.
    pub fn transition_reward_row(&self, i: usize, si: usize, ai: usize) -> Option<&[f64]> {
        let m = self.state_sizes[i];
        let base = (si * self.action_sizes[i] + ai) * m;
        self.transition_rewards.as_ref().map(|tr| &tr[i][base..base + m])
    }

    pub fn reward_cap(&self, i: usize) -> f64 {
        self.reward_caps[i]
    }

    pub fn reward_caps(&self) -> &[f64] {
        &self.reward_caps
    }

    /// Upper bound on the total one-step reward, `n` unless caps were set.
    pub fn total_reward_cap(&self) -> f64 {
        self.reward_caps.iter().sum()
    }

    pub fn start_states(&self) -> &[usize] {
        &self.start_states
    }

    /// Uniform start distribution over the start set.
    pub fn start_distribution(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.ns];
        let w = 1.0 / self.start_states.len() as f64;
        for &s in &self.start_states {
            d[s] += w;
        }
        d
    }

    /// `P_a(s, ·)`.
    #[inline]
    pub fn row(&self, a: usize, s: usize) -> &[f64] {
        let base = (a * self.ns + s) * self.ns;
        &self.transition[base..base + self.ns]
    }

    pub fn transition(&self) -> &[f64] {
        &self.transition
    }

    #[inline]
    pub fn local_state(&self, s: usize, i: usize) -> usize {
        self.state_locals[s * self.n() + i]
    }

    #[inline]
    pub fn local_action(&self, a: usize, i: usize) -> usize {
        self.action_locals[a * self.n() + i]
    }

    pub fn state_locals(&self, s: usize) -> &[usize] {
        let n = self.n();
        &self.state_locals[s * n..(s + 1) * n]
    }

    pub fn action_locals(&self, a: usize) -> &[usize] {
        let n = self.n();
        &self.action_locals[a * n..(a + 1) * n]
    }

    /// Local reward realized on `(s^i, a^i) -> s'^i`.
    #[inline]
    pub fn local_reward(&self, i: usize, si: usize, ai: usize, si_next: usize) -> f64 {
        let base = self.rewards[i].get(si, ai);
        match &self.transition_rewards {
            None => base,
            Some(tr) => {
                let m = self.state_sizes[i];
                base + tr[i][(si * self.action_sizes[i] + ai) * m + si_next]
            }
        }
    }

    /// Total reward realized on `(s, a) -> s'`.
    pub fn realized_reward(&self, s: usize, a: usize, s_next: usize) -> f64 {
        (0..self.n())
            .map(|i| {
                self.local_reward(
                    i,
                    self.local_state(s, i),
                    self.local_action(a, i),
                    self.local_state(s_next, i),
                )
            })
            .sum()
    }

    /// `E[r^i | s, a]` under `P`.
    #[inline]
    pub fn expected_local_reward(&self, i: usize, s: usize, a: usize) -> f64 {
        self.expected_local[i][s * self.na + a]
    }

    /// `R(s, a) = Σ_i E[r^i | s, a]`, flat over `[s][a]`.
    pub fn expected_rewards(&self) -> &[f64] {
        &self.expected_total
    }

    fn expected_local_reward_uncached(&self, i: usize, s: usize, a: usize) -> f64 {
        let si = self.local_state(s, i);
        let ai = self.local_action(a, i);
        let mut r = self.rewards[i].get(si, ai);
        if let Some(t) = self.transition_reward_row(i, si, ai) {
            r += self
                .row(a, s)
                .iter()
                .enumerate()
                .map(|(sn, p)| p * t[self.local_state(sn, i)])
                .sum::<f64>();
        }
        r
    }

    pub fn check_state(&self, s: usize) -> Result<()> {
        if s >= self.ns {
            return Err(Error::Index {
                what: "joint state",
                index: s,
                bound: self.ns,
            });
        }
        Ok(())
    }

    pub fn check_action(&self, a: usize) -> Result<()> {
        if a >= self.na {
            return Err(Error::Index {
                what: "joint action",
                index: a,
                bound: self.na,
            });
        }
        Ok(())
    }
}

/// Programmatic constructor with the optional fields.
pub struct Builder {
    parts: Parts,
}

impl Builder {
    pub fn new(
        state_sizes: Vec<usize>,
        action_sizes: Vec<usize>,
        gamma: f64,
        rewards: Vec<Table>,
        transition: Vec<f64>,
    ) -> Self {
        let n = state_sizes.len();
        Self {
            parts: Parts {
                state_sizes,
                action_sizes,
                gamma,
                rewards,
                transition,
                transition_rewards: None,
                reward_caps: vec![1.0; n],
                start_states: None,
            },
        }
    }

    /// Per agent flat `[s^i][a^i][s'^i]`.
    pub fn transition_rewards(mut self, tr: Vec<Vec<f64>>) -> Self {
        self.parts.transition_rewards = Some(tr);
        self
    }

    pub fn reward_caps(mut self, caps: Vec<f64>) -> Self {
        self.parts.reward_caps = caps;
        self
    }

    pub fn start_states(mut self, starts: Vec<usize>) -> Self {
        self.parts.start_states = Some(starts);
        self
    }

    pub fn build(self) -> Result<FactoredMdp> {
        let p = &self.parts;
        if p.state_sizes.is_empty()
            || p.state_sizes.len() != p.action_sizes.len()
            || p.state_sizes.contains(&0)
            || p.action_sizes.contains(&0)
        {
            return Err(Error::DimensionMismatch("agent size lists".into()));
        }
        let n = p.state_sizes.len();
        let tr_ok = p.transition_rewards.as_ref().is_none_or(|tr| {
            tr.len() == n
                && tr
                    .iter()
                    .enumerate()
                    .all(|(i, t)| t.len() == p.state_sizes[i] * p.action_sizes[i] * p.state_sizes[i])
        });
        let rw_ok = p.rewards.len() == n
            && p.rewards
                .iter()
                .enumerate()
                .all(|(i, r)| r.rows() == p.state_sizes[i] && r.cols() == p.action_sizes[i]);
        if !tr_ok || !rw_ok || p.reward_caps.len() != n {
            return Err(Error::DimensionMismatch("reward arrays".into()));
        }
        FactoredMdp::from_parts(self.parts)
    }
}

/// Sum of per-agent expected rewards at `(s, a)`.
pub fn total_reward(mdp: &FactoredMdp, s: usize, a: usize) -> Result<f64> {
    mdp.check_state(s)?;
    mdp.check_action(a)?;
    Ok(mdp.expected_rewards()[s * mdp.num_actions() + a])
}

/// Draws `s' ~ P_a(s, ·)` by inverse CDF in index order.
pub fn sample_transition(mdp: &FactoredMdp, s: usize, a: usize, rng: &mut RngStream) -> Result<usize> {
    mdp.check_state(s)?;
    mdp.check_action(a)?;
    Ok(rng.categorical(mdp.row(a, s)))
}

/// Full joint policy `π[s][a]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointPolicy {
    table: Table,
}

impl JointPolicy {
    pub fn new(table: Table) -> Result<Self> {
        check_rows(&table, "joint policy")?;
        Ok(Self { table })
    }

    pub fn uniform(num_states: usize, num_actions: usize) -> Self {
        Self {
            table: Table::filled(num_states, num_actions, 1.0 / num_actions as f64),
        }
    }

    /// Point mass on `actions[s]`.
    pub fn deterministic(actions: &[usize], num_actions: usize) -> Self {
        let mut table = Table::zeros(actions.len(), num_actions);
        for (s, &a) in actions.iter().enumerate() {
            table.set(s, a, 1.0);
        }
        Self { table }
    }

    pub fn table(&self) -> &Table {
        &self.table
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.table.get(s, a)
    }

    pub fn row(&self, s: usize) -> &[f64] {
        self.table.row(s)
    }

    pub fn num_states(&self) -> usize {
        self.table.rows()
    }

    pub fn num_actions(&self) -> usize {
        self.table.cols()
    }

    /// The argmax action at every state, lowest index on ties.
    pub fn modes(&self) -> Vec<usize> {
        (0..self.num_states()).map(|s| self.table.argmax_row(s)).collect()
    }
}

/// Per-agent local policies `π^i[s^i][a^i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactoredPolicy {
    locals: Vec<Table>,
}

impl FactoredPolicy {
    pub fn new(locals: Vec<Table>) -> Result<Self> {
        if locals.is_empty() {
            return Err(Error::DimensionMismatch("factored policy needs an agent".into()));
        }
        for (i, t) in locals.iter().enumerate() {
            check_rows(t, &format!("policy of agent {i}"))?;
        }
        Ok(Self { locals })
    }

    pub fn uniform(mdp: &FactoredMdp) -> Self {
        Self {
            locals: (0..mdp.n())
                .map(|i| {
                    let m = mdp.action_sizes()[i];
                    Table::filled(mdp.state_sizes()[i], m, 1.0 / m as f64)
                })
                .collect(),
        }
    }

    /// Point masses; `actions[i][s^i]` is agent `i`'s action.
    pub fn deterministic(mdp: &FactoredMdp, actions: &[Vec<usize>]) -> Result<Self> {
        let mut locals = Vec::with_capacity(mdp.n());
        for i in 0..mdp.n() {
            let (si, ai) = (mdp.state_sizes()[i], mdp.action_sizes()[i]);
            let acts = actions
                .get(i)
                .filter(|v| v.len() == si)
                .ok_or_else(|| Error::DimensionMismatch(format!("actions of agent {i}")))?;
            let mut t = Table::zeros(si, ai);
            for (s, &a) in acts.iter().enumerate() {
                if a >= ai {
                    return Err(Error::Index {
                        what: "local action",
                        index: a,
                        bound: ai,
                    });
                }
                t.set(s, a, 1.0);
            }
            locals.push(t);
        }
        Ok(Self { locals })
    }

    pub fn n(&self) -> usize {
        self.locals.len()
    }

    pub fn local(&self, i: usize) -> &Table {
        &self.locals[i]
    }

    pub fn locals(&self) -> &[Table] {
        &self.locals
    }

    /// `(1 − ε) π + ε · uniform` per agent.
    pub fn mixed(&self, eps: f64) -> Self {
        if eps == 0.0 {
            return self.clone();
        }
        let locals = self
            .locals
            .iter()
            .map(|t| {
                let u = eps / t.cols() as f64;
                Table::from_fn(t.rows(), t.cols(), |s, a| (1.0 - eps) * t.get(s, a) + u)
            })
            .collect();
        Self { locals }
    }

    /// Errors on the first local action with zero probability.
    pub fn check_exploration(&self) -> Result<()> {
        for (i, t) in self.locals.iter().enumerate() {
            for s in 0..t.rows() {
                if let Some(a) = t.row(s).iter().position(|&p| p <= 0.0) {
                    return Err(Error::ExplorationViolation {
                        agent: i,
                        state: s,
                        action: a,
                    });
                }
            }
        }
        Ok(())
    }

    /// Checks that the shapes agree with `mdp`.
    pub fn check_shape(&self, mdp: &FactoredMdp) -> Result<()> {
        let ok = self.n() == mdp.n()
            && self.locals.iter().enumerate().all(|(i, t)| {
                t.rows() == mdp.state_sizes()[i] && t.cols() == mdp.action_sizes()[i]
            });
        if ok {
            Ok(())
        } else {
            Err(Error::DimensionMismatch("factored policy does not fit the MDP".into()))
        }
    }

    /// Draws the joint action at `s`, agent `i` using `rngs[i]`.
    pub fn sample(&self, mdp: &FactoredMdp, s: usize, rngs: &mut [RngStream]) -> usize {
        let mut a = 0;
        for (i, t) in self.locals.iter().enumerate() {
            let ai = rngs[i].categorical(t.row(mdp.local_state(s, i)));
            a = a * t.cols() + ai;
        }
        a
    }
}

fn check_rows(t: &Table, what: &str) -> Result<()> {
    for r in 0..t.rows() {
        let row = t.row(r);
        if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::NotADistribution(format!("{what}, row {r}: entry outside [0,1]")));
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > POLICY_TOL {
            return Err(Error::NotADistribution(format!("{what}, row {r} sums to {sum}")));
        }
    }
    Ok(())
}

/// `π(a|s) = Π_i π^i(a^i|s^i)`.
pub fn joint_policy_of(fp: &FactoredPolicy) -> JointPolicy {
    let state_sizes: Vec<usize> = fp.locals.iter().map(Table::rows).collect();
    let ns: usize = state_sizes.iter().product();
    let na: usize = fp.locals.iter().map(Table::cols).product();
    let mut table = Table::zeros(ns, na);
    let mut locals = vec![0; fp.n()];
    let mut buf = Vec::with_capacity(na);
    let mut next = Vec::with_capacity(na);
    for s in 0..ns {
        buf.clear();
        buf.push(1.0);
        for (i, t) in fp.locals.iter().enumerate() {
            next.clear();
            let row = t.row(locals[i]);
            for &p in &buf {
                next.extend(row.iter().map(|q| p * q));
            }
            std::mem::swap(&mut buf, &mut next);
        }
        table.row_mut(s).copy_from_slice(&buf);
        // odometer increment, last agent fastest
        for i in (0..fp.n()).rev() {
            locals[i] += 1;
            if locals[i] < state_sizes[i] {
                break;
            }
            locals[i] = 0;
        }
    }
    JointPolicy { table }
}

/// Marginal of a joint policy on agent `i`'s action at joint state `s`.
pub fn agent_marginal(mdp: &FactoredMdp, pi: &JointPolicy, s: usize, i: usize) -> Vec<f64> {
    let mut out = vec![0.0; mdp.action_sizes()[i]];
    for (a, &p) in pi.row(s).iter().enumerate() {
        out[mdp.local_action(a, i)] += p;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_state_mdp(p_flip: f64) -> FactoredMdp {
        let t = vec![1.0 - p_flip, p_flip, p_flip, 1.0 - p_flip];
        FactoredMdp::from_dense(vec![2], vec![1], 0.9, vec![Table::zeros(2, 1)], t).unwrap()
    }

    #[test]
    fn compose_examples() {
        assert_eq!(compose_index(&[0, 0, 0], &[2, 2, 2]).unwrap(), 0);
        assert_eq!(compose_index(&[1, 1, 1], &[2, 2, 2]).unwrap(), 7);
        assert_eq!(compose_index(&[1, 0], &[2, 3]).unwrap(), 3);
        assert!(matches!(compose_index(&[2, 0], &[2, 3]), Err(Error::Index { .. })));
    }

    #[test]
    fn decompose_examples() {
        assert_eq!(decompose_index(0, &[2, 2, 2]).unwrap(), vec![0, 0, 0]);
        assert_eq!(decompose_index(7, &[2, 2, 2]).unwrap(), vec![1, 1, 1]);
        assert_eq!(decompose_index(5, &[2, 3]).unwrap(), vec![1, 2]);
        assert!(matches!(decompose_index(6, &[2, 3]), Err(Error::Index { .. })));
    }

    #[test]
    fn bijection_exhaustive() {
        for sizes in [vec![3, 4, 5], vec![10, 10, 10, 10], vec![7], vec![2, 1, 3]] {
            let total: usize = sizes.iter().product();
            for j in 0..total {
                let t = decompose_index(j, &sizes).unwrap();
                assert_eq!(compose_index(&t, &sizes).unwrap(), j);
            }
        }
    }

    proptest! {
        #[test]
        fn bijection_random(sizes in prop::collection::vec(1usize..6, 1..5), seed in any::<u64>()) {
            let total: usize = sizes.iter().product();
            let j = (seed as usize) % total;
            let t = decompose_index(j, &sizes).unwrap();
            prop_assert_eq!(compose_index(&t, &sizes).unwrap(), j);
            prop_assert_eq!(decompose_index(compose_index(&t, &sizes).unwrap(), &sizes).unwrap(), t);
        }

        #[test]
        fn joint_policy_rows_are_distributions(
            seed in any::<u64>(),
            sizes in prop::collection::vec((1usize..4, 1usize..4), 1..4),
        ) {
            let mut rng = RngStream::derive(seed, 0, 0);
            let locals: Vec<Table> = sizes
                .iter()
                .map(|&(s, a)| {
                    let mut t = Table::from_fn(s, a, |_, _| rng.uniform() + 1e-3);
                    for r in 0..s {
                        let z: f64 = t.row(r).iter().sum();
                        t.row_mut(r).iter_mut().for_each(|x| *x /= z);
                    }
                    t
                })
                .collect();
            let fp = FactoredPolicy::new(locals).unwrap();
            let jp = joint_policy_of(&fp);
            for s in 0..jp.num_states() {
                let sum: f64 = jp.row(s).iter().sum();
                prop_assert!((sum - 1.0).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn joint_policy_examples() {
        let u = Table::filled(1, 2, 0.5);
        let fp = FactoredPolicy::new(vec![u.clone(), u]).unwrap();
        let jp = joint_policy_of(&fp);
        assert!(jp.row(0).iter().all(|&p| p == 0.25));

        let single = Table::from_vec(2, 3, vec![0.2, 0.3, 0.5, 1.0, 0.0, 0.0]).unwrap();
        let jp = joint_policy_of(&FactoredPolicy::new(vec![single.clone()]).unwrap());
        assert_eq!(jp.table(), &single);

        let p1 = Table::from_vec(1, 2, vec![1.0, 0.0]).unwrap();
        let p2 = Table::from_vec(1, 2, vec![0.0, 1.0]).unwrap();
        let jp = joint_policy_of(&FactoredPolicy::new(vec![p1, p2]).unwrap());
        assert_eq!(jp.row(0), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn joint_policy_matches_product_formula() {
        // 2 agents with sizes (2 states, 2 actions) and (3 states, 2 actions)
        let p1 = Table::from_vec(2, 2, vec![0.3, 0.7, 0.6, 0.4]).unwrap();
        let p2 = Table::from_vec(3, 2, vec![0.1, 0.9, 0.5, 0.5, 0.8, 0.2]).unwrap();
        let jp = joint_policy_of(&FactoredPolicy::new(vec![p1.clone(), p2.clone()]).unwrap());
        for s in 0..6 {
            let (s1, s2) = (s / 3, s % 3);
            for a in 0..4 {
                let (a1, a2) = (a / 2, a % 2);
                let want = p1.get(s1, a1) * p2.get(s2, a2);
                assert!((jp.prob(s, a) - want).abs() < 1e-15);
            }
        }
    }

    fn reward_mdp(r1: Table, r2: Table) -> FactoredMdp {
        let ns = 4;
        let na = 4;
        let t = (0..na * ns * ns)
            .map(|k| if k % ns == 0 { 1.0 } else { 0.0 })
            .collect();
        FactoredMdp::from_dense(vec![2, 2], vec![2, 2], 0.5, vec![r1, r2], t).unwrap()
    }

    #[test]
    fn total_reward_examples() {
        let m = reward_mdp(Table::zeros(2, 2), Table::zeros(2, 2));
        assert_eq!(total_reward(&m, 3, 2).unwrap(), 0.0);
        let m = reward_mdp(Table::filled(2, 2, 1.0), Table::filled(2, 2, 1.0));
        assert_eq!(total_reward(&m, 1, 1).unwrap(), 2.0);
        assert!(matches!(total_reward(&m, 4, 0), Err(Error::Index { .. })));
    }

    #[test]
    fn total_reward_matches_agent_loop() {
        let r1 = Table::from_vec(2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let r2 = Table::from_vec(2, 2, vec![0.5, 0.6, 0.7, 0.8]).unwrap();
        let m = reward_mdp(r1.clone(), r2.clone());
        for s in 0..4 {
            for a in 0..4 {
                let want = r1.get(s / 2, a / 2) + r2.get(s % 2, a % 2);
                assert_eq!(total_reward(&m, s, a).unwrap(), want);
            }
        }
    }

    #[test]
    fn sampling_deterministic_row() {
        let m = two_state_mdp(1.0);
        let mut rng = RngStream::derive(3, 0, 0);
        for _ in 0..1000 {
            assert_eq!(sample_transition(&m, 0, 0, &mut rng).unwrap(), 1);
        }
    }

    #[test]
    fn sampling_frequency() {
        let m = two_state_mdp(0.5);
        let mut rng = RngStream::derive(11, 0, 0);
        let draws = 1_000_000;
        let zeros = (0..draws)
            .filter(|_| sample_transition(&m, 0, 0, &mut rng).unwrap() == 0)
            .count();
        // 3 sigma of a Binomial(1e6, 0.5) frequency is 0.0015
        let f = zeros as f64 / draws as f64;
        assert!((f - 0.5).abs() <= 0.005, "{f}");
    }

    #[test]
    fn sampling_respects_support() {
        let t = vec![0.5, 0.0, 0.5, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let m = FactoredMdp::from_dense(vec![3], vec![1], 0.9, vec![Table::zeros(3, 1)], t).unwrap();
        let mut rng = RngStream::derive(5, 0, 0);
        for _ in 0..100_000 {
            assert_ne!(sample_transition(&m, 0, 0, &mut rng).unwrap(), 1);
        }
        assert!(sample_transition(&m, 3, 0, &mut rng).is_err());
    }

    fn spec_1agent() -> MdpSpec {
        MdpSpec {
            n: 1,
            local_state_sizes: vec![2],
            local_action_sizes: vec![2],
            gamma: 0.9,
            rewards: vec![vec![vec![0.0, 1.0], vec![0.5, 0.5]]],
            transition: vec![
                vec![vec![1.0, 0.0], vec![0.0, 1.0]],
                vec![vec![0.5, 0.5], vec![0.5, 0.5]],
            ],
            transition_rewards: None,
            reward_caps: None,
            start_states: None,
        }
    }

    #[test]
    fn validate_reports() {
        assert!(validate(&spec_1agent()).is_valid());

        let mut bad = spec_1agent();
        bad.transition[1][0] = vec![0.5, 0.4];
        let rep = validate(&bad);
        assert_eq!(rep.issues.len(), 1);
        assert!(rep.issues[0].contains("a=1, s=0"));
        assert!(rep.issues[0].contains("0.9"));

        let mut bad = spec_1agent();
        bad.rewards[0][1][0] = 1.5;
        let rep = validate(&bad);
        assert_eq!(rep.issues.len(), 1);
        assert!(rep.issues[0].contains("agent 0") && rep.issues[0].contains("s=1, a=0"));

        let mut bad = spec_1agent();
        bad.gamma = 1.0;
        bad.transition.pop();
        assert_eq!(validate(&bad).issues.len(), 1);
        assert!(FactoredMdp::new(&bad).is_err());
    }

    #[test]
    fn near_unit_rows_are_renormalized() {
        let mut spec = spec_1agent();
        spec.transition[1][0] = vec![0.5 + 4e-13, 0.5];
        let m = FactoredMdp::new(&spec).unwrap();
        assert!((m.row(1, 0).iter().sum::<f64>() - 1.0).abs() <= f64::EPSILON);
        assert!(m.row(1, 0)[0] < 0.5 + 4e-13);
    }

    #[test]
    fn json_roundtrip() {
        let m = FactoredMdp::new(&spec_1agent()).unwrap();
        let text = serde_json::to_string(&m.to_spec()).unwrap();
        let back = FactoredMdp::from_json_str(&text).unwrap();
        assert_eq!(back.to_spec(), m.to_spec());
    }
}
