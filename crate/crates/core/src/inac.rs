//! Independent natural actor-critic.
//!
//! Each agent keeps a softmax policy over its local spaces. Outer iteration
//! `t` evaluates the current joint policy with independent TD learning (the
//! critic sees only local coordinates, backs up the expected next-action
//! value and restarts from zero every iteration), then every agent moves its
//! own parameters by `θ^i += η_t Q^i`.
//!
//! Because the joint policy is a product of local softmaxes, the per-agent
//! update equals the joint update `π ∝ π exp(η Σ_i Q^i)`. The stepsize
//! schedule of the convergence theorem grows super-geometrically, so the
//! default mode applies the update to normalized log-probabilities and
//! switches to a greedy step once `η` overflows.

use serde::{Deserialize, Serialize};

use crate::dependence::{factor_mdp, SeparableKernel};
use crate::error::{Error, Result};
use crate::iql::{check_box, step_sizes, StepSizes};
use crate::mdp::{argmax, joint_policy_of, sample_transition, FactoredMdp, FactoredPolicy, JointPolicy, Table};
use crate::record::RunRecord;
use crate::rng::{RngStream, ENV_LANE};
use crate::solvers::{
    aggregated_fixed_point, average_reward, optimal_average_reward, policy_q, stationary_distribution,
    value_iteration, LocalQTable, OperatorKind, QTable, DEFAULT_TOL,
};

/// Log-probability standing in for an exact zero. Kept finite so parameters
/// remain valid softmax inputs.
pub const LOG_ZERO: f64 = -1e300;

/// `θ^i[s^i][a^i]` for every agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxParams {
    pub theta: Vec<Table>,
}

impl SoftmaxParams {
    pub fn zeros(mdp: &FactoredMdp) -> Self {
        Self {
            theta: (0..mdp.n())
                .map(|i| Table::zeros(mdp.state_sizes()[i], mdp.action_sizes()[i]))
                .collect(),
        }
    }

    pub fn n(&self) -> usize {
        self.theta.len()
    }

    fn check_finite(&self) -> Result<()> {
        for (i, t) in self.theta.iter().enumerate() {
            if t.as_slice().iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("softmax parameters of agent {i}")));
            }
        }
        Ok(())
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `π^i(a|s) ∝ exp θ^i(s, a)`, evaluated with the row maximum subtracted.
pub fn softmax_policy(theta: &SoftmaxParams) -> Result<FactoredPolicy> {
    theta.check_finite()?;
    let locals = theta
        .theta
        .iter()
        .map(|t| {
            let mut out = Table::zeros(t.rows(), t.cols());
            for s in 0..t.rows() {
                let row = t.row(s);
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let dst = out.row_mut(s);
                for (d, x) in dst.iter_mut().zip(row) {
                    *d = (x - m).exp();
                }
                let z: f64 = dst.iter().sum();
                dst.iter_mut().for_each(|d| *d /= z);
            }
            out
        })
        .collect();
    FactoredPolicy::new(locals)
}

fn check_shapes(theta: &SoftmaxParams, qs: &[LocalQTable]) -> Result<()> {
    let ok = theta.n() == qs.len()
        && theta
            .theta
            .iter()
            .zip(qs)
            .all(|(t, q)| t.rows() == q.rows() && t.cols() == q.cols());
    if ok {
        Ok(())
    } else {
        Err(Error::DimensionMismatch("parameters and Q-tables disagree".into()))
    }
}

/// `θ^i += η Q^i` on the raw parameters.
pub fn inpg_step(theta: &SoftmaxParams, eta: f64, qs: &[LocalQTable]) -> Result<SoftmaxParams> {
    check_shapes(theta, qs)?;
    if eta.is_nan() || eta < 0.0 {
        return Err(Error::Config(format!("eta = {eta} must be non-negative")));
    }
    let mut out = theta.clone();
    for (t, q) in out.theta.iter_mut().zip(qs) {
        for (x, y) in t.as_mut_slice().iter_mut().zip(q.as_slice()) {
            *x += eta * y;
        }
    }
    out.check_finite()
        .map_err(|_| Error::NonFinite(format!("parameter update with eta = {eta}; use the policy-space mode")))?;
    Ok(out)
}

/// The same update on normalized log-probabilities: `log π^i += η Q^i`, then
/// renormalize. Entries at [`LOG_ZERO`] stay there. When `η Q^i` overflows
/// the row becomes a point mass on `argmax_a Q^i(s, a)` (lowest index on
/// ties).
pub fn inpg_step_policy_space(theta: &SoftmaxParams, eta: f64, qs: &[LocalQTable]) -> Result<SoftmaxParams> {
    check_shapes(theta, qs)?;
    if eta.is_nan() || eta < 0.0 {
        return Err(Error::Config(format!("eta = {eta} must be non-negative")));
    }
    theta.check_finite()?;
    let mut out = theta.clone();
    let mut buf = Vec::new();
    for (t, q) in out.theta.iter_mut().zip(qs) {
        for s in 0..t.rows() {
            let qrow = q.row(s);
            buf.clear();
            buf.extend(t.row(s).iter().zip(qrow).map(|(&x, &y)| {
                if x <= LOG_ZERO {
                    LOG_ZERO
                } else {
                    x + eta * y
                }
            }));
            let row = t.row_mut(s);
            if buf.iter().all(|x| x.is_finite()) {
                let lse = log_sum_exp(&buf);
                for (d, &x) in row.iter_mut().zip(&buf) {
                    *d = if x <= LOG_ZERO { LOG_ZERO } else { (x - lse).max(LOG_ZERO) };
                }
            } else {
                let best = argmax(qrow);
                for (a, d) in row.iter_mut().enumerate() {
                    *d = if a == best { 0.0 } else { LOG_ZERO };
                }
            }
        }
    }
    Ok(out)
}

/// Theorem stepsizes: `η₀ = γ log|A|` and, for `t ≥ 1`,
/// `η_t = 2n log|A| Σ_{i<t} η_i / ((1−γ) γ^{2t−1})`. Overflow yields `+∞`.
pub fn eta_schedule(t: usize, gamma: f64, joint_action_size: usize, n: usize, history: &[f64]) -> f64 {
    assert_eq!(history.len(), t, "history must hold η_0..η_{{t-1}}");
    let log_a = (joint_action_size as f64).ln();
    if t == 0 {
        return gamma * log_a;
    }
    let sum: f64 = history.iter().sum();
    let v = 2.0 * n as f64 * log_a * sum / ((1.0 - gamma) * gamma.powi(2 * t as i32 - 1));
    if v.is_finite() {
        v
    } else {
        f64::INFINITY
    }
}

/// The experiment schedule `η_t = Σ_{i<t} η_i / γ^{2t−1}` from a given `η₀`.
pub fn eta_experiment(t: usize, gamma: f64, eta0: f64, history: &[f64]) -> f64 {
    assert_eq!(history.len(), t, "history must hold η_0..η_{{t-1}}");
    if t == 0 {
        return eta0;
    }
    let v = history.iter().sum::<f64>() / gamma.powi(2 * t as i32 - 1);
    if v.is_finite() {
        v
    } else {
        f64::INFINITY
    }
}

/// Max entrywise gap between the joint policy after the per-agent parameter
/// update and the direct joint update `π'(a|s) ∝ π(a|s) exp(η Σ_i Q^i)`.
pub fn npg_equivalence_check(theta: &SoftmaxParams, eta: f64, qs: &[LocalQTable]) -> Result<f64> {
    let after = joint_policy_of(&softmax_policy(&inpg_step(theta, eta, qs)?)?);
    let before = joint_policy_of(&softmax_policy(theta)?);
    let sizes: Vec<usize> = theta.theta.iter().map(Table::rows).collect();
    let acts: Vec<usize> = theta.theta.iter().map(Table::cols).collect();
    let mut worst = 0.0f64;
    let mut score = Vec::new();
    let mut w = Vec::new();
    for s in 0..after.num_states() {
        let sl = crate::mdp::decompose_index(s, &sizes)?;
        score.clear();
        for a in 0..after.num_actions() {
            let al = crate::mdp::decompose_index(a, &acts)?;
            score.push((0..theta.n()).map(|i| qs[i].get(sl[i], al[i])).sum::<f64>());
        }
        let top = score.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        w.clear();
        w.extend(score.iter().enumerate().map(|(a, x)| before.prob(s, a) * (eta * (x - top)).exp()));
        let z: f64 = w.iter().sum();
        for (a, x) in w.iter().enumerate() {
            let direct = x / z;
            if !direct.is_finite() {
                return Err(Error::NonFinite("direct joint update".into()));
            }
            worst = worst.max((direct - after.prob(s, a)).abs());
        }
    }
    Ok(worst)
}

/// Actor stepsize rule.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EtaMode {
    /// Theorem schedule on raw parameters; fails once `θ` overflows.
    Theorem,
    /// Theorem schedule in log-policy form with the greedy limit.
    #[default]
    PolicySpace,
    /// Fixed `η` on raw parameters.
    Constant { eta: f64 },
    /// `η_t = Σ_{i<t} η_i / γ^{2t−1}` from `eta0`, in log-policy form.
    Experiment { eta0: f64 },
}

impl EtaMode {
    pub fn eta(&self, t: usize, mdp: &FactoredMdp, history: &[f64]) -> f64 {
        match *self {
            EtaMode::Theorem | EtaMode::PolicySpace => {
                eta_schedule(t, mdp.gamma(), mdp.num_actions(), mdp.n(), history)
            }
            EtaMode::Constant { eta } => eta,
            EtaMode::Experiment { eta0 } => eta_experiment(t, mdp.gamma(), eta0, history),
        }
    }

    pub fn policy_space(&self) -> bool {
        matches!(self, EtaMode::PolicySpace | EtaMode::Experiment { .. })
    }

    /// Parses `theorem`, `policy-space`, `constant:<η>` or `experiment:<η₀>`.
    pub fn parse(text: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unknown eta mode '{text}'"));
        let (head, arg) = match text.split_once(':') {
            Some((h, a)) => (h, Some(a.parse::<f64>().map_err(|_| bad())?)),
            None => (text, None),
        };
        match (head, arg) {
            ("theorem", None) => Ok(EtaMode::Theorem),
            ("policy-space", None) => Ok(EtaMode::PolicySpace),
            ("constant", Some(eta)) => Ok(EtaMode::Constant { eta }),
            ("experiment", Some(eta0)) => Ok(EtaMode::Experiment { eta0 }),
            _ => Err(bad()),
        }
    }
}

/// ε-mixing of the sampling policy inside the critic.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Exploration {
    #[default]
    None,
    Constant { epsilon: f64 },
    /// `ε_k = ε₀ (1 − k/K)` over the inner steps.
    Decaying { epsilon: f64 },
}

impl Exploration {
    pub fn at(&self, k: usize, big_k: usize) -> f64 {
        match *self {
            Exploration::None => 0.0,
            Exploration::Constant { epsilon } => epsilon,
            Exploration::Decaying { epsilon } => epsilon * (1.0 - k as f64 / big_k as f64),
        }
    }

    fn check(&self) -> Result<()> {
        let e = match *self {
            Exploration::None => 0.0,
            Exploration::Constant { epsilon } | Exploration::Decaying { epsilon } => epsilon,
        };
        if (0.0..1.0).contains(&e) {
            Ok(())
        } else {
            Err(Error::Config(format!("epsilon = {e} is not in [0, 1)")))
        }
    }

    /// Smallest mixing weight used over `K` steps.
    fn floor(&self, big_k: usize) -> f64 {
        match *self {
            Exploration::Decaying { .. } => self.at(big_k - 1, big_k),
            _ => self.at(0, big_k),
        }
    }
}

/// Where the per-iteration Q-tables come from.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Critic {
    /// Independent TD learning on a sampled trajectory.
    #[default]
    Sampled,
    /// `q̂^i_π` solved exactly on each agent's factor MDP under the kernel.
    Exact { kernel: SeparableKernel },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct InacConfig {
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(rename = "K")]
    pub k: usize,
    /// Critic stepsize; defaults as in IQL under the uniform policy.
    pub alpha: Option<f64>,
    pub k0: Option<f64>,
    pub eta_mode: EtaMode,
    pub exploration: Exploration,
    pub critic: Critic,
    pub seed: u64,
    /// Record `‖Q* − Q_{π(t)}‖∞` and the critic error against its projected target.
    pub oracle: bool,
    /// Record the exact normalized average reward of `π(t)`.
    pub greedy_value: bool,
    /// Inner-loop snapshot stride; `None` disables the inner log.
    pub inner_log: Option<usize>,
}

impl Default for InacConfig {
    fn default() -> Self {
        Self {
            t: 30,
            k: 1000,
            alpha: None,
            k0: None,
            eta_mode: EtaMode::default(),
            exploration: Exploration::default(),
            critic: Critic::default(),
            seed: 0,
            oracle: true,
            greedy_value: true,
            inner_log: None,
        }
    }
}

/// Streams for one critic run.
struct Streams {
    agents: Vec<RngStream>,
    env: RngStream,
}

impl Streams {
    fn new(seed: u64, run: u64, n: usize) -> Self {
        Self {
            agents: (0..n).map(|i| RngStream::derive(seed, run, i as u32)).collect(),
            env: RngStream::derive(seed, run, ENV_LANE),
        }
    }
}

/// Independent TD learner for a fixed target policy.
#[derive(Debug, Clone)]
pub struct ItdLearner {
    q: Vec<LocalQTable>,
    gamma: f64,
    steps: StepSizes,
    k: u64,
}

impl ItdLearner {
    pub fn new(mdp: &FactoredMdp, steps: StepSizes) -> Self {
        Self {
            q: (0..mdp.n())
                .map(|i| Table::zeros(mdp.state_sizes()[i], mdp.action_sizes()[i]))
                .collect(),
            gamma: mdp.gamma(),
            steps,
            k: 0,
        }
    }

    pub fn q(&self) -> &[LocalQTable] {
        &self.q
    }

    /// `Q^i(s^i,a^i) += α_k (r^i + γ E_{π^i(·|s'^i)} Q^i(s'^i, ·) − Q^i(s^i,a^i))`.
    pub fn update(&mut self, mdp: &FactoredMdp, target: &FactoredPolicy, s: usize, a: usize, s_next: usize) {
        let lr = self.steps.at(self.k);
        for (i, q) in self.q.iter_mut().enumerate() {
            let (si, ai, sn) = (mdp.local_state(s, i), mdp.local_action(a, i), mdp.local_state(s_next, i));
            let r = mdp.local_reward(i, si, ai, sn);
            let next: f64 = q.row(sn).iter().zip(target.local(i).row(sn)).map(|(x, p)| x * p).sum();
            let old = q.get(si, ai);
            q.set(si, ai, old + lr * (r + self.gamma * next - old));
        }
        self.k += 1;
    }
}

#[allow(clippy::too_many_arguments)]
fn itd_inner(
    mdp: &FactoredMdp,
    target: &FactoredPolicy,
    exploration: Exploration,
    big_k: usize,
    steps: StepSizes,
    streams: &mut Streams,
    mut observe: impl FnMut(usize, &ItdLearner) -> Result<()>,
) -> Result<Vec<LocalQTable>> {
    target.check_shape(mdp)?;
    target.mixed(exploration.floor(big_k)).check_exploration()?;
    let mut learner = ItdLearner::new(mdp, steps);
    let mut s = streams.env.categorical(&mdp.start_distribution());
    observe(0, &learner)?;
    for k in 0..big_k {
        let eps = exploration.at(k, big_k);
        let a = if eps > 0.0 {
            target.mixed(eps).sample(mdp, s, &mut streams.agents)
        } else {
            target.sample(mdp, s, &mut streams.agents)
        };
        let s_next = sample_transition(mdp, s, a, &mut streams.env)?;
        learner.update(mdp, target, s, a, s_next);
        s = s_next;
        observe(k + 1, &learner)?;
    }
    Ok(learner.q)
}

/// Independent TD evaluation of `pi` for `K` steps from the start
/// distribution. `pi` itself is the sampling policy.
pub fn itd_run(mdp: &FactoredMdp, pi: &FactoredPolicy, k: usize, alpha: f64, k0: f64, seed: u64) -> Result<Vec<LocalQTable>> {
    let steps = step_sizes(mdp, pi, k, Some(alpha), Some(k0))?;
    let mut streams = Streams::new(seed, 0, mdp.n());
    itd_inner(mdp, pi, Exploration::None, k, steps, &mut streams, |_, _| Ok(()))
}

/// Like [`itd_run`], calling `observe(k, learner)` after every step.
pub fn itd_run_with(
    mdp: &FactoredMdp,
    pi: &FactoredPolicy,
    k: usize,
    steps: StepSizes,
    seed: u64,
    observe: impl FnMut(usize, &ItdLearner) -> Result<()>,
) -> Result<Vec<LocalQTable>> {
    let mut streams = Streams::new(seed, 0, mdp.n());
    itd_inner(mdp, pi, Exploration::None, k, steps, &mut streams, observe)
}

/// Projected evaluation targets `Q̃^i` under the stationary weighting of the
/// sampling policy, or `None` where undefined.
pub fn itd_targets(mdp: &FactoredMdp, target: &FactoredPolicy, sampling: &FactoredPolicy) -> Option<Vec<LocalQTable>> {
    let st = stationary_distribution(mdp, &joint_policy_of(sampling), DEFAULT_TOL).ok()?;
    let joint = joint_policy_of(target);
    (0..mdp.n())
        .map(|i| aggregated_fixed_point(mdp, i, &st.d, OperatorKind::Evaluation(&joint), 1e-12).ok())
        .collect()
}

/// `q̂^i_π` on every factor MDP.
pub fn exact_local_q(factors: &[FactoredMdp], pi: &FactoredPolicy) -> Result<Vec<LocalQTable>> {
    factors
        .iter()
        .enumerate()
        .map(|(i, f)| policy_q(f, &JointPolicy::new(pi.local(i).clone())?, 1e-12))
        .collect()
}

/// Actor state between outer iterations.
#[derive(Debug, Clone)]
pub struct InacLearner {
    params: SoftmaxParams,
    history: Vec<f64>,
    mode: EtaMode,
}

impl InacLearner {
    pub fn new(mdp: &FactoredMdp, mode: EtaMode) -> Self {
        Self {
            params: SoftmaxParams::zeros(mdp),
            history: Vec::new(),
            mode,
        }
    }

    pub fn params(&self) -> &SoftmaxParams {
        &self.params
    }

    pub fn iteration(&self) -> usize {
        self.history.len()
    }

    pub fn etas(&self) -> &[f64] {
        &self.history
    }

    pub fn policy(&self) -> Result<FactoredPolicy> {
        softmax_policy(&self.params)
    }

    /// Applies `η_t` (for the current `t`) with the given critic tables.
    pub fn improve(&mut self, mdp: &FactoredMdp, qs: &[LocalQTable]) -> Result<f64> {
        let eta = self.mode.eta(self.iteration(), mdp, &self.history);
        self.params = if self.mode.policy_space() {
            inpg_step_policy_space(&self.params, eta, qs)?
        } else {
            inpg_step(&self.params, eta, qs)?
        };
        self.history.push(eta);
        Ok(eta)
    }
}

#[derive(Debug, Clone)]
pub struct InacResult {
    pub params: SoftmaxParams,
    pub policy: FactoredPolicy,
    /// Outer-loop metrics, `step` = `t`.
    pub record: RunRecord,
    /// Inner-loop metrics, `step` = `t·K + k`.
    pub inner: RunRecord,
    pub etas: Vec<f64>,
}

pub fn inac_run(mdp: &FactoredMdp, cfg: &InacConfig) -> Result<InacResult> {
    inac_run_with(mdp, cfg, |_, _| Ok(()))
}

/// Runs Algorithm 2, calling `observe(t, π(t))` for `t = 0..=T`.
pub fn inac_run_with(
    mdp: &FactoredMdp,
    cfg: &InacConfig,
    mut observe: impl FnMut(usize, &FactoredPolicy) -> Result<()>,
) -> Result<InacResult> {
    if cfg.k == 0 {
        return Err(Error::Config("K must be at least 1".into()));
    }
    if cfg.inner_log == Some(0) {
        return Err(Error::Config("inner_log stride must be positive".into()));
    }
    cfg.exploration.check()?;
    let factors: Option<Vec<FactoredMdp>> = match &cfg.critic {
        Critic::Sampled => None,
        Critic::Exact { kernel } => Some((0..mdp.n()).map(|i| factor_mdp(mdp, kernel, i)).collect::<Result<_>>()?),
    };
    let steps = match factors {
        Some(_) => StepSizes { alpha: 1.0, k0: 1.0 },
        None => step_sizes(mdp, &FactoredPolicy::uniform(mdp), cfg.k, cfg.alpha, cfg.k0)?,
    };
    let qstar: Option<QTable> = if cfg.oracle { Some(value_iteration(mdp, 1e-12)?) } else { None };
    let normalizer = if cfg.greedy_value {
        Some(optimal_average_reward(mdp)?).filter(|&z| z > 0.0)
    } else {
        None
    };

    let mut actor = InacLearner::new(mdp, cfg.eta_mode);
    let mut record = RunRecord::new();
    let mut inner = RunRecord::new();
    let seed = cfg.seed;
    for t in 0..=cfg.t {
        let pi = actor.policy()?;
        let joint = joint_policy_of(&pi);
        let step = t as u64;
        if let Some(q) = &qstar {
            let gap = q.max_abs_diff(&policy_q(mdp, &joint, 1e-12)?);
            record.push(seed, step, None, "optimality_gap", gap);
        }
        if let Some(z) = normalizer {
            record.push(seed, step, None, "policy_value", average_reward(mdp, &joint, DEFAULT_TOL)? / z);
        }
        observe(t, &pi)?;
        if t == cfg.t {
            break;
        }
        let qs = match &factors {
            Some(f) => exact_local_q(f, &pi)?,
            None => {
                // the target is defined when the sampling policy is fixed over the inner loop
                let targets = match cfg.exploration {
                    Exploration::Decaying { .. } => None,
                    e if cfg.oracle || cfg.inner_log.is_some() => itd_targets(mdp, &pi, &pi.mixed(e.at(0, cfg.k))),
                    _ => None,
                };
                let mut streams = Streams::new(seed, t as u64 + 1, mdp.n());
                let base = t as u64 * cfg.k as u64;
                let qs = itd_inner(mdp, &pi, cfg.exploration, cfg.k, steps, &mut streams, |k, l| {
                    if let (Some(stride), Some(tg)) = (cfg.inner_log, &targets) {
                        if k % stride == 0 || k == cfg.k {
                            for (i, (q, x)) in l.q().iter().zip(tg).enumerate() {
                                inner.push(seed, base + k as u64, Some(i), "critic_error", q.max_abs_diff(x));
                            }
                        }
                    }
                    Ok(())
                })?;
                check_box(mdp, &qs)?;
                if let (true, Some(tg)) = (cfg.oracle, &targets) {
                    let err = qs.iter().zip(tg).map(|(q, x)| q.max_abs_diff(x)).fold(0.0, f64::max);
                    record.push(seed, step, None, "critic_error", err);
                }
                qs
            }
        };
        let eta = actor.improve(mdp, &qs)?;
        record.push(seed, step, None, "eta", eta);
    }
    Ok(InacResult {
        policy: actor.policy()?,
        etas: actor.etas().to_vec(),
        params: actor.params,
        record,
        inner,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{random_factored_instance, RandomMdpSpec};
    use crate::solvers::greedy_policy;
    use proptest::prelude::*;

    fn params(rows: &[&[f64]]) -> SoftmaxParams {
        let cols = rows[0].len();
        SoftmaxParams {
            theta: vec![Table::from_vec(rows.len(), cols, rows.concat()).unwrap()],
        }
    }

    #[test]
    fn softmax_examples() {
        let p = softmax_policy(&params(&[&[0.0, 0.0], &[7.5, 7.5], &[0.0, 20.0]])).unwrap();
        let t = p.local(0);
        assert_eq!(t.row(0), &[0.5, 0.5]);
        assert_eq!(t.row(1), &[0.5, 0.5]);
        let small = 1.0 / (1.0 + 20f64.exp());
        assert!((t.get(2, 0) - small).abs() < 1e-8 && (t.get(2, 0) - 2.06e-9).abs() < 1e-11);
        assert!((t.get(2, 1) - 1.0).abs() < 1e-8);
        assert!(softmax_policy(&params(&[&[f64::NAN, 0.0]])).is_err());
        assert!(softmax_policy(&params(&[&[1e308, -1e308]])).is_ok());
    }

    #[test]
    fn inpg_examples() {
        let th = params(&[&[0.0, 0.0]]);
        let q = vec![Table::from_vec(1, 2, vec![0.0, 1.0]).unwrap()];
        let p = softmax_policy(&inpg_step(&th, 1.0, &q).unwrap()).unwrap();
        let e = 1f64.exp();
        assert!((p.local(0).get(0, 0) - 1.0 / (1.0 + e)).abs() < 1e-15);
        assert!((p.local(0).get(0, 0) - 0.2689).abs() < 1e-4);
        assert_eq!(inpg_step(&th, 0.0, &q).unwrap(), th);
        let flat = vec![Table::from_vec(1, 2, vec![3.0, 3.0]).unwrap()];
        let th2 = params(&[&[0.3, -1.2]]);
        let a = softmax_policy(&th2).unwrap();
        let b = softmax_policy(&inpg_step(&th2, 5.0, &flat).unwrap()).unwrap();
        assert!(a.local(0).max_abs_diff(b.local(0)) < 1e-15);
        assert!(matches!(inpg_step(&th, f64::INFINITY, &q), Err(Error::NonFinite(_))));
        assert!(matches!(inpg_step(&th, 1e308, &vec![Table::from_vec(1, 2, vec![0.0, 10.0]).unwrap()]), Err(Error::NonFinite(_))));
    }

    #[test]
    fn policy_space_overflow_is_greedy() {
        let th = params(&[&[0.0, 0.0, 0.0], &[1.0, 2.0, 3.0]]);
        let q = vec![Table::from_vec(2, 3, vec![1.0, 2.0, 2.0, 5.0, 0.0, 1.0]).unwrap()];
        let p = softmax_policy(&inpg_step_policy_space(&th, f64::INFINITY, &q).unwrap()).unwrap();
        assert_eq!(p.local(0).row(0), &[0.0, 1.0, 0.0]);
        assert_eq!(p.local(0).row(1), &[1.0, 0.0, 0.0]);
        // finite steps agree with the raw form
        let raw = softmax_policy(&inpg_step(&th, 0.7, &q).unwrap()).unwrap();
        let logf = softmax_policy(&inpg_step_policy_space(&th, 0.7, &q).unwrap()).unwrap();
        assert!(raw.local(0).max_abs_diff(logf.local(0)) < 1e-15);
    }

    #[test]
    fn eta_examples() {
        let eta0 = eta_schedule(0, 0.99, 4, 2, &[]);
        assert!((eta0 - 0.99 * 4f64.ln()).abs() < 1e-15);
        assert!((eta0 - 1.3724).abs() < 1e-4);
        let eta1 = eta_schedule(1, 0.99, 4, 2, &[eta0]);
        assert!((eta1 - 2.0 * 2.0 * 4f64.ln() * eta0 / (0.01 * 0.99)).abs() < 1e-9);
        assert_eq!(eta_schedule(0, 0.5, 4, 7, &[]), 0.5 * 4f64.ln());
        let mut h = vec![];
        for t in 0..400 {
            let e = eta_schedule(t, 0.99, 4, 2, &h);
            h.push(e);
        }
        assert_eq!(*h.last().unwrap(), f64::INFINITY);
        assert!(h.windows(2).all(|w| w[1] >= w[0]));
        assert!((eta_experiment(1, 0.99, 0.2, &[0.2]) - 0.2 / 0.99).abs() < 1e-15);
    }

    #[test]
    fn eta_mode_parse() {
        assert_eq!(EtaMode::parse("theorem").unwrap(), EtaMode::Theorem);
        assert_eq!(EtaMode::parse("experiment:0.2").unwrap(), EtaMode::Experiment { eta0: 0.2 });
        assert!(EtaMode::parse("constant").is_err());
        let json = serde_json::to_string(&EtaMode::Constant { eta: 1.5 }).unwrap();
        assert_eq!(serde_json::from_str::<EtaMode>(&json).unwrap(), EtaMode::Constant { eta: 1.5 });
    }

    #[test]
    fn equivalence_zero_eta() {
        let th = SoftmaxParams { theta: vec![Table::filled(2, 3, 0.4), Table::filled(3, 2, -1.0)] };
        let qs = vec![Table::filled(2, 3, 2.0), Table::filled(3, 2, 1.0)];
        // zero up to the rounding of one renormalization
        assert!(npg_equivalence_check(&th, 0.0, &qs).unwrap() <= f64::EPSILON);
    }

    fn table_strategy(r: usize, c: usize, lo: f64, hi: f64) -> impl Strategy<Value = Table> {
        proptest::collection::vec(lo..hi, r * c).prop_map(move |v| Table::from_vec(r, c, v).unwrap())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn npg_equivalence_fuzz(
            t0 in table_strategy(2, 3, -5.0, 5.0),
            t1 in table_strategy(3, 2, -5.0, 5.0),
            q0 in table_strategy(2, 3, 0.0, 10.0),
            q1 in table_strategy(3, 2, 0.0, 10.0),
            eta in 0.0f64..3.0,
        ) {
            let th = SoftmaxParams { theta: vec![t0, t1] };
            prop_assert!(npg_equivalence_check(&th, eta, &[q0, q1]).unwrap() <= 1e-10);
        }

        #[test]
        fn softmax_shift_invariance(t in table_strategy(3, 4, -30.0, 30.0), c in -100.0f64..100.0) {
            let a = softmax_policy(&SoftmaxParams { theta: vec![t.clone()] }).unwrap();
            let shifted = Table::from_fn(3, 4, |s, x| t.get(s, x) + c);
            let b = softmax_policy(&SoftmaxParams { theta: vec![shifted] }).unwrap();
            prop_assert!(a.local(0).max_abs_diff(b.local(0)) <= 1e-12);
        }
    }

    fn separable(seed: u64) -> (FactoredMdp, SeparableKernel) {
        random_factored_instance(&RandomMdpSpec::new(vec![2, 3], vec![3, 2], 0.0, 0.9, seed)).unwrap()
    }

    #[test]
    fn zero_iterations_is_uniform() {
        let (m, _) = separable(1);
        let res = inac_run(&m, &InacConfig { t: 0, k: 10, alpha: Some(1.0), k0: Some(4.0), ..Default::default() }).unwrap();
        assert_eq!(res.policy, FactoredPolicy::uniform(&m));
    }

    #[test]
    fn zero_reward_critic_is_zero() {
        let (m, _) = separable(2);
        let zero = FactoredMdp::from_dense(
            m.state_sizes().to_vec(),
            m.action_sizes().to_vec(),
            0.9,
            vec![Table::zeros(2, 3), Table::zeros(3, 2)],
            m.transition().to_vec(),
        )
        .unwrap();
        let qs = itd_run(&zero, &FactoredPolicy::uniform(&zero), 500, 1.0, 4.0, 3).unwrap();
        assert!(qs.iter().all(|q| q.as_slice().iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn itd_single_agent_matches_policy_q() {
        for seed in 0..3 {
            let m = crate::solvers::tests::random_single(3, 2, 0.8, 20 + seed);
            let pi = FactoredPolicy::new(vec![Table::from_vec(3, 2, vec![0.3, 0.7, 0.5, 0.5, 0.9, 0.1]).unwrap()]).unwrap();
            let qpi = policy_q(&m, &joint_policy_of(&pi), 1e-12).unwrap();
            let steps = step_sizes(&m, &pi, 100_000, None, None).unwrap();
            let qs = itd_run(&m, &pi, 100_000, steps.alpha, steps.k0, seed).unwrap();
            let err = qs[0].max_abs_diff(&qpi);
            assert!(err <= 0.05 / 0.2, "seed {seed}: {err}");
        }
    }

    #[test]
    fn itd_separable_error_shrinks() {
        let (m, w) = separable(3);
        let pi = FactoredPolicy::uniform(&m);
        let factors: Vec<FactoredMdp> = (0..2).map(|i| factor_mdp(&m, &w, i).unwrap()).collect();
        let exact = exact_local_q(&factors, &pi).unwrap();
        let steps = step_sizes(&m, &pi, 100_000, None, None).unwrap();
        let err = |k: usize| {
            let qs = itd_run(&m, &pi, k, steps.alpha, steps.k0, 11).unwrap();
            qs.iter().zip(&exact).map(|(a, b)| a.max_abs_diff(b)).fold(0.0, f64::max)
        };
        let (e1, e2) = (err(2_000), err(100_000));
        assert!(e2 < e1 && e2 < 0.3, "{e1} -> {e2}");
    }

    /// Joint Q-NPG on the separable MDP: π ∝ π exp(η Q_π).
    fn joint_npg(m: &FactoredMdp, etas: &[f64]) -> Vec<JointPolicy> {
        let (ns, na) = (m.num_states(), m.num_actions());
        let mut pi = JointPolicy::uniform(ns, na);
        let mut out = vec![pi.clone()];
        for &eta in etas {
            let q = policy_q(m, &pi, 1e-13).unwrap();
            let t = Table::from_fn(ns, na, |s, a| {
                let z: f64 = (0..na).map(|b| pi.prob(s, b) * (eta * (q.get(s, b) - q.get(s, a))).exp()).sum();
                pi.prob(s, a) / z
            });
            pi = JointPolicy::new(t).unwrap();
            out.push(pi.clone());
        }
        out
    }

    #[test]
    fn exact_critic_matches_joint_npg() {
        let (m, w) = separable(4);
        let etas = [0.5, 1.0, 2.0, 0.3, 4.0];
        let reference = joint_npg(&m, &etas);
        let mut seen = Vec::new();
        let mut actor = InacLearner::new(&m, EtaMode::Constant { eta: 0.0 });
        let factors: Vec<FactoredMdp> = (0..2).map(|i| factor_mdp(&m, &w, i).unwrap()).collect();
        for &eta in &etas {
            seen.push(joint_policy_of(&actor.policy().unwrap()));
            let qs = exact_local_q(&factors, &actor.policy().unwrap()).unwrap();
            actor.mode = EtaMode::Constant { eta };
            actor.improve(&m, &qs).unwrap();
        }
        seen.push(joint_policy_of(&actor.policy().unwrap()));
        for (a, b) in seen.iter().zip(&reference) {
            assert!(a.table().max_abs_diff(b.table()) <= 1e-9);
        }
    }

    #[test]
    fn policy_space_exact_reaches_optimum() {
        let (m, w) = separable(5);
        let cfg = InacConfig { t: 12, critic: Critic::Exact { kernel: w }, ..Default::default() };
        let res = inac_run(&m, &cfg).unwrap();
        let gaps: Vec<f64> = res.record.series("optimality_gap", None).into_iter().map(|x| x.1).collect();
        assert!(gaps.windows(2).all(|g| g[1] <= g[0] + 1e-9), "{gaps:?}");
        assert!(*gaps.last().unwrap() < 1e-9);
        let opt = greedy_policy(&value_iteration(&m, 1e-12).unwrap()).modes();
        assert_eq!(joint_policy_of(&res.policy).modes(), opt);
        // long enough for the schedule to overflow into greedy steps
        let cfg = InacConfig { t: 100, greedy_value: false, ..cfg };
        let res = inac_run(&m, &cfg).unwrap();
        assert!(res.etas.contains(&f64::INFINITY));
        assert_eq!(joint_policy_of(&res.policy).modes(), opt);
        assert!(res.record.last("optimality_gap", None).unwrap() < 1e-9);
    }

    #[test]
    fn theorem_mode_overflows() {
        let (m, w) = separable(6);
        let cfg = InacConfig { t: 100, critic: Critic::Exact { kernel: w }, eta_mode: EtaMode::Theorem, ..Default::default() };
        assert!(matches!(inac_run(&m, &cfg), Err(Error::NonFinite(_))));
    }

    #[test]
    fn sampled_run_is_deterministic() {
        let (m, _) = random_factored_instance(&RandomMdpSpec::new(vec![2, 2], vec![2, 2], 0.3, 0.9, 7)).unwrap();
        let cfg = InacConfig {
            t: 5,
            k: 300,
            alpha: Some(0.5),
            k0: Some(2.0),
            eta_mode: EtaMode::Experiment { eta0: 0.2 },
            exploration: Exploration::Decaying { epsilon: 0.1 },
            seed: 3,
            inner_log: Some(50),
            ..Default::default()
        };
        let a = inac_run(&m, &cfg).unwrap();
        let b = inac_run(&m, &cfg).unwrap();
        assert_eq!(a.record, b.record);
        assert_eq!(a.params, b.params);
        assert!(a.record.steps_increase());
        let c = inac_run(&m, &InacConfig { exploration: Exploration::Constant { epsilon: 0.1 }, ..cfg }).unwrap();
        assert!(!c.inner.is_empty());
        assert!(c.record.last("critic_error", None).is_some());
    }
}
