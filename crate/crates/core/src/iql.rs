//! Independent Q-learning.
//!
//! All agents watch one shared trajectory generated by a fixed factored
//! behavior policy. At step `k` agent `i` only sees its own coordinates and
//! updates the single entry `(S_k^i, A_k^i)` of its local table with
//! stepsize `α_k = α / (k + k₀)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{argmax, joint_policy_of, sample_transition, FactoredMdp, FactoredPolicy, Table};
use crate::record::RunRecord;
use crate::rng::{RngStream, ENV_LANE};
use crate::solvers::{
    aggregated_fixed_point, average_reward, mixing_profile, optimal_average_reward,
    stationary_distribution, LocalQTable, OperatorKind, DEFAULT_TOL,
};

/// Horizon used to estimate `M₂` for the default `k₀`.
pub const MIXING_HORIZON: usize = 256;

/// Slack allowed on the `[0, cap/(1−γ)]` box before a snapshot fails.
const BOX_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct IqlConfig {
    /// Number of transitions `K`.
    #[serde(rename = "K")]
    pub k: usize,
    /// Base stepsize; `None` picks `2 / (σ′(1−γ))` under the behavior policy.
    pub alpha: Option<f64>,
    /// Offset; `None` picks `max(4α, 2 M₂ log K)`.
    pub k0: Option<f64>,
    pub seed: u64,
    /// Behavior policy; `None` is uniform.
    pub behavior: Option<FactoredPolicy>,
    pub eval_stride: usize,
    /// Restart from the start distribution every this many steps.
    pub episode_len: Option<usize>,
    /// Record `‖Q_k^i − Q̃_*^i‖∞` when the projected target is defined.
    pub oracle: bool,
    /// Record the exact average reward of the greedy policy, normalized by
    /// the optimal one.
    pub greedy_value: bool,
}

impl Default for IqlConfig {
    fn default() -> Self {
        Self {
            k: 10_000,
            alpha: None,
            k0: None,
            seed: 0,
            behavior: None,
            eval_stride: 1000,
            episode_len: None,
            oracle: true,
            greedy_value: true,
        }
    }
}

/// Resolved `(α, k₀)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepSizes {
    pub alpha: f64,
    pub k0: f64,
}

impl StepSizes {
    pub fn at(&self, k: u64) -> f64 {
        self.alpha / (k as f64 + self.k0)
    }
}

/// Fills in the theorem defaults for whichever of `alpha`, `k0` is missing.
pub fn step_sizes(
    mdp: &FactoredMdp,
    behavior: &FactoredPolicy,
    k: usize,
    alpha: Option<f64>,
    k0: Option<f64>,
) -> Result<StepSizes> {
    let joint = joint_policy_of(behavior);
    let alpha = match alpha {
        Some(a) => a,
        None => {
            let st = stationary_distribution(mdp, &joint, DEFAULT_TOL)?;
            if st.sigma_prime <= 0.0 {
                return Err(Error::Config(
                    "σ′ = 0 under the behavior policy, so the default α is undefined; pass alpha".into(),
                ));
            }
            2.0 / (st.sigma_prime * (1.0 - mdp.gamma()))
        }
    };
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::Config(format!("alpha = {alpha} must be positive")));
    }
    let k0 = match k0 {
        Some(v) => v,
        None => {
            let m2 = mixing_profile(mdp, &joint, MIXING_HORIZON)?.m2_hat;
            (4.0 * alpha).max(2.0 * m2 * (k.max(1) as f64).ln())
        }
    };
    if !(k0.is_finite() && k0 > 0.0) {
        return Err(Error::Config(format!("k0 = {k0} must be positive")));
    }
    Ok(StepSizes { alpha, k0 })
}

/// Local Q-tables plus the step counter.
#[derive(Debug, Clone)]
pub struct IqlLearner {
    q: Vec<LocalQTable>,
    gamma: f64,
    steps: StepSizes,
    k: u64,
}

impl IqlLearner {
    /// Zero-initialized tables.
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

    pub fn into_q(self) -> Vec<LocalQTable> {
        self.q
    }

    /// Updates performed so far.
    pub fn steps(&self) -> u64 {
        self.k
    }

    pub fn step_sizes(&self) -> StepSizes {
        self.steps
    }

    /// One asynchronous update of every agent from the transition `(s, a, s')`.
    pub fn update(&mut self, mdp: &FactoredMdp, s: usize, a: usize, s_next: usize) {
        let lr = self.steps.at(self.k);
        for (i, q) in self.q.iter_mut().enumerate() {
            let (si, ai, sn) = (mdp.local_state(s, i), mdp.local_action(a, i), mdp.local_state(s_next, i));
            let r = mdp.local_reward(i, si, ai, sn);
            let next = q.row(sn);
            let target = r + self.gamma * next[argmax(next)];
            let old = q.get(si, ai);
            q.set(si, ai, old + lr * (target - old));
        }
        self.k += 1;
    }

    pub fn greedy(&self) -> FactoredPolicy {
        induced_greedy_factored(&self.q)
    }
}

/// Per-agent deterministic greedy policy, lowest index on ties.
pub fn induced_greedy_factored(qs: &[LocalQTable]) -> FactoredPolicy {
    let locals = qs
        .iter()
        .map(|q| {
            let mut t = Table::zeros(q.rows(), q.cols());
            for s in 0..q.rows() {
                t.set(s, q.argmax_row(s), 1.0);
            }
            t
        })
        .collect();
    FactoredPolicy::new(locals).expect("point masses are distributions")
}

/// Checks the `[0, cap_i/(1−γ)]` box on every entry.
pub fn check_box(mdp: &FactoredMdp, qs: &[LocalQTable]) -> Result<()> {
    for (i, q) in qs.iter().enumerate() {
        let hi = mdp.reward_cap(i) / (1.0 - mdp.gamma()) + BOX_SLACK;
        let (lo, top) = (q.min(), q.max());
        if !(lo >= -BOX_SLACK && top <= hi) {
            return Err(Error::Solver(format!(
                "agent {i}: iterate left [0, {hi}] (range {lo}..{top})"
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct IqlResult {
    pub q: Vec<LocalQTable>,
    pub policy: FactoredPolicy,
    pub record: RunRecord,
    pub step_sizes: StepSizes,
    /// `Q̃_*^i` when it was defined under the behavior policy.
    pub oracle: Option<Vec<LocalQTable>>,
}

/// Projected optimality targets `Q̃_*^i` under the stationary weighting of
/// `behavior`, or `None` when the chain or a local cell rules them out.
pub fn iql_targets(mdp: &FactoredMdp, behavior: &FactoredPolicy) -> Option<Vec<LocalQTable>> {
    let st = stationary_distribution(mdp, &joint_policy_of(behavior), DEFAULT_TOL).ok()?;
    (0..mdp.n())
        .map(|i| aggregated_fixed_point(mdp, i, &st.d, OperatorKind::Optimality, 1e-12).ok())
        .collect()
}

pub fn iql_run(mdp: &FactoredMdp, cfg: &IqlConfig) -> Result<IqlResult> {
    iql_run_with(mdp, cfg, |_, _| Ok(()))
}

/// Runs Algorithm 1, calling `observe(k, learner)` at every snapshot
/// (`k = 0`, every `eval_stride` steps, and `k = K`).
pub fn iql_run_with(
    mdp: &FactoredMdp,
    cfg: &IqlConfig,
    mut observe: impl FnMut(u64, &IqlLearner) -> Result<()>,
) -> Result<IqlResult> {
    if cfg.k == 0 {
        return Err(Error::Config("K must be at least 1".into()));
    }
    if cfg.eval_stride == 0 || cfg.episode_len == Some(0) {
        return Err(Error::Config("eval_stride and episode_len must be positive".into()));
    }
    let behavior = cfg.behavior.clone().unwrap_or_else(|| FactoredPolicy::uniform(mdp));
    behavior.check_shape(mdp)?;
    behavior.check_exploration()?;
    let steps = step_sizes(mdp, &behavior, cfg.k, cfg.alpha, cfg.k0)?;
    let oracle = if cfg.oracle { iql_targets(mdp, &behavior) } else { None };
    let normalizer = if cfg.greedy_value {
        Some(optimal_average_reward(mdp)?).filter(|&z| z > 0.0)
    } else {
        None
    };

    let mut learner = IqlLearner::new(mdp, steps);
    let mut record = RunRecord::new();
    let mut snapshot = |k: u64, learner: &IqlLearner, record: &mut RunRecord| -> Result<()> {
        check_box(mdp, learner.q())?;
        if let Some(targets) = &oracle {
            for (i, (q, t)) in learner.q().iter().zip(targets).enumerate() {
                record.push(cfg.seed, k, Some(i), "q_error", q.max_abs_diff(t));
            }
        }
        if let Some(z) = normalizer {
            let pi = joint_policy_of(&learner.greedy());
            record.push(cfg.seed, k, None, "greedy_value", average_reward(mdp, &pi, DEFAULT_TOL)? / z);
        }
        observe(k, learner)
    };

    let mut agent_rngs: Vec<RngStream> = (0..mdp.n()).map(|i| RngStream::derive(cfg.seed, 0, i as u32)).collect();
    let mut env = RngStream::derive(cfg.seed, 0, ENV_LANE);
    let start = mdp.start_distribution();
    let mut s = env.categorical(&start);
    snapshot(0, &learner, &mut record)?;
    for k in 0..cfg.k {
        if cfg.episode_len.is_some_and(|len| k > 0 && k % len == 0) {
            s = env.categorical(&start);
        }
        let a = behavior.sample(mdp, s, &mut agent_rngs);
        let s_next = sample_transition(mdp, s, a, &mut env)?;
        learner.update(mdp, s, a, s_next);
        s = s_next;
        let done = k + 1;
        if done % cfg.eval_stride == 0 || done == cfg.k {
            snapshot(done as u64, &learner, &mut record)?;
        }
    }
    Ok(IqlResult {
        policy: learner.greedy(),
        q: learner.into_q(),
        record,
        step_sizes: steps,
        oracle,
    })
}
