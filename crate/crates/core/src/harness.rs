//! Experiment orchestration and bound verification.
//!
//! A run trains one learner on a seeded trajectory split into fixed-length
//! episodes and, after every episode, measures the current policy by Monte
//! Carlo over fresh test episodes. Rewards are normalized by the long-run
//! average reward of the optimal policy. Runs are independent and execute in
//! parallel; their records are concatenated in seed order.

use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dependence::{build_separable_mdp, factor_mdp, max_tv_gap, SeparableKernel};
use crate::envs::{grouped_view, synthetic3, synthetic3_with_gamma, Grouping};
use crate::error::{Error, Result};
use crate::inac::{inac_run_with, Critic, EtaMode, Exploration, InacConfig};
use crate::iql::{iql_run_with, IqlConfig};
use crate::mdp::{joint_policy_of, sample_transition, FactoredMdp, FactoredPolicy, JointPolicy, Table};
use crate::record::{write_aggregate_csv, AggregateRow, RunRecord};
use crate::rng::{RngStream, EVAL_LANE};
use crate::solvers::{
    aggregate, aggregated_fixed_point, discounted_occupancy, lift, policy_q, stationary_distribution,
    value_iteration, OperatorKind, DEFAULT_TOL,
};

pub use crate::solvers::optimal_average_reward;

/// Run ids at and above this value are reserved for evaluation streams.
const EVAL_RUN_BASE: u64 = 1 << 40;

/// Monte-Carlo mean per-step reward of `pi` over `episodes` episodes of
/// `episode_len` steps from the start distribution, divided by the optimal
/// average reward.
pub fn normalized_reward(
    mdp: &FactoredMdp,
    pi: &FactoredPolicy,
    episode_len: usize,
    episodes: usize,
    seed: u64,
) -> Result<f64> {
    let z = optimal_average_reward(mdp)?;
    normalized_reward_with(mdp, pi, episode_len, episodes, seed, 0, z)
}

/// [`normalized_reward`] with a precomputed normalizer and an explicit
/// evaluation stream id.
pub fn normalized_reward_with(
    mdp: &FactoredMdp,
    pi: &FactoredPolicy,
    episode_len: usize,
    episodes: usize,
    seed: u64,
    run: u64,
    normalizer: f64,
) -> Result<f64> {
    if normalizer == 0.0 {
        return Err(Error::DivisionByZero("the optimal average reward is 0".into()));
    }
    if episode_len == 0 || episodes == 0 {
        return Err(Error::Config("evaluation needs at least one step".into()));
    }
    pi.check_shape(mdp)?;
    let run = EVAL_RUN_BASE + run;
    let mut env = RngStream::derive(seed, run, EVAL_LANE);
    let mut agents: Vec<RngStream> = (0..mdp.n()).map(|i| RngStream::derive(seed, run, i as u32)).collect();
    let start = mdp.start_distribution();
    let mut total = 0.0;
    for _ in 0..episodes {
        let mut s = env.categorical(&start);
        for _ in 0..episode_len {
            let a = pi.sample(mdp, s, &mut agents);
            let sn = sample_transition(mdp, s, a, &mut env)?;
            total += mdp.realized_reward(s, a, sn);
            s = sn;
        }
    }
    Ok(total / (episodes * episode_len) as f64 / normalizer)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Iql,
    Inac,
}

impl Algorithm {
    pub fn name(&self) -> &'static str {
        match self {
            Algorithm::Iql => "iql",
            Algorithm::Inac => "inac",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EnvSpec {
    /// The synthetic three-agent MDP, optionally grouped (`12`, `23`, `13`
    /// or a general `1,2|3` code).
    Synthetic3 {
        #[serde(default)]
        grouping: Option<String>,
        #[serde(default)]
        gamma: Option<f64>,
    },
    /// An MDP JSON file.
    File { path: PathBuf },
}

impl EnvSpec {
    pub fn build(&self) -> Result<FactoredMdp> {
        match self {
            EnvSpec::Synthetic3 { grouping, gamma } => {
                let base = match gamma {
                    Some(g) => synthetic3_with_gamma(*g)?,
                    None => synthetic3(),
                };
                match grouping {
                    Some(code) => grouped_view(&base, &Grouping::parse(code)?),
                    None => Ok(base),
                }
            }
            EnvSpec::File { path } => FactoredMdp::load(path),
        }
    }

    pub fn label(&self) -> String {
        match self {
            EnvSpec::Synthetic3 { grouping: None, .. } => "synthetic3".into(),
            EnvSpec::Synthetic3 { grouping: Some(code), .. } => match Grouping::parse(code).ok().and_then(|g| g.option_number()) {
                Some(k) => format!("option{k}"),
                None => format!("synthetic3_{}", code.replace(['|', ';', ','], "-")),
            },
            EnvSpec::File { path } => path
                .file_stem()
                .map_or_else(|| "mdp".into(), |s| s.to_string_lossy().into_owned()),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub algorithm: Algorithm,
    pub env: EnvSpec,
    /// Number of seeded runs; run `r` uses seed `seed + r`.
    pub runs: usize,
    pub seed: u64,
    pub train_steps: usize,
    pub test_steps: usize,
    pub episode_len: usize,
    pub iql: IqlConfig,
    pub inac: InacConfig,
    pub out_dir: PathBuf,
    /// File prefix; defaults to `<algorithm>_<env>`.
    pub name: Option<String>,
    pub threads: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::figure2(Algorithm::Iql, 1, 100)
    }
}

impl ExperimentConfig {
    /// The synthetic-study protocol: 3000 training steps in 100-step
    /// episodes, 1000 test steps after every episode, `α = 0.05`,
    /// `k₀ = 4α`, uniform IQL behavior, and for INAC `K = 100`,
    /// `η₀ = 0.2` with `η_t = Σ_{i<t} η_i / γ^{2t−1}` and
    /// `ε_k = (1 − k/K)/10`.
    pub fn figure2(algorithm: Algorithm, option: usize, runs: usize) -> Self {
        let code = ["12", "23", "13"][option.clamp(1, 3) - 1];
        Self {
            algorithm,
            env: EnvSpec::Synthetic3 {
                grouping: Some(code.into()),
                gamma: None,
            },
            runs,
            seed: 0,
            train_steps: 3000,
            test_steps: 1000,
            episode_len: 100,
            iql: IqlConfig {
                alpha: Some(0.05),
                k0: Some(0.2),
                oracle: false,
                ..IqlConfig::default()
            },
            inac: InacConfig {
                k: 100,
                alpha: Some(0.05),
                k0: Some(0.2),
                eta_mode: EtaMode::Experiment { eta0: 0.2 },
                exploration: Exploration::Decaying { epsilon: 0.1 },
                critic: Critic::Sampled,
                oracle: false,
                ..InacConfig::default()
            },
            out_dir: PathBuf::from("out"),
            name: None,
            threads: None,
        }
    }

    pub fn label(&self) -> String {
        self.name
            .clone()
            .unwrap_or_else(|| format!("{}_{}", self.algorithm.name(), self.env.label()))
    }

    fn check(&self) -> Result<()> {
        if self.runs == 0 {
            return Err(Error::Config("runs must be at least 1".into()));
        }
        if self.episode_len == 0 || self.train_steps == 0 || self.test_steps < self.episode_len {
            return Err(Error::Config(
                "episode_len and train_steps must be positive and test_steps at least one episode".into(),
            ));
        }
        if self.algorithm == Algorithm::Inac && self.inac.k == 0 {
            return Err(Error::Config("inac K must be positive".into()));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// One seeded run of the protocol.
pub fn run_once(cfg: &ExperimentConfig, mdp: &FactoredMdp, normalizer: f64, seed: u64) -> Result<RunRecord> {
    let test_episodes = cfg.test_steps / cfg.episode_len;
    let mut tests = RunRecord::new();
    let mut evaluate = |step: u64, pi: &FactoredPolicy| -> Result<()> {
        let v = normalized_reward_with(mdp, pi, cfg.episode_len, test_episodes, seed, step, normalizer)?;
        tests.push(seed, step, None, "normalized_reward", v);
        Ok(())
    };
    let mut record = match cfg.algorithm {
        Algorithm::Iql => {
            let icfg = IqlConfig {
                k: cfg.train_steps,
                eval_stride: cfg.episode_len,
                episode_len: Some(cfg.episode_len),
                seed,
                ..cfg.iql.clone()
            };
            iql_run_with(mdp, &icfg, |k, l| evaluate(k, &l.greedy()))?.record
        }
        Algorithm::Inac => {
            let k = cfg.inac.k;
            let icfg = InacConfig {
                t: cfg.train_steps / k,
                seed,
                ..cfg.inac.clone()
            };
            let res = inac_run_with(mdp, &icfg, |t, pi| evaluate((t * k) as u64, pi))?;
            let mut rec = res.record;
            // report outer iterations on the training-step axis
            rec.records.iter_mut().for_each(|r| r.step *= k as u64);
            rec
        }
    };
    record.extend(tests);
    Ok(record)
}

/// All runs of an experiment, concatenated in seed order, without touching
/// the file system.
pub fn run_seeds(cfg: &ExperimentConfig) -> Result<RunRecord> {
    cfg.check()?;
    let mdp = cfg.env.build()?;
    let normalizer = optimal_average_reward(&mdp)?;
    let work = || -> Result<RunRecord> {
        let parts: Vec<Result<RunRecord>> = (0..cfg.runs as u64)
            .into_par_iter()
            .map(|r| run_once(cfg, &mdp, normalizer, cfg.seed.wrapping_add(r)))
            .collect();
        let mut all = RunRecord::new();
        for p in parts {
            all.extend(p?);
        }
        Ok(all)
    };
    match cfg.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(e.to_string()))?
            .install(work),
        None => work(),
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub record: RunRecord,
    pub aggregate: Vec<AggregateRow>,
    pub runs_csv: PathBuf,
    pub aggregate_csv: PathBuf,
}

/// Runs every seed, then writes `<label>_runs.csv` and
/// `<label>_aggregate.csv` into `out_dir`. Files of a failed call are removed.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    let record = run_seeds(cfg)?;
    let aggregate = record.aggregate();
    std::fs::create_dir_all(&cfg.out_dir)?;
    let label = cfg.label();
    let runs_csv = cfg.out_dir.join(format!("{label}_runs.csv"));
    let aggregate_csv = cfg.out_dir.join(format!("{label}_aggregate.csv"));
    let written = record.save_csv(&runs_csv).and_then(|_| {
        write_aggregate_csv(
            &aggregate,
            std::io::BufWriter::new(std::fs::File::create(&aggregate_csv)?),
        )
    });
    if let Err(e) = written {
        let _ = std::fs::remove_file(&runs_csv);
        let _ = std::fs::remove_file(&aggregate_csv);
        return Err(e);
    }
    Ok(ExperimentOutput {
        record,
        aggregate,
        runs_csv,
        aggregate_csv,
    })
}

/// Seed mean, population std and count of a metric at its last step.
pub fn final_summary(record: &RunRecord, metric: &str) -> Option<(f64, f64, usize)> {
    let last = record.records.iter().filter(|r| r.metric == metric && r.agent.is_none()).map(|r| r.step).max()?;
    let vals: Vec<f64> = record
        .records
        .iter()
        .filter(|r| r.metric == metric && r.agent.is_none() && r.step == last)
        .map(|r| r.value)
        .collect();
    let m = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / m;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m;
    Some((mean, var.sqrt(), vals.len()))
}

/// One inequality `lhs ≤ rhs` evaluated with exact quantities.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundCheck {
    pub name: String,
    pub agent: Option<usize>,
    pub lhs: f64,
    pub rhs: f64,
    pub slack: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundsReport {
    /// Max-TV of the supplied kernel, an upper bound on the dependence level.
    pub e_upper: f64,
    pub checks: Vec<BoundCheck>,
}

impl BoundsReport {
    pub fn violations(&self) -> Vec<&BoundCheck> {
        self.checks.iter().filter(|c| !c.pass).collect()
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct BoundsOptions {
    /// Random full-support factored policies checked on top of the uniform one.
    pub policies: usize,
    /// Random `(Q, d)` draws for the nonexpansiveness check.
    pub draws: usize,
    pub seed: u64,
    /// Absolute slack granted to the left-hand sides for solver error.
    pub tol: f64,
}

impl Default for BoundsOptions {
    fn default() -> Self {
        Self {
            policies: 3,
            draws: 20,
            seed: 0,
            tol: 1e-8,
        }
    }
}

/// Stationary weighting of `pi` when it charges every local cell, otherwise
/// the discounted occupancy from the uniform distribution over all states.
fn lemma_weighting(mdp: &FactoredMdp, pi: &JointPolicy) -> Result<Table> {
    if let Ok(st) = stationary_distribution(mdp, pi, DEFAULT_TOL) {
        if st.sigma_prime > 0.0 {
            return Ok(st.d);
        }
    }
    let ns = mdp.num_states();
    discounted_occupancy(mdp, pi, &vec![1.0 / ns as f64; ns])
}

fn random_full_support(mdp: &FactoredMdp, rng: &mut RngStream) -> Result<FactoredPolicy> {
    let locals = (0..mdp.n())
        .map(|i| {
            let (m, k) = (mdp.state_sizes()[i], mdp.action_sizes()[i]);
            let mut t = Table::from_fn(m, k, |_, _| 0.05 + rng.random::<f64>());
            for s in 0..m {
                let z: f64 = t.row(s).iter().sum();
                t.row_mut(s).iter_mut().for_each(|x| *x /= z);
            }
            t
        })
        .collect();
    FactoredPolicy::new(locals)
}

/// Evaluates the approximation lemmas with `E` replaced by the max-TV of
/// `kernel`, which only loosens their right-hand sides. Reward scales enter
/// through the caps: local bounds use `cap_i`, joint bounds the total cap.
pub fn verify_bounds(mdp: &FactoredMdp, kernel: &SeparableKernel, opts: &BoundsOptions) -> Result<BoundsReport> {
    let e = max_tv_gap(mdp, kernel)?;
    let g = mdp.gamma();
    let scale = 2.0 * g * e / (1.0 - g).powi(2);
    let total_cap = mdp.total_reward_cap();
    let sep = build_separable_mdp(mdp, kernel)?;
    let factors: Vec<FactoredMdp> = (0..mdp.n()).map(|i| factor_mdp(mdp, kernel, i)).collect::<Result<_>>()?;
    let mut checks = Vec::new();
    let mut push = |name: &str, agent: Option<usize>, lhs: f64, rhs: f64| {
        checks.push(BoundCheck {
            name: name.into(),
            agent,
            lhs,
            rhs,
            slack: rhs - lhs,
            pass: lhs <= rhs + opts.tol,
        });
    };

    // optimal Q-functions
    let qstar = value_iteration(mdp, 1e-12)?;
    let qhat = value_iteration(&sep, 1e-12)?;
    push("lemma3", None, qstar.max_abs_diff(&qhat), total_cap * scale);
    push("boundedness_q_star", None, (-qstar.min()).max(qstar.max() - total_cap / (1.0 - g)).max(0.0), 0.0);

    let uniform = FactoredPolicy::uniform(mdp);
    let d_b = lemma_weighting(mdp, &joint_policy_of(&uniform))?;
    for (i, f) in factors.iter().enumerate() {
        let cap = mdp.reward_cap(i);
        let local_opt = value_iteration(f, 1e-12)?;
        let tilde = aggregated_fixed_point(mdp, i, &d_b, OperatorKind::Optimality, 1e-12)?;
        push("lemma2", Some(i), tilde.max_abs_diff(&local_opt), cap * scale);
        let hi = cap / (1.0 - g);
        push("boundedness_q_tilde_star", Some(i), (-tilde.min()).max(tilde.max() - hi).max(0.0), 0.0);
    }

    let mut rng = RngStream::derive(opts.seed, 0, EVAL_LANE);
    let mut policies = vec![uniform];
    for _ in 0..opts.policies {
        policies.push(random_full_support(mdp, &mut rng)?);
    }
    for pi in &policies {
        let joint = joint_policy_of(pi);
        let q = policy_q(mdp, &joint, 1e-12)?;
        let qh = policy_q(&sep, &joint, 1e-12)?;
        push("lemma4", None, q.max_abs_diff(&qh), total_cap * scale);
        let d = lemma_weighting(mdp, &joint)?;
        for (i, f) in factors.iter().enumerate() {
            let local = policy_q(f, &JointPolicy::new(pi.local(i).clone())?, 1e-12)?;
            let tilde = aggregated_fixed_point(mdp, i, &d, OperatorKind::Evaluation(&joint), 1e-12)?;
            push("lemma5", Some(i), tilde.max_abs_diff(&local), mdp.reward_cap(i) * scale);
        }
    }

    // ‖Φ Π Q‖∞ ≤ ‖Q‖∞ for random Q and random positive weightings
    let (ns, na) = (mdp.num_states(), mdp.num_actions());
    for i in 0..mdp.n() {
        let mut worst = f64::NEG_INFINITY;
        for _ in 0..opts.draws {
            let q = Table::from_fn(ns, na, |_, _| rng.random::<f64>() * 2.0 - 1.0);
            let w = Table::from_fn(ns, na, |_, _| 1e-3 + rng.random::<f64>());
            let proj = lift(mdp, i, &aggregate(mdp, i, &w, &q)?);
            worst = worst.max(proj.sup_norm() - q.sup_norm());
        }
        push("nonexpansive", Some(i), worst.max(0.0), 0.0);
    }
    Ok(BoundsReport { e_upper: e, checks })
}
