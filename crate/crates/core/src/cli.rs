//! Command-line front end. `main.rs` only forwards to [`run`].
//!
//! Relative `--out` paths are resolved against the global `--out-dir`.
//! Without `--out`, results go to stdout. Exit codes: 0 success, 2 invalid
//! input, 3 solver failure, 4 bound violation, 1 anything else.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::dependence::{optimize_dependence, DependenceConfig, SeparableKernel};
use crate::envs::{grouped_view, reference_separable_kernel, synthetic3, synthetic3_with_gamma, Grouping};
use crate::error::{Error, Result};
use crate::harness::{run_experiment, verify_bounds, Algorithm, BoundsOptions, EnvSpec, ExperimentConfig};
use crate::inac::{inac_run, Critic, EtaMode, Exploration, InacConfig};
use crate::iql::{iql_run, IqlConfig};
use crate::mdp::{joint_policy_of, validate, FactoredMdp, FactoredPolicy, JointPolicy, MdpSpec};
use crate::record::fmt_f64;
use crate::solvers::{
    average_reward, greedy_policy, mixing_profile, policy_q, policy_value, stationary_distribution, value_iteration,
    StationaryDist, DEFAULT_TOL,
};

#[derive(Debug, Parser)]
#[command(name = "ilmarl", version, about = "Independent learning on factored multi-agent MDPs")]
pub struct Cli {
    /// Root seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for multi-seed and multi-start work.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Directory for relative output paths.
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check an MDP file and list every violated invariant.
    Validate { file: PathBuf },
    /// Exact Q-function, values and stationary analysis of a policy.
    Solve(SolveArgs),
    /// Upper bound on the dependence level with its kernel.
    Deplevel(DeplevelArgs),
    /// Write a built-in environment as MDP JSON.
    Env(EnvArgs),
    /// Independent Q-learning from one trajectory.
    Iql(IqlArgs),
    /// Independent natural actor-critic.
    Inac(InacArgs),
    /// Multi-seed train/test protocol with aggregate CSV.
    Experiment(ExperimentArgs),
    /// Evaluate the approximation lemmas exactly.
    VerifyBounds(BoundsArgs),
    /// Worst-case mixing gap of a policy's chain, as CSV `k,gap`.
    Mixing(MixingArgs),
}

/// Where the MDP comes from.
#[derive(Debug, Args)]
pub struct Source {
    /// MDP JSON file, or `synthetic3` for the built-in example.
    #[arg(long)]
    pub mdp: String,
    /// Group agents first: `12`, `23`, `13` or a code like `1,2|3`.
    #[arg(long)]
    pub grouping: Option<String>,
}

impl Source {
    fn load(&self) -> Result<FactoredMdp> {
        let base = if self.mdp == "synthetic3" && !Path::new(&self.mdp).exists() {
            synthetic3()
        } else {
            FactoredMdp::load(&self.mdp)?
        };
        match &self.grouping {
            Some(code) => grouped_view(&base, &Grouping::parse(code)?),
            None => Ok(base),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PolicyChoice {
    /// Greedy in the optimal Q-function, lowest-index ties.
    Optimal,
    Uniform,
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    #[command(flatten)]
    pub source: Source,
    #[arg(long, value_enum, default_value = "optimal")]
    pub policy: PolicyChoice,
    #[arg(long, default_value_t = DEFAULT_TOL)]
    pub tol: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DeplevelArgs {
    #[command(flatten)]
    pub source: Source,
    #[arg(long, default_value_t = 4)]
    pub starts: usize,
    #[arg(long, default_value_t = 5)]
    pub passes: usize,
    /// Brute-force resolution for the lower bracket; 0 skips it.
    #[arg(long, default_value_t = 32)]
    pub resolution: usize,
    /// JSON `{value, certified_lower, method}`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Achieving kernel as JSON.
    #[arg(long)]
    pub kernel_out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BuiltinEnv {
    Synthetic3,
}

#[derive(Debug, Args)]
pub struct EnvArgs {
    #[arg(value_enum)]
    pub name: BuiltinEnv,
    #[arg(long)]
    pub grouping: Option<String>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct IqlArgs {
    #[command(flatten)]
    pub source: Source,
    #[arg(long = "K", default_value_t = 10_000)]
    pub k: usize,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub k0: Option<f64>,
    #[arg(long, default_value_t = 1000)]
    pub eval_stride: usize,
    /// Restart from the start distribution every this many steps.
    #[arg(long)]
    pub episode_len: Option<usize>,
    /// CSV `step,seed,agent,metric,value`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InacArgs {
    #[command(flatten)]
    pub source: Source,
    #[arg(long = "T", default_value_t = 30)]
    pub t: usize,
    #[arg(long = "K", default_value_t = 1000)]
    pub k: usize,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub k0: Option<f64>,
    /// `theorem`, `policy-space`, `constant:<eta>` or `experiment:<eta0>`.
    #[arg(long, default_value = "policy-space")]
    pub eta_mode: String,
    /// Mix this much uniform exploration into the critic's sampling policy.
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Let the exploration weight decay linearly to 0 over each inner loop.
    #[arg(long)]
    pub decay_epsilon: bool,
    /// Use the exact factor Q-functions under this kernel file instead of TD.
    #[arg(long)]
    pub exact_critic: Option<PathBuf>,
    /// CSV `t,seed,metric,value`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Inner-loop CSV `step,seed,agent,metric,value`.
    #[arg(long)]
    pub inner_log: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub inner_stride: usize,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    /// JSON config; the flags below override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub algorithm: Option<AlgorithmArg>,
    /// Grouping option 1, 2 or 3 of the synthetic study.
    #[arg(long)]
    pub option: Option<usize>,
    /// MDP file instead of the synthetic environment.
    #[arg(long)]
    pub mdp: Option<PathBuf>,
    #[arg(long)]
    pub runs: Option<usize>,
    #[arg(long)]
    pub train_steps: Option<usize>,
    #[arg(long)]
    pub test_steps: Option<usize>,
    #[arg(long)]
    pub episode_len: Option<usize>,
    /// Output file prefix.
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AlgorithmArg {
    Iql,
    Inac,
}

#[derive(Debug, Args)]
pub struct BoundsArgs {
    #[command(flatten)]
    pub source: Source,
    /// Witness kernel file, or `reference` for the hand-built synthetic kernels.
    /// Without it the kernel comes from the dependence optimizer.
    #[arg(long)]
    pub kernel: Option<String>,
    #[arg(long, default_value_t = 3)]
    pub policies: usize,
    #[arg(long, default_value_t = 20)]
    pub draws: usize,
    #[arg(long, default_value_t = 1e-8)]
    pub tol: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MixingArgs {
    #[command(flatten)]
    pub source: Source,
    #[arg(long, value_enum, default_value = "uniform")]
    pub policy: PolicyChoice,
    #[arg(long, default_value_t = 64)]
    pub horizon: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Exit status for an error.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidMdp(_)
        | Error::Json(_)
        | Error::Config(_)
        | Error::InvalidPartition(_)
        | Error::DimensionMismatch(_)
        | Error::NotADistribution(_)
        | Error::Index { .. } => 2,
        Error::Solver(_)
        | Error::ReducibleChain { .. }
        | Error::Periodic(_)
        | Error::ZeroCellMass { .. }
        | Error::ExplorationViolation { .. }
        | Error::NonFinite(_)
        | Error::TooLarge(_)
        | Error::DivisionByZero(_) => 3,
        Error::Io(_) | Error::Csv(_) => 1,
    }
}

/// Parses the process arguments and runs the command.
pub fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Runs a parsed command line. `Ok` carries the exit status, which is 2 for
/// an invalid file under `validate` and 4 for a failed bound check.
pub fn run(cli: &Cli) -> Result<u8> {
    if let Some(n) = cli.threads {
        // a pool may already exist when called twice in one process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let seed = cli.seed.unwrap_or(0);
    let out = |p: &Option<PathBuf>| p.as_ref().map(|p| resolve(cli.out_dir.as_deref(), p));
    match &cli.command {
        Command::Validate { file } => {
            let spec: MdpSpec = serde_json::from_str(&std::fs::read_to_string(file)?)?;
            let report = validate(&spec);
            if report.is_valid() {
                println!("valid: {} agents, {} joint states", spec.n, spec.local_state_sizes.iter().product::<usize>());
                Ok(0)
            } else {
                print!("{report}");
                Ok(2)
            }
        }
        Command::Solve(a) => {
            let mdp = a.source.load()?;
            let qstar = value_iteration(&mdp, a.tol)?;
            let pi = match a.policy {
                PolicyChoice::Optimal => greedy_policy(&qstar),
                PolicyChoice::Uniform => JointPolicy::uniform(mdp.num_states(), mdp.num_actions()),
            };
            let q = match a.policy {
                PolicyChoice::Optimal => qstar,
                PolicyChoice::Uniform => policy_q(&mdp, &pi, a.tol)?,
            };
            let report = SolveReport {
                q: q.clone().into(),
                v: policy_value(&mdp, &pi, a.tol)?,
                actions: pi.modes(),
                average_reward: average_reward(&mdp, &pi, a.tol).ok(),
                stationary: stationary_distribution(&mdp, &pi, a.tol).ok(),
            };
            emit_json(out(&a.out).as_deref(), &report)?;
            Ok(0)
        }
        Command::Deplevel(a) => {
            let mdp = a.source.load()?;
            let cfg = DependenceConfig {
                starts: a.starts,
                passes: a.passes,
                bracket_resolution: (a.resolution > 0).then_some(a.resolution),
                seed,
                ..DependenceConfig::default()
            };
            let est = optimize_dependence(&mdp, &cfg)?;
            if let Some(p) = out(&a.kernel_out) {
                est.kernel.save(p)?;
            }
            emit_json(out(&a.out).as_deref(), &est)?;
            Ok(0)
        }
        Command::Env(a) => {
            let BuiltinEnv::Synthetic3 = a.name;
            let base = match a.gamma {
                Some(g) => synthetic3_with_gamma(g)?,
                None => synthetic3(),
            };
            let mdp = match &a.grouping {
                Some(code) => grouped_view(&base, &Grouping::parse(code)?)?,
                None => base,
            };
            emit_json(out(&a.out).as_deref(), &mdp.to_spec())?;
            Ok(0)
        }
        Command::Iql(a) => {
            let mdp = a.source.load()?;
            let cfg = IqlConfig {
                k: a.k,
                alpha: a.alpha,
                k0: a.k0,
                seed,
                eval_stride: a.eval_stride,
                episode_len: a.episode_len,
                ..IqlConfig::default()
            };
            let res = iql_run(&mdp, &cfg)?;
            emit(out(&a.out).as_deref(), |w| res.record.write_csv(w))?;
            Ok(0)
        }
        Command::Inac(a) => {
            let mdp = a.source.load()?;
            let exploration = match (a.epsilon, a.decay_epsilon) {
                (None, _) => Exploration::None,
                (Some(epsilon), false) => Exploration::Constant { epsilon },
                (Some(epsilon), true) => Exploration::Decaying { epsilon },
            };
            let critic = match &a.exact_critic {
                Some(p) => Critic::Exact {
                    kernel: SeparableKernel::load(p)?,
                },
                None => Critic::Sampled,
            };
            let cfg = InacConfig {
                t: a.t,
                k: a.k,
                alpha: a.alpha,
                k0: a.k0,
                eta_mode: EtaMode::parse(&a.eta_mode)?,
                exploration,
                critic,
                seed,
                inner_log: a.inner_log.as_ref().map(|_| a.inner_stride),
                ..InacConfig::default()
            };
            let res = inac_run(&mdp, &cfg)?;
            emit(out(&a.out).as_deref(), |w| res.record.write_outer_csv(w))?;
            if let Some(p) = out(&a.inner_log) {
                res.inner.save_csv(p)?;
            }
            Ok(0)
        }
        Command::Experiment(a) => {
            let mut cfg = match &a.config {
                Some(p) => ExperimentConfig::load(p)?,
                None => ExperimentConfig::figure2(Algorithm::Iql, 1, 20),
            };
            if let Some(alg) = a.algorithm {
                cfg.algorithm = match alg {
                    AlgorithmArg::Iql => Algorithm::Iql,
                    AlgorithmArg::Inac => Algorithm::Inac,
                };
            }
            if let Some(k) = a.option {
                let code = match k {
                    1 => "12",
                    2 => "23",
                    3 => "13",
                    _ => return Err(Error::Config(format!("no grouping option {k}"))),
                };
                let gamma = match &cfg.env {
                    EnvSpec::Synthetic3 { gamma, .. } => *gamma,
                    EnvSpec::File { .. } => None,
                };
                cfg.env = EnvSpec::Synthetic3 {
                    grouping: Some(code.into()),
                    gamma,
                };
            }
            if let Some(p) = &a.mdp {
                cfg.env = EnvSpec::File { path: p.clone() };
            }
            macro_rules! set {
                ($($field:ident),*) => { $( if let Some(v) = a.$field.clone() { cfg.$field = v; } )* };
            }
            set!(runs, train_steps, test_steps, episode_len);
            if a.name.is_some() {
                cfg.name = a.name.clone();
            }
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            if let Some(n) = cli.threads {
                cfg.threads = Some(n);
            }
            if let Some(d) = &cli.out_dir {
                cfg.out_dir = d.clone();
            }
            let res = run_experiment(&cfg)?;
            println!("{}", res.runs_csv.display());
            println!("{}", res.aggregate_csv.display());
            Ok(0)
        }
        Command::VerifyBounds(a) => {
            let mdp = a.source.load()?;
            let kernel = match a.kernel.as_deref() {
                Some("reference") => {
                    let k = a
                        .source
                        .grouping
                        .as_deref()
                        .and_then(|c| Grouping::parse(c).ok())
                        .and_then(|g| g.option_number())
                        .ok_or_else(|| Error::Config("the reference kernels need --grouping 12, 23 or 13".into()))?;
                    reference_separable_kernel(k, &mdp)?
                }
                Some(p) => SeparableKernel::load(p)?,
                None => {
                    let cfg = DependenceConfig {
                        bracket_resolution: None,
                        seed,
                        ..DependenceConfig::default()
                    };
                    optimize_dependence(&mdp, &cfg)?.kernel
                }
            };
            let opts = BoundsOptions {
                policies: a.policies,
                draws: a.draws,
                seed,
                tol: a.tol,
            };
            let report = verify_bounds(&mdp, &kernel, &opts)?;
            for c in report.violations() {
                eprintln!("violated: {} agent {:?}: {} > {}", c.name, c.agent, c.lhs, c.rhs);
            }
            emit_json(out(&a.out).as_deref(), &report)?;
            Ok(if report.passed() { 0 } else { 4 })
        }
        Command::Mixing(a) => {
            let mdp = a.source.load()?;
            let pi = match a.policy {
                PolicyChoice::Optimal => greedy_policy(&value_iteration(&mdp, DEFAULT_TOL)?),
                PolicyChoice::Uniform => joint_policy_of(&FactoredPolicy::uniform(&mdp)),
            };
            let prof = mixing_profile(&mdp, &pi, a.horizon)?;
            emit(out(&a.out).as_deref(), |w| {
                let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
                w.write_record(["k", "gap"])?;
                for (k, gap) in &prof.decay_curve {
                    w.write_record([k.to_string(), fmt_f64(*gap)])?;
                }
                w.flush()?;
                Ok(())
            })?;
            eprintln!(
                "M1 = {}, M2 = {}, sigma = {}, sigma' = {}",
                prof.m1_hat, prof.m2_hat, prof.sigma, prof.sigma_prime
            );
            Ok(0)
        }
    }
}

#[derive(Serialize)]
struct SolveReport {
    q: Vec<Vec<f64>>,
    v: Vec<f64>,
    /// Most likely joint action per joint state.
    actions: Vec<usize>,
    average_reward: Option<f64>,
    stationary: Option<StationaryDist>,
}

fn resolve(dir: Option<&Path>, p: &Path) -> PathBuf {
    match dir {
        Some(d) if p.is_relative() => d.join(p),
        _ => p.to_path_buf(),
    }
}

fn emit(path: Option<&Path>, body: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    match path {
        Some(p) => {
            if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent)?;
            }
            let mut f = std::io::BufWriter::new(std::fs::File::create(p)?);
            body(&mut f)?;
            f.flush()?;
        }
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            body(&mut lock)?;
            lock.flush()?;
        }
    }
    Ok(())
}

fn emit_json<T: Serialize>(path: Option<&Path>, value: &T) -> Result<()> {
    emit(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value)?;
        writeln!(w)?;
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("ilmarl").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn global_flags_anywhere() {
        let cli = parse(&["iql", "--mdp", "synthetic3", "--seed", "7", "--K", "50"]);
        assert_eq!(cli.seed, Some(7));
        let cli = parse(&["--out-dir", "x", "mixing", "--mdp", "m.json"]);
        assert_eq!(cli.out_dir.as_deref(), Some(Path::new("x")));
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::Periodic(2)), 3);
        assert_eq!(exit_code(&Error::Io(std::io::Error::other("x"))), 1);
    }

    #[test]
    fn env_then_validate_and_deplevel() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path().to_str().unwrap();
        let cli = parse(&["--out-dir", d, "env", "synthetic3", "--grouping", "12", "--out", "o1.json"]);
        assert_eq!(run(&cli).unwrap(), 0);
        let file = dir.path().join("o1.json");
        assert_eq!(run(&parse(&["validate", file.to_str().unwrap()])).unwrap(), 0);
        let cli = parse(&[
            "--out-dir", d, "deplevel", "--mdp", file.to_str().unwrap(), "--resolution", "0", "--out", "e.json",
            "--kernel-out", "k.json",
        ]);
        assert_eq!(run(&cli).unwrap(), 0);
        let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("e.json")).unwrap()).unwrap();
        assert!(v["value"].as_f64().unwrap() <= 0.5 + 1e-9);
        assert!(SeparableKernel::load(dir.path().join("k.json")).is_ok());
    }

    #[test]
    fn invalid_file_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.json");
        let mut spec = synthetic3().to_spec();
        spec.gamma = 1.5;
        spec.transition[0][0][0] += 0.5;
        std::fs::write(&p, serde_json::to_string(&spec).unwrap()).unwrap();
        assert_eq!(run(&parse(&["validate", p.to_str().unwrap()])).unwrap(), 2);
        let err = run(&parse(&["solve", "--mdp", p.to_str().unwrap()])).unwrap_err();
        assert_eq!(exit_code(&err), 2);
    }

    #[test]
    fn reference_kernel_bounds_pass() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.json");
        let cli = parse(&[
            "verify-bounds", "--mdp", "synthetic3", "--grouping", "13", "--kernel", "reference", "--policies", "1", "--draws",
            "3", "--out", p.to_str().unwrap(),
        ]);
        assert_eq!(run(&cli).unwrap(), 0);
    }
}
