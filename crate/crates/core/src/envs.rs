//! Benchmark instances.
//!
//! `synthetic3` is the three-agent binary MDP used for the grouping study.
//! Agents 1 and 2 share a bit: on the slice `s¹ = s²` they keep it when their
//! actions agree and both flip it otherwise. Agent 3's bit jumps to 1 when it
//! is 0 and agent 3 disagrees with agent 2; in every other case it is
//! redrawn uniformly. Each agent earns one unit whenever its own bit persists.
//!
//! The slice `s¹ = s²` is closed under these dynamics and the start set lies
//! inside it. Off the slice, agents 1 and 2 move to `(0, 0)` whatever they
//! do; this completion is a modelling choice and never influences runs
//! started on the slice.

use rand::Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::dependence::SeparableKernel;
use crate::error::{Error, Result};
use crate::mdp::{compose_index, decompose_index, Builder, FactoredMdp, Table};
use crate::rng::{RngStream, GEN_LANE};

pub const SYNTHETIC3_GAMMA: f64 = 0.99;

/// Next-bit law of the coupled pair from `(s¹, s²)` under `(a¹, a²)`, as a
/// distribution over the pair index `2·s¹' + s²'`.
fn pair_row(s1: usize, s2: usize, a1: usize, a2: usize) -> [f64; 4] {
    let mut out = [0.0; 4];
    if s1 != s2 {
        out[0] = 1.0;
    } else if a1 == a2 {
        out[2 * s1 + s2] = 1.0;
    } else {
        out[2 * (1 - s1) + (1 - s2)] = 1.0;
    }
    out
}

/// Next-bit law of agent 3.
fn third_row(s3: usize, a2: usize, a3: usize) -> [f64; 2] {
    if s3 == 0 && a2 != a3 {
        [0.0, 1.0]
    } else {
        [0.5, 0.5]
    }
}

fn persistence_rewards(sizes: &[usize]) -> Vec<Vec<f64>> {
    sizes
        .iter()
        .map(|&m| {
            let mut t = vec![0.0; m * 2 * m];
            for s in 0..m {
                for a in 0..2 {
                    t[(s * 2 + a) * m + s] = 1.0;
                }
            }
            t
        })
        .collect()
}

/// The three-agent synthetic MDP with `γ = 0.99`.
pub fn synthetic3() -> FactoredMdp {
    synthetic3_with_gamma(SYNTHETIC3_GAMMA).expect("valid by construction")
}

pub fn synthetic3_with_gamma(gamma: f64) -> Result<FactoredMdp> {
    let sizes = [2usize, 2, 2];
    let mut t = vec![0.0; 8 * 8 * 8];
    for a in 0..8 {
        let (a1, a2, a3) = (a >> 2, (a >> 1) & 1, a & 1);
        for s in 0..8 {
            let (s1, s2, s3) = (s >> 2, (s >> 1) & 1, s & 1);
            let pair = pair_row(s1, s2, a1, a2);
            let third = third_row(s3, a2, a3);
            for sn in 0..8 {
                t[(a * 8 + s) * 8 + sn] = pair[sn >> 1] * third[sn & 1];
            }
        }
    }
    Builder::new(
        sizes.to_vec(),
        sizes.to_vec(),
        gamma,
        vec![Table::zeros(2, 2); 3],
        t,
    )
    .transition_rewards(persistence_rewards(&sizes))
    .start_states(vec![0, 1, 6, 7])
    .build()
}

/// Ordered partition of agents into super-agents (0-based indices).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grouping {
    pub groups: Vec<Vec<usize>>,
}

impl Grouping {
    pub fn new(groups: Vec<Vec<usize>>) -> Self {
        Self { groups }
    }

    pub fn identity(n: usize) -> Self {
        Self::new((0..n).map(|i| vec![i]).collect())
    }

    /// The grouping options of the synthetic study: 1 = {1,2},{3},
    /// 2 = {2,3},{1}, 3 = {1,3},{2}.
    pub fn option(k: usize) -> Result<Self> {
        match k {
            1 => Ok(Self::new(vec![vec![0, 1], vec![2]])),
            2 => Ok(Self::new(vec![vec![1, 2], vec![0]])),
            3 => Ok(Self::new(vec![vec![0, 2], vec![1]])),
            _ => Err(Error::InvalidPartition(format!("no grouping option {k}"))),
        }
    }

    /// Parses `12`, `23`, `13` (the synthetic options, by the paired agents)
    /// or a general 1-based spec like `1,2|3`.
    pub fn parse(code: &str) -> Result<Self> {
        match code {
            "12" => return Self::option(1),
            "23" => return Self::option(2),
            "13" => return Self::option(3),
            _ => {}
        }
        let groups = code
            .split(['|', ';'])
            .map(|g| {
                g.split(',')
                    .map(|x| {
                        x.trim()
                            .parse::<usize>()
                            .ok()
                            .filter(|&v| v >= 1)
                            .map(|v| v - 1)
                            .ok_or_else(|| Error::InvalidPartition(format!("bad agent '{x}' in '{code}'")))
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::new(groups))
    }

    /// Which synthetic option this is, if any.
    pub fn option_number(&self) -> Option<usize> {
        (1..=3).find(|&k| Self::option(k).is_ok_and(|g| &g == self))
    }

    pub fn check(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for g in &self.groups {
            if g.is_empty() {
                return Err(Error::InvalidPartition("empty group".into()));
            }
            for &i in g {
                if i >= n || seen[i] {
                    return Err(Error::InvalidPartition(format!(
                        "agent {} is out of range or repeated",
                        i + 1
                    )));
                }
                seen[i] = true;
            }
        }
        if seen.iter().any(|x| !x) {
            return Err(Error::InvalidPartition("not every agent is covered".into()));
        }
        Ok(())
    }
}

/// Relabels `mdp` so each group becomes one agent whose local spaces are the
/// products of its members' spaces (first member most significant). Joint
/// dynamics are unchanged; rewards and reward caps add up within groups.
pub fn grouped_view(mdp: &FactoredMdp, g: &Grouping) -> Result<FactoredMdp> {
    g.check(mdp.n())?;
    let members = &g.groups;
    let sub = |sizes: &[usize], grp: &[usize]| grp.iter().map(|&m| sizes[m]).collect::<Vec<_>>();
    let ss: Vec<Vec<usize>> = members.iter().map(|grp| sub(mdp.state_sizes(), grp)).collect();
    let aa: Vec<Vec<usize>> = members.iter().map(|grp| sub(mdp.action_sizes(), grp)).collect();
    let new_s: Vec<usize> = ss.iter().map(|v| v.iter().product()).collect();
    let new_a: Vec<usize> = aa.iter().map(|v| v.iter().product()).collect();

    let relabel = |locals: &[usize], sizes: &[Vec<usize>], outer: &[usize]| -> Result<usize> {
        let grouped: Vec<usize> = members
            .iter()
            .zip(sizes)
            .map(|(grp, sz)| compose_index(&grp.iter().map(|&m| locals[m]).collect::<Vec<_>>(), sz))
            .collect::<Result<_>>()?;
        compose_index(&grouped, outer)
    };
    let (ns, na) = (mdp.num_states(), mdp.num_actions());
    let smap: Vec<usize> = (0..ns)
        .map(|s| relabel(mdp.state_locals(s), &ss, &new_s))
        .collect::<Result<_>>()?;
    let amap: Vec<usize> = (0..na)
        .map(|a| relabel(mdp.action_locals(a), &aa, &new_a))
        .collect::<Result<_>>()?;

    let mut t = vec![0.0; na * ns * ns];
    for a in 0..na {
        for s in 0..ns {
            let base = (amap[a] * ns + smap[s]) * ns;
            for (sn, &p) in mdp.row(a, s).iter().enumerate() {
                t[base + smap[sn]] = p;
            }
        }
    }
    let mut rewards = Vec::with_capacity(members.len());
    let mut trs = Vec::with_capacity(members.len());
    for (k, grp) in members.iter().enumerate() {
        let (m, c) = (new_s[k], new_a[k]);
        let mut r = Table::zeros(m, c);
        let mut tr = vec![0.0; m * c * m];
        for gs in 0..m {
            let sl = decompose_index(gs, &ss[k])?;
            for ga in 0..c {
                let al = decompose_index(ga, &aa[k])?;
                let v: f64 = grp
                    .iter()
                    .enumerate()
                    .map(|(j, &i)| mdp.rewards(i).get(sl[j], al[j]))
                    .sum();
                r.set(gs, ga, v);
                if mdp.has_transition_rewards() {
                    for gn in 0..m {
                        let nl = decompose_index(gn, &ss[k])?;
                        tr[(gs * c + ga) * m + gn] = grp
                            .iter()
                            .enumerate()
                            .map(|(j, &i)| mdp.transition_reward_row(i, sl[j], al[j]).map_or(0.0, |row| row[nl[j]]))
                            .sum();
                    }
                }
            }
        }
        rewards.push(r);
        trs.push(tr);
    }
    let caps = members
        .iter()
        .map(|grp| grp.iter().map(|&i| mdp.reward_cap(i)).sum())
        .collect();
    let starts = mdp.start_states().iter().map(|&s| smap[s]).collect();
    let mut b = Builder::new(new_s, new_a, mdp.gamma(), rewards, t)
        .reward_caps(caps)
        .start_states(starts);
    if mdp.has_transition_rewards() {
        b = b.transition_rewards(trs);
    }
    b.build()
}

/// The synthetic MDP in the 2-super-agent view of grouping option `k`.
pub fn synthetic3_option(k: usize) -> Result<FactoredMdp> {
    grouped_view(&synthetic3(), &Grouping::option(k)?)
}

/// Hand-built separable model for grouping option `k` of `synthetic3`: the
/// grouped pair keeps its own dynamics where they only depend on the pair,
/// and every other coordinate moves uniformly.
///
/// * Option 1: the {1,2} super-agent is exact, agent 3 is uniform.
/// * Option 2: agent 1 is uniform; in the {2,3} super-agent bit 2 is uniform
///   and bit 3 follows its own rule (which only reads `s³`, `a²`, `a³`).
/// * Option 3: everything is uniform.
pub fn reference_separable_kernel(k: usize, grouped: &FactoredMdp) -> Result<SeparableKernel> {
    let expect = [4usize, 2];
    if grouped.state_sizes() != expect || grouped.action_sizes() != expect {
        return Err(Error::DimensionMismatch("expected a grouped synthetic3 view".into()));
    }
    let uniform2 = || Table::filled(2, 2, 0.5);
    let agents = match k {
        1 => {
            let pair = (0..4)
                .map(|a| Table::from_fn(4, 4, |s, t| pair_row(s >> 1, s & 1, a >> 1, a & 1)[t]))
                .collect();
            vec![pair, vec![uniform2(), uniform2()]]
        }
        2 => {
            // super-agent (2,3): state 2·s² + s³, action 2·a² + a³
            let pair = (0..4)
                .map(|a| {
                    Table::from_fn(4, 4, |s, t| 0.5 * third_row(s & 1, a >> 1, a & 1)[t & 1])
                })
                .collect();
            vec![pair, vec![uniform2(), uniform2()]]
        }
        3 => vec![vec![Table::filled(4, 4, 0.25); 4], vec![uniform2(), uniform2()]],
        _ => return Err(Error::InvalidPartition(format!("no grouping option {k}"))),
    };
    SeparableKernel::new(agents)
}

/// Parameters of the coupled random generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomMdpSpec {
    pub state_sizes: Vec<usize>,
    pub action_sizes: Vec<usize>,
    /// Coupling `λ ∈ [0, 1]`.
    pub lambda: f64,
    pub gamma: f64,
    pub seed: u64,
}

impl RandomMdpSpec {
    pub fn new(state_sizes: Vec<usize>, action_sizes: Vec<usize>, lambda: f64, gamma: f64, seed: u64) -> Self {
        Self {
            state_sizes,
            action_sizes,
            lambda,
            gamma,
            seed,
        }
    }

    pub fn n(&self) -> usize {
        self.state_sizes.len()
    }
}

fn dirichlet_row(rng: &mut RngStream, m: usize) -> Vec<f64> {
    let mut row: Vec<f64> = (0..m).map(|_| rng.sample::<f64, _>(Exp1)).collect();
    let z: f64 = row.iter().sum();
    row.iter_mut().for_each(|x| *x /= z);
    row
}

/// `P_a = (1 − λ)·(product of random local kernels) + λ·(random joint
/// kernel)`, uniform rewards, and the product kernel as witness. The witness
/// has max-TV at most `λ`, so `E ≤ λ`.
pub fn random_factored_instance(spec: &RandomMdpSpec) -> Result<(FactoredMdp, SeparableKernel)> {
    if !(0.0..=1.0).contains(&spec.lambda) {
        return Err(Error::Config(format!("lambda = {} is not in [0, 1]", spec.lambda)));
    }
    let n = spec.n();
    if n == 0 || spec.action_sizes.len() != n || spec.state_sizes.contains(&0) || spec.action_sizes.contains(&0) {
        return Err(Error::Config("bad agent sizes".into()));
    }
    let mut rng = RngStream::derive(spec.seed, 0, GEN_LANE);
    let agents: Vec<Vec<Table>> = (0..n)
        .map(|i| {
            let m = spec.state_sizes[i];
            (0..spec.action_sizes[i])
                .map(|_| {
                    let data = (0..m).flat_map(|_| dirichlet_row(&mut rng, m)).collect();
                    Table::from_vec(m, m, data).expect("square")
                })
                .collect()
        })
        .collect();
    let rewards: Vec<Table> = (0..n)
        .map(|i| Table::from_fn(spec.state_sizes[i], spec.action_sizes[i], |_, _| rng.uniform()))
        .collect();
    let ns: usize = spec.state_sizes.iter().product();
    let na: usize = spec.action_sizes.iter().product();
    let mut t = Vec::with_capacity(na * ns * ns);
    let lambda = spec.lambda;
    for a in 0..na {
        let al = decompose_index(a, &spec.action_sizes)?;
        for s in 0..ns {
            let sl = decompose_index(s, &spec.state_sizes)?;
            let joint = dirichlet_row(&mut rng, ns);
            let mut prod = vec![1.0];
            for i in 0..n {
                let row = agents[i][al[i]].row(sl[i]);
                prod = prod.iter().flat_map(|&p| row.iter().map(move |q| p * q)).collect();
            }
            let mut row: Vec<f64> = prod
                .iter()
                .zip(&joint)
                .map(|(p, j)| (1.0 - lambda) * p + lambda * j)
                .collect();
            let z: f64 = row.iter().sum();
            row.iter_mut().for_each(|x| *x /= z);
            t.extend(row);
        }
    }
    let mdp = FactoredMdp::from_dense(
        spec.state_sizes.clone(),
        spec.action_sizes.clone(),
        spec.gamma,
        rewards,
        t,
    )?;
    Ok((mdp, SeparableKernel::new(agents)?))
}

pub fn random_factored_mdp(spec: &RandomMdpSpec) -> Result<FactoredMdp> {
    random_factored_instance(spec).map(|x| x.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dependence::{max_tv_gap, optimize_dependence, DependenceConfig};
    use crate::mdp::{sample_transition, validate, JointPolicy};
    use crate::solvers::{stationary_distribution, value_iteration};

    fn idx(b: [usize; 3]) -> usize {
        b[0] * 4 + b[1] * 2 + b[2]
    }

    #[test]
    fn synthetic_transitions() {
        let m = synthetic3();
        assert!(validate(&m.to_spec()).is_valid());
        // s = (0,0,1), a = (0,0,x): pair stays at (0,0), bit 3 uniform
        for a3 in 0..2 {
            let row = m.row(idx([0, 0, a3]), idx([0, 0, 1]));
            assert_eq!(row[idx([0, 0, 0])], 0.5);
            assert_eq!(row[idx([0, 0, 1])], 0.5);
        }
        // s³ = 0 and a² ≠ a³: bit 3 becomes 1
        for s in [idx([0, 0, 0]), idx([1, 1, 0])] {
            for a in 0..8 {
                if (a >> 1) & 1 != a & 1 {
                    let row = m.row(a, s);
                    let mass1: f64 = (0..8).filter(|sn| sn & 1 == 1).map(|sn| row[sn]).sum();
                    assert_eq!(mass1, 1.0);
                }
            }
        }
        // disagreeing pair flips both bits
        let row = m.row(idx([0, 1, 0]), idx([1, 1, 1]));
        let mass: f64 = row[idx([0, 0, 0])] + row[idx([0, 0, 1])];
        assert_eq!(mass, 1.0);
    }

    #[test]
    fn synthetic_rewards() {
        let m = synthetic3();
        let s = idx([1, 1, 0]);
        assert_eq!(m.realized_reward(s, 0, s), 3.0);
        assert_eq!(m.realized_reward(s, 0, idx([0, 0, 1])), 0.0);
        assert_eq!(m.realized_reward(s, 0, idx([1, 1, 1])), 2.0);
    }

    #[test]
    fn synthetic_chain_on_slice() {
        let m = synthetic3();
        let st = stationary_distribution(&m, &JointPolicy::uniform(8, 8), 1e-12).unwrap();
        assert_eq!(st.support, vec![0, 1, 6, 7]);
        assert!(st.sigma_prime > 0.0);
        // oracle: long-run frequencies from an explicit simulation
        let mut rng = RngStream::derive(1, 0, 0);
        let mut counts = [0usize; 8];
        let mut s = 0;
        let steps = 400_000;
        for _ in 0..steps {
            let a = rng.below(8);
            s = sample_transition(&m, s, a, &mut rng).unwrap();
            counts[s] += 1;
        }
        for sidx in 0..8 {
            let f = counts[sidx] as f64 / steps as f64;
            assert!((f - st.state[sidx]).abs() < 0.01, "{sidx}: {f} vs {}", st.state[sidx]);
        }
    }

    #[test]
    fn reference_kernels_reproduce_levels() {
        for (k, want) in [(1, 0.5), (2, 0.75), (3, 0.875)] {
            let g = synthetic3_option(k).unwrap();
            let kern = reference_separable_kernel(k, &g).unwrap();
            assert!((max_tv_gap(&g, &kern).unwrap() - want).abs() < 1e-12);
        }
    }

    #[test]
    fn grouping_parse() {
        assert_eq!(Grouping::parse("12").unwrap(), Grouping::option(1).unwrap());
        assert_eq!(Grouping::parse("2,3|1").unwrap(), Grouping::option(2).unwrap());
        assert_eq!(Grouping::option(3).unwrap().option_number(), Some(3));
        assert!(Grouping::parse("1,1|2").unwrap().check(2).is_err());
        assert!(Grouping::parse("1|x").is_err());
        assert!(grouped_view(&synthetic3(), &Grouping::parse("1,2").unwrap()).is_err());
    }

    #[test]
    fn identity_grouping_is_identity() {
        let m = synthetic3();
        let g = grouped_view(&m, &Grouping::identity(3)).unwrap();
        assert_eq!(g.to_spec().transition, m.to_spec().transition);
        assert_eq!(g.to_spec().transition_rewards, m.to_spec().transition_rewards);
    }

    #[test]
    fn grouping_preserves_values() {
        let m = synthetic3_with_gamma(0.9).unwrap();
        let q = value_iteration(&m, 1e-10).unwrap();
        for k in 1..=3 {
            let g = Grouping::option(k).unwrap();
            let view = grouped_view(&m, &g).unwrap();
            assert_eq!(view.state_sizes(), &[4, 2]);
            let qg = value_iteration(&view, 1e-10).unwrap();
            for s in 0..8 {
                let sl = m.state_locals(s);
                let gs = (sl[g.groups[0][0]] * 2 + sl[g.groups[0][1]]) * 2 + sl[g.groups[1][0]];
                for a in 0..8 {
                    let al = m.action_locals(a);
                    let ga = (al[g.groups[0][0]] * 2 + al[g.groups[0][1]]) * 2 + al[g.groups[1][0]];
                    assert!((q.get(s, a) - qg.get(gs, ga)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn random_generator_witness() {
        for seed in 0..5 {
            let spec = RandomMdpSpec::new(vec![2, 2], vec![2, 2], 0.3, 0.9, seed);
            let (m, w) = random_factored_instance(&spec).unwrap();
            assert!(max_tv_gap(&m, &w).unwrap() <= 0.3 + 1e-12);
            let cfg = DependenceConfig { bracket_resolution: None, ..Default::default() };
            assert!(optimize_dependence(&m, &cfg).unwrap().value <= 0.3 + 1e-6);
        }
        let spec = RandomMdpSpec::new(vec![3, 2], vec![2, 3], 0.0, 0.9, 7);
        let m = random_factored_mdp(&spec).unwrap();
        let cfg = DependenceConfig { bracket_resolution: None, ..Default::default() };
        assert!(optimize_dependence(&m, &cfg).unwrap().value <= 1e-8);
        let spec = RandomMdpSpec::new(vec![2], vec![2], 1.0, 0.9, 7);
        assert!(validate(&random_factored_mdp(&spec).unwrap().to_spec()).is_valid());
    }
}
