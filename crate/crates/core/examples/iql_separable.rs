//! Independent Q-learning on a separable MDP, where the local greedy
//! policies recover the joint optimum. Prints the distance to the projected
//! target along the run and the final policy comparison.

use ilmarl::envs::{random_factored_mdp, RandomMdpSpec};
use ilmarl::iql::{iql_run, IqlConfig};
use ilmarl::mdp::joint_policy_of;
use ilmarl::solvers::{greedy_policy, value_iteration, DEFAULT_TOL};

fn main() -> ilmarl::Result<()> {
    let mdp = random_factored_mdp(&RandomMdpSpec::new(vec![2, 3], vec![2, 2], 0.0, 0.8, 3))?;
    let cfg = IqlConfig {
        k: 200_000,
        eval_stride: 20_000,
        seed: 1,
        ..IqlConfig::default()
    };
    let res = iql_run(&mdp, &cfg)?;
    println!("alpha = {:.3}, k0 = {:.1}", res.step_sizes.alpha, res.step_sizes.k0);
    for i in 0..mdp.n() {
        let errs: Vec<String> = res
            .record
            .series("q_error", Some(i))
            .iter()
            .map(|(k, e)| format!("{k}:{e:.3}"))
            .collect();
        println!("agent {i} error: {}", errs.join(" "));
    }
    let learned = joint_policy_of(&res.policy).modes();
    let optimal = greedy_policy(&value_iteration(&mdp, DEFAULT_TOL)?).modes();
    println!("learned {learned:?}");
    println!("optimal {optimal:?}");
    println!("match: {}", learned == optimal);
    Ok(())
}
