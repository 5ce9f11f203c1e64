//! Exact oracles on a random two-agent MDP: value iteration, the greedy
//! policy, policy evaluation, the stationary analysis and the projected
//! fixed points that independent learners converge to.

use ilmarl::envs::{random_factored_mdp, RandomMdpSpec};
use ilmarl::mdp::{joint_policy_of, FactoredPolicy};
use ilmarl::solvers::{
    aggregated_fixed_point, average_reward, greedy_policy, mixing_profile, policy_q, stationary_distribution,
    value_iteration_trace, OperatorKind, DEFAULT_TOL,
};

fn main() -> ilmarl::Result<()> {
    let mdp = random_factored_mdp(&RandomMdpSpec::new(vec![3, 2], vec![2, 2], 0.2, 0.9, 11))?;
    let trace = value_iteration_trace(&mdp, DEFAULT_TOL)?;
    println!("value iteration: {} sweeps", trace.diffs.len());
    let pi_star = greedy_policy(&trace.q);
    println!("greedy optimal actions per joint state: {:?}", pi_star.modes());
    println!("optimal average reward: {:.6}", average_reward(&mdp, &pi_star, DEFAULT_TOL)?);

    let uniform = joint_policy_of(&FactoredPolicy::uniform(&mdp));
    let q_uniform = policy_q(&mdp, &uniform, DEFAULT_TOL)?;
    println!("max |Q* - Q_uniform| = {:.4}", trace.q.max_abs_diff(&q_uniform));

    let st = stationary_distribution(&mdp, &uniform, DEFAULT_TOL)?;
    println!("uniform policy: sigma = {:.4}, sigma' = {:.4}", st.sigma, st.sigma_prime);
    let mix = mixing_profile(&mdp, &uniform, 32)?;
    println!("mixing fit: M1 = {:.3}, M2 = {:.3}", mix.m1_hat, mix.m2_hat);

    for i in 0..mdp.n() {
        let opt = aggregated_fixed_point(&mdp, i, &st.d, OperatorKind::Optimality, DEFAULT_TOL)?;
        let eval = aggregated_fixed_point(&mdp, i, &st.d, OperatorKind::Evaluation(&uniform), DEFAULT_TOL)?;
        println!("agent {i}: IQL target {:?}", Vec::<Vec<f64>>::from(opt));
        println!("agent {i}: ITD target {:?}", Vec::<Vec<f64>>::from(eval));
    }
    Ok(())
}
