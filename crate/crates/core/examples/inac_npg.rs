//! Independent natural actor-critic on a coupled MDP, with the TD critic
//! and with the exact factor critic, plus the joint-policy identity behind
//! the independent update.

use ilmarl::envs::{random_factored_instance, RandomMdpSpec};
use ilmarl::inac::{inac_run, npg_equivalence_check, Critic, EtaMode, Exploration, InacConfig, SoftmaxParams};
use ilmarl::mdp::Table;

fn main() -> ilmarl::Result<()> {
    let (mdp, kernel) = random_factored_instance(&RandomMdpSpec::new(vec![2, 2], vec![2, 2], 0.1, 0.9, 5))?;

    let sampled = InacConfig {
        t: 8,
        k: 20_000,
        seed: 2,
        // the policy-space schedule turns greedy after one step, so the
        // critic samples from an ε-mixed policy
        exploration: Exploration::Constant { epsilon: 0.1 },
        ..InacConfig::default()
    };
    let exact = InacConfig {
        critic: Critic::Exact { kernel },
        ..sampled.clone()
    };
    for (name, cfg) in [("td critic", &sampled), ("exact critic", &exact)] {
        let res = inac_run(&mdp, cfg)?;
        let gaps: Vec<String> = res
            .record
            .series("optimality_gap", None)
            .iter()
            .map(|(_, g)| format!("{g:.3}"))
            .collect();
        println!("{name:<13} gap by iteration: {}", gaps.join(" "));
    }

    // a raw-parameter step and the direct joint update agree
    let theta = SoftmaxParams::zeros(&mdp);
    let qs = vec![Table::from_fn(2, 2, |s, a| (s + 2 * a) as f64 * 0.3); 2];
    println!("npg deviation at eta = 1.5: {:.2e}", npg_equivalence_check(&theta, 1.5, &qs)?);

    let mut etas = Vec::new();
    for t in 0..4 {
        etas.push(EtaMode::Theorem.eta(t, &mdp, &etas));
    }
    let shown: Vec<String> = etas.iter().map(|e| format!("{e:.3e}")).collect();
    println!("theorem step sizes: {}", shown.join(" "));
    Ok(())
}
