//! Round trip of the MDP file format: build an MDP by hand, write it,
//! validate the text, and show what a broken file reports.

use ilmarl::mdp::{validate, FactoredMdp, MdpSpec};

fn main() -> ilmarl::Result<()> {
    // two agents with two states and one action each; agent 0 is the high digit
    let stay = [0.9, 0.1];
    let mut rows = Vec::new();
    for s in 0..4 {
        let (x, y) = (s >> 1, s & 1);
        rows.push(
            (0..4)
                .map(|t: usize| {
                    let (u, v) = (t >> 1, t & 1);
                    stay[(u != x) as usize] * stay[(v != y) as usize]
                })
                .collect::<Vec<f64>>(),
        );
    }
    let spec = MdpSpec {
        n: 2,
        local_state_sizes: vec![2, 2],
        local_action_sizes: vec![1, 1],
        gamma: 0.9,
        // reward 1 in local state 0
        rewards: vec![vec![vec![1.0], vec![0.0]]; 2],
        transition: vec![rows],
        transition_rewards: None,
        reward_caps: None,
        start_states: None,
    };
    println!("{}", serde_json::to_string(&spec)?);
    let mdp = FactoredMdp::new(&spec)?;

    let dir = std::env::temp_dir().join("ilmarl_mdp_json");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("toy.json");
    mdp.save(&path)?;
    let back = FactoredMdp::load(&path)?;
    println!("wrote {} ({} joint states), reload equal: {}", path.display(), back.num_states(), back.to_spec() == mdp.to_spec());

    let mut broken: MdpSpec = mdp.to_spec();
    broken.gamma = 1.0;
    broken.transition[0][2][3] = 0.5;
    broken.rewards[1][0][0] = f64::NAN;
    println!("a broken copy reports:\n{}", validate(&broken));
    Ok(())
}
