//! Exact check of the approximation lemmas on the synthetic groupings and
//! on random coupled instances, with the witness kernel standing in for the
//! minimizing one.

use ilmarl::envs::{reference_separable_kernel, random_factored_instance, synthetic3_option, RandomMdpSpec};
use ilmarl::harness::{verify_bounds, BoundsOptions};

fn main() -> ilmarl::Result<()> {
    let opts = BoundsOptions::default();
    for k in 1..=3 {
        let mdp = synthetic3_option(k)?;
        let report = verify_bounds(&mdp, &reference_separable_kernel(k, &mdp)?, &opts)?;
        println!("option {k}: E <= {:.3}, {} checks, {} violated", report.e_upper, report.checks.len(), report.violations().len());
        for c in report.checks.iter().filter(|c| c.name == "lemma3" || c.name == "lemma2") {
            println!("  {:<8} agent {:?}: {:>10.4} <= {:>10.4}", c.name, c.agent, c.lhs, c.rhs);
        }
    }

    let mut failed = 0;
    for seed in 0..20 {
        let spec = RandomMdpSpec::new(vec![2, 3], vec![2, 2], 0.05 * (seed % 10) as f64, 0.9, seed);
        let (mdp, witness) = random_factored_instance(&spec)?;
        failed += verify_bounds(&mdp, &witness, &opts)?.violations().len();
    }
    println!("20 random instances: {failed} violations");
    Ok(())
}
