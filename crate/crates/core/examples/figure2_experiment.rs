//! Grouping study on the synthetic three-agent MDP.
//!
//! Trains IQL and INAC on each 2-super-agent grouping with the published
//! protocol and prints the seed-mean final normalized reward. Pass a run
//! count as the first argument (default 20) and an output directory as the
//! second to also write the CSVs.
//!
//! ```text
//! cargo run --release --example figure2_experiment -- 20 out/
//! ```

use ilmarl::harness::{final_summary, run_experiment, run_seeds, Algorithm, ExperimentConfig};

fn main() -> ilmarl::Result<()> {
    let mut args = std::env::args().skip(1);
    let runs: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(20);
    let out = args.next();

    println!("{:<5} {:<8} {:>10} {:>10} {:>10}", "alg", "grouping", "mean", "std", "se");
    for alg in [Algorithm::Iql, Algorithm::Inac] {
        for option in 1..=3 {
            let mut cfg = ExperimentConfig::figure2(alg, option, runs);
            let record = match &out {
                Some(dir) => {
                    cfg.out_dir = dir.into();
                    run_experiment(&cfg)?.record
                }
                None => run_seeds(&cfg)?,
            };
            let (mean, std, n) = final_summary(&record, "normalized_reward").expect("runs recorded");
            println!(
                "{:<5} {:<8} {:>10.4} {:>10.4} {:>10.4}",
                alg.name(),
                format!("option{option}"),
                mean,
                std,
                std / (n as f64).sqrt()
            );
        }
    }
    Ok(())
}
