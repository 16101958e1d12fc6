//! Drives every trace-only policy with the same synthetic distance sequence
//! and prints the weight paths; the dynamic path is also written as CSV.
//!
//! `cargo run --release --example scheduler_trajectory -- [eta] [c]`

use moemix::scheduler::{
    path_total_variation, write_weight_trajectory, Policy, RoundInputs, RoundWeights, Scheduler, SchedulerConfig,
    SchedulerContext,
};

fn main() -> moemix::Result<()> {
    let mut args = std::env::args().skip(1);
    let eta: f64 = args.next().map_or(10.0, |s| s.parse().expect("eta"));
    let c: f64 = args.next().map_or(0.05, |s| s.parse().expect("c"));
    let names: Vec<String> = ["A", "B", "C", "D"].iter().map(|s| s.to_string()).collect();
    // A and B resemble each other, C and D are distinct, D drifts upward
    let deltas: Vec<Vec<f64>> = (0..10)
        .map(|t| vec![0.12, 0.11, 0.17, 0.15 + 0.004 * t as f64])
        .collect();

    for policy in [Policy::Dynamic, Policy::Inverse, Policy::Random, Policy::Sequential, Policy::Uniform] {
        let cfg = SchedulerConfig {
            policy,
            eta,
            c,
            ..SchedulerConfig::default()
        };
        let ctx = SchedulerContext {
            dataset_names: names.clone(),
            ..SchedulerContext::default()
        };
        let mut s = Scheduler::new(cfg, ctx)?;
        let initial = s.weights().w.clone();
        let mut rounds = Vec::new();
        for (t, d) in deltas.iter().enumerate() {
            let signal = s.update(&RoundInputs {
                gate_delta: Some(d),
                current_losses: None,
            })?;
            rounds.push(RoundWeights {
                round: t + 1,
                step: (t + 1) * 100,
                weights: s.weights().w.clone(),
                signal,
            });
        }
        println!("{policy}");
        for r in rounds.iter().step_by(3) {
            let w: Vec<String> = r.weights.iter().map(|x| format!("{x:.3}")).collect();
            println!("  round {:>2}  {}", r.round, w.join(" "));
        }
        let tv = path_total_variation(&initial, &rounds);
        println!("  total variation {:.3?}", tv);
        if policy == Policy::Dynamic {
            let path = std::env::temp_dir().join("moemix-dynamic-rounds.csv");
            write_weight_trajectory(&path, &names, policy, &rounds)?;
            println!("  wrote {}", path.display());
        }
    }
    Ok(())
}
