//! Dynamic versus uniform mixing on the default four-domain manifest.
//!
//! `cargo run --release --example compare_policies -- [seeds=N] [policies=a,b] [key=value ...]`
//! where each `key=value` is a dotted config override such as `total_steps=500`.

use std::time::Instant;

use moemix::cli_io::load_config;
use moemix::scheduler::Policy;
use moemix::trainer::run_training_on;

fn main() -> moemix::Result<()> {
    let mut seeds = 2u64;
    let mut policies = vec![Policy::Uniform, Policy::Dynamic];
    let mut overrides = Vec::new();
    for arg in std::env::args().skip(1) {
        if let Some(n) = arg.strip_prefix("seeds=") {
            seeds = n.parse().expect("seed count");
        } else if let Some(list) = arg.strip_prefix("policies=") {
            policies = list.split(',').map(Policy::parse).collect::<moemix::Result<_>>()?;
        } else {
            overrides.push(arg);
        }
    }
    let base = load_config(None, &overrides)?;
    let corpora = base.data.load()?;
    println!("datasets {:?}", corpora.names());
    let mut wins = 0;
    for seed in 0..seeds {
        let mut macros = Vec::new();
        for &policy in &policies {
            let mut cfg = base.clone();
            cfg.seed = seed;
            cfg.scheduler.policy = policy;
            let t = Instant::now();
            let rec = run_training_on(&cfg, &corpora)?;
            let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" ");
            println!(
                "seed {seed} {policy:<8} macro {:.5} | loss {} | w {} | delta0 {} | tv {:.3} | {:.1}s",
                rec.macro_loss(),
                fmt(&rec.final_losses),
                fmt(rec.final_weights()),
                fmt(&rec.initial_probe.distances.avg),
                rec.summary().mean_total_variation,
                t.elapsed().as_secs_f64()
            );
            macros.push(rec.macro_loss());
        }
        if macros.len() > 1 && macros[1] <= macros[0] {
            wins += 1;
        }
    }
    println!("{} <= {} in {wins}/{seeds} seeds", policies.last().unwrap(), policies[0]);
    Ok(())
}
