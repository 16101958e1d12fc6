//! Replays one uniform run's gate-load trace under `dynamic` and `inverse`
//! and prints each round's weight change side by side with their rank
//! correlation.
//!
//! `cargo run --release --example replay_inverse -- [key=value ...]`

use moemix::cli_io::{load_config, replay_trace};
use moemix::scheduler::{Policy, RoundWeights};
use moemix::trainer::run_training;

fn changes(rounds: &[RoundWeights], initial: &[f64]) -> Vec<Vec<f64>> {
    let mut prev = initial.to_vec();
    rounds
        .iter()
        .map(|r| {
            let d = r.weights.iter().zip(&prev).map(|(a, b)| a - b).collect();
            prev = r.weights.clone();
            d
        })
        .collect()
}

fn ranks(v: &[f64]) -> Vec<f64> {
    v.iter()
        .map(|x| {
            let below = v.iter().filter(|y| *y < x).count() as f64;
            let ties = v.iter().filter(|y| *y == x).count() as f64;
            below + (ties + 1.0) / 2.0
        })
        .collect()
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

fn main() -> moemix::Result<()> {
    let overrides: Vec<String> = std::env::args().skip(1).collect();
    let mut cfg = load_config(None, &overrides)?;
    cfg.scheduler.policy = Policy::Uniform;
    let rec = run_training(&cfg)?;
    let trace = rec.gate_load_trace();
    let n = rec.dataset_names.len();
    let uniform = vec![1.0 / n as f64; n];

    let mut sched = cfg.resolved().scheduler;
    sched.policy = Policy::Dynamic;
    let dynamic = replay_trace(&trace, &sched)?.1;
    sched.policy = Policy::Inverse;
    let inverse = replay_trace(&trace, &sched)?.1;
    let (dd, di) = (changes(&dynamic, &uniform), changes(&inverse, &uniform));

    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:+.4}")).collect::<Vec<_>>().join(" ");
    println!("datasets {:?}", rec.dataset_names);
    for r in 0..dynamic.len() {
        let rho = pearson(&ranks(&dd[r]), &ranks(&di[r]));
        println!(
            "round {:>2} delta {} | dyn w {} dw {} | inv w {} dw {} | rho {rho:+.2}",
            dynamic[r].round,
            fmt(&dynamic[r].signal),
            fmt(&dynamic[r].weights),
            fmt(&dd[r]),
            fmt(&inverse[r].weights),
            fmt(&di[r]),
        );
    }
    Ok(())
}
