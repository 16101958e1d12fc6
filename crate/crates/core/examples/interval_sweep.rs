//! Dynamic mixing at several evaluation intervals: shorter intervals mean more
//! updates and a longer weight path.
//!
//! `cargo run --release --example interval_sweep -- [seeds=0,1] [intervals=20,50,100,200] [key=value ...]`

use moemix::cli_io::load_config;
use moemix::scheduler::Policy;
use moemix::trainer::run_sweep;

fn list<T: std::str::FromStr>(s: &str) -> Vec<T> {
    s.split(',').map(|x| x.parse().ok().expect("list entry")).collect()
}

fn main() -> moemix::Result<()> {
    let mut seeds = vec![0u64];
    let mut intervals = vec![20usize, 50, 100, 200];
    let mut overrides = Vec::new();
    for arg in std::env::args().skip(1) {
        if let Some(v) = arg.strip_prefix("seeds=") {
            seeds = list(v);
        } else if let Some(v) = arg.strip_prefix("intervals=") {
            intervals = list(v);
        } else {
            overrides.push(arg);
        }
    }
    let base = load_config(None, &overrides)?;
    let jobs = std::thread::available_parallelism().map_or(1, |n| n.get());
    let table = run_sweep(&base, &[Policy::Dynamic], &seeds, &intervals, jobs)?;
    println!("{:>5} {:>5} {:>8} {:>8}  final weights", "m", "seed", "macro", "mean TV");
    for c in &table.cells {
        match &c.error {
            Some(e) => println!("{:>5} {:>5} failed: {e}", c.interval, c.seed),
            None => println!(
                "{:>5} {:>5} {:>8.4} {:>8.4}  {:.3?}",
                c.interval,
                c.seed,
                c.macro_loss,
                c.mean_total_variation,
                c.final_weights
            ),
        }
    }
    Ok(())
}
