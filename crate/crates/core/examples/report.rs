//! Trains a small uniform and dynamic run, then consolidates their summaries
//! into one tidy CSV.
//!
//! `cargo run --release --example report -- [total_steps=300 ...]`

use moemix::cli_io::{collect_report, load_config, write_report};
use moemix::scheduler::Policy;
use moemix::trainer::run_training_on;

fn main() -> moemix::Result<()> {
    let mut overrides = vec!["total_steps=300".to_string()];
    overrides.extend(std::env::args().skip(1));
    let base = load_config(None, &overrides)?;
    let root = std::env::temp_dir().join("moemix-report");
    let corpora = base.data.load()?;
    let mut dirs = Vec::new();
    for policy in [Policy::Uniform, Policy::Dynamic] {
        let mut cfg = base.clone();
        cfg.scheduler.policy = policy;
        cfg.run_id = policy.to_string();
        cfg.output_dir = Some(root.clone());
        let rec = run_training_on(&cfg, &corpora)?;
        dirs.extend(rec.run_dir);
    }
    let report = collect_report(&dirs);
    let out = root.join("report");
    write_report(&report, &out)?;
    print!("{}", std::fs::read_to_string(out.with_extension("csv")).map_err(|e| moemix::Error::io(&out, e))?);
    Ok(())
}
