//! Uniform reference run followed by the loss-gap run on the same corpora.
//!
//! `cargo run --release --example refloss_protocol -- [total_steps=500 ...]`

use moemix::cli_io::load_config;
use moemix::trainer::run_refloss;

fn main() -> moemix::Result<()> {
    let mut overrides = vec!["total_steps=500".to_string()];
    overrides.extend(std::env::args().skip(1));
    let mut cfg = load_config(None, &overrides)?;
    cfg.run_id = "refloss".into();
    cfg.output_dir = Some(std::env::temp_dir().join("moemix-refloss"));
    let rec = run_refloss(&cfg)?;
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(" ");
    println!("reference losses  {}", fmt(&rec.reference));
    println!("phase 2 losses    {}", fmt(&rec.phase2.final_losses));
    println!("phase 2 weights   {}", fmt(rec.phase2.final_weights()));
    println!(
        "macro loss {:.4} -> {:.4}; optimizer steps {} = 2 x {}",
        rec.phase1.macro_loss(),
        rec.phase2.macro_loss(),
        rec.total_optimizer_steps(),
        cfg.total_steps
    );
    println!("outputs under {}", cfg.output_dir.unwrap().display());
    Ok(())
}
