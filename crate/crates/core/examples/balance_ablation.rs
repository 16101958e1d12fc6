//! Toggles the frozen gate, the balance loss and the gate noise one at a time
//! and reports routing balance and held-out loss.
//!
//! `cargo run --release --example balance_ablation -- [total_steps=500 ...]`

use moemix::cli_io::load_config;
use moemix::trainer::run_training_on;

fn main() -> moemix::Result<()> {
    let mut overrides = vec!["total_steps=500".to_string()];
    overrides.extend(std::env::args().skip(1));
    let base = load_config(None, &overrides)?;
    let corpora = base.data.load()?;
    let variants: [(&str, fn(&mut moemix::trainer::RunConfig)); 4] = [
        ("all on", |_| {}),
        ("trainable gate", |c| c.model.freeze_gate = false),
        ("no balance loss", |c| c.model.balance_loss_coeff = 0.0),
        ("no gate noise", |c| c.model.gate_noise_std = 0.0),
    ];
    for (name, tweak) in variants {
        let mut cfg = base.clone();
        tweak(&mut cfg);
        let rec = run_training_on(&cfg, &corpora)?;
        let tail = &rec.steps[rec.steps.len().saturating_sub(50)..];
        let mean = |f: &dyn Fn(&moemix::trainer::StepMetrics) -> f64| tail.iter().map(f).sum::<f64>() / tail.len() as f64;
        println!(
            "{name:<16} CV2(O) {:.4}  CV2(G) {:.4}  macro loss {:.4}  weights {:.3?}",
            mean(&|s| s.cv2_load.iter().sum::<f64>() / s.cv2_load.len() as f64),
            mean(&|s| s.cv2_importance.iter().sum::<f64>() / s.cv2_importance.len() as f64),
            rec.macro_loss(),
            rec.final_weights()
        );
    }
    Ok(())
}
