//! Logs the per-step loss components: per-domain single and cross losses,
//! the negative transfer gap, the domain weights and the mutual-information
//! terms, for the full model and each ablation.
//!
//! Usage: cargo run --release --example loss_components -- [steps]

use syncrec::evaluation::make_split;
use syncrec::seqdata::make_batch;
use syncrec::synthgen::{generate, SynthConfig};
use syncrec::training::{Preset, TrainConfig, Trainer};

fn fmt(xs: &[f64]) -> String {
    let parts: Vec<String> = xs.iter().map(|x| format!("{x:.3}")).collect();
    format!("[{}]", parts.join(" "))
}

fn main() -> syncrec::Result<()> {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    let data = generate(&SynthConfig { users: 400, ..SynthConfig::default() })?;
    let sequences = make_split(&data.sequences()).training_sequences();
    let base = TrainConfig::preset(Preset::Desk);
    let variants = [
        ("full", base.clone()),
        ("no-lc-ntg", TrainConfig { lc_ntg: false, ..base.clone() }),
        ("no-sc-mim", TrainConfig { sc_mim: false, ..base.clone() }),
        ("no-acmoe-sg", TrainConfig { acmoe_sg: false, ..base.clone() }),
    ];
    for (name, config) in variants {
        println!("== {name}");
        let mut trainer = Trainer::new(&config, &data.vocab)?;
        for step in 0..steps {
            let start = (step * config.batch_size) % (sequences.len() - config.batch_size);
            let batch = make_batch(&sequences[start..start + config.batch_size], config.steps, &data.vocab)?;
            let r = trainer.step_batch(&batch)?;
            if step % (steps / 5).max(1) == 0 || step + 1 == steps {
                println!(
                    "step {:>4} total {:.3} single {} cross {} phi {} lambda {} sc-mim {}",
                    r.step,
                    r.total,
                    fmt(&r.single),
                    fmt(&r.cross),
                    fmt(&r.phi),
                    fmt(&r.lambda),
                    fmt(&r.scmim)
                );
            }
        }
    }
    Ok(())
}
