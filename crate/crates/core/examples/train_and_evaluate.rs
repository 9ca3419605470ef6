//! Trains the desk preset on synthetic data and reports leave-one-out test
//! metrics per domain.
//!
//! Usage: cargo run --release --example train_and_evaluate -- [max_epochs]

use syncrec::evaluation::{evaluate, Sampling, Stage};
use syncrec::synthgen::{generate, SynthConfig};
use syncrec::training::{fit, Preset, TrainConfig};

fn main() -> syncrec::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let max_epochs = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(5);
    let data = generate(&SynthConfig { users: 800, ..SynthConfig::default() })?;
    let config = TrainConfig { max_epochs, ..TrainConfig::preset(Preset::Desk) };
    let outcome = fit(&data, &config, None)?;
    for e in &outcome.epochs {
        println!("epoch {:>2}  loss {:.4}  validation MRR@10 {:?}", e.epoch, e.mean_total, e.validation_mrr);
    }
    let sampling = Sampling { seed: config.seed, epoch: 0, with_replacement: false };
    let report = evaluate(&outcome.best.model, &outcome.split, Stage::Test, &data.vocab, sampling)?;
    print!("{}", report.to_grid());
    Ok(())
}
