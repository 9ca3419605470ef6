//! Trains the full model, the vanilla mixture ablation and a single-domain
//! model on the default synthetic scenario and compares test MRR@10 on the
//! unrelated domain.
//!
//! Usage: cargo run --release --example negative_transfer -- [seeds] [max_epochs]

use std::time::Instant;

use syncrec::evaluation::{evaluate, evaluate_single_domain, make_split, Sampling, Stage};
use syncrec::synthgen::{generate, SynthConfig};
use syncrec::training::{fit_split, Preset, TrainConfig};

fn main() -> syncrec::Result<()> {
    env_logger::init();
    let args: Vec<String> = std::env::args().collect();
    let seeds: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let max_epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(30);
    let synth = SynthConfig::default();
    let data = generate(&synth)?;
    let unrelated = 2;
    let split = make_split(&data.sequences());
    let sampling = Sampling { seed: 0, epoch: 0, with_replacement: false };

    for seed in 0..seeds {
        let base = TrainConfig { seed, max_epochs, ..TrainConfig::preset(Preset::Desk) };
        let variants = [
            ("full", base.clone()),
            ("vanilla", TrainConfig { acmoe_sg: false, lc_ntg: false, ..base.clone() }),
        ];
        for (name, cfg) in variants {
            let t = Instant::now();
            let out = fit_split(split.clone(), &data.vocab, &cfg, None)?;
            let report = evaluate(&out.best.model, &split, Stage::Test, &data.vocab, sampling)?;
            let mrr: Vec<String> = (0..3).map(|d| format!("{:.4}", report.mrr(d).unwrap_or(0.0))).collect();
            println!(
                "seed {seed} {name:<8} epochs {:>2} best {:?} test MRR@10 by domain {mrr:?} ({:.0}s)",
                out.epochs.len(),
                out.best.early.best_epoch,
                t.elapsed().as_secs_f64()
            );
        }
        let t = Instant::now();
        let own: Vec<_> = data.sequences().iter().map(|s| s.restrict_to(unrelated)).filter(|s| !s.is_empty()).collect();
        let plain = TrainConfig { acmoe_sg: false, lc_ntg: false, sc_mim: false, ..base.clone() };
        let out = fit_split(make_split(&own), &data.vocab, &plain, None)?;
        let m = evaluate_single_domain(&out.best.model, &split, unrelated, &data.vocab, sampling)?;
        println!(
            "seed {seed} single   epochs {:>2} unrelated-domain MRR@10 {:.4} ({:.0}s)",
            out.epochs.len(),
            m.map_or(0.0, |m| m.mrr10),
            t.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
