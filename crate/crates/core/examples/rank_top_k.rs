//! Top-k recommendations in each domain for one user's history, from a
//! briefly trained model.
//!
//! Usage: cargo run --release --example rank_top_k -- [user_index] [k]

use syncrec::evaluation::top_k;
use syncrec::synthgen::{generate, SynthConfig};
use syncrec::training::{fit, Preset, TrainConfig};

fn main() -> syncrec::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let user: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let k: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(5);
    let synth = SynthConfig { users: 600, ..SynthConfig::default() };
    let data = generate(&synth)?;
    let config = TrainConfig { max_epochs: 3, ..TrainConfig::preset(Preset::Desk) };
    let model = fit(&data, &config, None)?.best.model;

    let seq = &data.sequences()[user];
    let tail: Vec<String> = seq.tokens.iter().rev().take(8).rev().map(|t| t.to_string()).collect();
    println!("user {} history ({} items), most recent: {}", seq.user, seq.len(), tail.join(" "));
    for d in 0..data.vocab.num_domains() {
        let ranked = top_k(&model, &seq.tokens, d, k, &data.vocab)?;
        let items: Vec<String> = ranked.iter().map(|(i, s)| format!("{i} ({s:.3})")).collect();
        println!("  {}: {}", data.vocab.domain_name(d), items.join(", "));
    }
    Ok(())
}
