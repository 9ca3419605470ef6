//! Generates a small synthetic dataset, saves it, and prints how often each
//! domain follows each other domain.
//!
//! Usage: cargo run --release --example synth_dataset -- [out_dir]

use syncrec::seqdata::{Dataset, INTERACTIONS_FILE};
use syncrec::synthgen::{generate, SynthConfig};

fn main() -> syncrec::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "data-example".into());
    let config = SynthConfig { users: 500, ..SynthConfig::default() };
    let data = generate(&config)?;
    data.save(out.as_ref())?;
    println!("{} users, {} interactions -> {out}/{INTERACTIONS_FILE}", config.users, data.interactions.len());

    let reloaded = Dataset::load(out.as_ref())?;
    assert_eq!(reloaded.interactions, data.interactions);

    let n = config.num_domains();
    let mut follows = vec![vec![0usize; n]; n];
    for seq in reloaded.sequences() {
        for w in seq.domains.windows(2) {
            follows[w[0]][w[1]] += 1;
        }
    }
    println!("domain transitions (row: previous, column: next)");
    for (d, row) in follows.iter().enumerate() {
        println!("  {}: {row:?}", reloaded.vocab.domain_name(d));
    }
    Ok(())
}
