//! Trains two epochs, saves a checkpoint, reloads it and continues; the
//! continued run matches one that never stopped.
//!
//! Usage: cargo run --release --example checkpoint_resume

use syncrec::evaluation::make_split;
use syncrec::synthgen::{generate, SynthConfig};
use syncrec::training::{Preset, TrainConfig, Trainer};

fn main() -> syncrec::Result<()> {
    let data = generate(&SynthConfig { users: 300, ..SynthConfig::default() })?;
    let sequences = make_split(&data.sequences()).training_sequences();
    let config = TrainConfig::preset(Preset::Desk);

    let mut straight = Trainer::new(&config, &data.vocab)?;
    let mut interrupted = Trainer::new(&config, &data.vocab)?;
    for _ in 0..2 {
        straight.run_epoch(&sequences, None)?;
        interrupted.run_epoch(&sequences, None)?;
    }
    let dir = std::env::temp_dir().join(format!("syncrec-checkpoint-{}", std::process::id()));
    interrupted.save(&dir)?;
    let mut resumed = Trainer::load(&dir)?;
    resumed.check_data(&data.vocab)?;
    println!("saved and reloaded at epoch {} step {} ({})", resumed.epoch, resumed.step, dir.display());

    let (_, a) = straight.run_epoch(&sequences, None)?;
    let (_, b) = resumed.run_epoch(&sequences, None)?;
    println!("third epoch mean loss: uninterrupted {a:.6}, resumed {b:.6}");
    let same = straight.model.store.iter().zip(resumed.model.store.iter()).all(|(x, y)| x.1.data == y.1.data);
    println!("parameters identical after resuming: {same}");
    std::fs::remove_dir_all(&dir).ok();
    Ok(())
}
