//! Drives the command-line interface end to end in a temporary directory:
//! synth, train, eval and rank.
//!
//! Usage: cargo run --release --example cli_pipeline

use std::fs;

use syncrec::cli::main_with_args;

fn run(args: &[&str]) {
    println!("$ syncrec {}", args.join(" "));
    let code = main_with_args(std::iter::once("syncrec").chain(args.iter().copied()));
    assert_eq!(code, 0, "command failed");
}

fn main() -> std::io::Result<()> {
    let root = std::env::temp_dir().join(format!("syncrec-cli-{}", std::process::id()));
    let data = root.join("data");
    let runs = root.join("runs");
    let (data_s, runs_s) = (data.to_string_lossy().into_owned(), runs.to_string_lossy().into_owned());

    run(&["--out", &data_s, "synth", "--users", "400"]);
    run(&["--out", &runs_s, "train", &data_s, "--max-epochs", "2"]);
    let run_dir = fs::read_dir(&runs)?.next().expect("one run")?.path();
    let checkpoint = run_dir.join("checkpoint");
    let ckpt_s = checkpoint.to_string_lossy().into_owned();
    run(&["eval", &ckpt_s, &data_s]);

    let prefix = root.join("prefix.txt");
    fs::write(&prefix, "# a short history\n3 210 5\n415\n")?;
    run(&["rank", &ckpt_s, &prefix.to_string_lossy(), "--domain", "2", "--k", "5"]);
    fs::remove_dir_all(&root)?;
    Ok(())
}
