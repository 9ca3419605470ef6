use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use syncrec::autograd::dot;
use syncrec::objectives::LossReport;
use syncrec::seqdata::{Vocabulary, INTERACTIONS_FILE, TSV_HEADER};
use syncrec::training::{Trainer, CHECKPOINT_DIR, LOSS_LOG_FILE};

fn syncrec(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_syncrec")).args(args).env("SYNCREC_THREADS", "1").output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = syncrec(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn synth(dir: &Path, users: usize, seed: u64) -> PathBuf {
    let data = dir.join(format!("data-{users}-{seed}"));
    ok(&["--out", &s(&data), "--seed", &seed.to_string(), "synth", "--users", &users.to_string()]);
    data
}

/// Trains one epoch; returns the run directory.
fn train(dir: &Path, data: &Path, extra: &[&str]) -> PathBuf {
    let runs = dir.join(format!("runs-{}", extra.join("")));
    let mut args = vec!["--out".to_string(), s(&runs), "train".into(), s(data), "--max-epochs".into(), "1".into()];
    args.extend(extra.iter().map(|a| a.to_string()));
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    ok(&args);
    fs::read_dir(&runs).unwrap().next().unwrap().unwrap().path()
}

#[test]
fn synth_writes_header_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = synth(dir.path(), 50, 3);
    let text = fs::read_to_string(a.join(INTERACTIONS_FILE)).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some(TSV_HEADER));
    let events = lines.count();
    let users: std::collections::HashSet<&str> =
        text.lines().skip(1).map(|l| l.split('\t').next().unwrap()).collect();
    assert_eq!(users.len(), 50);
    assert!((50 * 10..=50 * 40).contains(&events));

    let again = dir.path().join("again");
    ok(&["--out", &s(&again), "--seed", "3", "synth", "--users", "50"]);
    assert_eq!(fs::read(a.join(INTERACTIONS_FILE)).unwrap(), fs::read(again.join(INTERACTIONS_FILE)).unwrap());
    let other = synth(dir.path(), 50, 4);
    assert_ne!(text, fs::read_to_string(other.join(INTERACTIONS_FILE)).unwrap());
}

#[test]
fn rank_matches_brute_force_scores() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 80, 1);
    let run = train(dir.path(), &data, &[]);
    let checkpoint = run.join(CHECKPOINT_DIR);
    let prefix = dir.path().join("prefix.txt");
    fs::write(&prefix, "5 230 # comment\n410\n17\n").unwrap();

    let stdout = ok(&["rank", &s(&checkpoint), &s(&prefix), "--domain", "1", "--k", "7"]);
    let got: Vec<(usize, String)> = stdout
        .lines()
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            (f[1].parse().unwrap(), f[2].to_string())
        })
        .collect();

    let trainer = Trainer::load(&checkpoint).unwrap();
    let rep = trainer.model.encode_histories(&[&[5, 230, 410, 17]], &trainer.vocab).unwrap();
    let table = trainer.model.item_table();
    let mut scored: Vec<(usize, f64)> =
        trainer.vocab.domain_range(1).map(|i| (i, dot(rep.row(0), table.row(i)))).collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let expected: Vec<(usize, String)> = scored[..7].iter().map(|&(i, v)| (i, format!("{v:.6}"))).collect();
    assert_eq!(got, expected);

    let out = syncrec(&["rank", &s(&checkpoint), &s(&prefix), "--domain", "1", "--k", "0"]);
    assert!(out.status.success());
    fs::write(&prefix, "5 99999\n").unwrap();
    assert_eq!(syncrec(&["rank", &s(&checkpoint), &s(&prefix), "--domain", "1"]).status.code(), Some(1));
}

#[test]
fn eval_reports_and_rejects_other_data() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 80, 1);
    let run = train(dir.path(), &data, &[]);
    let checkpoint = run.join(CHECKPOINT_DIR);
    let grid = ok(&["eval", &s(&checkpoint), &s(&data)]);
    assert!(grid.contains("MRR@10"));
    assert!(run.join("report-test.tsv").exists());

    // a dataset over a different vocabulary cannot be evaluated with this checkpoint
    let other = dir.path().join("other");
    fs::create_dir_all(&other).unwrap();
    let vocab = Vocabulary::new(&[10, 10]).unwrap();
    vocab.save(&other.join("vocab.json")).unwrap();
    fs::write(other.join(INTERACTIONS_FILE), format!("{TSV_HEADER}\nu\t1\t0\t1\nu\t12\t1\t2\nu\t3\t0\t3\n")).unwrap();
    let out = syncrec(&["eval", &s(&checkpoint), &s(&other)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("hash mismatch"));
}

#[test]
fn no_sc_mim_zeroes_only_the_mutual_information_terms() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 60, 2);
    let read = |run: &Path| -> Vec<LossReport> {
        fs::read_to_string(run.join(LOSS_LOG_FILE)).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
    };
    let full = read(&train(dir.path(), &data, &[]));
    let ablated = read(&train(dir.path(), &data, &["--no-sc-mim"]));
    assert!(ablated.iter().all(|r| r.scmim.iter().all(|&v| v == 0.0)));
    assert!(full[0].scmim.iter().any(|&v| v != 0.0));
    assert_eq!(full[0].single, ablated[0].single);
    assert_eq!(full[0].cross, ablated[0].cross);
}

#[test]
fn bad_config_files_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[train]\nlearning_rat = 0.1\n").unwrap();
    let data = synth(dir.path(), 20, 1);
    let out = syncrec(&["--config", &s(&cfg), "train", &s(&data)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rat"));
    assert_eq!(syncrec(&["eval", "/nonexistent/checkpoint", &s(&data)]).status.code(), Some(2));
}
