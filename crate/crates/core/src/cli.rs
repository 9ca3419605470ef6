//! Command-line front end: `synth`, `train`, `eval` and `rank`.
//!
//! Settings are layered: preset, then the `[synth]`/`[train]` tables of the
//! `--config` TOML file, then command-line flags.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{evaluate, make_split, top_k, RankingReport, Sampling, Stage};
use crate::seqdata::{Dataset, ItemId, INTERACTIONS_FILE};
use crate::synthgen::{generate, SynthConfig};
use crate::training::{fit, Preset, Trainer, TrainConfig, CHECKPOINT_DIR};

pub const CONFIG_ECHO_FILE: &str = "config.toml";
pub const THREADS_ENV: &str = "SYNCREC_THREADS";

#[derive(Debug, Parser)]
#[command(name = "syncrec", version, about = "Cross-domain sequential recommendation")]
pub struct Cli {
    /// TOML file with optional `preset`, `[synth]` and `[train]` tables.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub preset: Option<Preset>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset (interactions.tsv + vocab.json).
    Synth {
        #[arg(long)]
        users: Option<usize>,
    },
    /// Train on a dataset directory; writes a timestamped run directory.
    Train {
        data: PathBuf,
        #[command(flatten)]
        ablation: Ablation,
        #[arg(long)]
        max_epochs: Option<usize>,
    },
    /// Leave-one-out test metrics for a checkpoint.
    Eval { checkpoint: PathBuf, data: PathBuf },
    /// Top-k items of one domain for a history read from a file of item ids.
    Rank {
        checkpoint: PathBuf,
        prefix: PathBuf,
        #[arg(long)]
        domain: usize,
        #[arg(long, default_value_t = 10)]
        k: usize,
    },
}

#[derive(Debug, Args, Clone, Copy, Default)]
pub struct Ablation {
    /// Use the plain cross-domain loss instead of the λ-weighted one.
    #[arg(long)]
    pub no_lc_ntg: bool,
    /// Drop the single/cross mutual-information term.
    #[arg(long)]
    pub no_sc_mim: bool,
    /// Mix experts without the stop-gradient partition.
    #[arg(long)]
    pub no_acmoe_sg: bool,
}

impl Ablation {
    pub fn apply(&self, config: &mut TrainConfig) {
        config.lc_ntg &= !self.no_lc_ntg;
        config.sc_mim &= !self.no_sc_mim;
        config.acmoe_sg &= !self.no_acmoe_sg;
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    preset: Option<Preset>,
    synth: Option<toml::Table>,
    train: Option<toml::Table>,
}

/// Effective settings, echoed into run directories.
#[derive(Debug, Serialize)]
struct Echo<'a> {
    preset: Preset,
    #[serde(skip_serializing_if = "Option::is_none")]
    synth: Option<&'a SynthConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    train: Option<&'a TrainConfig>,
}

fn read_config_file(path: Option<&Path>) -> Result<ConfigFile> {
    let Some(path) = path else { return Ok(ConfigFile::default()) };
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Overlays `table` on the serialized `base` and deserializes the result,
/// rejecting unknown keys.
fn layered<T: Serialize + for<'de> Deserialize<'de>>(base: &T, table: Option<&toml::Table>, section: &str) -> Result<T> {
    let mut value = toml::Table::try_from(base).map_err(|e| Error::Config(e.to_string()))?;
    if let Some(t) = table {
        for (k, v) in t {
            value.insert(k.clone(), v.clone());
        }
    }
    value.try_into().map_err(|e| Error::Config(format!("[{section}]: {e}")))
}

fn echo_config(dir: &Path, echo: &Echo) -> Result<()> {
    let text = toml::to_string(echo).map_err(|e| Error::Config(e.to_string()))?;
    let path = dir.join(CONFIG_ECHO_FILE);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v.parse().map_err(|_| Error::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
        if n == 0 {
            return Err(Error::Config(format!("{THREADS_ENV} must be positive")));
        }
        // a pool may already exist when called twice in one process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

fn new_run_dir(root: &Path) -> Result<PathBuf> {
    let secs = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let mut dir = root.join(format!("run-{secs}"));
    let mut n = 1;
    while dir.exists() {
        dir = root.join(format!("run-{secs}-{n}"));
        n += 1;
    }
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

/// Reads whitespace-separated item ids; `#` starts a comment.
pub fn read_prefix(path: &Path) -> Result<Vec<ItemId>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut items = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("");
        for tok in line.split_whitespace() {
            let item = tok.parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!("item id {tok:?} is not an integer"),
            })?;
            items.push(item);
        }
    }
    Ok(items)
}

fn write_report(dir: &Path, report: &RankingReport) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json = dir.join("report-test.json");
    fs::write(&json, serde_json::to_string_pretty(report)? + "\n").map_err(|e| Error::io(&json, e))?;
    let rows = dir.join("report-test.tsv");
    fs::write(&rows, report.to_rows()).map_err(|e| Error::io(&rows, e))
}

pub fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    let file = read_config_file(cli.config.as_deref())?;
    let preset = cli.preset.or(file.preset).unwrap_or(Preset::Desk);
    match cli.command {
        Command::Synth { users } => {
            let mut synth: SynthConfig = layered(&SynthConfig::default(), file.synth.as_ref(), "synth")?;
            if let Some(s) = cli.seed {
                synth.seed = s;
            }
            if let Some(u) = users {
                synth.users = u;
            }
            let out = cli.out.unwrap_or_else(|| PathBuf::from("data"));
            let data = generate(&synth)?;
            data.save(&out)?;
            echo_config(&out, &Echo { preset, synth: Some(&synth), train: None })?;
            println!("wrote {} interactions to {}", data.interactions.len(), out.join(INTERACTIONS_FILE).display());
        }
        Command::Train { data, ablation, max_epochs } => {
            let mut config: TrainConfig = layered(&TrainConfig::preset(preset), file.train.as_ref(), "train")?;
            if let Some(s) = cli.seed {
                config.seed = s;
            }
            if let Some(e) = max_epochs {
                config.max_epochs = e;
            }
            ablation.apply(&mut config);
            config.validate()?;
            let dataset = Dataset::load(&data)?;
            let run_dir = new_run_dir(&cli.out.unwrap_or_else(|| PathBuf::from("runs")))?;
            echo_config(&run_dir, &Echo { preset, synth: None, train: Some(&config) })?;
            info!("training into {}", run_dir.display());
            let outcome = fit(&dataset, &config, Some(&run_dir))?;
            let sampling = Sampling { seed: config.seed, epoch: 0, with_replacement: config.eval_with_replacement };
            let report = evaluate(&outcome.best.model, &outcome.split, Stage::Test, &dataset.vocab, sampling)?;
            write_report(&run_dir, &report)?;
            print!("{}", report.to_grid());
            println!("checkpoint: {}", run_dir.join(CHECKPOINT_DIR).display());
        }
        Command::Eval { checkpoint, data } => {
            let trainer = Trainer::load(&checkpoint)?;
            let dataset = Dataset::load(&data)?;
            trainer.check_data(&dataset.vocab)?;
            let split = make_split(&dataset.sequences());
            let seed = cli.seed.unwrap_or(trainer.config.seed);
            let sampling = Sampling { seed, epoch: 0, with_replacement: trainer.config.eval_with_replacement };
            let report = evaluate(&trainer.model, &split, Stage::Test, &dataset.vocab, sampling)?;
            let out = cli.out.unwrap_or_else(|| checkpoint.parent().map(Path::to_path_buf).unwrap_or_default());
            write_report(&out, &report)?;
            print!("{}", report.to_grid());
        }
        Command::Rank { checkpoint, prefix, domain, k } => {
            let trainer = Trainer::load(&checkpoint)?;
            let history = read_prefix(&prefix)?;
            if let Some(&bad) = history.iter().find(|&&i| !trainer.vocab.is_item(i)) {
                return Err(Error::Validation(format!("unknown item id {bad}")));
            }
            for (i, (item, score)) in top_k(&trainer.model, &history, domain, k, &trainer.vocab)?.iter().enumerate() {
                println!("{}\t{item}\t{score:.6}", i + 1);
            }
        }
    }
    Ok(())
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
