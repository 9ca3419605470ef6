//! Optimization loop, trainer state and checkpoints.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::acmoe::split_cross_output;
use crate::autograd::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, make_split, EvalSplit, RankingReport, Sampling, Stage};
use crate::model::{ModelConfig, SyncRecModel};
use crate::objectives::{
    corrected_cross_loss, cross_domain_loss, cross_domain_terms, ntg, sample_negatives, scmim_loss, single_domain_loss,
    total_loss, update_lambda_on_tape, Aggregation, LossReport, Negatives, NtgState,
};
use crate::params::Bound;
use crate::seqdata::{make_batch, CrossDomainSequence, Dataset, SequenceBatch, VocabManifest, Vocabulary};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOSS_LOG_FILE: &str = "losses.jsonl";
pub const EPOCH_LOG_FILE: &str = "epochs.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoint";
const CHECKPOINT_FORMAT: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Small model for one CPU core.
    Desk,
    /// Published settings for the five-domain retail data.
    Amazon,
    /// Published settings for the telecom data.
    Telco,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Maximum sequence length `T`.
    pub steps: usize,
    /// Embedding width `r`.
    pub dim: usize,
    /// Expert count `K`.
    pub experts: usize,
    /// `j`: experts trained only by the cross-domain task.
    pub cdsr_experts: usize,
    pub heads: usize,
    pub blocks: usize,
    /// Pre-norm residual blocks; `false` composes attention and feed-forward
    /// directly.
    pub residual: bool,
    /// Harmonic factor between prediction losses and the mutual-information
    /// term.
    pub eta: f64,
    /// Temperature of the λ softmax.
    pub delta: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub grad_clip: f64,
    pub max_epochs: usize,
    /// Epochs without a validation MRR improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Weight cross-domain losses by λ.
    pub lc_ntg: bool,
    /// Add the single/cross mutual-information term.
    pub sc_mim: bool,
    /// Stop-gradient partition of the experts.
    pub acmoe_sg: bool,
    pub loss_aggregation: Aggregation,
    /// Allow repeated evaluation negatives, for domains under 100 items.
    pub eval_with_replacement: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::preset(Preset::Amazon)
    }
}

impl TrainConfig {
    pub fn preset(preset: Preset) -> Self {
        let (steps, dim, batch_size, experts, max_epochs) = match preset {
            Preset::Desk => (16, 32, 8, 3, 30),
            Preset::Amazon => (128, 128, 128, 4, 100),
            Preset::Telco => (128, 128, 128, 5, 100),
        };
        let blocks = if preset == Preset::Desk { 1 } else { 2 };
        Self {
            steps,
            dim,
            experts,
            cdsr_experts: ModelConfig::default_cdsr_experts(experts),
            heads: 4,
            blocks,
            residual: true,
            eta: 0.8,
            delta: 1.0,
            batch_size,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            grad_clip: 5.0,
            max_epochs,
            patience: 5,
            seed: 42,
            lc_ntg: true,
            sc_mim: true,
            acmoe_sg: true,
            loss_aggregation: Aggregation::Mean,
            eval_with_replacement: false,
        }
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            steps: self.steps,
            dim: self.dim,
            heads: self.heads,
            blocks: self.blocks,
            experts: self.experts,
            cdsr_experts: self.cdsr_experts,
            residual: self.residual,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::Config(format!("eta must lie in [0, 1], got {}", self.eta)));
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(Error::Config(format!("delta must be positive, got {}", self.delta)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be non-negative, got {}", self.learning_rate)));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.epsilon > 0.0) {
            return Err(Error::Config("Adam needs 0 <= beta1, beta2 < 1 and epsilon > 0".into()));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::Config(format!("grad_clip must be positive, got {}", self.grad_clip)));
        }
        Ok(())
    }
}

/// Adam with moments kept at `f32` precision so checkpoints are exact.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(model: &SyncRecModel) -> Self {
        Self { t: 0, m: model.store.zeros_like(), v: model.store.zeros_like() }
    }

    pub fn step(&mut self, model: &mut SyncRecModel, grads: &[Tensor], config: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = (config.beta1, config.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let ids: Vec<_> = model.store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let p = model.store.get_mut(id);
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads[i]);
            for k in 0..p.data.len() {
                let gk = g.data[k];
                let mk = (b1 * m.data[k] + (1.0 - b1) * gk) as f32 as f64;
                let vk = (b2 * v.data[k] + (1.0 - b2) * gk * gk) as f32 as f64;
                m.data[k] = mk;
                v.data[k] = vk;
                let update = config.learning_rate * (mk / c1) / ((vk / c2).sqrt() + config.epsilon);
                p.data[k] = (p.data[k] - update) as f32 as f64;
            }
        }
    }
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for v in &mut g.data {
                *v *= s;
            }
        }
    }
    norm
}

/// Every loss node of one step, before backpropagation.
pub struct Objective {
    pub total: Var,
    pub single: Vec<Option<Var>>,
    pub cross: Option<Var>,
    pub cross_term: Option<Var>,
    pub scmim: Vec<Option<Var>>,
    pub report: LossReport,
    pub ntg: NtgState,
}

fn value_or_zero(tape: &Tape, v: Option<Var>) -> f64 {
    v.map_or(0.0, |v| tape.value(v).item())
}

/// Builds the full objective on `tape`.
///
/// Ablations: without `lc_ntg` the cross term is the plain overall cross
/// loss (λ is still updated and logged); without `sc_mim` the
/// mutual-information terms are zero; without `acmoe_sg` the experts mix
/// without any stop-gradient.
#[allow(clippy::too_many_arguments)]
pub fn build_objective(
    tape: &mut Tape,
    bound: &Bound,
    model: &SyncRecModel,
    state: &NtgState,
    batch: &SequenceBatch,
    negatives: &Negatives,
    config: &TrainConfig,
    step: usize,
) -> Result<Objective> {
    let num_domains = model.num_domains;
    let agg = config.loss_aggregation;
    let out = model.forward(tape, bound, batch, config.acmoe_sg);
    let table = bound.var(model.embedding.items);

    let single: Vec<Option<Var>> = (0..num_domains)
        .map(|d| {
            out.single[d].and_then(|y| single_domain_loss(tape, y, table, &batch.single[d], &negatives.single[d], agg))
        })
        .collect();
    let single_counts: Vec<usize> = batch.single.iter().map(|v| v.count()).collect();

    let terms = cross_domain_terms(tape, out.cross, table, batch, &negatives.cross);
    let (cross_per_domain, cross_overall) = cross_domain_loss(tape, &terms, num_domains, agg);
    let cross_counts: Vec<usize> = (0..num_domains).map(|d| terms.domain_count(d)).collect();

    let single_values: Vec<f64> = single.iter().map(|&v| value_or_zero(tape, v)).collect();
    let cross_values: Vec<f64> = cross_per_domain.iter().map(|&v| value_or_zero(tape, v)).collect();
    let mut phi = ntg(&single_values, &cross_values);
    for d in 0..num_domains {
        if single_counts[d] == 0 || cross_counts[d] == 0 {
            phi[d] = 0.0;
        }
    }

    let alpha = bound.var(model.alpha);
    let beta = bound.var(model.beta);
    let (lambda, next) = if phi.iter().all(|p| p.is_finite()) {
        let lambda = update_lambda_on_tape(tape, state, &phi, alpha, beta);
        let next = NtgState { lambda: tape.value(lambda).data.clone(), delta: state.delta };
        (lambda, next)
    } else {
        warn!("step {step}: non-finite negative transfer gap {phi:?}; keeping previous weights");
        (tape.leaf(Tensor::row_vector(state.lambda.clone())), state.clone())
    };

    let cross_term = if config.lc_ntg { corrected_cross_loss(tape, &terms, lambda, agg) } else { cross_overall };

    let scmim: Vec<Option<Var>> = if config.sc_mim {
        let by_domain = split_cross_output(&batch.cross_domains, batch.batch, batch.steps, num_domains);
        let critic = bound.var(model.critic);
        (0..num_domains)
            .map(|d| {
                let y_single = out.single[d]?;
                let view = &batch.single[d];
                let single_rows: Vec<Vec<usize>> = (0..batch.batch)
                    .map(|b| (b * batch.steps..(b + 1) * batch.steps).filter(|&r| view.mask[r]).collect())
                    .collect();
                let l = scmim_loss(tape, y_single, out.cross, &single_rows, &by_domain[d], critic);
                if l.is_none() {
                    log::debug!("step {step}: fewer than two users eligible for the domain {d} mutual-information term");
                }
                l
            })
            .collect()
    } else {
        vec![None; num_domains]
    };

    let single_vars: Vec<Var> = single.iter().flatten().copied().collect();
    let scmim_vars: Vec<Var> = scmim.iter().flatten().copied().collect();
    let total = total_loss(tape, &single_vars, cross_term, &scmim_vars, config.eta)?;

    let report = LossReport {
        step,
        single: single_values,
        single_counts,
        cross: cross_values,
        cross_counts,
        cross_overall: value_or_zero(tape, cross_overall),
        phi,
        lambda: next.lambda.clone(),
        cross_term: value_or_zero(tape, cross_term),
        scmim: scmim.iter().map(|&v| value_or_zero(tape, v)).collect(),
        total: tape.value(total).item(),
    };
    Ok(Objective { total, single, cross: cross_overall, cross_term, scmim, report, ntg: next })
}

pub struct StepOutput {
    pub grads: Vec<Tensor>,
    pub ntg: NtgState,
    pub report: LossReport,
}

/// Samples negatives, builds the objective and backpropagates it. The PAD
/// row of the item-table gradient is zeroed; no clipping is applied here.
pub fn train_step(
    model: &SyncRecModel,
    state: &NtgState,
    batch: &SequenceBatch,
    config: &TrainConfig,
    vocab: &Vocabulary,
    rng: &mut ChaCha8Rng,
    step: usize,
) -> Result<StepOutput> {
    let negatives = sample_negatives(batch, vocab, rng)?;
    let mut tape = Tape::new();
    let bound = model.store.bind(&mut tape);
    let objective = build_objective(&mut tape, &bound, model, state, batch, &negatives, config, step)?;
    let report = objective.report;
    if !report.is_finite() {
        let components = serde_json::to_string(&report)?;
        return Err(Error::NonFinite { step, components });
    }
    let mut g = tape.backward(objective.total);
    let mut grads = bound.collect(&model.store, &mut g);
    model.embedding.mask_pad_gradient(&mut grads);
    Ok(StepOutput { grads, ntg: objective.ntg, report })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopping {
    pub best_mrr: Option<f64>,
    pub best_epoch: Option<usize>,
    /// Epochs since the last improvement.
    pub stale: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub mean_total: f64,
    pub lambda: Vec<f64>,
    pub validation_mrr: Option<f64>,
    pub validation: RankingReport,
}

/// Serializable position of a ChaCha stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// Decimal `u128` word position.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: hex::encode(rng.get_seed()), stream: rng.get_stream(), word_pos: rng.get_word_pos().to_string() }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = |what: &str| Error::Checkpoint(format!("invalid RNG {what} in manifest"));
        let seed: [u8; 32] = hex::decode(&self.seed).ok().and_then(|b| b.try_into().ok()).ok_or_else(|| bad("seed"))?;
        let pos: u128 = self.word_pos.parse().map_err(|_| bad("word position"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

/// Complete training state; a checkpoint is a saved `Trainer`.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub vocab: Vocabulary,
    pub model: SyncRecModel,
    pub adam: Adam,
    pub ntg: NtgState,
    pub rng: ChaCha8Rng,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: usize,
    pub early: EarlyStopping,
}

impl Trainer {
    pub fn new(config: &TrainConfig, vocab: &Vocabulary) -> Result<Self> {
        config.validate()?;
        let model = SyncRecModel::new(&config.model(), vocab, config.seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Self {
            config: config.clone(),
            vocab: vocab.clone(),
            adam: Adam::new(&model),
            model,
            ntg: NtgState::new(vocab.num_domains(), config.delta),
            rng,
            epoch: 0,
            step: 0,
            early: EarlyStopping::default(),
        })
    }

    /// Candidate sampling for the current epoch.
    pub fn sampling(&self) -> Sampling {
        Sampling { seed: self.config.seed, epoch: self.epoch as u64, with_replacement: self.config.eval_with_replacement }
    }

    /// Clips, then applies one Adam update.
    pub fn apply_gradients(&mut self, mut grads: Vec<Tensor>) {
        clip_global_norm(&mut grads, self.config.grad_clip);
        self.adam.step(&mut self.model, &grads, &self.config);
    }

    /// One full step on `batch`: loss, gradients, λ carry-over and update.
    pub fn step_batch(&mut self, batch: &SequenceBatch) -> Result<LossReport> {
        let out = train_step(&self.model, &self.ntg, batch, &self.config, &self.vocab, &mut self.rng, self.step)?;
        self.apply_gradients(out.grads);
        self.ntg = out.ntg;
        self.step += 1;
        Ok(out.report)
    }

    /// One pass over `sequences` in a freshly shuffled order.
    pub fn run_epoch(&mut self, sequences: &[CrossDomainSequence], mut log: Option<&mut dyn Write>) -> Result<(usize, f64)> {
        let mut order: Vec<usize> = (0..sequences.len()).collect();
        order.shuffle(&mut self.rng);
        let mut total = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(self.config.batch_size) {
            let users: Vec<CrossDomainSequence> = chunk.iter().map(|&i| sequences[i].clone()).collect();
            let batch = make_batch(&users, self.config.steps, &self.vocab)?;
            let report = self.step_batch(&batch)?;
            if let Some(w) = log.as_deref_mut() {
                let line = serde_json::to_string(&report)?;
                writeln!(w, "{line}").map_err(|e| Error::io(LOSS_LOG_FILE, e))?;
            }
            total += report.total;
            steps += 1;
        }
        self.epoch += 1;
        Ok((steps, if steps > 0 { total / steps as f64 } else { 0.0 }))
    }

    pub fn vocab_hash(vocab: &Vocabulary) -> String {
        let json = serde_json::to_string(&vocab.to_manifest()).expect("vocabulary manifest serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// Hash of the training configuration together with the vocabulary.
    pub fn config_hash(config: &TrainConfig, vocab: &Vocabulary) -> String {
        let json = serde_json::to_string(&(config, vocab.to_manifest())).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// Refuses data whose vocabulary differs from the one trained on.
    pub fn check_data(&self, vocab: &Vocabulary) -> Result<()> {
        let mine = Self::vocab_hash(&self.vocab);
        let theirs = Self::vocab_hash(vocab);
        if mine != theirs {
            return Err(Error::HashMismatch { checkpoint: mine, data: theirs });
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut tensors = Vec::new();
        for (i, (name, t)) in self.model.store.iter().enumerate() {
            for (prefix, tensor) in [("", t), ("adam.m.", &self.adam.m[i]), ("adam.v.", &self.adam.v[i])] {
                let file = format!("{prefix}{name}.f32");
                write_f32(&dir.join(&file), tensor)?;
                tensors.push(TensorEntry { name: format!("{prefix}{name}"), file, rows: tensor.rows, cols: tensor.cols });
            }
        }
        let manifest = Manifest {
            format: CHECKPOINT_FORMAT,
            config_hash: Self::config_hash(&self.config, &self.vocab),
            vocab_hash: Self::vocab_hash(&self.vocab),
            config: self.config.clone(),
            vocab: self.vocab.to_manifest(),
            epoch: self.epoch,
            step: self.step,
            adam_t: self.adam.t,
            ntg: self.ntg.clone(),
            rng: RngState::capture(&self.rng),
            early: self.early.clone(),
            tensors,
        };
        let path = dir.join(MANIFEST_FILE);
        let mut json = serde_json::to_string_pretty(&manifest)?;
        json.push('\n');
        fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        if manifest.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unsupported checkpoint format {}", manifest.format)));
        }
        let vocab = Vocabulary::from_manifest(&manifest.vocab)?;
        let expected = Self::config_hash(&manifest.config, &vocab);
        if expected != manifest.config_hash {
            return Err(Error::Checkpoint(format!(
                "manifest config hash {} does not match its contents ({expected})",
                manifest.config_hash
            )));
        }
        let mut trainer = Trainer::new(&manifest.config, &vocab)?;
        let expected_count = 3 * trainer.model.store.len();
        if manifest.tensors.len() != expected_count {
            return Err(Error::Checkpoint(format!(
                "manifest lists {} tensors, model needs {expected_count}",
                manifest.tensors.len()
            )));
        }
        let ids: Vec<_> = trainer.model.store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let name = trainer.model.store.name(id).to_string();
            let entries = &manifest.tensors[3 * i..3 * i + 3];
            let wanted = [name.clone(), format!("adam.m.{name}"), format!("adam.v.{name}")];
            for (entry, want) in entries.iter().zip(&wanted) {
                if &entry.name != want {
                    return Err(Error::Checkpoint(format!("expected tensor {want}, found {}", entry.name)));
                }
            }
            let read = |entry: &TensorEntry, shape: (usize, usize)| -> Result<Tensor> {
                if (entry.rows, entry.cols) != shape {
                    return Err(Error::Checkpoint(format!(
                        "tensor {} has shape {}x{}, model needs {}x{}",
                        entry.name, entry.rows, entry.cols, shape.0, shape.1
                    )));
                }
                read_f32(&dir.join(&entry.file), entry.rows, entry.cols)
            };
            let shape = trainer.model.store.get(id).shape();
            *trainer.model.store.get_mut(id) = read(&entries[0], shape)?;
            trainer.adam.m[i] = read(&entries[1], shape)?;
            trainer.adam.v[i] = read(&entries[2], shape)?;
        }
        trainer.adam.t = manifest.adam_t;
        trainer.ntg = manifest.ntg;
        trainer.rng = manifest.rng.restore()?;
        trainer.epoch = manifest.epoch;
        trainer.step = manifest.step;
        trainer.early = manifest.early;
        Ok(trainer)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    file: String,
    rows: usize,
    cols: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: u32,
    config_hash: String,
    vocab_hash: String,
    config: TrainConfig,
    vocab: VocabManifest,
    epoch: usize,
    step: usize,
    adam_t: u64,
    ntg: NtgState,
    rng: RngState,
    early: EarlyStopping,
    tensors: Vec<TensorEntry>,
}

fn write_f32(path: &Path, t: &Tensor) -> Result<()> {
    let bytes: Vec<u8> = t.data.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_f32(path: &Path, rows: usize, cols: usize) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != rows * cols * 4 {
        return Err(Error::Checkpoint(format!(
            "{} holds {} bytes, expected {}",
            path.display(),
            bytes.len(),
            rows * cols * 4
        )));
    }
    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
    Ok(Tensor::from_vec(rows, cols, data))
}

pub struct FitOutcome {
    /// Snapshot taken after the epoch with the best validation MRR (or the
    /// last epoch if validation never ran).
    pub best: Trainer,
    pub epochs: Vec<EpochRecord>,
    pub split: EvalSplit,
}

/// Trains on the leave-one-out prefixes of `dataset`.
pub fn fit(dataset: &Dataset, config: &TrainConfig, run_dir: Option<&Path>) -> Result<FitOutcome> {
    let split = make_split(&dataset.sequences());
    fit_split(split, &dataset.vocab, config, run_dir)
}

/// Trains on `split`'s training sequences with validation early stopping.
/// With `run_dir`, step and epoch logs plus the best checkpoint are written
/// there.
pub fn fit_split(split: EvalSplit, vocab: &Vocabulary, config: &TrainConfig, run_dir: Option<&Path>) -> Result<FitOutcome> {
    let trainer = Trainer::new(config, vocab)?;
    resume(trainer, split, run_dir)
}

/// Continues training `trainer` until early stopping or `max_epochs`.
pub fn resume(mut trainer: Trainer, split: EvalSplit, run_dir: Option<&Path>) -> Result<FitOutcome> {
    let sequences = split.training_sequences();
    if sequences.is_empty() {
        return Err(Error::Validation("dataset has no training sequences".into()));
    }
    let mut logs = match run_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            Some((open_log(&dir.join(LOSS_LOG_FILE))?, open_log(&dir.join(EPOCH_LOG_FILE))?))
        }
        None => None,
    };
    let mut best = trainer.clone();
    let mut epochs = Vec::new();
    while trainer.epoch < trainer.config.max_epochs && trainer.early.stale < trainer.config.patience {
        let (steps, mean_total) =
            trainer.run_epoch(&sequences, logs.as_mut().map(|(l, _)| l as &mut dyn Write))?;
        let validation = evaluate(&trainer.model, &split, Stage::Validation, &trainer.vocab, trainer.sampling())?;
        let mrr = validation.overall.metrics.map(|m| m.mrr10);
        let improved = match (mrr, trainer.early.best_mrr) {
            (Some(m), Some(b)) => m > b,
            (Some(_), None) => true,
            (None, _) => trainer.early.best_epoch.is_none(),
        };
        if improved {
            trainer.early.best_mrr = mrr.or(trainer.early.best_mrr);
            trainer.early.best_epoch = Some(trainer.epoch);
            trainer.early.stale = 0;
        } else {
            trainer.early.stale += 1;
        }
        info!(
            "epoch {} steps {steps} loss {mean_total:.5} validation MRR@10 {}",
            trainer.epoch,
            mrr.map_or("-".to_string(), |m| format!("{m:.4}"))
        );
        let record = EpochRecord {
            epoch: trainer.epoch,
            steps,
            mean_total,
            lambda: trainer.ntg.lambda.clone(),
            validation_mrr: mrr,
            validation,
        };
        if let Some((_, e)) = logs.as_mut() {
            let line = serde_json::to_string(&record)?;
            writeln!(e, "{line}").map_err(|err| Error::io(EPOCH_LOG_FILE, err))?;
        }
        epochs.push(record);
        if improved {
            best = trainer.clone();
        }
    }
    if let Some((mut l, mut e)) = logs {
        l.flush().map_err(|err| Error::io(LOSS_LOG_FILE, err))?;
        e.flush().map_err(|err| Error::io(EPOCH_LOG_FILE, err))?;
    }
    if let Some(dir) = run_dir {
        best.save(&dir.join(CHECKPOINT_DIR))?;
    }
    Ok(FitOutcome { best, epochs, split })
}

fn open_log(path: &PathBuf) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}
