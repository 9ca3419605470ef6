//! The full parameter set and forward pass: shared embeddings, the expert
//! mixture for every task, and the extra trainable scalars and matrices the
//! objectives need.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::acmoe::{mix_cross, mix_single, AcmoeParams, MixtureOutput};
use crate::autograd::{Tape, Tensor, Var};
use crate::embedding::EmbeddingTable;
use crate::error::{Error, Result};
use crate::expert::{ExpertConfig, SeqLayout};
use crate::params::{scaled_normal, Bound, ParamId, ParamStore};
use crate::seqdata::{history_row, ItemId, SequenceBatch, Vocabulary};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Maximum sequence length `T`.
    pub steps: usize,
    /// Embedding width `r`.
    pub dim: usize,
    /// Attention heads `p` per block.
    pub heads: usize,
    /// Attention + feed-forward blocks per expert.
    pub blocks: usize,
    /// Expert count `K`.
    pub experts: usize,
    /// `j`: experts reserved for the cross-domain task.
    pub cdsr_experts: usize,
    pub residual: bool,
}

impl ModelConfig {
    /// `j = round(0.2 K)`, kept inside `1..K`.
    pub fn default_cdsr_experts(experts: usize) -> usize {
        ((0.2 * experts as f64).round() as usize).clamp(1, experts.saturating_sub(1).max(1))
    }

    pub fn expert(&self) -> ExpertConfig {
        ExpertConfig { dim: self.dim, heads: self.heads, blocks: self.blocks, residual: self.residual }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps < 2 {
            return Err(Error::Config(format!("T must be at least 2, got {}", self.steps)));
        }
        if self.experts < 2 || self.cdsr_experts == 0 || self.cdsr_experts >= self.experts {
            return Err(Error::Config(format!(
                "need 1 <= j < K, got j = {}, K = {}",
                self.cdsr_experts, self.experts
            )));
        }
        self.expert().validate()
    }
}

#[derive(Clone, Debug)]
pub struct SyncRecModel {
    pub config: ModelConfig,
    pub num_domains: usize,
    pub store: ParamStore,
    pub embedding: EmbeddingTable,
    pub acmoe: AcmoeParams,
    /// `W^H` of the single/cross critic.
    pub critic: ParamId,
    pub alpha: ParamId,
    pub beta: ParamId,
}

impl SyncRecModel {
    pub fn new(config: &ModelConfig, vocab: &Vocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let embedding = EmbeddingTable::new(&mut store, &mut rng, vocab, config.steps, config.dim);
        let acmoe = AcmoeParams::new(
            &mut store,
            &mut rng,
            &config.expert(),
            config.experts,
            config.cdsr_experts,
            vocab.num_domains(),
            config.steps,
        );
        let critic = store.add("objectives.critic", scaled_normal(&mut rng, config.dim, config.dim, config.dim));
        let alpha = store.add("objectives.alpha", Tensor::scalar(1.0));
        let beta = store.add("objectives.beta", Tensor::scalar(1.0));
        // parameters live on the f32 grid so checkpoints and frozen values are exact
        store.round_to_f32();
        Ok(Self { config: config.clone(), num_domains: vocab.num_domains(), store, embedding, acmoe, critic, alpha, beta })
    }

    /// Every task's output for `batch`. Single-domain views without a loss
    /// position are skipped.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, batch: &SequenceBatch, stop_gradient: bool) -> MixtureOutput {
        let (b, t) = (batch.batch, batch.steps);
        let single = batch
            .single
            .iter()
            .enumerate()
            .map(|(d, view)| {
                if view.count() == 0 {
                    return None;
                }
                let valid = view.key_valid(self.embedding.pad);
                let layout = SeqLayout { batch: b, steps: t, key_valid: Some(&valid) };
                let e = self.embedding.lookup(tape, bound, &view.input);
                Some(mix_single(tape, bound, &self.acmoe, d, e, layout, stop_gradient))
            })
            .collect();
        let cross = self.cross_forward(tape, bound, &batch.cross.input, b, stop_gradient);
        MixtureOutput { single, cross }
    }

    pub fn cross_forward(&self, tape: &mut Tape, bound: &Bound, tokens: &[usize], batch: usize, stop_gradient: bool) -> Var {
        let valid: Vec<bool> = tokens.iter().map(|&x| x != self.embedding.pad).collect();
        let layout = SeqLayout { batch, steps: self.config.steps, key_valid: Some(&valid) };
        let e = self.embedding.lookup(tape, bound, tokens);
        mix_cross(tape, bound, &self.acmoe, e, layout, stop_gradient)
    }

    /// `(y_T)^cross` for each history: one `r`-row per history.
    pub fn encode_histories(&self, histories: &[&[ItemId]], vocab: &Vocabulary) -> Result<Tensor> {
        let steps = self.config.steps;
        let tokens: Vec<usize> = histories.iter().flat_map(|h| history_row(h, steps, vocab)).collect();
        self.embedding.check_tokens(&tokens)?;
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape);
        let y = self.cross_forward(&mut tape, &bound, &tokens, histories.len(), true);
        let y = tape.value(y);
        let mut out = Tensor::zeros(histories.len(), self.config.dim);
        for b in 0..histories.len() {
            out.row_mut(b).copy_from_slice(y.row(b * steps + steps - 1));
        }
        Ok(out)
    }

    pub fn item_table(&self) -> &Tensor {
        self.store.get(self.embedding.items)
    }
}
