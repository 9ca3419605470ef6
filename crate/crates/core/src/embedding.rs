//! Shared item embedding table plus learnable position embeddings.

use rand::Rng;

use crate::autograd::{dot, sigmoid, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{scaled_normal, Bound, ParamId, ParamStore};
use crate::seqdata::{ItemId, Vocabulary};

/// Handles to `embedding.items` (`(|V|+2)×r`) and `embedding.positions`
/// (`T×r`). The same table serves every view.
#[derive(Clone, Debug)]
pub struct EmbeddingTable {
    pub items: ParamId,
    pub positions: ParamId,
    pub pad: usize,
    pub rows: usize,
}

impl EmbeddingTable {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, vocab: &Vocabulary, steps: usize, dim: usize) -> Self {
        let mut items = scaled_normal(rng, vocab.table_rows(), dim, dim);
        items.row_mut(vocab.pad()).fill(0.0);
        let positions = scaled_normal(rng, steps, dim, dim);
        Self {
            items: store.add("embedding.items", items),
            positions: store.add("embedding.positions", positions),
            pad: vocab.pad(),
            rows: vocab.table_rows(),
        }
    }

    pub fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        match tokens.iter().find(|&&t| t >= self.rows) {
            Some(t) => Err(Error::Index(format!("token {t} outside embedding table of {} rows", self.rows))),
            None => Ok(()),
        }
    }

    /// `out[b·T+t] = M[tokens[b·T+t]] + P[t]`.
    pub fn lookup(&self, tape: &mut Tape, bound: &Bound, tokens: &[usize]) -> Var {
        let e = tape.gather(bound.var(self.items), tokens.to_vec());
        tape.add_tiled(e, bound.var(self.positions))
    }

    /// Clears the PAD row of an item-table gradient so padding never trains.
    pub fn mask_pad_gradient(&self, grads: &mut [Tensor]) {
        grads[self.items.index()].row_mut(self.pad).fill(0.0);
    }
}

/// `σ(rep · M[item])`.
pub fn score(rep: &[f64], item: ItemId, table: &Tensor, vocab: &Vocabulary) -> Result<f64> {
    if !vocab.is_item(item) {
        return Err(Error::Validation(format!("token {item} is not an item (SOS/PAD cannot be scored)")));
    }
    Ok(sigmoid(dot(rep, table.row(item))))
}
