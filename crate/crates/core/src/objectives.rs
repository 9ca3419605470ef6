//! Training objectives.
//!
//! All losses are in minimization form: the pairwise ranking term is
//! `−log σ(σ(y·M[pos]) − σ(y·M[neg]))` and the mutual-information term is
//! the negated InfoNCE estimate.
//!
//! The negative transfer gap of domain `d` is `φ[d] = L_single[d] −
//! L_cross[d]`; a negative value means the cross-domain view predicts domain
//! `d` worse than its own history does. `φ` drives the per-domain weights
//! `λ = softmax((α·λ_prev + β·φ)/δ)` that rescale the cross-domain loss.

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{dot, log_sigmoid, sigmoid, softmax_in_place, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::seqdata::{sample_negative, DomainId, ItemId, SequenceBatch, ViewRows, Vocabulary};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    /// Masked mean over loss positions.
    #[default]
    Mean,
    /// Plain sum over loss positions.
    Sum,
}

impl Aggregation {
    fn weight(self, count: usize) -> f64 {
        match self {
            Aggregation::Mean => 1.0 / count as f64,
            Aggregation::Sum => 1.0,
        }
    }
}

/// Relative negative-transfer-gap weights carried across batches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NtgState {
    pub lambda: Vec<f64>,
    /// Softmax temperature.
    pub delta: f64,
}

impl NtgState {
    pub fn new(num_domains: usize, delta: f64) -> Self {
        Self { lambda: vec![0.0; num_domains], delta }
    }
}

/// Value-only pairwise ranking loss for one representation.
pub fn bpr_loss(rep: &[f64], pos: ItemId, neg: ItemId, table: &Tensor) -> Result<f64> {
    if pos == neg {
        return Err(Error::Validation(format!("degenerate pair: positive and negative are both {pos}")));
    }
    let sp = sigmoid(dot(rep, table.row(pos)));
    let sn = sigmoid(dot(rep, table.row(neg)));
    Ok(-log_sigmoid(sp - sn))
}

/// Per-position ranking losses (`n×1`) for rows `rows` of `y`.
pub fn bpr_terms(tape: &mut Tape, y: Var, table: Var, rows: &[usize], pos: &[ItemId], neg: &[ItemId]) -> Var {
    let sp = tape.gather_dot(y, table, rows.to_vec(), pos.to_vec());
    let sp = tape.sigmoid(sp);
    let sn = tape.gather_dot(y, table, rows.to_vec(), neg.to_vec());
    let sn = tape.sigmoid(sn);
    let diff = tape.sub(sp, sn);
    let ls = tape.log_sigmoid(diff);
    tape.scale(ls, -1.0)
}

/// One uniformly drawn negative per loss position of every view.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Negatives {
    /// Aligned with the flat cross positions; PAD where masked.
    pub cross: Vec<ItemId>,
    pub single: Vec<Vec<ItemId>>,
}

/// Draws negatives in a fixed order (cross view, then each domain's view) so
/// the stream of draws does not depend on which losses are enabled.
pub fn sample_negatives<R: Rng + ?Sized>(batch: &SequenceBatch, vocab: &Vocabulary, rng: &mut R) -> Result<Negatives> {
    let mut draw = |view: &ViewRows| -> Result<Vec<ItemId>> {
        view.target
            .iter()
            .zip(&view.mask)
            .map(|(&t, &m)| {
                if !m {
                    return Ok(vocab.pad());
                }
                let d = vocab.domain_of(t).ok_or_else(|| Error::Sampling(format!("target {t} is not an item")))?;
                sample_negative(rng, t, d, vocab)
            })
            .collect()
    };
    let cross = draw(&batch.cross)?;
    let single = batch.single.iter().map(&mut draw).collect::<Result<_>>()?;
    Ok(Negatives { cross, single })
}

/// Per-position loss column plus the bookkeeping needed to aggregate it.
#[derive(Clone, Debug)]
pub struct PositionLosses {
    pub losses: Var,
    pub rows: Vec<usize>,
    pub domains: Vec<DomainId>,
}

impl PositionLosses {
    pub fn count(&self) -> usize {
        self.rows.len()
    }

    pub fn domain_count(&self, d: DomainId) -> usize {
        self.domains.iter().filter(|&&x| x == d).count()
    }
}

fn view_terms(tape: &mut Tape, y: Var, table: Var, view: &ViewRows, negatives: &[ItemId]) -> (Var, Vec<usize>) {
    let rows = view.positions();
    let pos: Vec<ItemId> = rows.iter().map(|&r| view.target[r]).collect();
    let neg: Vec<ItemId> = rows.iter().map(|&r| negatives[r]).collect();
    (bpr_terms(tape, y, table, &rows, &pos, &neg), rows)
}

/// `L^d_single` over the masked-in positions of domain `d`'s view; `None`
/// when the view has no loss position in this batch.
pub fn single_domain_loss(
    tape: &mut Tape,
    y_single: Var,
    table: Var,
    view: &ViewRows,
    negatives: &[ItemId],
    aggregation: Aggregation,
) -> Option<Var> {
    let count = view.count();
    if count == 0 {
        return None;
    }
    let (terms, _) = view_terms(tape, y_single, table, view, negatives);
    Some(tape.weighted_sum(terms, vec![aggregation.weight(count); count]))
}

/// Per-position cross-domain losses, each tagged with its target's domain.
pub fn cross_domain_terms(tape: &mut Tape, y_cross: Var, table: Var, batch: &SequenceBatch, negatives: &[ItemId]) -> PositionLosses {
    let (losses, rows) = view_terms(tape, y_cross, table, &batch.cross, negatives);
    let domains = rows.iter().map(|&r| batch.cross_domains[r].expect("masked-in position without domain")).collect();
    PositionLosses { losses, rows, domains }
}

/// Per-domain partition of the cross loss (`None` for domains without
/// positions) and the overall cross loss.
pub fn cross_domain_loss(
    tape: &mut Tape,
    terms: &PositionLosses,
    num_domains: usize,
    aggregation: Aggregation,
) -> (Vec<Option<Var>>, Option<Var>) {
    let per_domain = (0..num_domains)
        .map(|d| {
            let n = terms.domain_count(d);
            (n > 0).then(|| {
                let w = aggregation.weight(n);
                let weights = terms.domains.iter().map(|&x| if x == d { w } else { 0.0 }).collect();
                tape.weighted_sum(terms.losses, weights)
            })
        })
        .collect();
    let n = terms.count();
    let overall = (n > 0).then(|| tape.weighted_sum(terms.losses, vec![aggregation.weight(n); n]));
    (per_domain, overall)
}

/// `φ[d] = single[d] − cross[d]` from detached loss values.
pub fn ntg(single: &[f64], cross: &[f64]) -> Vec<f64> {
    single.iter().zip(cross).map(|(s, c)| s - c).collect()
}

/// Value-only `softmax((α·λ_prev + β·φ)/δ)`; `None` if `φ` is not finite.
pub fn update_lambda(state: &NtgState, phi: &[f64], alpha: f64, beta: f64) -> Option<NtgState> {
    if phi.iter().any(|p| !p.is_finite()) {
        warn!("non-finite negative transfer gap {phi:?}; keeping previous weights");
        return None;
    }
    let mut z: Vec<f64> = state.lambda.iter().zip(phi).map(|(l, p)| (alpha * l + beta * p) / state.delta).collect();
    softmax_in_place(&mut z);
    Some(NtgState { lambda: z, delta: state.delta })
}

/// The same update on the tape: `λ_prev` and `φ` enter as constants, so the
/// only gradient paths are through `α` and `β`. Returns a `1×|D|` node.
pub fn update_lambda_on_tape(tape: &mut Tape, state: &NtgState, phi: &[f64], alpha: Var, beta: Var) -> Var {
    let prev = tape.leaf(Tensor::row_vector(state.lambda.clone()));
    let gap = tape.leaf(Tensor::row_vector(phi.to_vec()));
    let a = tape.scale_by(prev, alpha);
    let b = tape.scale_by(gap, beta);
    let z = tape.add(a, b);
    let z = tape.scale(z, 1.0 / state.delta);
    tape.softmax_rows(z)
}

/// `Σ_positions λ[domain] · loss`, normalized by the position count under
/// mean aggregation.
pub fn corrected_cross_loss(tape: &mut Tape, terms: &PositionLosses, lambda: Var, aggregation: Aggregation) -> Option<Var> {
    let n = terms.count();
    if n == 0 {
        return None;
    }
    let weights = tape.select(lambda, terms.domains.clone());
    let weighted = tape.mul(weights, terms.losses);
    Some(tape.weighted_sum(weighted, vec![aggregation.weight(n); n]))
}

/// Mutual-information term for one domain.
///
/// Users with both a single-view and a cross-view presence in the domain are
/// eligible; each user's representations are mean-pooled into `U` (single)
/// and `V` (cross). The critic is `ρ(U, V) = σ(Uᵀ W^H V)`, and user `u`
/// contributes `−[ρ(U_u, V_u) − log Σ_{u'≠u} exp ρ(U_{u'}, V_u)]`. Returns
/// the mean over eligible users, or `None` when fewer than two are eligible.
pub fn scmim_loss(
    tape: &mut Tape,
    y_single: Var,
    y_cross: Var,
    single_rows: &[Vec<usize>],
    cross_rows: &[Vec<usize>],
    critic: Var,
) -> Option<Var> {
    let (us, vs): (Vec<Vec<usize>>, Vec<Vec<usize>>) = single_rows
        .iter()
        .zip(cross_rows)
        .filter(|(s, c)| !s.is_empty() && !c.is_empty())
        .map(|(s, c)| (s.clone(), c.clone()))
        .unzip();
    let g = us.len();
    if g < 2 {
        return None;
    }
    let u = tape.segment_mean(y_single, us);
    let v = tape.segment_mean(y_cross, vs);
    let uw = tape.matmul(u, critic);
    let logits = tape.matmul_nt(uw, v);
    let rho = tape.sigmoid(logits);
    let losses = tape.info_nce_columns(rho);
    Some(tape.weighted_sum(losses, vec![1.0 / g as f64; g]))
}

/// `η·(Σ_d L^d_single + L_cross) + (1−η)·Σ_d L^d_SCMIM`.
pub fn total_loss(tape: &mut Tape, single: &[Var], cross: Option<Var>, scmim: &[Var], eta: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::Config(format!("harmonic factor eta must lie in [0, 1], got {eta}")));
    }
    let zero = tape.leaf(Tensor::scalar(0.0));
    let mut pred = zero;
    for &v in single.iter().chain(cross.iter()) {
        pred = tape.add(pred, v);
    }
    let mut aux = zero;
    for &v in scmim {
        aux = tape.add(aux, v);
    }
    let pred = tape.scale(pred, eta);
    let aux = tape.scale(aux, 1.0 - eta);
    Ok(tape.add(pred, aux))
}

/// Every loss component of one training step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: usize,
    pub single: Vec<f64>,
    pub single_counts: Vec<usize>,
    pub cross: Vec<f64>,
    pub cross_counts: Vec<usize>,
    pub cross_overall: f64,
    pub phi: Vec<f64>,
    pub lambda: Vec<f64>,
    /// The cross-domain term that entered the total (corrected or plain).
    pub cross_term: f64,
    pub scmim: Vec<f64>,
    pub total: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        self.single
            .iter()
            .chain(&self.cross)
            .chain(&self.phi)
            .chain(&self.lambda)
            .chain(&self.scmim)
            .chain([&self.cross_overall, &self.cross_term, &self.total])
            .all(|v| v.is_finite())
    }
}
