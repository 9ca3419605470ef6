//! Leave-one-out ranking evaluation.
//!
//! Each user's last item is the test target and the penultimate one the
//! validation target. The target competes against 99 items sampled from its
//! own domain that the user never touched; only the cross-domain
//! representation at the final position scores candidates. Ties count
//! against the target.

use std::collections::HashSet;
use std::fmt::Write as _;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::dot;
use crate::error::{Error, Result};
use crate::model::SyncRecModel;
use crate::seqdata::{CrossDomainSequence, DomainId, ItemId, Vocabulary};

pub const NUM_NEGATIVES: usize = 99;
/// Users encoded per forward pass.
const ENCODE_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserSplit {
    /// Everything but the last two events.
    pub train: CrossDomainSequence,
    pub validation: (ItemId, DomainId),
    pub test: (ItemId, DomainId),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Validation,
    Test,
}

impl UserSplit {
    /// Items visible before the stage's target.
    pub fn history(&self, stage: Stage) -> Vec<ItemId> {
        let mut h = self.train.tokens.clone();
        if stage == Stage::Test {
            h.push(self.validation.0);
        }
        h
    }

    pub fn target(&self, stage: Stage) -> (ItemId, DomainId) {
        match stage {
            Stage::Validation => self.validation,
            Stage::Test => self.test,
        }
    }

    /// The full original sequence.
    pub fn sequence(&self) -> CrossDomainSequence {
        let mut s = self.train.clone();
        for (item, d) in [self.validation, self.test] {
            s.tokens.push(item);
            s.domains.push(d);
        }
        s
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalSplit {
    pub users: Vec<UserSplit>,
    /// Users with fewer than three events; they are trained on but never
    /// evaluated.
    pub excluded: Vec<CrossDomainSequence>,
}

impl EvalSplit {
    /// Training sequences: every evaluated user's prefix plus the excluded
    /// users' full histories.
    pub fn training_sequences(&self) -> Vec<CrossDomainSequence> {
        self.users
            .iter()
            .map(|u| u.train.clone())
            .chain(self.excluded.iter().cloned())
            .filter(|s| !s.is_empty())
            .collect()
    }
}

pub fn make_split(sequences: &[CrossDomainSequence]) -> EvalSplit {
    let mut split = EvalSplit::default();
    for seq in sequences {
        let n = seq.len();
        if n < 3 {
            split.excluded.push(seq.clone());
            continue;
        }
        let train = CrossDomainSequence {
            user: seq.user.clone(),
            tokens: seq.tokens[..n - 2].to_vec(),
            domains: seq.domains[..n - 2].to_vec(),
        };
        split.users.push(UserSplit {
            train,
            validation: (seq.tokens[n - 2], seq.domains[n - 2]),
            test: (seq.tokens[n - 1], seq.domains[n - 1]),
        });
    }
    split
}

/// The target followed by 99 negatives from `V^d`, none of them in
/// `exclude` or equal to the target.
///
/// With `with_replacement`, negatives may repeat (but still avoid `exclude`),
/// which lets small domains be evaluated.
pub fn candidate_set<R: Rng + ?Sized>(
    rng: &mut R,
    target: ItemId,
    domain: DomainId,
    exclude: &HashSet<ItemId>,
    vocab: &Vocabulary,
    with_replacement: bool,
) -> Result<Vec<ItemId>> {
    if vocab.domain_of(target) != Some(domain) {
        return Err(Error::Evaluation(format!("target {target} is not in domain {domain}")));
    }
    let range = vocab.domain_range(domain);
    let allowed = |x: ItemId| x != target && !exclude.contains(&x);
    let blocked = 1 + exclude.iter().filter(|&&x| x != target && range.contains(&x)).count();
    let pool_size = range.len() - blocked;
    let mut out = Vec::with_capacity(NUM_NEGATIVES + 1);
    out.push(target);
    if with_replacement {
        if pool_size == 0 {
            return Err(Error::Evaluation(format!("no negative available in domain {domain}")));
        }
        while out.len() <= NUM_NEGATIVES {
            let x = rng.random_range(range.clone());
            if allowed(x) {
                out.push(x);
            }
        }
        return Ok(out);
    }
    if pool_size < NUM_NEGATIVES {
        return Err(Error::Evaluation(format!(
            "domain {domain} has only {pool_size} eligible negatives for target {target}; need {NUM_NEGATIVES}"
        )));
    }
    if pool_size >= 4 * NUM_NEGATIVES {
        let mut seen = HashSet::with_capacity(NUM_NEGATIVES);
        while out.len() <= NUM_NEGATIVES {
            let x = rng.random_range(range.clone());
            if allowed(x) && seen.insert(x) {
                out.push(x);
            }
        }
    } else {
        let pool: Vec<ItemId> = range.filter(|&x| allowed(x)).collect();
        out.extend(index::sample(rng, pool.len(), NUM_NEGATIVES).into_iter().map(|i| pool[i]));
    }
    Ok(out)
}

/// 1-based rank of `scores[0]` among all scores; every other score at least
/// as high pushes it down.
pub fn rank_of_first(scores: &[f64]) -> usize {
    let truth = scores[0];
    1 + scores[1..].iter().filter(|&&s| s >= truth).count()
}

/// Scores each candidate by its dot product with `rep`.
pub fn score_candidates(rep: &[f64], candidates: &[ItemId], model: &SyncRecModel) -> Vec<f64> {
    let table = model.item_table();
    candidates.iter().map(|&c| dot(rep, table.row(c))).collect()
}

/// Rank of `candidates[0]` for a user with `history`.
pub fn rank(model: &SyncRecModel, history: &[ItemId], candidates: &[ItemId], vocab: &Vocabulary) -> Result<usize> {
    let rep = model.encode_histories(&[history], vocab)?;
    Ok(rank_of_first(&score_candidates(rep.row(0), candidates, model)))
}

/// Every item of `domain` ordered by descending score (ties by item id),
/// truncated to `k`.
pub fn top_k(model: &SyncRecModel, history: &[ItemId], domain: DomainId, k: usize, vocab: &Vocabulary) -> Result<Vec<(ItemId, f64)>> {
    if domain >= vocab.num_domains() {
        return Err(Error::Validation(format!("unknown domain {domain}")));
    }
    let rep = model.encode_histories(&[history], vocab)?;
    let items: Vec<ItemId> = vocab.domain_range(domain).collect();
    let scores = score_candidates(rep.row(0), &items, model);
    let mut scored: Vec<(ItemId, f64)> = items.into_iter().zip(scores).collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(k);
    Ok(scored)
}

pub fn hit_ratio(ranks: &[usize], k: usize) -> f64 {
    ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64
}

pub fn ndcg(ranks: &[usize], k: usize) -> f64 {
    ranks.iter().map(|&r| if r <= k { 1.0 / ((r + 1) as f64).log2() } else { 0.0 }).sum::<f64>() / ranks.len() as f64
}

pub fn mrr(ranks: &[usize], cutoff: usize) -> f64 {
    ranks.iter().map(|&r| if r <= cutoff { 1.0 / r as f64 } else { 0.0 }).sum::<f64>() / ranks.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub hr5: f64,
    pub hr10: f64,
    pub ndcg5: f64,
    pub ndcg10: f64,
    pub mrr10: f64,
}

impl Metrics {
    /// `None` for an empty rank list.
    pub fn from_ranks(ranks: &[usize]) -> Option<Metrics> {
        if ranks.is_empty() {
            return None;
        }
        debug_assert!(ranks.iter().all(|&r| r >= 1));
        Some(Metrics {
            hr5: hit_ratio(ranks, 5),
            hr10: hit_ratio(ranks, 10),
            ndcg5: ndcg(ranks, 5),
            ndcg10: ndcg(ranks, 10),
            mrr10: mrr(ranks, 10),
        })
    }

    pub fn named(&self) -> [(&'static str, f64); 5] {
        [
            ("HR@5", self.hr5),
            ("HR@10", self.hr10),
            ("NDCG@5", self.ndcg5),
            ("NDCG@10", self.ndcg10),
            ("MRR@10", self.mrr10),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainReport {
    pub domain: String,
    pub users: usize,
    pub metrics: Option<Metrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingReport {
    pub stage: Stage,
    pub domains: Vec<DomainReport>,
    pub overall: DomainReport,
}

impl RankingReport {
    pub fn from_ranks(stage: Stage, ranks: &[usize], domains: &[DomainId], vocab: &Vocabulary) -> Self {
        let per = (0..vocab.num_domains())
            .map(|d| {
                let r: Vec<usize> = ranks.iter().zip(domains).filter(|(_, &x)| x == d).map(|(&r, _)| r).collect();
                DomainReport { domain: vocab.domain_name(d).to_string(), users: r.len(), metrics: Metrics::from_ranks(&r) }
            })
            .collect();
        let overall = DomainReport { domain: "all".into(), users: ranks.len(), metrics: Metrics::from_ranks(ranks) };
        RankingReport { stage, domains: per, overall }
    }

    /// `MRR@10` of one domain, if it had users.
    pub fn mrr(&self, domain: DomainId) -> Option<f64> {
        self.domains[domain].metrics.map(|m| m.mrr10)
    }

    /// One `domain<TAB>metric<TAB>value` line per domain and metric.
    pub fn to_rows(&self) -> String {
        let mut out = String::new();
        for r in self.domains.iter().chain([&self.overall]) {
            let _ = writeln!(out, "{}\tusers\t{}", r.domain, r.users);
            if let Some(m) = r.metrics {
                for (name, v) in m.named() {
                    let _ = writeln!(out, "{}\t{name}\t{v:.6}", r.domain);
                }
            }
        }
        out
    }

    /// Domains as columns, metrics as rows.
    pub fn to_grid(&self) -> String {
        let cols: Vec<&DomainReport> = self.domains.iter().chain([&self.overall]).collect();
        let mut out = format!("{:<10}", "metric");
        for c in &cols {
            let _ = write!(out, "{:>12}", c.domain);
        }
        out.push('\n');
        let _ = write!(out, "{:<10}", "users");
        for c in &cols {
            let _ = write!(out, "{:>12}", c.users);
        }
        out.push('\n');
        for (i, name) in ["HR@5", "HR@10", "NDCG@5", "NDCG@10", "MRR@10"].iter().enumerate() {
            let _ = write!(out, "{name:<10}");
            for c in &cols {
                match c.metrics {
                    Some(m) => {
                        let _ = write!(out, "{:>12.4}", m.named()[i].1);
                    }
                    None => {
                        let _ = write!(out, "{:>12}", "-");
                    }
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Deterministic sampling stream for one `(user, epoch)` pair.
pub fn candidate_rng(seed: u64, epoch: u64, user: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(user as u64);
    rng
}

/// How candidate sets are drawn.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Sampling {
    pub seed: u64,
    pub epoch: u64,
    pub with_replacement: bool,
}

/// Candidate sets for every user of `split` at `stage`.
pub fn build_candidates(split: &EvalSplit, stage: Stage, vocab: &Vocabulary, sampling: Sampling) -> Result<Vec<Vec<ItemId>>> {
    split
        .users
        .iter()
        .enumerate()
        .map(|(i, u)| {
            let (target, domain) = u.target(stage);
            let exclude: HashSet<ItemId> = u.sequence().tokens.into_iter().collect();
            let mut rng = candidate_rng(sampling.seed, sampling.epoch, i);
            candidate_set(&mut rng, target, domain, &exclude, vocab, sampling.with_replacement)
        })
        .collect()
}

/// Ranks `candidates[u][0]` for each history, in parallel over user chunks.
pub fn rank_all(model: &SyncRecModel, histories: &[Vec<ItemId>], candidates: &[Vec<ItemId>], vocab: &Vocabulary) -> Result<Vec<usize>> {
    if histories.len() != candidates.len() {
        return Err(Error::Evaluation(format!(
            "{} histories but {} candidate sets",
            histories.len(),
            candidates.len()
        )));
    }
    let chunks: Vec<Result<Vec<usize>>> = histories
        .par_chunks(ENCODE_CHUNK)
        .zip(candidates.par_chunks(ENCODE_CHUNK))
        .map(|(hs, cs)| {
            let refs: Vec<&[ItemId]> = hs.iter().map(Vec::as_slice).collect();
            let reps = model.encode_histories(&refs, vocab)?;
            Ok(cs.iter().enumerate().map(|(i, c)| rank_of_first(&score_candidates(reps.row(i), c, model))).collect())
        })
        .collect();
    let mut ranks = Vec::with_capacity(histories.len());
    for c in chunks {
        ranks.extend(c?);
    }
    Ok(ranks)
}

/// Full leave-one-out evaluation of `model` at `stage`.
pub fn evaluate(model: &SyncRecModel, split: &EvalSplit, stage: Stage, vocab: &Vocabulary, sampling: Sampling) -> Result<RankingReport> {
    let candidates = build_candidates(split, stage, vocab, sampling)?;
    let histories: Vec<Vec<ItemId>> = split.users.iter().map(|u| u.history(stage)).collect();
    let ranks = rank_all(model, &histories, &candidates, vocab)?;
    let domains: Vec<DomainId> = split.users.iter().map(|u| u.target(stage).1).collect();
    Ok(RankingReport::from_ranks(stage, &ranks, &domains, vocab))
}

/// Test-stage metrics for users whose test item lies in `domain`, ranked
/// from their `domain`-only history against the same candidate sets the full
/// evaluation uses.
pub fn evaluate_single_domain(
    model: &SyncRecModel,
    split: &EvalSplit,
    domain: DomainId,
    vocab: &Vocabulary,
    sampling: Sampling,
) -> Result<Option<Metrics>> {
    let candidates = build_candidates(split, Stage::Test, vocab, sampling)?;
    let (histories, cands): (Vec<Vec<ItemId>>, Vec<Vec<ItemId>>) = split
        .users
        .iter()
        .zip(candidates)
        .filter(|(u, _)| u.test.1 == domain)
        .map(|(u, c)| {
            let full = u.history(Stage::Test);
            let doms = u.sequence().domains;
            let h = full.into_iter().zip(doms).filter(|&(_, d)| d == domain).map(|(t, _)| t).collect();
            (h, c)
        })
        .unzip();
    let ranks = rank_all(model, &histories, &cands, vocab)?;
    Ok(Metrics::from_ranks(&ranks))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seq(tokens: &[ItemId], domains: &[DomainId]) -> CrossDomainSequence {
        CrossDomainSequence { user: "u".into(), tokens: tokens.to_vec(), domains: domains.to_vec() }
    }

    #[test]
    fn split_traces() {
        let s = make_split(&[seq(&[1, 2, 3, 4], &[0, 0, 0, 0]), seq(&[1, 2], &[0, 0])]);
        assert_eq!(s.users.len(), 1);
        assert_eq!(s.excluded.len(), 1);
        let u = &s.users[0];
        assert_eq!(u.train.tokens, vec![1, 2]);
        assert_eq!(u.validation, (3, 0));
        assert_eq!(u.test, (4, 0));
        assert_eq!(u.history(Stage::Test), vec![1, 2, 3]);
        assert_eq!(u.sequence(), seq(&[1, 2, 3, 4], &[0, 0, 0, 0]));
    }

    #[test]
    fn forced_full_domain() {
        let vocab = Vocabulary::new(&[100, 150]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut c = candidate_set(&mut rng, 7, 0, &HashSet::from([7]), &vocab, false).unwrap();
        c.sort_unstable();
        assert_eq!(c, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn candidates_avoid_history_and_contain_target_once() {
        let vocab = Vocabulary::new(&[50, 1000]).unwrap();
        let exclude: HashSet<ItemId> = (50..400).step_by(3).chain([3]).collect();
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = candidate_set(&mut rng, 120, 1, &exclude, &vocab, false).unwrap();
            assert_eq!(c.len(), 100);
            assert_eq!(c.iter().filter(|&&x| x == 120).count(), 1);
            assert!(c[1..].iter().all(|x| !exclude.contains(x) && (50..1050).contains(x)));
            assert_eq!(c.iter().collect::<HashSet<_>>().len(), 100);
        }
    }

    #[test]
    fn small_domain_needs_replacement() {
        let vocab = Vocabulary::new(&[50]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(candidate_set(&mut rng, 0, 0, &HashSet::new(), &vocab, false), Err(Error::Evaluation(_))));
        let c = candidate_set(&mut rng, 0, 0, &HashSet::from([1, 2]), &vocab, true).unwrap();
        assert_eq!(c.len(), 100);
        assert!(c[1..].iter().all(|&x| x != 0 && x != 1 && x != 2));
    }

    #[test]
    fn rank_rules() {
        assert_eq!(rank_of_first(&[5.0, 1.0, 2.0, 3.0]), 1);
        assert_eq!(rank_of_first(&[0.0; 100]), 100);
        assert_eq!(rank_of_first(&[2.0, 3.0, 2.0, 1.0]), 3);
    }

    #[test]
    fn metric_closed_forms() {
        let m = Metrics::from_ranks(&[1, 1, 1]).unwrap();
        assert_eq!((m.hr5, m.hr10, m.ndcg5, m.ndcg10, m.mrr10), (1.0, 1.0, 1.0, 1.0, 1.0));
        let m = Metrics::from_ranks(&[4]).unwrap();
        assert!((m.mrr10 - 0.25).abs() < 1e-12);
        assert!((m.ndcg5 - 1.0 / 5f64.log2()).abs() < 1e-12);
        assert!((m.ndcg5 - 0.4307).abs() < 1e-4);
        let m = Metrics::from_ranks(&[11]).unwrap();
        assert_eq!((m.hr10, m.ndcg10, m.mrr10), (0.0, 0.0, 0.0));
        assert!(Metrics::from_ranks(&[]).is_none());
    }

    #[test]
    fn report_counts_by_target_domain() {
        let vocab = Vocabulary::new(&[5, 5, 5]).unwrap();
        let r = RankingReport::from_ranks(Stage::Test, &[1, 2, 20], &[0, 0, 1], &vocab);
        assert_eq!(r.domains[0].users, 2);
        assert_eq!(r.mrr(0), Some(0.75));
        assert_eq!(r.mrr(1), Some(0.0));
        assert!(r.domains[2].metrics.is_none());
        assert_eq!(r.overall.users, 3);
        assert!(r.to_grid().contains("MRR@10"));
        assert_eq!(r.to_rows().lines().filter(|l| l.starts_with("domain0\t")).count(), 6);
    }

    proptest! {
        #[test]
        fn rank_matches_sort_oracle(scores in proptest::collection::vec(-3i32..3, 2..40)) {
            let scores: Vec<f64> = scores.into_iter().map(f64::from).collect();
            let mut order: Vec<usize> = (0..scores.len()).collect();
            // stable sort, target last among equals
            order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then((a == 0).cmp(&(b == 0))));
            let oracle = order.iter().position(|&i| i == 0).unwrap() + 1;
            prop_assert_eq!(rank_of_first(&scores), oracle);
            let shifted: Vec<f64> = scores.iter().map(|s| s + 17.0).collect();
            prop_assert_eq!(rank_of_first(&shifted), oracle);
        }

        #[test]
        fn metric_order(ranks in proptest::collection::vec(1usize..120, 1..60)) {
            let m = Metrics::from_ranks(&ranks).unwrap();
            prop_assert!(m.hr5 <= m.hr10);
            prop_assert!(m.ndcg5 <= m.hr5 && m.ndcg10 <= m.hr10);
            prop_assert!(m.mrr10 <= m.hr10);
            for (_, v) in m.named() {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }

        #[test]
        fn split_reconstitutes(len in 0usize..12) {
            let s = seq(&(0..len).collect::<Vec<_>>(), &vec![0; len]);
            let split = make_split(std::slice::from_ref(&s));
            if len < 3 {
                prop_assert_eq!(split.users.len(), 0);
            } else {
                prop_assert_eq!(split.users[0].sequence(), s);
            }
        }
    }
}
