//! Synthetic multi-domain interaction logs with controllable relatedness.
//!
//! Every user carries one latent state per domain. Each event picks a domain
//! `d` uniformly; the next state of `d` is derived from the last state of a
//! source domain `e` chosen among the domains already visited, with weight
//! `R[d][e]`. With probability `stay` the source state is advanced by the
//! domain's shift, otherwise the state is redrawn uniformly. The item is then
//! drawn Zipf-style from the block of domain `d` that belongs to that state.
//! A domain whose row of `R` is zero off the diagonal evolves independently
//! of all other domains.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seqdata::{Dataset, DatasetMetadata, Interaction, Vocabulary};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    /// Item count per domain; its length is the number of domains.
    pub items: Vec<usize>,
    pub users: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Number of latent states per domain.
    pub latent_states: usize,
    /// `relatedness[d][e]`: weight of domain `e`'s history when domain `d`
    /// moves to its next state.
    pub relatedness: Vec<Vec<f64>>,
    /// Probability of a deterministic transition from the source state.
    pub stay: f64,
    /// Per-domain state offset applied on deterministic transitions.
    pub shift: Vec<usize>,
    /// Zipf exponent of item popularity inside a state block.
    pub zipf: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    /// Two related domains and one unrelated domain.
    fn default() -> Self {
        Self {
            items: vec![200, 200, 200],
            users: 2000,
            min_len: 10,
            max_len: 40,
            latent_states: 8,
            relatedness: vec![vec![1.0, 0.8, 0.0], vec![0.8, 1.0, 0.0], vec![0.0, 0.0, 1.0]],
            stay: 0.8,
            shift: vec![1, 1, 1],
            zipf: 0.8,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn num_domains(&self) -> usize {
        self.items.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_domains();
        let bad = |m: String| Err(Error::Validation(m));
        if n == 0 {
            return bad("at least one domain is required".into());
        }
        if self.users == 0 {
            return bad("users must be positive".into());
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad(format!("need 1 <= min_len <= max_len, got {}..{}", self.min_len, self.max_len));
        }
        if self.latent_states == 0 {
            return bad("latent_states must be positive".into());
        }
        if let Some(d) = self.items.iter().position(|&c| c < self.latent_states) {
            return bad(format!("domain {d} has {} items, fewer than {} latent states", self.items[d], self.latent_states));
        }
        if self.shift.len() != n {
            return bad(format!("shift has {} entries for {n} domains", self.shift.len()));
        }
        if !(0.0..=1.0).contains(&self.stay) {
            return bad(format!("stay must lie in [0, 1], got {}", self.stay));
        }
        if !(self.zipf >= 0.0 && self.zipf.is_finite()) {
            return bad(format!("zipf must be non-negative, got {}", self.zipf));
        }
        if self.relatedness.len() != n || self.relatedness.iter().any(|r| r.len() != n) {
            return bad(format!("relatedness must be {n}x{n}"));
        }
        for d in 0..n {
            for e in 0..n {
                let v = self.relatedness[d][e];
                if !(0.0..=1.0).contains(&v) {
                    return bad(format!("relatedness ({d}, {e}) = {v} is outside [0, 1]"));
                }
                if v != self.relatedness[e][d] {
                    return bad(format!(
                        "relatedness is not symmetric at ({d}, {e}): {v} vs {}",
                        self.relatedness[e][d]
                    ));
                }
            }
            if self.relatedness[d][d] != 1.0 {
                return bad(format!("relatedness diagonal ({d}, {d}) must be 1, got {}", self.relatedness[d][d]));
            }
        }
        Ok(())
    }

    pub fn vocabulary(&self) -> Result<Vocabulary> {
        let mut v = Vocabulary::new(&self.items)?;
        v.metadata = DatasetMetadata { name: Some("synthetic".into()), users: Some(self.users) };
        Ok(v)
    }

    /// Item range of `state` inside domain `d`, as local offsets.
    pub fn block(&self, d: usize, state: usize) -> std::ops::Range<usize> {
        let n = self.items[d];
        let s = self.latent_states;
        (state * n / s)..((state + 1) * n / s)
    }

    /// Inverse of [`SynthConfig::block`] for a local item offset.
    pub fn state_of(&self, d: usize, local: usize) -> usize {
        (0..self.latent_states).find(|&s| self.block(d, s).contains(&local)).expect("offset inside domain")
    }
}

fn user_events(config: &SynthConfig, vocab: &Vocabulary, zipf: &[WeightedIndex<f64>], user: usize) -> Vec<Interaction> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(user as u64);
    let n = config.num_domains();
    let s = config.latent_states;
    let len = rng.random_range(config.min_len..=config.max_len);
    let mut last: Vec<Option<usize>> = vec![None; n];
    let name = format!("u{user:06}");
    let mut out = Vec::with_capacity(len);
    for t in 0..len {
        let d = rng.random_range(0..n);
        let weights: Vec<f64> = (0..n).map(|e| if last[e].is_some() { config.relatedness[d][e] } else { 0.0 }).collect();
        let total: f64 = weights.iter().sum();
        let state = if total > 0.0 {
            let mut pick = rng.random::<f64>() * total;
            let mut source = n - 1;
            for (e, &w) in weights.iter().enumerate() {
                if pick < w {
                    source = e;
                    break;
                }
                pick -= w;
            }
            let from = last[source].expect("weighted source has history");
            if rng.random::<f64>() < config.stay {
                (from + config.shift[d]) % s
            } else {
                rng.random_range(0..s)
            }
        } else {
            rng.random_range(0..s)
        };
        last[d] = Some(state);
        let block = config.block(d, state);
        let local = block.start + zipf[block.len()].sample(&mut rng).min(block.len() - 1);
        out.push(Interaction {
            user: name.clone(),
            item: vocab.domain_range(d).start + local,
            domain: d,
            timestamp: t as i64,
        });
    }
    out
}

/// Generates the dataset described by `config`; users are produced in
/// parallel from per-user streams, so the output depends only on the config.
pub fn generate(config: &SynthConfig) -> Result<Dataset> {
    config.validate()?;
    let vocab = config.vocabulary()?;
    let max_block = (0..config.num_domains())
        .flat_map(|d| (0..config.latent_states).map(move |s| (d, s)))
        .map(|(d, s)| config.block(d, s).len())
        .max()
        .unwrap_or(1);
    // zipf[k] samples a rank in 0..k
    let zipf: Vec<WeightedIndex<f64>> = (0..=max_block)
        .map(|k| {
            let w: Vec<f64> = (0..k.max(1)).map(|r| 1.0 / ((r + 1) as f64).powf(config.zipf)).collect();
            WeightedIndex::new(w).expect("positive weights")
        })
        .collect();
    let interactions: Vec<Interaction> = (0..config.users)
        .into_par_iter()
        .map(|u| user_events(config, &vocab, &zipf, u))
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect();
    Ok(Dataset { vocab, interactions })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seqdata::build_sequences;

    fn small(relatedness: Vec<Vec<f64>>, users: usize) -> SynthConfig {
        SynthConfig { users, relatedness, items: vec![40, 40], shift: vec![1, 1], latent_states: 4, ..SynthConfig::default() }
    }

    #[test]
    fn default_config_is_valid_and_partitioned() {
        let c = SynthConfig { users: 50, ..SynthConfig::default() };
        let data = generate(&c).unwrap();
        let seqs = build_sequences(&data.interactions);
        assert_eq!(seqs.len(), 50);
        for e in &data.interactions {
            assert!(data.vocab.domain_range(e.domain).contains(&e.item));
        }
        for s in &seqs {
            assert!((10..=40).contains(&s.len()));
        }
    }

    #[test]
    fn blocks_tile_each_domain() {
        let c = SynthConfig { items: vec![203, 200, 200], ..SynthConfig::default() };
        let mut next = 0;
        for s in 0..8 {
            let b = c.block(0, s);
            assert_eq!(b.start, next);
            assert!(!b.is_empty());
            next = b.end;
            assert_eq!(c.state_of(0, b.start), s);
        }
        assert_eq!(next, 203);
    }

    #[test]
    fn fixed_seed_is_deterministic() {
        let c = SynthConfig { users: 30, ..SynthConfig::default() };
        assert_eq!(generate(&c).unwrap().interactions, generate(&c).unwrap().interactions);
        let other = SynthConfig { seed: 8, ..c.clone() };
        assert_ne!(generate(&c).unwrap().interactions, generate(&other).unwrap().interactions);
    }

    #[test]
    fn invalid_configs_name_the_problem() {
        let mut c = SynthConfig::default();
        c.relatedness[0][2] = 0.5;
        let msg = c.validate().unwrap_err().to_string();
        assert!(msg.contains("(0, 2)"), "{msg}");
        let mut c = SynthConfig::default();
        c.relatedness[1][1] = 0.9;
        assert!(c.validate().is_err());
        assert!(SynthConfig { min_len: 5, max_len: 4, ..SynthConfig::default() }.validate().is_err());
        assert!(SynthConfig { items: vec![4, 200, 200], ..SynthConfig::default() }.validate().is_err());
    }

    #[test]
    fn unrelated_domain_ignores_others() {
        // with R = identity, domain 1's state follows only its own history
        let c = small(vec![vec![1.0, 0.0], vec![0.0, 1.0]], 300);
        let c = SynthConfig { stay: 1.0, ..c };
        let data = generate(&c).unwrap();
        for s in build_sequences(&data.interactions) {
            let states: Vec<usize> = s
                .tokens
                .iter()
                .zip(&s.domains)
                .filter(|(_, &d)| d == 1)
                .map(|(&t, _)| c.state_of(1, t - 40))
                .collect();
            for w in states.windows(2) {
                assert_eq!(w[1], (w[0] + 1) % 4);
            }
        }
    }

    /// Contingency table of (last state of domain 0, new state of domain 1)
    /// over every domain-1 event that follows at least one domain-0 event.
    fn cross_table(relatedness: Vec<Vec<f64>>, users: usize) -> Vec<Vec<f64>> {
        let c = small(relatedness, users);
        let data = generate(&c).unwrap();
        let mut table = vec![vec![0.0; c.latent_states]; c.latent_states];
        for s in build_sequences(&data.interactions) {
            let mut last0 = None;
            for (&t, &d) in s.tokens.iter().zip(&s.domains) {
                let state = c.state_of(d, t - 40 * d);
                match (d, last0) {
                    (0, _) => last0 = Some(state),
                    (_, Some(a)) => table[a][state] += 1.0,
                    _ => {}
                }
            }
        }
        table
    }

    fn marginals(table: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>, f64) {
        let rows: Vec<f64> = table.iter().map(|r| r.iter().sum()).collect();
        let cols: Vec<f64> = (0..table[0].len()).map(|j| table.iter().map(|r| r[j]).sum()).collect();
        let n = rows.iter().sum();
        (rows, cols, n)
    }

    fn chi_square(table: &[Vec<f64>]) -> f64 {
        let (rows, cols, n) = marginals(table);
        let mut x = 0.0;
        for (i, r) in table.iter().enumerate() {
            for (j, &o) in r.iter().enumerate() {
                let e = rows[i] * cols[j] / n;
                x += (o - e).powi(2) / e;
            }
        }
        x
    }

    fn mutual_information(table: &[Vec<f64>]) -> f64 {
        let (rows, cols, n) = marginals(table);
        let mut mi = 0.0;
        for (i, r) in table.iter().enumerate() {
            for (j, &o) in r.iter().enumerate() {
                if o > 0.0 {
                    mi += o / n * (o * n / (rows[i] * cols[j])).ln();
                }
            }
        }
        mi
    }

    // upper 1% point of chi-square with (4 - 1)^2 = 9 degrees of freedom
    const CHI2_9DOF_99: f64 = 21.666;

    #[test]
    fn unrelated_domains_pass_independence_test() {
        let table = cross_table(vec![vec![1.0, 0.0], vec![0.0, 1.0]], 10_000);
        let x = chi_square(&table);
        assert!(x < CHI2_9DOF_99, "chi-square {x}");
    }

    #[test]
    fn fully_related_domains_fail_independence_test() {
        let table = cross_table(vec![vec![1.0, 1.0], vec![1.0, 1.0]], 10_000);
        let x = chi_square(&table);
        assert!(x > CHI2_9DOF_99 * 10.0, "chi-square {x}");
    }

    #[test]
    fn dependence_grows_with_relatedness() {
        let mi: Vec<f64> = [0.0, 0.3, 0.6, 1.0]
            .iter()
            .map(|&r| mutual_information(&cross_table(vec![vec![1.0, r], vec![r, 1.0]], 4000)))
            .collect();
        assert!(mi.windows(2).all(|w| w[0] < w[1]), "{mi:?}");
    }
}
