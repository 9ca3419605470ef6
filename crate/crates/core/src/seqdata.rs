//! Interaction logs, chronological cross-domain sequences, their per-domain
//! split, and fixed-length padded batches.
//!
//! Item ids are global and partitioned contiguously by domain: domain `d`
//! owns `offset(d) .. offset(d) + |V^d|`. Two reserved tokens follow the item
//! range: `SOS = |V|` and `PAD = |V| + 1`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::ops::Range;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type ItemId = usize;
pub type DomainId = usize;

pub const TSV_HEADER: &str = "user\titem\tdomain\tts";
pub const INTERACTIONS_FILE: &str = "interactions.tsv";
pub const VOCAB_FILE: &str = "vocab.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub user: String,
    pub item: ItemId,
    pub domain: DomainId,
    pub timestamp: i64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainRange {
    pub name: String,
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMetadata {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    /// Expected number of distinct users; checked on ingestion when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub users: Option<usize>,
}

/// On-disk form of [`Vocabulary`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocabManifest {
    pub num_domains: usize,
    pub domains: Vec<DomainRange>,
    pub sos: usize,
    pub pad: usize,
    #[serde(default)]
    pub metadata: DatasetMetadata,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    names: Vec<String>,
    offsets: Vec<usize>,
    total: usize,
    pub metadata: DatasetMetadata,
}

impl Vocabulary {
    pub fn new(domain_sizes: &[usize]) -> Result<Self> {
        let names = (0..domain_sizes.len()).map(|d| format!("domain{d}")).collect();
        Self::with_names(domain_sizes, names)
    }

    pub fn with_names(domain_sizes: &[usize], names: Vec<String>) -> Result<Self> {
        if domain_sizes.is_empty() {
            return Err(Error::Validation("vocabulary needs at least one domain".into()));
        }
        if names.len() != domain_sizes.len() {
            return Err(Error::Validation("one name per domain required".into()));
        }
        if let Some(d) = domain_sizes.iter().position(|&n| n == 0) {
            return Err(Error::Validation(format!("domain {d} has no items")));
        }
        let mut offsets = Vec::with_capacity(domain_sizes.len() + 1);
        let mut total = 0;
        for &n in domain_sizes {
            offsets.push(total);
            total += n;
        }
        offsets.push(total);
        Ok(Self { names, offsets, total, metadata: DatasetMetadata::default() })
    }

    pub fn num_domains(&self) -> usize {
        self.names.len()
    }

    /// `|V|`.
    pub fn num_items(&self) -> usize {
        self.total
    }

    pub fn sos(&self) -> usize {
        self.total
    }

    pub fn pad(&self) -> usize {
        self.total + 1
    }

    /// Rows of the embedding table: items plus SOS and PAD.
    pub fn table_rows(&self) -> usize {
        self.total + 2
    }

    pub fn domain_name(&self, d: DomainId) -> &str {
        &self.names[d]
    }

    pub fn domain_range(&self, d: DomainId) -> Range<ItemId> {
        self.offsets[d]..self.offsets[d + 1]
    }

    pub fn domain_size(&self, d: DomainId) -> usize {
        self.offsets[d + 1] - self.offsets[d]
    }

    pub fn domain_sizes(&self) -> Vec<usize> {
        (0..self.num_domains()).map(|d| self.domain_size(d)).collect()
    }

    pub fn is_item(&self, token: usize) -> bool {
        token < self.total
    }

    pub fn domain_of(&self, item: ItemId) -> Option<DomainId> {
        if !self.is_item(item) {
            return None;
        }
        // offsets is sorted; the last offset <= item identifies the domain
        Some(self.offsets.partition_point(|&o| o <= item) - 1)
    }

    pub fn to_manifest(&self) -> VocabManifest {
        VocabManifest {
            num_domains: self.num_domains(),
            domains: (0..self.num_domains())
                .map(|d| {
                    let r = self.domain_range(d);
                    DomainRange { name: self.names[d].clone(), start: r.start, end: r.end }
                })
                .collect(),
            sos: self.sos(),
            pad: self.pad(),
            metadata: self.metadata.clone(),
        }
    }

    pub fn from_manifest(m: &VocabManifest) -> Result<Self> {
        if m.num_domains != m.domains.len() {
            return Err(Error::Validation(format!(
                "num_domains = {} but {} domain ranges listed",
                m.num_domains,
                m.domains.len()
            )));
        }
        let mut expected_start = 0;
        for (d, r) in m.domains.iter().enumerate() {
            if r.start != expected_start || r.end <= r.start {
                return Err(Error::Validation(format!(
                    "domain {d} range {}..{} is not contiguous with the previous domain",
                    r.start, r.end
                )));
            }
            expected_start = r.end;
        }
        let sizes: Vec<usize> = m.domains.iter().map(|r| r.end - r.start).collect();
        let mut vocab = Self::with_names(&sizes, m.domains.iter().map(|r| r.name.clone()).collect())?;
        if m.sos != vocab.sos() || m.pad != vocab.pad() {
            return Err(Error::Validation(format!(
                "reserved tokens must be SOS={} PAD={}, manifest has SOS={} PAD={}",
                vocab.sos(),
                vocab.pad(),
                m.sos,
                m.pad
            )));
        }
        vocab.metadata = m.metadata.clone();
        Ok(vocab)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: VocabManifest = serde_json::from_str(&text)?;
        Self::from_manifest(&manifest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(&self.to_manifest())?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// A user's chronologically merged history over all domains.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrossDomainSequence {
    pub user: String,
    pub tokens: Vec<ItemId>,
    pub domains: Vec<DomainId>,
}

impl CrossDomainSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Keeps only the events of one domain.
    pub fn restrict_to(&self, domain: DomainId) -> CrossDomainSequence {
        let (tokens, domains) = self
            .tokens
            .iter()
            .zip(&self.domains)
            .filter(|(_, &d)| d == domain)
            .map(|(&t, &d)| (t, d))
            .unzip();
        CrossDomainSequence { user: self.user.clone(), tokens, domains }
    }
}

/// Reads a 4-column TSV log and validates it against `vocab`.
///
/// The result is stably sorted by `(user, timestamp)`.
pub fn ingest(path: &Path, vocab: &Vocabulary) -> Result<Vec<Interaction>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    let parse_err = |line: usize, message: String| Error::Parse { path: path.to_path_buf(), line, message };
    for (n, line) in reader.lines().enumerate() {
        let line_no = n + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if n == 0 {
            if line.trim_end() != TSV_HEADER {
                return Err(parse_err(line_no, format!("expected header {TSV_HEADER:?}, found {line:?}")));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(parse_err(line_no, format!("expected 4 tab-separated fields, found {}", fields.len())));
        }
        let item: ItemId =
            fields[1].trim().parse().map_err(|e| parse_err(line_no, format!("bad item id {:?}: {e}", fields[1])))?;
        let domain: DomainId =
            fields[2].trim().parse().map_err(|e| parse_err(line_no, format!("bad domain id {:?}: {e}", fields[2])))?;
        let timestamp: i64 =
            fields[3].trim().parse().map_err(|e| parse_err(line_no, format!("bad timestamp {:?}: {e}", fields[3])))?;
        if domain >= vocab.num_domains() {
            return Err(Error::Validation(format!(
                "line {line_no}: unknown domain id {domain} (vocabulary has {})",
                vocab.num_domains()
            )));
        }
        match vocab.domain_of(item) {
            Some(d) if d == domain => {}
            Some(d) => {
                return Err(Error::Validation(format!(
                    "line {line_no}: item {item} belongs to domain {d}, not {domain}"
                )))
            }
            None => return Err(Error::Validation(format!("line {line_no}: item {item} is outside the vocabulary"))),
        }
        out.push(Interaction { user: fields[0].to_string(), item, domain, timestamp });
    }
    out.sort_by(|a, b| a.user.cmp(&b.user).then(a.timestamp.cmp(&b.timestamp)));
    if let Some(expected) = vocab.metadata.users {
        let users = count_users(&out);
        if users != expected {
            return Err(Error::Validation(format!("manifest declares {expected} users, log has {users}")));
        }
    }
    Ok(out)
}

pub fn count_users(events: &[Interaction]) -> usize {
    let mut users: Vec<&str> = events.iter().map(|e| e.user.as_str()).collect();
    users.sort_unstable();
    users.dedup();
    users.len()
}

pub fn write_tsv(path: &Path, events: &[Interaction]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "{TSV_HEADER}").map_err(io)?;
    for e in events {
        writeln!(w, "{}\t{}\t{}\t{}", e.user, e.item, e.domain, e.timestamp).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Merges one user's events in timestamp order (ties keep input order).
pub fn build_cross_sequence(events: &[Interaction]) -> CrossDomainSequence {
    let mut sorted: Vec<&Interaction> = events.iter().collect();
    sorted.sort_by_key(|e| e.timestamp);
    CrossDomainSequence {
        user: sorted.first().map(|e| e.user.clone()).unwrap_or_default(),
        tokens: sorted.iter().map(|e| e.item).collect(),
        domains: sorted.iter().map(|e| e.domain).collect(),
    }
}

/// Groups a log by user (sorted by user id) and builds each cross sequence.
pub fn build_sequences(events: &[Interaction]) -> Vec<CrossDomainSequence> {
    let mut by_user: BTreeMap<&str, Vec<Interaction>> = BTreeMap::new();
    for e in events {
        by_user.entry(e.user.as_str()).or_default().push(e.clone());
    }
    by_user.values().map(|ev| build_cross_sequence(ev)).collect()
}

pub fn split_by_domain(seq: &CrossDomainSequence) -> BTreeMap<DomainId, Vec<ItemId>> {
    let mut out: BTreeMap<DomainId, Vec<ItemId>> = BTreeMap::new();
    for (&t, &d) in seq.tokens.iter().zip(&seq.domains) {
        out.entry(d).or_default().push(t);
    }
    out
}

/// Inverse of [`split_by_domain`] given the original domain order.
pub fn merge_by_domain(split: &BTreeMap<DomainId, Vec<ItemId>>, domains: &[DomainId]) -> Option<Vec<ItemId>> {
    let mut cursors: BTreeMap<DomainId, usize> = BTreeMap::new();
    let mut out = Vec::with_capacity(domains.len());
    for &d in domains {
        let c = cursors.entry(d).or_insert(0);
        out.push(*split.get(&d)?.get(*c)?);
        *c += 1;
    }
    let consumed = cursors.iter().all(|(d, &c)| split[d].len() == c);
    (consumed && split.keys().all(|d| cursors.contains_key(d))).then_some(out)
}

/// One padded row: model input, next-item targets, and the loss mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PaddedRow {
    pub input: Vec<usize>,
    pub target: Vec<usize>,
    pub mask: Vec<bool>,
}

/// Left-pads `[SOS, x_1..x_{n-1}]` / `[x_1..x_n]` to length `steps`, keeping
/// the most recent positions when the sequence is longer.
pub fn pad_and_shift(tokens: &[ItemId], steps: usize, vocab: &Vocabulary) -> Result<PaddedRow> {
    if steps < 2 {
        return Err(Error::Config(format!("sequence length T must be at least 2, got {steps}")));
    }
    let pad = vocab.pad();
    let n = tokens.len();
    let keep = n.min(steps);
    let lead = steps - keep;
    let mut input = vec![pad; steps];
    let mut target = vec![pad; steps];
    let mut mask = vec![false; steps];
    for i in 0..keep {
        // position i of the kept suffix predicts tokens[n - keep + i]
        let j = n - keep + i;
        target[lead + i] = tokens[j];
        input[lead + i] = if j == 0 { vocab.sos() } else { tokens[j - 1] };
        mask[lead + i] = true;
    }
    Ok(PaddedRow { input, target, mask })
}

/// Model input for predicting the item after `history`: the last `steps`
/// tokens of `[SOS, history..]`, left-padded.
pub fn history_row(history: &[ItemId], steps: usize, vocab: &Vocabulary) -> Vec<usize> {
    let mut row = vec![vocab.pad(); steps];
    let full_len = history.len() + 1;
    let keep = full_len.min(steps);
    for i in 0..keep {
        let j = full_len - keep + i;
        row[steps - keep + i] = if j == 0 { vocab.sos() } else { history[j - 1] };
    }
    row
}

/// Flattened `B×T` rows of one view.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ViewRows {
    pub input: Vec<usize>,
    pub target: Vec<usize>,
    pub mask: Vec<bool>,
}

impl ViewRows {
    fn push(&mut self, row: PaddedRow) {
        self.input.extend(row.input);
        self.target.extend(row.target);
        self.mask.extend(row.mask);
    }

    /// Flat indices of positions that carry a loss.
    pub fn positions(&self) -> Vec<usize> {
        self.mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect()
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Key-validity mask for attention: true for every non-PAD input.
    pub fn key_valid(&self, pad: usize) -> Vec<bool> {
        self.input.iter().map(|&t| t != pad).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequenceBatch {
    pub batch: usize,
    pub steps: usize,
    pub cross: ViewRows,
    /// Domain of each cross target; `None` at masked-out positions.
    pub cross_domains: Vec<Option<DomainId>>,
    /// One view per domain, derived from the same users' cross sequences.
    pub single: Vec<ViewRows>,
}

pub fn make_batch(users: &[CrossDomainSequence], steps: usize, vocab: &Vocabulary) -> Result<SequenceBatch> {
    let mut cross = ViewRows::default();
    let mut single = vec![ViewRows::default(); vocab.num_domains()];
    for seq in users {
        cross.push(pad_and_shift(&seq.tokens, steps, vocab)?);
        let split = split_by_domain(seq);
        for (d, view) in single.iter_mut().enumerate() {
            let tokens = split.get(&d).map(Vec::as_slice).unwrap_or(&[]);
            view.push(pad_and_shift(tokens, steps, vocab)?);
        }
    }
    let cross_domains = cross
        .target
        .iter()
        .zip(&cross.mask)
        .map(|(&t, &m)| if m { vocab.domain_of(t) } else { None })
        .collect();
    Ok(SequenceBatch { batch: users.len(), steps, cross, cross_domains, single })
}

/// Uniform draw from `V^d \ {positive}`.
pub fn sample_negative<R: Rng + ?Sized>(
    rng: &mut R,
    positive: ItemId,
    domain: DomainId,
    vocab: &Vocabulary,
) -> Result<ItemId> {
    if domain >= vocab.num_domains() {
        return Err(Error::Sampling(format!("unknown domain {domain}")));
    }
    let range = vocab.domain_range(domain);
    let n = range.len();
    if n < 2 {
        return Err(Error::Sampling(format!("domain {domain} has {n} item(s); need at least 2")));
    }
    if !range.contains(&positive) {
        return Err(Error::Sampling(format!("item {positive} is not in domain {domain}")));
    }
    let k = rng.random_range(0..n - 1);
    let local = positive - range.start;
    Ok(range.start + if k >= local { k + 1 } else { k })
}

/// A log plus its vocabulary, as stored on disk.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub vocab: Vocabulary,
    pub interactions: Vec<Interaction>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let vocab = Vocabulary::load(&dir.join(VOCAB_FILE))?;
        let interactions = ingest(&dir.join(INTERACTIONS_FILE), &vocab)?;
        Ok(Self { vocab, interactions })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.vocab.save(&dir.join(VOCAB_FILE))?;
        write_tsv(&dir.join(INTERACTIONS_FILE), &self.interactions)
    }

    pub fn sequences(&self) -> Vec<CrossDomainSequence> {
        build_sequences(&self.interactions)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vocab3() -> Vocabulary {
        Vocabulary::new(&[10, 10, 10]).unwrap()
    }

    fn ev(user: &str, item: ItemId, domain: DomainId, ts: i64) -> Interaction {
        Interaction { user: user.into(), item, domain, timestamp: ts }
    }

    /// A,B,A,B,A,C,C with items a1=1,b2=12,a3=3,b4=14,a5=5,c6=26,c7=27.
    fn worked_example() -> CrossDomainSequence {
        let events = vec![
            ev("u", 1, 0, 1),
            ev("u", 12, 1, 2),
            ev("u", 3, 0, 3),
            ev("u", 14, 1, 4),
            ev("u", 5, 0, 5),
            ev("u", 26, 2, 6),
            ev("u", 27, 2, 7),
        ];
        build_cross_sequence(&events)
    }

    #[test]
    fn worked_example_merge_and_split() {
        let seq = worked_example();
        assert_eq!(seq.tokens, vec![1, 12, 3, 14, 5, 26, 27]);
        assert_eq!(seq.domains, vec![0, 1, 0, 1, 0, 2, 2]);
        let split = split_by_domain(&seq);
        assert_eq!(split[&0], vec![1, 3, 5]);
        assert_eq!(split[&1], vec![12, 14]);
        assert_eq!(split[&2], vec![26, 27]);
        assert_eq!(merge_by_domain(&split, &seq.domains).unwrap(), seq.tokens);
    }

    #[test]
    fn single_domain_split_is_whole_sequence() {
        let seq = build_cross_sequence(&[ev("u", 2, 0, 5), ev("u", 4, 0, 9)]);
        let split = split_by_domain(&seq);
        assert_eq!(split.len(), 1);
        assert_eq!(split[&0], seq.tokens);
    }

    #[test]
    fn singleton_and_empty_sequences() {
        let seq = build_cross_sequence(&[ev("u", 7, 0, 1)]);
        assert_eq!(seq.tokens, vec![7]);
        assert!(build_cross_sequence(&[]).is_empty());
    }

    #[test]
    fn timestamp_ties_keep_input_order() {
        let seq = build_cross_sequence(&[ev("u", 3, 0, 5), ev("u", 1, 0, 5), ev("u", 2, 0, 1)]);
        assert_eq!(seq.tokens, vec![2, 3, 1]);
    }

    #[test]
    fn pad_and_shift_trace() {
        let v = vocab3();
        let (p, s) = (v.pad(), v.sos());
        let row = pad_and_shift(&[1, 2, 3], 5, &v).unwrap();
        assert_eq!(row.input, vec![p, p, s, 1, 2]);
        assert_eq!(row.target, vec![p, p, 1, 2, 3]);
        assert_eq!(row.mask, vec![false, false, true, true, true]);
    }

    #[test]
    fn pad_and_shift_empty_and_truncated() {
        let v = vocab3();
        let row = pad_and_shift(&[], 4, &v).unwrap();
        assert!(row.input.iter().chain(&row.target).all(|&t| t == v.pad()));
        assert!(row.mask.iter().all(|m| !m));

        let tokens: Vec<usize> = (0..10).collect();
        let row = pad_and_shift(&tokens, 4, &v).unwrap();
        assert_eq!(row.target, vec![6, 7, 8, 9]);
        assert_eq!(row.input, vec![5, 6, 7, 8]);
        assert!(row.mask.iter().all(|&m| m));
    }

    #[test]
    fn pad_and_shift_rejects_short_t() {
        assert!(matches!(pad_and_shift(&[1], 1, &vocab3()), Err(Error::Config(_))));
    }

    #[test]
    fn history_row_matches_last_training_position() {
        let v = vocab3();
        let tokens = [4, 5, 6, 7];
        let row = pad_and_shift(&tokens, 3, &v).unwrap();
        // predicting tokens[3] from tokens[..3] uses the same input as the last training position
        assert_eq!(history_row(&tokens[..3], 3, &v), row.input);
        assert_eq!(history_row(&[], 3, &v), vec![v.pad(), v.pad(), v.sos()]);
    }

    #[test]
    fn batch_of_worked_example() {
        let v = vocab3();
        let seq = worked_example();
        let b = make_batch(&[seq.clone()], 8, &v).unwrap();
        let (p, s) = (v.pad(), v.sos());
        assert_eq!(b.cross.input, vec![p, s, 1, 12, 3, 14, 5, 26]);
        assert_eq!(b.cross.target, vec![p, 1, 12, 3, 14, 5, 26, 27]);
        assert_eq!(b.cross_domains[0], None);
        assert_eq!(b.cross_domains[7], Some(2));
        assert_eq!(b.single[0].input, vec![p, p, p, p, p, s, 1, 3]);
        assert_eq!(b.single[0].target, vec![p, p, p, p, p, 1, 3, 5]);
        assert_eq!(b.single[1].target[6..], [12, 14]);
        assert_eq!(b.single[2].target[6..], [26, 27]);

        let twice = make_batch(&[seq.clone(), seq], 8, &v).unwrap();
        assert_eq!(twice.cross.input[..8], twice.cross.input[8..]);
    }

    #[test]
    fn absent_domain_gives_empty_mask() {
        let v = vocab3();
        let seq = build_cross_sequence(&[ev("u", 1, 0, 1), ev("u", 2, 0, 2)]);
        let b = make_batch(&[seq], 4, &v).unwrap();
        assert_eq!(b.single[1].count(), 0);
        assert_eq!(b.single[2].count(), 0);
        assert_eq!(b.single[0].count(), 2);
    }

    #[test]
    fn negative_sampling_forced_and_errors() {
        let v = Vocabulary::new(&[2, 1]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            assert_eq!(sample_negative(&mut rng, 0, 0, &v).unwrap(), 1);
        }
        assert!(matches!(sample_negative(&mut rng, 2, 1, &v), Err(Error::Sampling(_))));
    }

    #[test]
    fn negative_sampling_is_uniform() {
        // chi-square against uniform over the 9 non-positive items
        let v = Vocabulary::new(&[5, 10]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let positive = 8;
        let draws = 100_000;
        let mut counts = [0usize; 10];
        for _ in 0..draws {
            let item = sample_negative(&mut rng, positive, 1, &v).unwrap();
            assert_eq!(v.domain_of(item), Some(1));
            counts[item - 5] += 1;
        }
        assert_eq!(counts[positive - 5], 0);
        let expected = draws as f64 / 9.0;
        let chi2: f64 = counts
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != positive - 5)
            .map(|(_, &c)| (c as f64 - expected).powi(2) / expected)
            .sum();
        // 8 degrees of freedom, 0.999 quantile
        assert!(chi2 < 26.12, "chi2 = {chi2}");
    }

    #[test]
    fn vocabulary_layout() {
        let v = vocab3();
        assert_eq!(v.domain_of(0), Some(0));
        assert_eq!(v.domain_of(9), Some(0));
        assert_eq!(v.domain_of(10), Some(1));
        assert_eq!(v.domain_of(29), Some(2));
        assert_eq!(v.domain_of(30), None);
        assert_ne!(v.sos(), v.pad());
        assert!(!v.is_item(v.sos()) && !v.is_item(v.pad()));
        assert_eq!(Vocabulary::from_manifest(&v.to_manifest()).unwrap(), v);
    }

    #[test]
    fn manifest_rejects_gaps() {
        let mut m = vocab3().to_manifest();
        m.domains[1].start = 11;
        assert!(Vocabulary::from_manifest(&m).is_err());
    }
}
