//! Sentence records, bags, JSONL ingestion, IID sharding and the synthetic
//! noisy-corpus generator.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Purpose};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
pub const NA_RELATION: &str = "NA";
pub const DEFAULT_MAX_LEN: usize = 120;

/// A knowledge-base fact. The NA relation (id 0) is an ordinary relation.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Triple {
    pub head: String,
    pub relation: usize,
    pub tail: String,
}

impl Triple {
    pub fn new(head: impl Into<String>, relation: usize, tail: impl Into<String>) -> Self {
        Triple { head: head.into(), relation, tail: tail.into() }
    }

    pub fn entity_pair(&self) -> (&str, &str) {
        (&self.head, &self.tail)
    }
}

/// Half-open token range `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Span { start, end }
    }

    fn overlaps(&self, other: &Span) -> bool {
        self.start < other.end && other.start < self.end
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SentenceRecord {
    pub id: String,
    pub tokens: Vec<u32>,
    pub head: Span,
    pub tail: Span,
    pub triple: Triple,
    /// Ground truth, present only for synthetic corpora.
    pub is_true_positive: Option<bool>,
}

/// Token vocabulary. Ids are dense, with `0 = <pad>` and `1 = <unk>`.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    pub fn new() -> Self {
        let mut v = Vocab { tokens: Vec::new(), index: HashMap::new() };
        v.insert(PAD_TOKEN);
        v.insert(UNK_TOKEN);
        v
    }

    pub fn insert(&mut self, token: &str) -> u32 {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        let id = self.tokens.len() as u32;
        self.tokens.push(token.to_owned());
        self.index.insert(token.to_owned(), id);
        id
    }

    /// Id of `token`, or the unknown id.
    pub fn lookup(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One token per line, line number = id.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
        for t in &self.tokens {
            writeln!(w, "{t}").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut vocab = Vocab { tokens: Vec::new(), index: HashMap::new() };
        for (i, line) in text.lines().enumerate() {
            if vocab.index.contains_key(line) {
                return Err(Error::Parse { line: i + 1, message: format!("duplicate vocab token {line:?}") });
            }
            vocab.insert(line);
        }
        if vocab.tokens.len() < 2 || vocab.tokens[0] != PAD_TOKEN || vocab.tokens[1] != UNK_TOKEN {
            return Err(Error::Parse { line: 1, message: "vocab must start with <pad> and <unk>".into() });
        }
        Ok(vocab)
    }
}

/// A set of sentences plus the knowledge base that labelled them.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub sentences: Vec<SentenceRecord>,
    pub vocab: Vocab,
    pub kb: BTreeSet<Triple>,
    /// Relation names; index = relation id, index 0 is NA.
    pub relations: Vec<String>,
}

impl Dataset {
    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn has_ground_truth(&self) -> bool {
        !self.sentences.is_empty() && self.sentences.iter().all(|s| s.is_true_positive.is_some())
    }
}

/// Reads a relations file: one name per line, line number = id, first line `NA`.
pub fn read_relations(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let names: Vec<String> = text.lines().map(|l| l.trim().to_owned()).filter(|l| !l.is_empty()).collect();
    if names.first().map(String::as_str) != Some(NA_RELATION) {
        return Err(Error::Relations(format!("{}: first relation must be {NA_RELATION}", path.display())));
    }
    let mut seen = HashSet::new();
    for n in &names {
        if !seen.insert(n) {
            return Err(Error::Relations(format!("duplicate relation name {n:?}")));
        }
    }
    Ok(names)
}

pub fn write_relations(relations: &[String], path: &Path) -> Result<()> {
    let mut out = String::new();
    for r in relations {
        out.push_str(r);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct JsonRecord {
    id: String,
    tokens: Vec<String>,
    head: Span,
    tail: Span,
    head_entity: String,
    tail_entity: String,
    relation: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    is_true_positive: Option<bool>,
}

/// Result of [`load_dataset`]: the dataset plus the records that were
/// truncated or skipped because an entity fell outside the window.
#[derive(Debug, Clone)]
pub struct LoadOutcome {
    pub dataset: Dataset,
    pub truncated: usize,
    pub rejected: usize,
    pub warnings: Vec<String>,
}

enum VocabMode<'a> {
    Grow(Vocab),
    Frozen(&'a Vocab),
}

/// Loads a JSONL corpus, building the vocabulary in first-appearance order.
pub fn load_dataset(path: &Path, relations_path: &Path, max_len: usize) -> Result<LoadOutcome> {
    let relations = read_relations(relations_path)?;
    load_with(path, relations, VocabMode::Grow(Vocab::new()), max_len)
}

/// Loads a JSONL corpus against an existing vocabulary; unseen tokens map to `<unk>`.
pub fn load_dataset_with_vocab(path: &Path, relations_path: &Path, vocab: &Vocab, max_len: usize) -> Result<LoadOutcome> {
    let relations = read_relations(relations_path)?;
    load_with(path, relations, VocabMode::Frozen(vocab), max_len)
}

fn load_with(path: &Path, relations: Vec<String>, mut vocab: VocabMode<'_>, max_len: usize) -> Result<LoadOutcome> {
    if max_len == 0 {
        return Err(Error::Parse { line: 0, message: "max_len must be positive".into() });
    }
    let rel_ids: HashMap<&str, usize> = relations.iter().enumerate().map(|(i, r)| (r.as_str(), i)).collect();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);

    let mut sentences = Vec::new();
    let mut kb = BTreeSet::new();
    let mut ids = HashSet::new();
    let (mut truncated, mut rejected) = (0, 0);
    let mut warnings = Vec::new();

    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: JsonRecord =
            serde_json::from_str(&line).map_err(|e| Error::Parse { line: lineno, message: e.to_string() })?;
        let invalid = |reason: String| Error::InvalidRecord { line: lineno, reason };

        let n = rec.tokens.len();
        if n == 0 {
            return Err(invalid("empty token list".into()));
        }
        for (name, span) in [("head", rec.head), ("tail", rec.tail)] {
            if span.start >= span.end || span.end > n {
                return Err(invalid(format!("{name} span ({}, {}) out of bounds for {n} tokens", span.start, span.end)));
            }
        }
        if rec.head.overlaps(&rec.tail) {
            return Err(invalid("head and tail spans overlap".into()));
        }
        let relation = *rel_ids
            .get(rec.relation.as_str())
            .ok_or_else(|| invalid(format!("unknown relation {:?}", rec.relation)))?;
        if !ids.insert(rec.id.clone()) {
            return Err(invalid(format!("duplicate sentence id {:?}", rec.id)));
        }

        let mut tokens = rec.tokens;
        if tokens.len() > max_len {
            if rec.head.end > max_len || rec.tail.end > max_len {
                rejected += 1;
                warnings.push(format!("line {lineno}: entity span beyond max_len {max_len}, record skipped"));
                continue;
            }
            tokens.truncate(max_len);
            truncated += 1;
        }

        let token_ids = tokens
            .iter()
            .map(|t| match &mut vocab {
                VocabMode::Grow(v) => v.insert(t),
                VocabMode::Frozen(v) => v.lookup(t),
            })
            .collect();
        let triple = Triple::new(rec.head_entity, relation, rec.tail_entity);
        kb.insert(triple.clone());
        sentences.push(SentenceRecord {
            id: rec.id,
            tokens: token_ids,
            head: rec.head,
            tail: rec.tail,
            triple,
            is_true_positive: rec.is_true_positive,
        });
    }

    let vocab = match vocab {
        VocabMode::Grow(v) => v,
        VocabMode::Frozen(v) => v.clone(),
    };
    Ok(LoadOutcome { dataset: Dataset { sentences, vocab, kb, relations }, truncated, rejected, warnings })
}

/// Writes `dataset` as JSONL in the ingestion format.
pub fn write_jsonl(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    for s in &dataset.sentences {
        let rec = JsonRecord {
            id: s.id.clone(),
            tokens: s.tokens.iter().map(|&t| dataset.vocab.token(t).to_owned()).collect(),
            head: s.head,
            tail: s.tail,
            head_entity: s.triple.head.clone(),
            tail_entity: s.triple.tail.clone(),
            relation: dataset.relations[s.triple.relation].clone(),
            is_true_positive: s.is_true_positive,
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Assignment of every sentence to exactly one platform.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionManifest {
    pub k: usize,
    pub seed: u64,
    pub assignment: BTreeMap<String, usize>,
}

impl PartitionManifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Shuffles sentence indices under `seed` and deals them round-robin to `k`
/// platforms, so shard sizes differ by at most one.
pub fn partition_iid(dataset: &Dataset, k: usize, seed: u64) -> Result<PartitionManifest> {
    if k == 0 {
        return Err(Error::Partition("platform count must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..dataset.sentences.len()).collect();
    order.shuffle(&mut rng::stream(seed, Purpose::Partition, 0, 0));
    let assignment = order
        .iter()
        .enumerate()
        .map(|(pos, &idx)| (dataset.sentences[idx].id.clone(), pos % k))
        .collect();
    Ok(PartitionManifest { k, seed, assignment })
}

/// Per-platform shards. A sentence's local index is its rank among the
/// platform's sentences in dataset order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Shards {
    /// Dataset indices held by each platform, ascending.
    pub platforms: Vec<Vec<usize>>,
    /// `(platform, local index)` of each dataset sentence.
    pub location: Vec<(usize, usize)>,
}

impl Shards {
    pub fn new(dataset: &Dataset, manifest: &PartitionManifest) -> Result<Self> {
        let mut platforms = vec![Vec::new(); manifest.k];
        let mut location = Vec::with_capacity(dataset.sentences.len());
        for (idx, s) in dataset.sentences.iter().enumerate() {
            let &p = manifest
                .assignment
                .get(&s.id)
                .ok_or_else(|| Error::Partition(format!("sentence {:?} missing from manifest", s.id)))?;
            if p >= manifest.k {
                return Err(Error::Partition(format!("sentence {:?} assigned to platform {p} >= k={}", s.id, manifest.k)));
            }
            location.push((p, platforms[p].len()));
            platforms[p].push(idx);
        }
        Ok(Shards { platforms, location })
    }

    pub fn dataset_index(&self, platform: usize, local: usize) -> Option<usize> {
        self.platforms.get(platform)?.get(local).copied()
    }
}

/// All sentences sharing one triple, possibly spread across platforms.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bag {
    pub triple: Triple,
    /// `(platform id, local index)`, lexicographically ordered.
    pub members: Vec<(usize, usize)>,
}

pub fn group_bags(dataset: &Dataset, manifest: &PartitionManifest) -> Result<BTreeMap<Triple, Bag>> {
    let shards = Shards::new(dataset, manifest)?;
    let mut bags: BTreeMap<Triple, Bag> = BTreeMap::new();
    for (s, &loc) in dataset.sentences.iter().zip(&shards.location) {
        bags.entry(s.triple.clone())
            .or_insert_with(|| Bag { triple: s.triple.clone(), members: Vec::new() })
            .members
            .push(loc);
    }
    for bag in bags.values_mut() {
        bag.members.sort_unstable();
    }
    Ok(bags)
}

/// Where false-positive sentences place the other relation's signature tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoisePlacement {
    /// Between the two entity mentions, exactly like a true positive.
    Between,
    /// Outside the span enclosed by the two entity mentions.
    Outside,
}

/// Parameters of the synthetic distantly-labelled corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub num_relations: usize,
    pub num_bags: usize,
    /// Extra held-out bags generated from the same stream.
    pub test_bags: usize,
    pub sentences_per_bag: (usize, usize),
    /// Includes the two reserved ids.
    pub vocab_size: usize,
    pub sentence_length: (usize, usize),
    pub true_positive_rate: f64,
    /// Tokens in each relation's signature set.
    pub signature_size: usize,
    /// Signature tokens embedded in each sentence.
    pub signature_tokens_per_sentence: usize,
    pub noise_placement: NoisePlacement,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_relations: 5,
            num_bags: 200,
            test_bags: 50,
            sentences_per_bag: (3, 6),
            vocab_size: 2000,
            sentence_length: (6, 12),
            true_positive_rate: 0.5,
            signature_size: 3,
            signature_tokens_per_sentence: 3,
            noise_placement: NoisePlacement::Between,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::SyntheticSpec(m));
        let (smin, smax) = self.sentences_per_bag;
        let (lmin, lmax) = self.sentence_length;
        let g = self.signature_tokens_per_sentence;
        if self.num_relations == 0 {
            return bad("num_relations must be positive".into());
        }
        if smin == 0 || smin > smax {
            return bad(format!("sentences_per_bag ({smin}, {smax}) must satisfy 1 <= min <= max"));
        }
        if !(self.true_positive_rate > 0.0 && self.true_positive_rate <= 1.0) {
            return bad(format!("true_positive_rate {} must lie in (0, 1]", self.true_positive_rate));
        }
        if self.signature_size == 0 || g == 0 {
            return bad("signature_size and signature_tokens_per_sentence must be positive".into());
        }
        if lmin > lmax || lmin < g + 2 {
            return bad(format!("sentence_length ({lmin}, {lmax}) must satisfy {} <= min <= max", g + 2));
        }
        let needed = 2 + self.num_relations * self.signature_size + 1;
        if self.vocab_size < needed {
            return bad(format!(
                "vocab_size {} cannot host {} disjoint signatures of {} tokens plus filler (need >= {needed})",
                self.vocab_size, self.num_relations, self.signature_size
            ));
        }
        if self.num_relations < 2 && self.true_positive_rate < 1.0 {
            return bad("false positives need at least two relations".into());
        }
        Ok(())
    }

    /// Token ids of relation `r`'s signature.
    pub fn signature(&self, r: usize) -> std::ops::Range<u32> {
        let start = 2 + r * self.signature_size;
        start as u32..(start + self.signature_size) as u32
    }

    fn filler(&self) -> std::ops::Range<u32> {
        (2 + self.num_relations * self.signature_size) as u32..self.vocab_size as u32
    }

    /// Per-bag true-positive count.
    pub fn true_positives_for(&self, bag_size: usize) -> usize {
        ((self.true_positive_rate * bag_size as f64).round() as usize).clamp(1, bag_size)
    }
}

/// Generates `spec.num_bags` training bags.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    Ok(generate_synthetic_split(spec)?.0)
}

/// Generates `spec.num_bags` training and `spec.test_bags` held-out bags from
/// one stream. Both halves share the vocabulary; their entity pairs are disjoint.
pub fn generate_synthetic_split(spec: &SyntheticSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let mut vocab = Vocab::new();
    for id in 2..spec.vocab_size {
        let got = vocab.insert(&format!("w{id}"));
        debug_assert_eq!(got as usize, id);
    }
    let relations: Vec<String> =
        std::iter::once(NA_RELATION.to_owned()).chain((1..spec.num_relations).map(|r| format!("rel{r}"))).collect();

    let mut rng = rng::stream(spec.seed, Purpose::Synthetic, 0, 0);
    let filler = spec.filler();
    let mut train = Vec::new();
    let mut test = Vec::new();

    for b in 0..spec.num_bags + spec.test_bags {
        let relation = rng.gen_range(0..spec.num_relations);
        let triple = Triple::new(format!("ent{b}_h"), relation, format!("ent{b}_t"));
        let size = rng.gen_range(spec.sentences_per_bag.0..=spec.sentences_per_bag.1);
        let tp = spec.true_positives_for(size);
        let mut flags: Vec<bool> = (0..size).map(|i| i < tp).collect();
        flags.shuffle(&mut rng);

        let out = if b < spec.num_bags { &mut train } else { &mut test };
        for (z, &is_tp) in flags.iter().enumerate() {
            let expressed = if is_tp {
                relation
            } else {
                let k = rng.gen_range(0..spec.num_relations - 1);
                if k >= relation { k + 1 } else { k }
            };
            let len = rng.gen_range(spec.sentence_length.0..=spec.sentence_length.1);
            let placement = if is_tp { NoisePlacement::Between } else { spec.noise_placement };
            let (first, second, slots) = layout(&mut rng, len, spec.signature_tokens_per_sentence, placement);
            let mut tokens: Vec<u32> = (0..len).map(|_| rng.gen_range(filler.clone())).collect();
            for pos in slots {
                tokens[pos] = rng.gen_range(spec.signature(expressed));
            }
            let (head_pos, tail_pos) = if rng.gen_bool(0.5) { (first, second) } else { (second, first) };
            out.push(SentenceRecord {
                id: format!("b{b}_s{z}"),
                tokens,
                head: Span::new(head_pos, head_pos + 1),
                tail: Span::new(tail_pos, tail_pos + 1),
                triple: triple.clone(),
                is_true_positive: Some(is_tp),
            });
        }
    }

    let make = |sentences: Vec<SentenceRecord>| {
        let kb = sentences.iter().map(|s| s.triple.clone()).collect();
        Dataset { sentences, vocab: vocab.clone(), kb, relations: relations.clone() }
    };
    Ok((make(train), make(test)))
}

/// Picks two entity positions and `g` signature slots for a sentence of
/// length `len`. Returns `(first entity, second entity, slots)`.
fn layout(rng: &mut impl Rng, len: usize, g: usize, placement: NoisePlacement) -> (usize, usize, Vec<usize>) {
    match placement {
        NoisePlacement::Between => {
            let a = rng.gen_range(0..=len - g - 2);
            let b = rng.gen_range(a + g + 1..len);
            let mut inner: Vec<usize> = (a + 1..b).collect();
            inner.shuffle(rng);
            inner.truncate(g);
            (a, b, inner)
        }
        NoisePlacement::Outside => {
            // Slots to the left of both entities; mirrored half of the time.
            let a = rng.gen_range(g..=len - 2);
            let b = rng.gen_range(a + 1..len);
            let mut outer: Vec<usize> = (0..a).collect();
            outer.shuffle(rng);
            outer.truncate(g);
            if rng.gen_bool(0.5) {
                let m = |p: usize| len - 1 - p;
                (m(b), m(a), outer.into_iter().map(m).collect())
            } else {
                (a, b, outer)
            }
        }
    }
}
