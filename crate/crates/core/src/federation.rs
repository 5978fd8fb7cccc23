//! Communication rounds: platform activation, lazy MIL selection, local
//! training and federated averaging.
//!
//! Everything that crosses the platform/server boundary is a
//! [`WireMessage`]. The server never touches a [`PlatformState`] directly
//! except to hand it a message and collect the reply; messages are recorded
//! in ascending platform order so the log is identical whether platforms
//! run serially or in parallel.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{self, DenoiseStrategy};
use crate::corpus::{Dataset, PartitionManifest, Shards, Triple};
use crate::encoder::{self, EncodedSentence, Gradient, Hyper, ModelParams};
use crate::error::{Error, Result};
use crate::numeric::exact_mean;
use crate::rng::{self, Purpose};

/// Federated hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoundConfig {
    /// Total number of platforms `K`.
    pub platforms: usize,
    /// Fraction `C` of platforms activated per round.
    pub fraction: f64,
    pub batch_size: usize,
    pub local_epochs: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub rounds: usize,
    pub seed: u64,
}

impl Default for RoundConfig {
    fn default() -> Self {
        RoundConfig {
            platforms: 100,
            fraction: 0.1,
            batch_size: 32,
            local_epochs: 3,
            lr: 0.1,
            lr_decay: 0.01,
            weight_decay: 1e-5,
            dropout: 0.1,
            rounds: 30,
            seed: 0,
        }
    }
}

impl RoundConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            errs.push(format!("federation.fraction must lie in (0, 1], got {}", self.fraction));
        }
        for (name, v) in [
            ("platforms", self.platforms),
            ("batch_size", self.batch_size),
            ("local_epochs", self.local_epochs),
        ] {
            if v == 0 {
                errs.push(format!("federation.{name} must be at least 1"));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            errs.push(format!("federation.lr must be positive, got {}", self.lr));
        }
        if !(self.lr_decay >= 0.0 && self.lr_decay.is_finite()) {
            errs.push(format!("federation.lr_decay must be nonnegative, got {}", self.lr_decay));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            errs.push(format!("federation.weight_decay must be nonnegative, got {}", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            errs.push(format!("federation.dropout must lie in [0, 1), got {}", self.dropout));
        }
        errs
    }

    /// `η_q = η_0 / (1 + decay·q)`.
    pub fn learning_rate(&self, round: usize) -> f64 {
        self.lr / (1.0 + self.lr_decay * round as f64)
    }
}

/// `max(round_half_up(C·K), 1)`, capped at `K`.
pub fn activated_count(k: usize, c: f64) -> usize {
    ((c * k as f64 + 0.5).floor() as usize).clamp(1, k.max(1))
}

/// Platforms activated in `round`, ascending.
pub fn sample_activated(k: usize, c: f64, round: usize, seed: u64) -> Vec<usize> {
    let m = activated_count(k, c);
    let mut rng = rng::stream(seed, Purpose::Activation, round as u64, 0);
    let mut ids = rand::seq::index::sample(&mut rng, k, m).into_vec();
    ids.sort_unstable();
    ids
}

/// One sentence as held by its platform.
#[derive(Debug, Clone)]
pub struct LocalSentence {
    pub input: EncodedSentence,
    pub triple: Triple,
}

/// A selected training instance: local index and target relation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct SelectedInstance {
    pub local_index: usize,
    pub relation: usize,
}

#[derive(Debug, Clone)]
pub struct PlatformState {
    pub id: usize,
    pub shard: Vec<LocalSentence>,
    /// Local members of each triple's bag, ascending.
    pub bags: BTreeMap<Triple, Vec<usize>>,
    /// `D*` for the current round.
    pub selected: Vec<SelectedInstance>,
}

impl PlatformState {
    pub fn new(id: usize, shard: Vec<LocalSentence>) -> Self {
        let mut bags: BTreeMap<Triple, Vec<usize>> = BTreeMap::new();
        for (i, s) in shard.iter().enumerate() {
            bags.entry(s.triple.clone()).or_default().push(i);
        }
        PlatformState { id, shard, bags, selected: Vec::new() }
    }
}

/// Splits `dataset` into encoded per-platform shards.
pub fn build_platforms(dataset: &Dataset, shards: &Shards, hyper: &Hyper) -> Vec<PlatformState> {
    shards
        .platforms
        .iter()
        .enumerate()
        .map(|(id, idxs)| {
            let shard = idxs
                .iter()
                .map(|&i| {
                    let s = &dataset.sentences[i];
                    LocalSentence { input: encoder::encode_input(s, hyper), triple: s.triple.clone() }
                })
                .collect();
            PlatformState::new(id, shard)
        })
        .collect()
}

/// Winning `(value, local index, platform)` for one triple.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DenoiseEntry {
    pub v: f64,
    pub id: usize,
    pub platform: usize,
}

impl DenoiseEntry {
    /// Higher value wins; ties go to the lower platform, then lower index.
    fn beats(&self, other: &DenoiseEntry) -> bool {
        self.v > other.v || (self.v == other.v && (self.platform, self.id) < (other.platform, other.id))
    }
}

/// A triple paired with its entry, as carried on the wire.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiseRecord {
    pub triple: Triple,
    #[serde(flatten)]
    pub entry: DenoiseEntry,
}

pub type DenoiseMap = BTreeMap<Triple, DenoiseEntry>;

fn map_to_records(map: &DenoiseMap) -> Vec<DenoiseRecord> {
    map.iter().map(|(t, e)| DenoiseRecord { triple: t.clone(), entry: *e }).collect()
}

/// The only kinds of message exchanged between platforms and the server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum WireMessage {
    ParamsDown { to: usize, params: Vec<f64> },
    ScanUp { from: usize, entries: Vec<DenoiseRecord> },
    DenoiseDown { to: usize, entries: Vec<DenoiseRecord> },
    ParamsUp { from: usize, params: Vec<f64> },
}

impl WireMessage {
    pub fn kind(&self) -> &'static str {
        match self {
            WireMessage::ParamsDown { .. } => "ParamsDown",
            WireMessage::ScanUp { .. } => "ScanUp",
            WireMessage::DenoiseDown { .. } => "DenoiseDown",
            WireMessage::ParamsUp { .. } => "ParamsUp",
        }
    }

    pub fn platform(&self) -> usize {
        match self {
            WireMessage::ParamsDown { to, .. } | WireMessage::DenoiseDown { to, .. } => *to,
            WireMessage::ScanUp { from, .. } | WireMessage::ParamsUp { from, .. } => *from,
        }
    }

    /// SHA-256 of the payload: little-endian `f64`s for parameter vectors,
    /// compact JSON for denoising entries.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        match self {
            WireMessage::ParamsDown { params, .. } | WireMessage::ParamsUp { params, .. } => {
                for v in params {
                    h.update(v.to_le_bytes());
                }
            }
            WireMessage::ScanUp { entries, .. } | WireMessage::DenoiseDown { entries, .. } => {
                h.update(serde_json::to_vec(entries).expect("entries serialize"));
            }
        }
        hex::encode(h.finalize())
    }
}

/// One line of the message log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogRecord {
    pub round: usize,
    pub kind: String,
    pub platform: usize,
    pub digest: String,
    /// Full payload, for denoising traffic only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entries: Option<Vec<DenoiseRecord>>,
    /// Length of the parameter vector, for parameter traffic only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub param_count: Option<usize>,
}

impl LogRecord {
    pub fn new(round: usize, msg: &WireMessage) -> Self {
        let (entries, param_count) = match msg {
            WireMessage::ParamsDown { params, .. } | WireMessage::ParamsUp { params, .. } => (None, Some(params.len())),
            WireMessage::ScanUp { entries, .. } | WireMessage::DenoiseDown { entries, .. } => {
                (Some(entries.clone()), None)
            }
        };
        LogRecord {
            round,
            kind: msg.kind().to_owned(),
            platform: msg.platform(),
            digest: msg.digest(),
            entries,
            param_count,
        }
    }
}

/// Receives every message in deterministic order.
pub trait MessageSink {
    fn record(&mut self, round: usize, msg: &WireMessage) -> Result<()>;
}

/// Discards messages.
pub struct NullSink;

impl MessageSink for NullSink {
    fn record(&mut self, _: usize, _: &WireMessage) -> Result<()> {
        Ok(())
    }
}

/// Keeps log records in memory.
#[derive(Debug, Default)]
pub struct MemorySink {
    pub records: Vec<LogRecord>,
}

impl MessageSink for MemorySink {
    fn record(&mut self, round: usize, msg: &WireMessage) -> Result<()> {
        self.records.push(LogRecord::new(round, msg));
        Ok(())
    }
}

/// Writes one JSON log record per line.
pub struct JsonlSink<W: Write> {
    out: W,
}

impl<W: Write> JsonlSink<W> {
    pub fn new(out: W) -> Self {
        JsonlSink { out }
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

impl<W: Write> MessageSink for JsonlSink<W> {
    fn record(&mut self, round: usize, msg: &WireMessage) -> Result<()> {
        serde_json::to_writer(&mut self.out, &LogRecord::new(round, msg))?;
        self.out.write_all(b"\n").map_err(|e| Error::io("<message log>", e))
    }
}

/// Local argmax of `p(r | s, Θ)` over each local bag, in triple order.
/// Ties keep the lowest local index.
pub fn local_argmax(platform: &PlatformState, params: &ModelParams) -> Result<Vec<(Triple, usize, f64)>> {
    let mut out = Vec::with_capacity(platform.bags.len());
    for (triple, members) in &platform.bags {
        let mut best: Option<(usize, f64)> = None;
        for &z in members {
            let p = encoder::predict(params, &platform.shard[z].input)?[triple.relation];
            if best.is_none_or(|(_, b)| p > b) {
                best = Some((z, p));
            }
        }
        let (z, p) = best.expect("bags are nonempty");
        out.push((triple.clone(), z, p));
    }
    Ok(out)
}

/// Platform side of lazy MIL: one `(v, id, platform)` per local bag.
pub fn local_scan(platform: &PlatformState, params: &ModelParams) -> Result<Vec<DenoiseRecord>> {
    Ok(local_argmax(platform, params)?
        .into_iter()
        .map(|(triple, id, v)| DenoiseRecord { triple, entry: DenoiseEntry { v, id, platform: platform.id } })
        .collect())
}

/// Server side of lazy MIL: keeps the best upload per triple.
pub fn reduce_denoise(uploads: &[DenoiseRecord]) -> Result<DenoiseMap> {
    let mut seen = HashSet::new();
    let mut map = DenoiseMap::new();
    for rec in uploads {
        if !seen.insert((&rec.triple, rec.entry.platform)) {
            return Err(Error::Protocol {
                platform: rec.entry.platform,
                message: format!("duplicate upload for triple {:?}", rec.triple),
            });
        }
        if !(0.0..=1.0).contains(&rec.entry.v) {
            return Err(Error::Protocol {
                platform: rec.entry.platform,
                message: format!("value {} outside [0, 1]", rec.entry.v),
            });
        }
        match map.get(&rec.triple) {
            Some(cur) if !rec.entry.beats(cur) => {}
            _ => {
                map.insert(rec.triple.clone(), rec.entry);
            }
        }
    }
    Ok(map)
}

/// `D*_i`: the local sentences the denoising map assigns to this platform.
pub fn select_reliable(platform: &PlatformState, map: &DenoiseMap) -> Result<Vec<SelectedInstance>> {
    let mut selected = Vec::new();
    for (triple, e) in map {
        if e.platform != platform.id {
            continue;
        }
        let local = platform.shard.get(e.id).ok_or_else(|| Error::Protocol {
            platform: platform.id,
            message: format!("index {} out of range for shard of {}", e.id, platform.shard.len()),
        })?;
        if &local.triple != triple {
            return Err(Error::Protocol {
                platform: platform.id,
                message: format!("index {} does not belong to triple {triple:?}", e.id),
            });
        }
        selected.push(SelectedInstance { local_index: e.id, relation: triple.relation });
    }
    selected.sort_unstable();
    Ok(selected)
}

/// Sentences trained together under one label. A single member is the
/// ordinary per-sentence case.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingUnit {
    pub members: Vec<usize>,
    pub relation: usize,
}

/// Per-platform outcome of one round's local training.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LocalStats {
    pub platform: usize,
    /// Training units (`|D*_i|`).
    pub selected: usize,
    pub updates: usize,
    /// Mean loss of each epoch, in order.
    pub epoch_losses: Vec<f64>,
}

/// `E · ceil(n / B)`.
pub fn expected_updates(n: usize, batch_size: usize, epochs: usize) -> usize {
    epochs * n.div_ceil(batch_size)
}

/// Minibatch SGD over `units` for `E` epochs, reshuffling each epoch from the
/// platform's stream for this round. Each batch step uses the mean gradient.
pub fn train_units(
    platform: &PlatformState,
    units: &[TrainingUnit],
    start: &ModelParams,
    config: &RoundConfig,
    round: usize,
    lr: f64,
) -> Result<(ModelParams, LocalStats)> {
    let mut params = start.clone();
    let mut rng = rng::stream(config.seed, Purpose::LocalTraining, round as u64, platform.id as u64);
    let mut grad = Gradient::zeros_like(&params);
    let mut order: Vec<usize> = (0..units.len()).collect();
    let mut stats = LocalStats { platform: platform.id, selected: units.len(), updates: 0, epoch_losses: Vec::new() };
    if units.is_empty() {
        return Ok((params, stats));
    }

    for _ in 0..config.local_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            grad.clear();
            for &u in batch {
                let unit = &units[u];
                let members: Vec<&EncodedSentence> = unit.members.iter().map(|&z| &platform.shard[z].input).collect();
                epoch_loss +=
                    encoder::group_loss_and_grad(&params, &members, unit.relation, config.dropout, &mut rng, &mut grad)?;
            }
            grad.scale(1.0 / batch.len() as f64);
            encoder::sgd_step(&mut params, &grad, lr, config.weight_decay)?;
            stats.updates += 1;
        }
        stats.epoch_losses.push(epoch_loss / units.len() as f64);
    }
    if params.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { stage: "local training", diagnostics: params.magnitudes() });
    }
    Ok((params, stats))
}

/// Per-sentence cross-entropy training on the platform's selected set.
pub fn local_train(
    platform: &PlatformState,
    start: &ModelParams,
    config: &RoundConfig,
    round: usize,
    lr: f64,
) -> Result<(ModelParams, LocalStats)> {
    let units: Vec<TrainingUnit> = platform
        .selected
        .iter()
        .map(|s| TrainingUnit { members: vec![s.local_index], relation: s.relation })
        .collect();
    train_units(platform, &units, start, config, round, lr)
}

/// Elementwise mean of the uploaded vectors, correctly rounded per element.
/// Uploads are ordered by platform id before reduction.
pub fn fed_average(uploads: &[(usize, Vec<f64>)]) -> Result<Vec<f64>> {
    let Some((_, first)) = uploads.first() else {
        return Err(Error::Protocol { platform: usize::MAX, message: "no uploads to average".into() });
    };
    let n = first.len();
    let mut sorted: Vec<&(usize, Vec<f64>)> = uploads.iter().collect();
    sorted.sort_by_key(|(id, _)| *id);
    for w in sorted.windows(2) {
        if w[0].0 == w[1].0 {
            return Err(Error::Protocol { platform: w[0].0, message: "duplicate parameter upload".into() });
        }
    }
    for (_, v) in &sorted {
        if v.len() != n {
            return Err(Error::LengthMismatch { expected: n, actual: v.len() });
        }
    }
    let mut out = vec![0.0; n];
    out.par_chunks_mut(4096).enumerate().for_each(|(c, chunk)| {
        let mut column = Vec::with_capacity(sorted.len());
        for (j, slot) in chunk.iter_mut().enumerate() {
            let i = c * 4096 + j;
            column.clear();
            column.extend(sorted.iter().map(|(_, v)| v[i]));
            *slot = exact_mean(&column);
        }
    });
    Ok(out)
}

/// Server-side state.
#[derive(Debug, Clone)]
pub struct MasterState {
    pub params: ModelParams,
    /// Index of the next round to run.
    pub round: usize,
    pub lr: f64,
    pub history: Vec<RoundStats>,
    /// Denoising map of the most recent lazy MIL round.
    pub last_denoise: Option<DenoiseMap>,
}

impl MasterState {
    pub fn new(params: ModelParams, config: &RoundConfig) -> Self {
        MasterState { params, round: 0, lr: config.learning_rate(0), history: Vec::new(), last_denoise: None }
    }
}

/// What happened in one round.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundStats {
    pub round: usize,
    pub activated: Vec<usize>,
    pub lr: f64,
    /// One entry per activated platform, ascending.
    pub platforms: Vec<LocalStats>,
    pub selected_total: usize,
    /// Mean over uploading platforms of their final-epoch loss.
    pub mean_loss: Option<f64>,
    pub auc_eval: Option<f64>,
}

/// Runs `f` on each activated platform, serially or with rayon, returning
/// results in ascending platform order.
fn on_platforms<T, F>(platforms: &mut [PlatformState], active: &[bool], serial: bool, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(&mut PlatformState) -> Result<T> + Sync + Send,
{
    let results: Vec<Result<T>> = if serial {
        platforms.iter_mut().filter(|p| active[p.id]).map(&f).collect()
    } else {
        platforms.par_iter_mut().filter(|p| active[p.id]).map(&f).collect()
    };
    results.into_iter().collect()
}

fn unpack_params(msg: &WireMessage, hyper: Hyper, vocab_size: usize) -> Result<ModelParams> {
    match msg {
        WireMessage::ParamsDown { params, .. } | WireMessage::ParamsUp { params, .. } => {
            ModelParams::unflatten(params.clone(), hyper, vocab_size)
        }
        other => Err(Error::Protocol { platform: other.platform(), message: format!("expected parameters, got {}", other.kind()) }),
    }
}

/// One communication round. Updates `master` in place and returns the
/// round's statistics (also appended to `master.history`).
pub fn run_round(
    master: &mut MasterState,
    platforms: &mut [PlatformState],
    config: &RoundConfig,
    strategy: DenoiseStrategy,
    serial: bool,
    sink: &mut dyn MessageSink,
) -> Result<RoundStats> {
    let q = master.round;
    let lr = config.learning_rate(q);
    let hyper = master.params.hyper;
    let vocab_size = master.params.vocab_size;
    if platforms.len() != config.platforms {
        return Err(Error::Partition(format!("{} platform states for K={}", platforms.len(), config.platforms)));
    }
    let activated = sample_activated(config.platforms, config.fraction, q, config.seed);
    let mut active = vec![false; platforms.len()];
    for &a in &activated {
        active[a] = true;
    }
    for p in platforms.iter_mut() {
        p.selected.clear();
    }

    let flat = master.params.flatten();
    let mut downs: BTreeMap<usize, WireMessage> = BTreeMap::new();
    for &a in &activated {
        let msg = WireMessage::ParamsDown { to: a, params: flat.clone() };
        sink.record(q, &msg)?;
        downs.insert(a, msg);
    }
    let local_params = |id: usize| unpack_params(&downs[&id], hyper, vocab_size);

    if strategy == DenoiseStrategy::LazyMil {
        let scans = on_platforms(platforms, &active, serial, |p| {
            let params = local_params(p.id)?;
            Ok(WireMessage::ScanUp { from: p.id, entries: local_scan(p, &params)? })
        })?;
        let mut uploads = Vec::new();
        for msg in &scans {
            sink.record(q, msg)?;
            if let WireMessage::ScanUp { from, entries } = msg {
                if let Some(bad) = entries.iter().find(|e| e.entry.platform != *from) {
                    return Err(Error::Protocol { platform: *from, message: format!("entry claims platform {}", bad.entry.platform) });
                }
                uploads.extend(entries.iter().cloned());
            }
        }
        let map = reduce_denoise(&uploads)?;
        let records = map_to_records(&map);
        let mut broadcasts = BTreeMap::new();
        for &a in &activated {
            let msg = WireMessage::DenoiseDown { to: a, entries: records.clone() };
            sink.record(q, &msg)?;
            broadcasts.insert(a, msg);
        }
        on_platforms(platforms, &active, serial, |p| {
            let WireMessage::DenoiseDown { entries, .. } = &broadcasts[&p.id] else { unreachable!() };
            let received: DenoiseMap = entries.iter().map(|r| (r.triple.clone(), r.entry)).collect();
            p.selected = select_reliable(p, &received)?;
            Ok(())
        })?;
        master.last_denoise = Some(map);
    } else {
        on_platforms(platforms, &active, serial, |p| {
            let params = local_params(p.id)?;
            p.selected = baselines::local_selection(strategy, p, &params)?;
            Ok(())
        })?;
    }

    let trained = on_platforms(platforms, &active, serial, |p| {
        let params = local_params(p.id)?;
        let (units, stats) = match baselines::strategy_local_training(strategy, p, &params, config, q, lr)? {
            Some((params, stats)) => (Some(WireMessage::ParamsUp { from: p.id, params: params.flatten() }), stats),
            None => (None, LocalStats { platform: p.id, selected: 0, updates: 0, epoch_losses: Vec::new() }),
        };
        Ok((units, stats))
    })?;

    let mut uploads = Vec::new();
    let mut per_platform = Vec::new();
    for (msg, stats) in trained {
        if let Some(msg) = msg {
            sink.record(q, &msg)?;
            uploads.push((msg.platform(), unpack_params(&msg, hyper, vocab_size)?.flatten()));
        }
        per_platform.push(stats);
    }
    if !uploads.is_empty() {
        master.params = ModelParams::unflatten(fed_average(&uploads)?, hyper, vocab_size)?;
    }

    let losses: Vec<f64> = per_platform.iter().filter_map(|s| s.epoch_losses.last().copied()).collect();
    let stats = RoundStats {
        round: q,
        activated,
        lr,
        selected_total: per_platform.iter().map(|s| s.selected).sum(),
        platforms: per_platform,
        mean_loss: (!losses.is_empty()).then(|| losses.iter().sum::<f64>() / losses.len() as f64),
        auc_eval: None,
    };
    master.round += 1;
    master.lr = config.learning_rate(master.round);
    master.history.push(stats.clone());
    Ok(stats)
}

/// Periodic held-out evaluation hook.
pub struct Evaluator<'a> {
    pub every: usize,
    pub score: &'a (dyn Fn(&ModelParams) -> Result<f64> + Sync),
}

pub struct TrainOptions<'a> {
    pub serial: bool,
    pub sink: &'a mut dyn MessageSink,
    pub evaluator: Option<Evaluator<'a>>,
}

/// Result of a full training run.
#[derive(Debug, Clone)]
pub struct TrainingOutcome {
    pub params: ModelParams,
    pub history: Vec<RoundStats>,
    pub last_denoise: Option<DenoiseMap>,
    pub shards: Shards,
}

/// Initializes `Θ_0` from `config.seed` and runs `config.rounds` rounds.
pub fn run_training(
    config: &RoundConfig,
    hyper: &Hyper,
    dataset: &Dataset,
    manifest: &PartitionManifest,
    strategy: DenoiseStrategy,
    options: &mut TrainOptions<'_>,
) -> Result<TrainingOutcome> {
    let mut errs = config.validate();
    errs.extend(hyper.validate());
    if manifest.k != config.platforms {
        errs.push(format!("manifest has k={} but federation.platforms={}", manifest.k, config.platforms));
    }
    if hyper.num_relations != dataset.num_relations() {
        errs.push(format!(
            "model.num_relations={} but the dataset has {} relations",
            hyper.num_relations,
            dataset.num_relations()
        ));
    }
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }

    let shards = Shards::new(dataset, manifest)?;
    let mut platforms = build_platforms(dataset, &shards, hyper);
    let params = encoder::init_params(*hyper, dataset.vocab.len(), config.seed);
    let mut master = MasterState::new(params, config);
    for _ in 0..config.rounds {
        run_round(&mut master, &mut platforms, config, strategy, options.serial, options.sink)?;
        if let Some(ev) = &options.evaluator {
            if ev.every > 0 && master.round % ev.every == 0 {
                let auc = (ev.score)(&master.params)?;
                master.history.last_mut().expect("round recorded").auc_eval = Some(auc);
            }
        }
    }
    Ok(TrainingOutcome { params: master.params, history: master.history, last_denoise: master.last_denoise, shards })
}

/// CSV with columns `round, activated, selected_total, mean_loss, lr, auc_eval`.
pub fn write_metrics_csv(history: &[RoundStats], out: &mut impl Write) -> std::io::Result<()> {
    writeln!(out, "round,activated,selected_total,mean_loss,lr,auc_eval")?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for s in history {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            s.round,
            s.activated.len(),
            s.selected_total,
            opt(s.mean_loss),
            s.lr,
            opt(s.auc_eval)
        )?;
    }
    Ok(())
}

/// Summary of a message-log audit.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AuditReport {
    pub messages: usize,
    pub by_kind: BTreeMap<String, usize>,
}

/// Checks a JSONL message log: every record is one of the four message
/// kinds with exactly the expected fields, and no string anywhere in it is
/// a token from `vocab_tokens` unless it is also public (an entity name or
/// relation name in `public`).
pub fn audit_message_log(
    log: impl BufRead,
    vocab_tokens: &[String],
    public: &BTreeSet<String>,
) -> Result<AuditReport> {
    let forbidden: HashSet<&str> =
        vocab_tokens.iter().map(String::as_str).filter(|t| !public.contains(*t)).collect();
    let mut report = AuditReport::default();
    for (i, line) in log.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io("<message log>", e))?;
        let violation = |message: String| Error::Audit { line: line_no, message };
        let value: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| violation(format!("not JSON: {e}")))?;
        let obj = value.as_object().ok_or_else(|| violation("record is not an object".into()))?;
        let kind = obj.get("kind").and_then(|k| k.as_str()).ok_or_else(|| violation("missing kind".into()))?;
        let (required, payload): (&[&str], &str) = match kind {
            "ParamsDown" | "ParamsUp" => (&["round", "kind", "platform", "digest", "param_count"], "param_count"),
            "ScanUp" | "DenoiseDown" => (&["round", "kind", "platform", "digest", "entries"], "entries"),
            other => return Err(violation(format!("unknown message kind {other:?}"))),
        };
        let keys: BTreeSet<&str> = obj.keys().map(String::as_str).collect();
        let expected: BTreeSet<&str> = required.iter().copied().collect();
        if keys != expected {
            return Err(violation(format!("{kind} fields {keys:?}, expected {expected:?}")));
        }
        if payload == "entries" {
            let entries = obj["entries"].as_array().ok_or_else(|| violation("entries is not a list".into()))?;
            for e in entries {
                let keys: BTreeSet<&str> = e.as_object().map(|o| o.keys().map(String::as_str).collect()).unwrap_or_default();
                if keys != BTreeSet::from(["triple", "v", "id", "platform"]) {
                    return Err(violation(format!("unexpected entry fields {keys:?}")));
                }
                let t: BTreeSet<&str> =
                    e["triple"].as_object().map(|o| o.keys().map(String::as_str).collect()).unwrap_or_default();
                if t != BTreeSet::from(["head", "relation", "tail"]) {
                    return Err(violation(format!("unexpected triple fields {t:?}")));
                }
                if !e["v"].is_number() || !e["id"].is_u64() || !e["platform"].is_u64() {
                    return Err(violation("entry values must be numbers".into()));
                }
            }
        }
        let mut strings = Vec::new();
        collect_strings(&value, &mut strings);
        if let Some(tok) = strings.iter().find(|s| forbidden.contains(s.as_str())) {
            return Err(violation(format!("token {tok:?} appears in a {kind} payload")));
        }
        report.messages += 1;
        *report.by_kind.entry(kind.to_owned()).or_default() += 1;
    }
    Ok(report)
}

fn collect_strings(v: &serde_json::Value, out: &mut Vec<String>) {
    match v {
        serde_json::Value::String(s) => out.push(s.clone()),
        serde_json::Value::Array(a) => a.iter().for_each(|x| collect_strings(x, out)),
        serde_json::Value::Object(o) => o.values().for_each(|x| collect_strings(x, out)),
        _ => {}
    }
}
