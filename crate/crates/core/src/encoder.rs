//! Piecewise convolutional relation scorer.
//!
//! A sentence is embedded token by token as `[word ‖ head-position ‖
//! tail-position]`, convolved with a same-padded window, max-pooled per
//! filter over the three segments delimited by the two entities, squashed
//! with `tanh`, optionally dropped out, and mapped to relation logits by one
//! fully connected layer. Gradients are derived by hand.
//!
//! All parameters live in one flat `f64` buffer in this order:
//! `word_emb` (row-major, `|V| × d_w`), `pos_emb_head`, `pos_emb_tail`
//! (`(2P+1) × d_p` each), `conv_w` (`F × w·(d_w+2d_p)`), `conv_b` (`F`),
//! `fc_w` (`M × 3F`), `fc_b` (`M`). A conv row is laid out window offset
//! major: entry `k·D + d` multiplies feature `d` of the `k`-th token in the
//! window. The pooled vector is segment major: entry `s·F + f`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::ops::Range;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::SentenceRecord;
use crate::error::{Error, Result};
use crate::rng::{self, Purpose};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Hyper {
    pub word_dim: usize,
    pub pos_dim: usize,
    pub filters: usize,
    pub window: usize,
    pub num_relations: usize,
    pub max_len: usize,
    /// Relative distances are clipped to `[-pos_clip, pos_clip]`.
    pub pos_clip: usize,
}

impl Default for Hyper {
    fn default() -> Self {
        Hyper { word_dim: 50, pos_dim: 5, filters: 230, window: 3, num_relations: 5, max_len: 120, pos_clip: 50 }
    }
}

impl Hyper {
    /// Width of one token's input vector.
    pub fn token_dim(&self) -> usize {
        self.word_dim + 2 * self.pos_dim
    }

    pub fn pos_rows(&self) -> usize {
        2 * self.pos_clip + 1
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        for (name, v) in [
            ("word_dim", self.word_dim),
            ("pos_dim", self.pos_dim),
            ("filters", self.filters),
            ("window", self.window),
            ("num_relations", self.num_relations),
            ("max_len", self.max_len),
            ("pos_clip", self.pos_clip),
        ] {
            if v == 0 {
                errs.push(format!("model.{name} must be positive"));
            }
        }
        errs
    }

    /// Offset of the first token in a window relative to its centre.
    fn half_window(&self) -> usize {
        (self.window - 1) / 2
    }
}

/// Offsets of each parameter group inside the flat buffer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub word_emb: Range<usize>,
    pub pos_head: Range<usize>,
    pub pos_tail: Range<usize>,
    pub conv_w: Range<usize>,
    pub conv_b: Range<usize>,
    pub fc_w: Range<usize>,
    pub fc_b: Range<usize>,
}

impl Layout {
    pub fn new(hyper: &Hyper, vocab_size: usize) -> Self {
        let mut at = 0;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        Layout {
            word_emb: take(vocab_size * hyper.word_dim),
            pos_head: take(hyper.pos_rows() * hyper.pos_dim),
            pos_tail: take(hyper.pos_rows() * hyper.pos_dim),
            conv_w: take(hyper.filters * hyper.window * hyper.token_dim()),
            conv_b: take(hyper.filters),
            fc_w: take(hyper.num_relations * 3 * hyper.filters),
            fc_b: take(hyper.num_relations),
        }
    }

    pub fn len(&self) -> usize {
        self.fc_b.end
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn groups(&self) -> [(&'static str, Range<usize>); 7] {
        [
            ("word_emb", self.word_emb.clone()),
            ("pos_emb_head", self.pos_head.clone()),
            ("pos_emb_tail", self.pos_tail.clone()),
            ("conv_w", self.conv_w.clone()),
            ("conv_b", self.conv_b.clone()),
            ("fc_w", self.fc_w.clone()),
            ("fc_b", self.fc_b.clone()),
        ]
    }
}

/// Full parameter set of the scorer.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub hyper: Hyper,
    pub vocab_size: usize,
    layout: Layout,
    data: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(hyper: Hyper, vocab_size: usize) -> Self {
        let layout = Layout::new(&hyper, vocab_size);
        let data = vec![0.0; layout.len()];
        ModelParams { hyper, vocab_size, layout, data }
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.data.clone()
    }

    pub fn unflatten(values: Vec<f64>, hyper: Hyper, vocab_size: usize) -> Result<Self> {
        let layout = Layout::new(&hyper, vocab_size);
        if values.len() != layout.len() {
            return Err(Error::LengthMismatch { expected: layout.len(), actual: values.len() });
        }
        Ok(ModelParams { hyper, vocab_size, layout, data: values })
    }

    pub fn group(&self, range: &Range<usize>) -> &[f64] {
        &self.data[range.clone()]
    }

    fn word_row(&self, token: u32) -> &[f64] {
        let d = self.hyper.word_dim;
        let start = self.layout.word_emb.start + token as usize * d;
        &self.data[start..start + d]
    }

    fn pos_row(&self, table: &Range<usize>, index: usize) -> &[f64] {
        let d = self.hyper.pos_dim;
        let start = table.start + index * d;
        &self.data[start..start + d]
    }

    fn conv_row(&self, f: usize) -> &[f64] {
        let n = self.hyper.window * self.hyper.token_dim();
        let start = self.layout.conv_w.start + f * n;
        &self.data[start..start + n]
    }

    fn fc_row(&self, m: usize) -> &[f64] {
        let n = 3 * self.hyper.filters;
        let start = self.layout.fc_w.start + m * n;
        &self.data[start..start + n]
    }

    /// Largest absolute value per parameter group, for numeric diagnostics.
    pub fn magnitudes(&self) -> String {
        self.layout
            .groups()
            .iter()
            .map(|(name, r)| {
                let m = self.data[r.clone()].iter().fold(0.0f64, |a, v| a.max(v.abs()));
                format!("{name}={m:.3e}")
            })
            .collect::<Vec<_>>()
            .join(", ")
    }
}

/// Gradient with the same length and element order as [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub data: Vec<f64>,
}

impl Gradient {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Gradient { data: vec![0.0; params.len()] }
    }

    pub fn clear(&mut self) {
        self.data.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|g| *g *= s);
    }
}

// Small embeddings let filler memorization swamp the signature tokens early on.
const EMB_INIT: f64 = 0.5;

/// Embeddings uniform in `[-0.5, 0.5]`; conv and fc weights uniform in
/// `±sqrt(6 / (fan_in + fan_out))`; biases zero.
pub fn init_params(hyper: Hyper, vocab_size: usize, seed: u64) -> ModelParams {
    let mut p = ModelParams::zeros(hyper, vocab_size);
    let mut rng = rng::stream(seed, Purpose::Init, 0, 0);
    let l = p.layout.clone();
    let conv_bound = (6.0 / ((hyper.window * hyper.token_dim() + hyper.filters) as f64)).sqrt();
    let fc_bound = (6.0 / ((3 * hyper.filters + hyper.num_relations) as f64)).sqrt();
    for (range, bound) in [
        (l.word_emb, EMB_INIT),
        (l.pos_head, EMB_INIT),
        (l.pos_tail, EMB_INIT),
        (l.conv_w, conv_bound),
        (l.fc_w, fc_bound),
    ] {
        for v in &mut p.data[range] {
            *v = rng.gen_range(-bound..=bound);
        }
    }
    p
}

/// Model input for one sentence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedSentence {
    /// Token ids padded with `0` to `max_len`.
    pub tokens: Vec<u32>,
    /// Shifted, clipped distance of each position to the head entity, in `[0, 2P]`.
    pub head_pos: Vec<u16>,
    pub tail_pos: Vec<u16>,
    /// Valid length `L`.
    pub len: usize,
    pub p_min: usize,
    pub p_max: usize,
}

fn relative_index(i: usize, anchor: usize, clip: usize) -> u16 {
    let d = (i as i64 - anchor as i64).clamp(-(clip as i64), clip as i64);
    (d + clip as i64) as u16
}

/// Distances are measured to each entity's first token.
pub fn encode_input(sentence: &SentenceRecord, hyper: &Hyper) -> EncodedSentence {
    let len = sentence.tokens.len().min(hyper.max_len);
    let head = sentence.head.start;
    let tail = sentence.tail.start;
    let mut tokens = sentence.tokens[..len].to_vec();
    tokens.resize(hyper.max_len, crate::corpus::PAD_ID);
    let head_pos = (0..hyper.max_len).map(|i| relative_index(i, head, hyper.pos_clip)).collect();
    let tail_pos = (0..hyper.max_len).map(|i| relative_index(i, tail, hyper.pos_clip)).collect();
    EncodedSentence { tokens, head_pos, tail_pos, len, p_min: head.min(tail), p_max: head.max(tail) }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&o| (o - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|&o| (o - max).exp()).sum::<f64>().ln()
}

/// Per-filter max over the segments `[0, p_min]`, `(p_min, p_max]` and
/// `(p_max, L-1]` of a conv output laid out `conv[i·F + f]`. An empty segment
/// pools to `0` with no argmax. Ties keep the earliest position.
pub fn piecewise_max_pool(
    conv: &[f64],
    len: usize,
    filters: usize,
    p_min: usize,
    p_max: usize,
) -> (Vec<f64>, Vec<Option<usize>>) {
    let mut pooled = vec![0.0; 3 * filters];
    let mut argmax = vec![None; 3 * filters];
    let segments = [0..p_min + 1, p_min + 1..p_max + 1, p_max + 1..len];
    for (s, seg) in segments.into_iter().enumerate() {
        for f in 0..filters {
            let mut best: Option<(usize, f64)> = None;
            for i in seg.clone() {
                let v = conv[i * filters + f];
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((i, v));
                }
            }
            if let Some((i, v)) = best {
                pooled[s * filters + f] = v;
                argmax[s * filters + f] = Some(i);
            }
        }
    }
    (pooled, argmax)
}

/// Everything below the dropout layer for one sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    /// Zero-padded input rows: `half` rows of padding, `L` token rows, then
    /// `window - 1 - half` rows of padding, each `D` wide.
    input: Vec<f64>,
    /// Conv pre-activations, `conv[i·F + f]` for `i < L`.
    pub conv: Vec<f64>,
    pub pooled: Vec<f64>,
    pub argmax: Vec<Option<usize>>,
    /// `tanh(pooled)`.
    pub hidden: Vec<f64>,
}

pub fn features(params: &ModelParams, x: &EncodedSentence) -> Features {
    let h = &params.hyper;
    let dim = h.token_dim();
    let half = h.half_window();
    let len = x.len;
    let rows = len + h.window - 1;
    let mut input = vec![0.0; rows * dim];
    for i in 0..len {
        let row = &mut input[(i + half) * dim..(i + half + 1) * dim];
        row[..h.word_dim].copy_from_slice(params.word_row(x.tokens[i]));
        row[h.word_dim..h.word_dim + h.pos_dim]
            .copy_from_slice(params.pos_row(&params.layout.pos_head, x.head_pos[i] as usize));
        row[h.word_dim + h.pos_dim..].copy_from_slice(params.pos_row(&params.layout.pos_tail, x.tail_pos[i] as usize));
    }

    let span = h.window * dim;
    let bias = params.group(&params.layout.conv_b);
    let mut conv = vec![0.0; len * h.filters];
    for i in 0..len {
        let window = &input[i * dim..i * dim + span];
        for f in 0..h.filters {
            let w = params.conv_row(f);
            conv[i * h.filters + f] = bias[f] + dot(w, window);
        }
    }

    let (pooled, argmax) = piecewise_max_pool(&conv, len, h.filters, x.p_min, x.p_max);
    let hidden = pooled.iter().map(|v| v.tanh()).collect();
    Features { input, conv, pooled, argmax, hidden }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Intermediates of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub features: Features,
    /// Inverted-dropout multipliers (`0` or `1/(1-p)`); `None` in inference.
    pub mask: Option<Vec<f64>>,
    /// Representation fed to the fc layer.
    pub rep: Vec<f64>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

struct Head {
    mask: Option<Vec<f64>>,
    rep: Vec<f64>,
    logits: Vec<f64>,
    probs: Vec<f64>,
}

fn head_forward(
    params: &ModelParams,
    hidden: &[f64],
    dropout_p: f64,
    training: bool,
    rng: &mut impl Rng,
) -> Result<Head> {
    let mask = (training && dropout_p > 0.0).then(|| {
        let keep = 1.0 / (1.0 - dropout_p);
        hidden.iter().map(|_| if rng.gen::<f64>() < dropout_p { 0.0 } else { keep }).collect::<Vec<_>>()
    });
    let rep: Vec<f64> = match &mask {
        Some(m) => hidden.iter().zip(m).map(|(h, m)| h * m).collect(),
        None => hidden.to_vec(),
    };
    let logits = head_logits(params, &rep);
    if logits.iter().any(|o| !o.is_finite()) {
        return Err(Error::NonFinite { stage: "logits", diagnostics: params.magnitudes() });
    }
    let probs = softmax(&logits);
    Ok(Head { mask, rep, logits, probs })
}

pub fn forward(
    params: &ModelParams,
    x: &EncodedSentence,
    dropout_p: f64,
    training: bool,
    rng: &mut impl Rng,
) -> Result<ForwardTrace> {
    let features = features(params, x);
    let head = head_forward(params, &features.hidden, dropout_p, training, rng)?;
    Ok(ForwardTrace { features, mask: head.mask, rep: head.rep, logits: head.logits, probs: head.probs })
}

/// Relation probabilities in inference mode (no dropout).
pub fn predict(params: &ModelParams, x: &EncodedSentence) -> Result<Vec<f64>> {
    let features = features(params, x);
    let logits = head_logits(params, &features.hidden);
    if logits.iter().any(|o| !o.is_finite()) {
        return Err(Error::NonFinite { stage: "logits", diagnostics: params.magnitudes() });
    }
    Ok(softmax(&logits))
}

fn head_logits(params: &ModelParams, rep: &[f64]) -> Vec<f64> {
    let bias = params.group(&params.layout.fc_b);
    (0..params.hyper.num_relations).map(|m| bias[m] + dot(params.fc_row(m), rep)).collect()
}

fn check_target(params: &ModelParams, target: usize) -> Result<()> {
    if target >= params.hyper.num_relations {
        return Err(Error::TargetOutOfRange { target, num_relations: params.hyper.num_relations });
    }
    Ok(())
}

/// Backpropagates `-log p(target)` through the fc layer and dropout; returns
/// the gradient with respect to the pre-dropout hidden vector.
fn head_backward(
    params: &ModelParams,
    rep: &[f64],
    mask: Option<&[f64]>,
    probs: &[f64],
    target: usize,
    grad: &mut Gradient,
) -> Vec<f64> {
    let width = rep.len();
    let l = &params.layout;
    let mut d_rep = vec![0.0; width];
    for (m, &p) in probs.iter().enumerate() {
        let d_logit = if m == target { p - 1.0 } else { p };
        grad.data[l.fc_b.start + m] += d_logit;
        let row = l.fc_w.start + m * width;
        let w = params.fc_row(m);
        for c in 0..width {
            grad.data[row + c] += d_logit * rep[c];
            d_rep[c] += w[c] * d_logit;
        }
    }
    if let Some(mask) = mask {
        d_rep.iter_mut().zip(mask).for_each(|(d, m)| *d *= m);
    }
    d_rep
}

/// Backpropagates a hidden-vector gradient through tanh, pooling,
/// convolution and the embedding lookups.
fn features_backward(params: &ModelParams, x: &EncodedSentence, feats: &Features, d_hidden: &[f64], grad: &mut Gradient) {
    let h = &params.hyper;
    let l = &params.layout;
    let dim = h.token_dim();
    let span = h.window * dim;
    let half = h.half_window();
    let mut d_input = vec![0.0; feats.input.len()];

    for (cell, &arg) in feats.argmax.iter().enumerate() {
        let Some(i) = arg else { continue };
        let hv = feats.hidden[cell];
        let g = d_hidden[cell] * (1.0 - hv * hv);
        if g == 0.0 {
            continue;
        }
        let f = cell % h.filters;
        grad.data[l.conv_b.start + f] += g;
        let window = &feats.input[i * dim..i * dim + span];
        let w = params.conv_row(f);
        let gw = &mut grad.data[l.conv_w.start + f * span..l.conv_w.start + (f + 1) * span];
        for k in 0..span {
            gw[k] += g * window[k];
        }
        let dwin = &mut d_input[i * dim..i * dim + span];
        for k in 0..span {
            dwin[k] += g * w[k];
        }
    }

    for i in 0..x.len {
        let row = &d_input[(i + half) * dim..(i + half + 1) * dim];
        let word = l.word_emb.start + x.tokens[i] as usize * h.word_dim;
        for d in 0..h.word_dim {
            grad.data[word + d] += row[d];
        }
        let ph = l.pos_head.start + x.head_pos[i] as usize * h.pos_dim;
        let pt = l.pos_tail.start + x.tail_pos[i] as usize * h.pos_dim;
        for d in 0..h.pos_dim {
            grad.data[ph + d] += row[h.word_dim + d];
            grad.data[pt + d] += row[h.word_dim + h.pos_dim + d];
        }
    }
}

/// Exact gradient of `-log p(target | x)` for the pass recorded in `trace`.
pub fn backward(params: &ModelParams, x: &EncodedSentence, trace: &ForwardTrace, target: usize) -> Result<Gradient> {
    let mut grad = Gradient::zeros_like(params);
    backward_into(params, x, trace, target, &mut grad)?;
    Ok(grad)
}

/// Like [`backward`] but adds into an existing gradient buffer.
pub fn backward_into(
    params: &ModelParams,
    x: &EncodedSentence,
    trace: &ForwardTrace,
    target: usize,
    grad: &mut Gradient,
) -> Result<()> {
    check_target(params, target)?;
    let d_hidden = head_backward(params, &trace.rep, trace.mask.as_deref(), &trace.probs, target, grad);
    features_backward(params, x, &trace.features, &d_hidden, grad);
    Ok(())
}

/// Training step for a group of sentences sharing one label: the sentence
/// representations are averaged, then dropout, fc and softmax are applied
/// once. Returns the cross-entropy loss and adds its gradient into `grad`.
///
/// With a single member this is exactly the per-sentence forward/backward.
pub fn group_loss_and_grad(
    params: &ModelParams,
    members: &[&EncodedSentence],
    target: usize,
    dropout_p: f64,
    rng: &mut impl Rng,
    grad: &mut Gradient,
) -> Result<f64> {
    check_target(params, target)?;
    if members.is_empty() {
        return Err(Error::EmptyGroup);
    }
    let feats: Vec<Features> = members.iter().map(|x| features(params, x)).collect();
    let n = feats.len();
    let hidden = if n == 1 {
        feats[0].hidden.clone()
    } else {
        let mut mean = vec![0.0; feats[0].hidden.len()];
        for f in &feats {
            mean.iter_mut().zip(&f.hidden).for_each(|(m, h)| *m += h);
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        mean
    };
    let head = head_forward(params, &hidden, dropout_p, true, rng)?;
    let loss = log_sum_exp(&head.logits) - head.logits[target];
    let mut d_hidden = head_backward(params, &head.rep, head.mask.as_deref(), &head.probs, target, grad);
    if n > 1 {
        d_hidden.iter_mut().for_each(|d| *d /= n as f64);
    }
    for (x, f) in members.iter().zip(&feats) {
        features_backward(params, x, f, &d_hidden, grad);
    }
    Ok(loss)
}

/// `-log softmax(logits)[target]`.
pub fn cross_entropy(logits: &[f64], target: usize) -> f64 {
    log_sum_exp(logits) - logits[target]
}

/// `θ ← θ − lr·(g + weight_decay·θ)`.
pub fn sgd_step(params: &mut ModelParams, grad: &Gradient, lr: f64, weight_decay: f64) -> Result<()> {
    if grad.data.len() != params.data.len() {
        return Err(Error::LengthMismatch { expected: params.data.len(), actual: grad.data.len() });
    }
    for (t, g) in params.data.iter_mut().zip(&grad.data) {
        *t -= lr * (g + weight_decay * *t);
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    hyper: Hyper,
    vocab_size: usize,
    count: usize,
}

/// Writes `u64` LE header length, JSON header, then the flat parameters as
/// `f64` LE.
pub fn write_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    let header = serde_json::to_vec(&CheckpointHeader {
        hyper: params.hyper,
        vocab_size: params.vocab_size,
        count: params.len(),
    })?;
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    w.write_all(&(header.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&header).map_err(io)?;
    for v in &params.data {
        w.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_checkpoint(path: &Path) -> Result<ModelParams> {
    let io = |e| Error::io(path, e);
    let mut r = BufReader::new(File::open(path).map_err(io)?);
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(io)?;
    let len = u64::from_le_bytes(len) as usize;
    if len > 1 << 20 {
        return Err(Error::Checkpoint(format!("implausible header length {len}")));
    }
    let mut header = vec![0u8; len];
    r.read_exact(&mut header).map_err(io)?;
    let header: CheckpointHeader = serde_json::from_slice(&header)?;
    let expected = Layout::new(&header.hyper, header.vocab_size).len();
    if header.count != expected {
        return Err(Error::Checkpoint(format!("header count {} does not match layout size {expected}", header.count)));
    }
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(io)?;
    if bytes.len() != header.count * 8 {
        return Err(Error::Checkpoint(format!("expected {} bytes of parameters, found {}", header.count * 8, bytes.len())));
    }
    let values = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    ModelParams::unflatten(values, header.hyper, header.vocab_size)
}
