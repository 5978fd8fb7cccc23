//! Held-out evaluation: bag-level scoring, PR curves, AUC, P@N and
//! selection accuracy on synthetic corpora.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, Shards};
use crate::encoder::{self, ModelParams};
use crate::error::{Error, Result};
use crate::federation::DenoiseMap;

/// One scored `(entity pair, relation)` candidate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Prediction {
    pub head: String,
    pub tail: String,
    pub relation: usize,
    pub score: f64,
    pub correct: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PrPoint {
    pub rank: usize,
    pub precision: f64,
    pub recall: f64,
}

/// Non-NA facts in the test knowledge base.
pub fn total_facts(test: &Dataset) -> usize {
    test.kb.iter().filter(|t| t.relation != 0).count()
}

/// Scores every test entity pair against every non-NA relation by the
/// maximum sentence probability. Sorted by descending score, then pair,
/// then relation.
pub fn score_test(params: &ModelParams, test: &Dataset) -> Result<Vec<Prediction>> {
    if test.sentences.is_empty() {
        return Err(Error::Evaluation("empty test set".into()));
    }
    let m = params.hyper.num_relations;
    if test.num_relations() != m {
        return Err(Error::Evaluation(format!(
            "model has {m} relations but the test set declares {}",
            test.num_relations()
        )));
    }
    let mut pairs: BTreeMap<(&str, &str), Vec<usize>> = BTreeMap::new();
    for (i, s) in test.sentences.iter().enumerate() {
        pairs.entry(s.triple.entity_pair()).or_default().push(i);
    }
    let facts: BTreeSet<(&str, &str, usize)> =
        test.kb.iter().map(|t| (t.head.as_str(), t.tail.as_str(), t.relation)).collect();
    let pairs: Vec<_> = pairs.into_iter().collect();

    let per_pair: Vec<Result<Vec<Prediction>>> = pairs
        .par_iter()
        .map(|((head, tail), members)| {
            let mut best = vec![f64::NEG_INFINITY; m];
            for &i in members {
                let x = encoder::encode_input(&test.sentences[i], &params.hyper);
                let probs = encoder::predict(params, &x)?;
                best.iter_mut().zip(&probs).for_each(|(b, p)| *b = b.max(*p));
            }
            Ok((1..m)
                .map(|j| Prediction {
                    head: head.to_string(),
                    tail: tail.to_string(),
                    relation: j,
                    score: best[j],
                    correct: facts.contains(&(*head, *tail, j)),
                })
                .collect())
        })
        .collect();
    let mut preds = Vec::with_capacity(pairs.len() * m.saturating_sub(1));
    for r in per_pair {
        preds.extend(r?);
    }
    sort_predictions(&mut preds);
    Ok(preds)
}

pub fn sort_predictions(preds: &mut [Prediction]) {
    preds.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| (&a.head, &a.tail, a.relation).cmp(&(&b.head, &b.tail, b.relation)))
    });
}

/// One point per rank over predictions already in ranked order.
pub fn pr_curve(preds: &[Prediction], total_facts: usize) -> Result<Vec<PrPoint>> {
    if total_facts == 0 {
        return Err(Error::Evaluation("test knowledge base has no relational facts".into()));
    }
    let mut hits = 0usize;
    Ok(preds
        .iter()
        .enumerate()
        .map(|(k, p)| {
            hits += p.correct as usize;
            PrPoint { rank: k + 1, precision: hits as f64 / (k + 1) as f64, recall: hits as f64 / total_facts as f64 }
        })
        .collect())
}

/// Trapezoidal area under the PR curve, anchored at recall 0 with the
/// first point's precision.
pub fn auc(points: &[PrPoint]) -> f64 {
    let Some(first) = points.first() else { return 0.0 };
    let (mut r0, mut p0) = (0.0, first.precision);
    let mut area = 0.0;
    for pt in points {
        area += (pt.recall - r0) * (pt.precision + p0) / 2.0;
        r0 = pt.recall;
        p0 = pt.precision;
    }
    area
}

/// Precision over the top `min(n, len)` predictions.
pub fn p_at_n(preds: &[Prediction], n: usize) -> f64 {
    let k = n.min(preds.len());
    if k == 0 {
        return 0.0;
    }
    preds[..k].iter().filter(|p| p.correct).count() as f64 / k as f64
}

/// Fraction of non-NA triples in `map` whose winning sentence is a true
/// positive.
pub fn selection_accuracy(map: &DenoiseMap, dataset: &Dataset, shards: &Shards) -> Result<f64> {
    if !dataset.has_ground_truth() {
        return Err(Error::Evaluation("dataset carries no true-positive labels".into()));
    }
    let mut total = 0usize;
    let mut hits = 0usize;
    for (triple, e) in map.iter().filter(|(t, _)| t.relation != 0) {
        let idx = shards.dataset_index(e.platform, e.id).ok_or_else(|| {
            Error::Evaluation(format!("selection ({}, {}) is not in the partition", e.platform, e.id))
        })?;
        let s = &dataset.sentences[idx];
        if &s.triple != triple {
            return Err(Error::Evaluation(format!("selected sentence {:?} does not belong to {triple:?}", s.id)));
        }
        total += 1;
        hits += (s.is_true_positive == Some(true)) as usize;
    }
    if total == 0 {
        return Err(Error::Evaluation("no non-NA selections to score".into()));
    }
    Ok(hits as f64 / total as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PAt {
    #[serde(rename = "100")]
    pub p100: f64,
    #[serde(rename = "200")]
    pub p200: f64,
    #[serde(rename = "300")]
    pub p300: f64,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub auc: f64,
    pub p_at: PAt,
    pub selection_accuracy: Option<f64>,
}

/// Everything `eval` produces for one checkpoint.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub predictions: Vec<Prediction>,
    pub points: Vec<PrPoint>,
    pub report: EvalReport,
}

pub fn evaluate(params: &ModelParams, test: &Dataset) -> Result<Evaluation> {
    let predictions = score_test(params, test)?;
    let points = pr_curve(&predictions, total_facts(test))?;
    let (p100, p200, p300) = (p_at_n(&predictions, 100), p_at_n(&predictions, 200), p_at_n(&predictions, 300));
    let report = EvalReport {
        auc: auc(&points),
        p_at: PAt { p100, p200, p300, mean: (p100 + p200 + p300) / 3.0 },
        selection_accuracy: None,
    };
    Ok(Evaluation { predictions, points, report })
}

/// CSV with columns `rank, precision, recall, score, correct`, optionally
/// truncated to the first `top` ranks.
pub fn write_pr_csv(
    predictions: &[Prediction],
    points: &[PrPoint],
    top: Option<usize>,
    out: &mut impl Write,
) -> std::io::Result<()> {
    writeln!(out, "rank,precision,recall,score,correct")?;
    let n = top.unwrap_or(points.len()).min(points.len());
    for (pt, p) in points[..n].iter().zip(predictions) {
        writeln!(out, "{},{},{},{},{}", pt.rank, pt.precision, pt.recall, p.score, p.correct as u8)?;
    }
    Ok(())
}
