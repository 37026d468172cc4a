use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Binary sense metrics with idiomatic as the positive class. Values are
/// fractions in [0, 1].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisambiguationMetrics {
    pub n: usize,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn disambiguation_metrics(pred: &[bool], gold: &[bool]) -> Result<DisambiguationMetrics> {
    if pred.len() != gold.len() {
        return Err(Error::Validation(format!("{} predictions for {} labels", pred.len(), gold.len())));
    }
    if gold.is_empty() {
        return Err(Error::Validation("no predictions to score".into()));
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (&p, &g) in pred.iter().zip(gold) {
        match (p, g) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if tp == 0 { 0.0 } else { 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64 };
    Ok(DisambiguationMetrics {
        n: gold.len(),
        tp,
        fp,
        tn,
        fn_,
        accuracy: ratio(tp + tn, gold.len()),
        precision,
        recall,
        f1,
    })
}

/// Sequence tagging metrics, each a fraction in [0, 1].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpanMetrics {
    pub n_sequences: usize,
    /// Sequences with at least one gold idiomatic token.
    pub n_idiomatic: usize,
    pub sequence_accuracy: f64,
    /// Per-sequence recall averaged over all sequences; a sequence without
    /// gold idiomatic tokens counts as recall 1.
    pub token_recall_all: f64,
    /// Per-sequence recall averaged over idiomatic sequences only.
    pub token_recall_idiomatic: Option<f64>,
    pub token_accuracy: f64,
}

pub fn span_metrics(pred: &[Vec<bool>], gold: &[Vec<bool>], ids: &[String]) -> Result<SpanMetrics> {
    if pred.len() != gold.len() {
        return Err(Error::Validation(format!("{} predicted sequences for {} gold", pred.len(), gold.len())));
    }
    if gold.is_empty() {
        return Err(Error::Validation("no sequences to score".into()));
    }
    let (mut exact, mut rec_all, mut rec_idi, mut n_idi, mut acc) = (0usize, 0.0, 0.0, 0usize, 0.0);
    for (i, (p, g)) in pred.iter().zip(gold).enumerate() {
        if p.len() != g.len() {
            let id = ids.get(i).cloned().unwrap_or_else(|| format!("#{i}"));
            return Err(Error::InvalidRecord {
                id,
                message: format!("{} predicted tags for {} tokens", p.len(), g.len()),
            });
        }
        if p.is_empty() {
            return Err(Error::Validation(format!("sequence #{i} is empty")));
        }
        if p == g {
            exact += 1;
        }
        let positives = g.iter().filter(|&&t| t).count();
        let found = p.iter().zip(g).filter(|(&a, &b)| a && b).count();
        if positives == 0 {
            rec_all += 1.0;
        } else {
            let r = found as f64 / positives as f64;
            rec_all += r;
            rec_idi += r;
            n_idi += 1;
        }
        acc += p.iter().zip(g).filter(|(a, b)| a == b).count() as f64 / g.len() as f64;
    }
    let n = gold.len() as f64;
    Ok(SpanMetrics {
        n_sequences: gold.len(),
        n_idiomatic: n_idi,
        sequence_accuracy: exact as f64 / n,
        token_recall_all: rec_all / n,
        token_recall_idiomatic: (n_idi > 0).then(|| rec_idi / n_idi as f64),
        token_accuracy: acc / n,
    })
}

/// Pearson product-moment correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 3 {
        return Err(Error::Validation(format!(
            "correlation needs two equally long series of at least 3 values ({} and {})",
            x.len(),
            y.len()
        )));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Validation("correlation of a constant series".into()));
    }
    Ok(sxy / (sxx.sqrt() * syy.sqrt()))
}

/// Mean of a per-item score for each idiom.
pub fn per_idiom_accuracy(idioms: &[&str], scores: &[f64]) -> Result<BTreeMap<String, f64>> {
    if idioms.len() != scores.len() {
        return Err(Error::Validation(format!("{} idiom ids for {} scores", idioms.len(), scores.len())));
    }
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for (id, s) in idioms.iter().zip(scores) {
        let e = sums.entry(id.to_string()).or_default();
        e.0 += s;
        e.1 += 1;
    }
    Ok(sums.into_iter().map(|(id, (s, n))| (id, s / n as f64)).collect())
}

/// Pearson r between per-idiom accuracy and per-idiom training count over
/// the idioms in `accuracies`; idioms absent from `counts` count as 0.
pub fn per_idiom_correlation(accuracies: &BTreeMap<String, f64>, counts: &BTreeMap<String, usize>) -> Result<f64> {
    let x: Vec<f64> = accuracies.values().copied().collect();
    let y: Vec<f64> = accuracies
        .keys()
        .map(|id| counts.get(id).copied().unwrap_or(0) as f64)
        .collect();
    pearson(&x, &y)
}
