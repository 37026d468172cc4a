use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::errors::{ErrorBreakdown, ErrorCategory};
use crate::eval::intrinsic::{normalize_score, Anchors, IntrinsicReport};
use crate::eval::metrics::{disambiguation_metrics, span_metrics, DisambiguationMetrics, SpanMetrics};
use crate::variant::Variant;

/// One run's evaluation results.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tag: String,
    pub variant: Variant,
    /// Which sentences the IE bank was built from.
    pub bank_source: Option<String>,
    pub intrinsic: Option<IntrinsicReport>,
    /// The definition bank scored the same way, for normalization.
    pub definition_intrinsic: Option<IntrinsicReport>,
    pub disambiguation: Option<DisambiguationMetrics>,
    /// Disambiguation with the expression replaced by one mask.
    pub disambiguation_masked: Option<DisambiguationMetrics>,
    pub span: Option<SpanMetrics>,
    pub majority: Option<MajorityBaseline>,
    pub span_errors: Option<ErrorBreakdown>,
    #[serde(default)]
    pub correlation: Option<IdiomCorrelation>,
}

/// Pearson r between per-idiom test accuracy and per-idiom training count.
/// `None` where either series is constant.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdiomCorrelation {
    pub n_idioms: usize,
    pub disambiguation: Option<f64>,
    /// Uses per-idiom sequence accuracy.
    pub span: Option<f64>,
}

impl EvalReport {
    pub fn new(tag: impl Into<String>, variant: Variant) -> Self {
        Self {
            tag: tag.into(),
            variant,
            bank_source: None,
            intrinsic: None,
            definition_intrinsic: None,
            disambiguation: None,
            disambiguation_masked: None,
            span: None,
            majority: None,
            span_errors: None,
            correlation: None,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn to_markdown(&self) -> String {
        let mut s = format!("# Evaluation: {} ({})\n\n", self.tag, self.variant);
        if let Some(src) = &self.bank_source {
            let _ = writeln!(s, "IE bank built from: {src}\n");
        }
        let mut intrinsic = Vec::new();
        if let Some(r) = &self.intrinsic {
            intrinsic.push(IntrinsicRow::from_report(self.variant.label(), r));
        }
        if let Some(r) = &self.definition_intrinsic {
            intrinsic.push(IntrinsicRow::from_report("Definition", r));
        }
        s.push_str("## Clustering\n\n");
        s.push_str(&intrinsic_table(&intrinsic));
        if let Some(r) = &self.intrinsic {
            let _ = writeln!(s, "\nP@{}: {:.4}\n", r.p_at_k.k, r.p_at_k.mean);
        }
        let mut extrinsic = Vec::new();
        if let Some(m) = &self.majority {
            extrinsic.push(ExtrinsicRow::new("Majority Class", Some(m.disambiguation), Some(m.span)));
        }
        extrinsic.push(ExtrinsicRow::new(self.variant.label(), self.disambiguation, self.span));
        if let Some(d) = self.disambiguation_masked {
            extrinsic.push(ExtrinsicRow::new(&format!("{} (masked)", self.variant.label()), Some(d), None));
        }
        s.push_str("\n## Probing\n\n");
        s.push_str(&extrinsic_table(&extrinsic));
        if let Some(c) = &self.correlation {
            let fmt = |r: Option<f64>| r.map_or("n/a".to_string(), |r| format!("{r:.4}"));
            let _ = writeln!(
                s,
                "\nPer-idiom accuracy vs. training count ({} idioms): disambiguation r = {}, span r = {}",
                c.n_idioms,
                fmt(c.disambiguation),
                fmt(c.span)
            );
        }
        if let Some(e) = &self.span_errors {
            s.push_str("\n## Span errors\n\n");
            s.push_str(&error_table(e));
        }
        s
    }
}

/// Always-idiomatic disambiguation and all-literal tagging scored on the gold data.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MajorityBaseline {
    pub disambiguation: DisambiguationMetrics,
    pub span: SpanMetrics,
}

pub fn majority_baseline(gold_labels: &[bool], gold_tags: &[Vec<bool>], ids: &[String]) -> Result<MajorityBaseline> {
    let always = vec![true; gold_labels.len()];
    let literal: Vec<Vec<bool>> = gold_tags.iter().map(|g| vec![false; g.len()]).collect();
    Ok(MajorityBaseline {
        disambiguation: disambiguation_metrics(&always, gold_labels)?,
        span: span_metrics(&literal, gold_tags, ids)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntrinsicRow {
    pub label: String,
    pub homogeneity: f64,
    pub distance: f64,
    pub normalized_homogeneity: Option<f64>,
    pub normalized_distance: Option<f64>,
}

impl IntrinsicRow {
    pub fn from_report(label: &str, r: &IntrinsicReport) -> Self {
        Self {
            label: label.to_string(),
            homogeneity: r.homogeneity,
            distance: r.mean_intergroup_distance,
            normalized_homogeneity: r.normalized_homogeneity,
            normalized_distance: r.normalized_distance,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtrinsicRow {
    pub label: String,
    pub disambiguation: Option<DisambiguationMetrics>,
    pub span: Option<SpanMetrics>,
}

impl ExtrinsicRow {
    pub fn new(label: &str, disambiguation: Option<DisambiguationMetrics>, span: Option<SpanMetrics>) -> Self {
        Self { label: label.to_string(), disambiguation, span }
    }
}

fn with_norm(x: f64, n: Option<f64>) -> String {
    match n {
        Some(n) => format!("{x:.4} ({n:.2})"),
        None => format!("{x:.4}"),
    }
}

fn pct(x: Option<f64>) -> String {
    x.map_or_else(|| "-".to_string(), |v| format!("{:.2}", 100.0 * v))
}

pub fn intrinsic_table(rows: &[IntrinsicRow]) -> String {
    let mut s = String::from("| Method | Score (Norm.) | Dist. (Norm.) |\n|---|---|---|\n");
    for r in rows {
        let _ = writeln!(
            s,
            "| {} | {} | {} |",
            r.label,
            with_norm(r.homogeneity, r.normalized_homogeneity),
            with_norm(r.distance, r.normalized_distance)
        );
    }
    s
}

/// Token recall uses the idiomatic-sequences average; the all-sequences
/// values follow the table.
pub fn extrinsic_table(rows: &[ExtrinsicRow]) -> String {
    let mut s = String::from("| Model | F1 | Acc | Seq Acc | Tkn Recall | Tkn Acc |\n|---|---|---|---|---|---|\n");
    for r in rows {
        let d = r.disambiguation.as_ref();
        let sp = r.span.as_ref();
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {} | {} |",
            r.label,
            pct(d.map(|m| m.f1)),
            pct(d.map(|m| m.accuracy)),
            pct(sp.map(|m| m.sequence_accuracy)),
            pct(sp.and_then(|m| m.token_recall_idiomatic)),
            pct(sp.map(|m| m.token_accuracy)),
        );
    }
    let all: Vec<String> = rows
        .iter()
        .filter_map(|r| r.span.map(|m| format!("{} {}", r.label, pct(Some(m.token_recall_all)))))
        .collect();
    if !all.is_empty() {
        let _ = writeln!(s, "\nTkn Recall over all sequences: {}", all.join("; "));
    }
    s
}

pub fn error_table(e: &ErrorBreakdown) -> String {
    let mut s = String::from("| Category | Count | Share |\n|---|---|---|\n");
    for c in ErrorCategory::ALL {
        let n = e.counts.get(&c).copied().unwrap_or(0);
        let _ = writeln!(s, "| {} | {} | {:.1}% |", c.label(), n, 100.0 * e.fraction(c));
    }
    let _ = writeln!(s, "| Total | {} | |", e.total);
    s
}

/// Variant reports gathered into one normalized table pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub anchors: Anchors,
    pub intrinsic: Vec<IntrinsicRow>,
    pub extrinsic: Vec<ExtrinsicRow>,
}

impl Comparison {
    pub fn to_markdown(&self) -> String {
        let mut s = String::from("# Variant comparison\n\n## Clustering\n\n");
        s.push_str(&intrinsic_table(&self.intrinsic));
        s.push_str("\n## Probing\n\n");
        s.push_str(&extrinsic_table(&self.extrinsic));
        s
    }
}

/// Normalizes every run against the base run (lower) and the definition
/// bank (upper), ordering rows by variant.
pub fn compare_variants(reports: &[EvalReport]) -> Result<Comparison> {
    let base = reports
        .iter()
        .find(|r| r.variant == Variant::Base && r.intrinsic.is_some())
        .ok_or_else(|| Error::Validation("comparison needs a base run with clustering results".into()))?;
    let definition = reports
        .iter()
        .filter(|r| r.variant == Variant::Base)
        .chain(reports.iter())
        .find_map(|r| r.definition_intrinsic.as_ref())
        .ok_or_else(|| Error::Validation("comparison needs definition-bank clustering results".into()))?;
    let lower = base.intrinsic.as_ref().unwrap();
    let anchors = Anchors {
        homogeneity: (lower.homogeneity, definition.homogeneity),
        distance: (lower.mean_intergroup_distance, definition.mean_intergroup_distance),
    };
    let mut ordered: Vec<&EvalReport> = reports.iter().collect();
    ordered.sort_by_key(|r| r.variant.rank());
    let label = |r: &EvalReport| {
        let dup = reports.iter().filter(|o| o.variant == r.variant).count() > 1;
        if dup {
            format!("{} [{}]", r.variant.label(), r.tag)
        } else {
            r.variant.label().to_string()
        }
    };
    let norm_row = |label: String, h: f64, d: f64| -> Result<IntrinsicRow> {
        Ok(IntrinsicRow {
            label,
            homogeneity: h,
            distance: d,
            normalized_homogeneity: Some(normalize_score(h, anchors.homogeneity.0, anchors.homogeneity.1)?),
            normalized_distance: Some(normalize_score(d, anchors.distance.0, anchors.distance.1)?),
        })
    };
    let mut intrinsic = Vec::new();
    for r in &ordered {
        if let Some(i) = &r.intrinsic {
            intrinsic.push(norm_row(label(r), i.homogeneity, i.mean_intergroup_distance)?);
        }
    }
    intrinsic.push(norm_row("Definition".into(), definition.homogeneity, definition.mean_intergroup_distance)?);
    let mut extrinsic = Vec::new();
    if let Some(m) = ordered.iter().find_map(|r| r.majority) {
        extrinsic.push(ExtrinsicRow::new("Majority Class", Some(m.disambiguation), Some(m.span)));
    }
    for r in &ordered {
        if r.disambiguation.is_some() || r.span.is_some() {
            extrinsic.push(ExtrinsicRow::new(&label(r), r.disambiguation, r.span));
        }
    }
    Ok(Comparison { anchors, intrinsic, extrinsic })
}

/// One line of a disambiguation prediction dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelPrediction {
    pub instance_id: String,
    pub label: bool,
    pub gold: bool,
}

/// One line of a span prediction dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TagPrediction {
    pub instance_id: String,
    pub tags: Vec<bool>,
    pub gold: Vec<bool>,
}

pub fn to_jsonl<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut s = String::new();
    for r in rows {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    Ok(s)
}

pub fn from_jsonl<T: for<'de> Deserialize<'de>>(text: &str, source: &str) -> Result<Vec<T>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: source.into(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::eval::intrinsic::PrecisionAtK;

    fn intrinsic(h: f64, d: f64) -> IntrinsicReport {
        IntrinsicReport {
            n_idioms: 0,
            n_groups: 0,
            n_clusters: 0,
            homogeneity: h,
            mean_intergroup_distance: d,
            normalized_homogeneity: None,
            normalized_distance: None,
            p_at_k: PrecisionAtK { k: 3, mean: 0.0, per_idiom: BTreeMap::new(), per_group: BTreeMap::new() },
            assignment: BTreeMap::new(),
        }
    }

    fn run(v: Variant, h: f64, d: f64) -> EvalReport {
        let mut r = EvalReport::new(v.tag(), v);
        r.intrinsic = Some(intrinsic(h, d));
        r
    }

    #[test]
    fn paper_scale_normalization() {
        let mut base = run(Variant::Base, 0.4546, 0.0379);
        base.definition_intrinsic = Some(intrinsic(0.6816, 0.2394));
        let best = run(Variant::ItiSfSi, 0.6450, 0.2284);
        let c = compare_variants(&[best, base]).unwrap();
        let labels: Vec<&str> = c.intrinsic.iter().map(|r| r.label.as_str()).collect();
        assert_eq!(labels, ["Base", "ITI+SF+SI", "Definition"]);
        let h: Vec<f64> = c.intrinsic.iter().map(|r| r.normalized_homogeneity.unwrap()).collect();
        assert!(h[0].abs() < 1e-9 && (h[1] - 83.86).abs() < 0.05 && (h[2] - 100.0).abs() < 1e-9);
        assert!((c.intrinsic[1].normalized_distance.unwrap() - 94.54).abs() < 0.05);
        assert!(c.to_markdown().contains("| ITI+SF+SI | 0.6450 (83.88) | 0.2284 (94.54) |"));
    }

    #[test]
    fn anchors_are_required() {
        assert!(compare_variants(&[run(Variant::Iti, 0.5, 0.1)]).is_err());
        assert!(compare_variants(&[run(Variant::Base, 0.5, 0.1)]).is_err());
    }

    #[test]
    fn identical_scores_normalize_identically() {
        let mut base = run(Variant::Base, 0.3, 0.05);
        base.definition_intrinsic = Some(intrinsic(0.7, 0.25));
        let c = compare_variants(&[
            base,
            run(Variant::Iti, 0.5, 0.1),
            run(Variant::ItiSi, 0.5, 0.1),
            run(Variant::ItiSf, 0.5, 0.1),
        ])
        .unwrap();
        let n: Vec<_> = c.intrinsic[1..4].iter().map(|r| (r.normalized_homogeneity, r.normalized_distance)).collect();
        assert!(n.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn majority_row_layout() {
        let gold: Vec<bool> = (0..10000).map(|i| i < 7757).collect();
        let tags: Vec<Vec<bool>> = gold.iter().map(|&g| vec![g, false, false, false]).collect();
        let ids: Vec<String> = (0..gold.len()).map(|i| i.to_string()).collect();
        let m = majority_baseline(&gold, &tags, &ids).unwrap();
        let table = extrinsic_table(&[ExtrinsicRow::new("Majority Class", Some(m.disambiguation), Some(m.span))]);
        assert!(table.contains("| Majority Class | 87.37 | 77.57 | 22.43 | 0.00 |"), "{table}");
    }

    #[test]
    fn jsonl_round_trip() {
        let rows = vec![TagPrediction { instance_id: "a".into(), tags: vec![true, false], gold: vec![true, true] }];
        let text = to_jsonl(&rows).unwrap();
        assert_eq!(from_jsonl::<TagPrediction>(&text, "mem").unwrap(), rows);
    }
}
