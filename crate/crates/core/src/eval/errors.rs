use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{Sense, TokenSpan};
use crate::error::{Error, Result};

/// Span-detection error types, in assignment priority order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCategory {
    /// Several expressions in the sentence, only part of them found.
    MultiIePartial,
    /// Some but not all of the expression's tokens tagged.
    PartialSpan,
    /// Tagged a different figurative phrase of the sentence.
    OtherFigurative,
    /// A literal use tagged as idiomatic.
    LiteralAsIdiomatic,
    /// The expression was not tagged at all.
    MissedIdiom,
    /// Extra tokens tagged idiomatic.
    SpuriousTokens,
}

impl ErrorCategory {
    pub const ALL: [ErrorCategory; 6] = [
        ErrorCategory::MultiIePartial,
        ErrorCategory::PartialSpan,
        ErrorCategory::OtherFigurative,
        ErrorCategory::LiteralAsIdiomatic,
        ErrorCategory::MissedIdiom,
        ErrorCategory::SpuriousTokens,
    ];

    pub fn label(self) -> &'static str {
        match self {
            ErrorCategory::MultiIePartial => "multi-IE partial detection",
            ErrorCategory::PartialSpan => "partial span detection",
            ErrorCategory::OtherFigurative => "other figurative detection",
            ErrorCategory::LiteralAsIdiomatic => "literal PIE tagged idiomatic",
            ErrorCategory::MissedIdiom => "missed idiom",
            ErrorCategory::SpuriousTokens => "spurious tokens",
        }
    }
}

/// What is known about a sentence beyond its tags.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SpanErrorContext {
    pub sense: Option<Sense>,
    /// The annotated expression's tokens.
    pub pie_span: Option<TokenSpan>,
    /// Other expressions annotated in the same sentence.
    pub other_ie_spans: Vec<TokenSpan>,
    /// Figurative phrases other than the annotated expression.
    pub figurative_spans: Vec<TokenSpan>,
}

pub fn categorize_span_error(pred: &[bool], gold: &[bool], ctx: &SpanErrorContext) -> Result<ErrorCategory> {
    if pred.len() != gold.len() {
        return Err(Error::Validation(format!("{} predicted tags for {} tokens", pred.len(), gold.len())));
    }
    if pred == gold {
        return Err(Error::Validation("a perfectly tagged sequence has no error category".into()));
    }
    let tagged = |s: &TokenSpan| s.range().filter(|&i| i < pred.len() && pred[i]).count();
    let gold_pos: Vec<usize> = (0..gold.len()).filter(|&i| gold[i]).collect();
    let hit = gold_pos.iter().filter(|&&i| pred[i]).count();

    if !ctx.other_ie_spans.is_empty() {
        let mut all: Vec<TokenSpan> = ctx.other_ie_spans.clone();
        all.extend(ctx.pie_span.filter(|_| !gold_pos.is_empty()));
        let touched = all.iter().any(|s| tagged(s) > 0);
        let complete = all.iter().all(|s| tagged(s) == s.width());
        if touched && !complete {
            return Ok(ErrorCategory::MultiIePartial);
        }
    }
    if !gold_pos.is_empty() && hit > 0 && hit < gold_pos.len() {
        return Ok(ErrorCategory::PartialSpan);
    }
    let extra: Vec<usize> = (0..pred.len()).filter(|&i| pred[i] && !gold[i]).collect();
    if extra.iter().any(|&i| ctx.figurative_spans.iter().any(|s| s.contains(i))) {
        return Ok(ErrorCategory::OtherFigurative);
    }
    if gold_pos.is_empty() && ctx.pie_span.is_some_and(|s| tagged(&s) > 0) {
        return Ok(ErrorCategory::LiteralAsIdiomatic);
    }
    if !gold_pos.is_empty() && hit == 0 {
        return Ok(ErrorCategory::MissedIdiom);
    }
    Ok(ErrorCategory::SpuriousTokens)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorBreakdown {
    pub counts: BTreeMap<ErrorCategory, usize>,
    pub total: usize,
}

impl ErrorBreakdown {
    pub fn add(&mut self, c: ErrorCategory) {
        *self.counts.entry(c).or_default() += 1;
        self.total += 1;
    }

    pub fn fraction(&self, c: ErrorCategory) -> f64 {
        if self.total == 0 {
            return 0.0;
        }
        self.counts.get(&c).copied().unwrap_or(0) as f64 / self.total as f64
    }
}

/// Categorizes every imperfect sequence; perfect ones are skipped.
pub fn categorize_span_errors(
    pred: &[Vec<bool>],
    gold: &[Vec<bool>],
    contexts: &[SpanErrorContext],
) -> Result<(ErrorBreakdown, Vec<Option<ErrorCategory>>)> {
    if pred.len() != gold.len() || gold.len() != contexts.len() {
        return Err(Error::Validation("predictions, gold tags and contexts differ in length".into()));
    }
    let mut breakdown = ErrorBreakdown::default();
    let mut per = Vec::with_capacity(gold.len());
    for ((p, g), c) in pred.iter().zip(gold).zip(contexts) {
        if p == g {
            per.push(None);
            continue;
        }
        let cat = categorize_span_error(p, g, c)?;
        breakdown.add(cat);
        per.push(Some(cat));
    }
    Ok((breakdown, per))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tags(s: &str) -> Vec<bool> {
        s.chars().map(|c| c == 'I').collect()
    }

    fn idiomatic(span: (usize, usize)) -> SpanErrorContext {
        SpanErrorContext {
            sense: Some(Sense::Idiomatic),
            pie_span: Some(TokenSpan::new(span.0, span.1)),
            ..Default::default()
        }
    }

    #[test]
    fn partial_span() {
        let c = categorize_span_error(&tags("LLIILL"), &tags("LLIIIL"), &idiomatic((2, 5))).unwrap();
        assert_eq!(c, ErrorCategory::PartialSpan);
    }

    #[test]
    fn literal_tagged_idiomatic() {
        let ctx = SpanErrorContext {
            sense: Some(Sense::Literal),
            pie_span: Some(TokenSpan::new(1, 3)),
            ..Default::default()
        };
        let c = categorize_span_error(&tags("LIIL"), &tags("LLLL"), &ctx).unwrap();
        assert_eq!(c, ErrorCategory::LiteralAsIdiomatic);
    }

    #[test]
    fn missed_spurious_and_figurative() {
        let ctx = idiomatic((1, 3));
        assert_eq!(categorize_span_error(&tags("LLLL"), &tags("LIIL"), &ctx).unwrap(), ErrorCategory::MissedIdiom);
        assert_eq!(categorize_span_error(&tags("LIII"), &tags("LIIL"), &ctx).unwrap(), ErrorCategory::SpuriousTokens);
        let mut fig = ctx.clone();
        fig.figurative_spans.push(TokenSpan::new(3, 4));
        assert_eq!(categorize_span_error(&tags("LIII"), &tags("LIIL"), &fig).unwrap(), ErrorCategory::OtherFigurative);
    }

    #[test]
    fn multi_ie_partial() {
        let mut ctx = idiomatic((0, 2));
        ctx.other_ie_spans.push(TokenSpan::new(3, 5));
        let c = categorize_span_error(&tags("IILLL"), &tags("IILII"), &ctx).unwrap();
        assert_eq!(c, ErrorCategory::MultiIePartial);
    }

    #[test]
    fn perfect_sequence_is_rejected() {
        assert!(categorize_span_error(&tags("LIL"), &tags("LIL"), &idiomatic((1, 2))).is_err());
    }
}
