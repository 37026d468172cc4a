//! Conversion from the upstream MAGPIE release format to corpus JSONL.
//!
//! MAGPIE records carry a five-sentence `context` whose middle sentence holds
//! the PIE, character `offsets` into that sentence (one pair per PIE token),
//! a one-letter `label` and a `split` of training/development/test. Only
//! labels `i` (idiomatic) and `l` (literal) are kept; development records are
//! dropped since the corpus schema has no dev split.

use serde::Deserialize;

use super::types::{CharSpan, PieInstance, Sense, Split};
use crate::error::{Error, Result};

#[derive(Debug, Deserialize)]
struct MagpieRecord {
    id: serde_json::Value,
    idiom: String,
    label: String,
    confidence: f64,
    context: Vec<String>,
    offsets: Vec<[usize; 2]>,
    split: String,
    #[serde(default)]
    genre: Option<String>,
}

#[derive(Debug, Default, Clone, PartialEq, Eq, serde::Serialize)]
pub struct ShimStats {
    pub converted: usize,
    pub skipped_label: usize,
    pub skipped_split: usize,
}

/// Stable idiom key from a lemma: lowercase, alphanumerics joined by `_`.
pub fn idiom_key(lemma: &str) -> String {
    let mut out = String::new();
    for word in lemma
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
    {
        if !out.is_empty() {
            out.push('_');
        }
        out.extend(word.chars().flat_map(char::to_lowercase));
    }
    out
}

pub fn convert(text: &str, source: &str) -> Result<(Vec<PieInstance>, ShimStats)> {
    let mut out = Vec::new();
    let mut stats = ShimStats::default();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: source.to_string(),
            line: i + 1,
            message,
        };
        let r: MagpieRecord = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        let sense = match r.label.as_str() {
            "i" => Sense::Idiomatic,
            "l" => Sense::Literal,
            _ => {
                stats.skipped_label += 1;
                continue;
            }
        };
        let split = match r.split.as_str() {
            "training" | "train" => Split::Train,
            "test" => Split::Test,
            _ => {
                stats.skipped_split += 1;
                continue;
            }
        };
        if r.context.is_empty() || r.offsets.is_empty() {
            return Err(parse_err("empty context or offsets".into()));
        }
        let sentence = r.context[r.context.len() / 2].clone();
        let start = r.offsets.iter().map(|o| o[0]).min().unwrap();
        let end = r.offsets.iter().map(|o| o[1]).max().unwrap();
        let id = match &r.id {
            serde_json::Value::String(s) => s.clone(),
            other => other.to_string(),
        };
        out.push(PieInstance {
            instance_id: format!("magpie-{id}"),
            idiom_id: idiom_key(&r.idiom),
            text: sentence,
            pie_char_span: CharSpan::new(start, end),
            sense,
            confidence: r.confidence,
            split,
            genre: r.genre,
            figurative_spans: vec![],
        });
        stats.converted += 1;
    }
    Ok((out, stats))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn converts_middle_sentence_and_merges_offsets() {
        let rec = r#"{"id":7,"idiom":"hit the sack","label":"i","confidence":1.0,"context":["a","b","I hit the sack early.","d","e"],"offsets":[[2,5],[6,9],[10,14]],"split":"training","genre":"W fict prose"}
{"id":8,"idiom":"hit the sack","label":"f","confidence":1.0,"context":["x"],"offsets":[[0,1]],"split":"test"}
{"id":9,"idiom":"hit the sack","label":"l","confidence":0.6,"context":["x"],"offsets":[[0,1]],"split":"development"}"#;
        let (v, stats) = convert(rec, "mem").unwrap();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].idiom_id, "hit_the_sack");
        assert_eq!(v[0].pie_text(), "hit the sack");
        assert_eq!(v[0].split, Split::Train);
        assert_eq!(stats, ShimStats { converted: 1, skipped_label: 1, skipped_split: 1 });
    }

    #[test]
    fn keys_are_normalized() {
        assert_eq!(idiom_key("Do someone's head in"), "do_someone_s_head_in");
    }
}
