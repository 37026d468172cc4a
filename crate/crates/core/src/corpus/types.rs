use serde::{Deserialize, Serialize};

/// Half-open character offsets `[start, end)` into a sentence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CharSpan {
    pub start: usize,
    pub end: usize,
}

impl CharSpan {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

/// Half-open token index span `[start_token, end_token)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TokenSpan {
    pub start_token: usize,
    pub end_token: usize,
}

impl TokenSpan {
    pub fn new(start_token: usize, end_token: usize) -> Self {
        debug_assert!(start_token < end_token, "empty token span");
        Self {
            start_token,
            end_token,
        }
    }

    pub fn width(&self) -> usize {
        self.end_token - self.start_token
    }

    pub fn contains(&self, index: usize) -> bool {
        (self.start_token..self.end_token).contains(&index)
    }

    pub fn overlaps(&self, other: &TokenSpan) -> bool {
        self.start_token < other.end_token && other.start_token < self.end_token
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.start_token..self.end_token
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sense {
    Idiomatic,
    Literal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

/// An idiom lemma and its dictionary gloss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdiomEntry {
    pub idiom_id: String,
    pub lemma: String,
    /// First listed definition; empty when the dictionary has none.
    #[serde(default, deserialize_with = "first_definition")]
    pub definition: String,
    #[serde(default = "default_true")]
    pub monosemous: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group_id: Option<String>,
}

impl IdiomEntry {
    pub fn has_definition(&self) -> bool {
        !self.definition.trim().is_empty()
    }
}

fn default_true() -> bool {
    true
}

fn first_definition<'de, D>(de: D) -> Result<String, D::Error>
where
    D: serde::Deserializer<'de>,
{
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum OneOrMany {
        One(String),
        Many(Vec<String>),
        Null(()),
    }
    Ok(match OneOrMany::deserialize(de)? {
        OneOrMany::One(s) => s,
        OneOrMany::Many(v) => v.into_iter().next().unwrap_or_default(),
        OneOrMany::Null(()) => String::new(),
    })
}

/// One sentence containing a potentially idiomatic expression.
///
/// Serialized with the flat corpus field names (`start`/`end` rather than a
/// nested span).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "PieRecord", into = "PieRecord")]
pub struct PieInstance {
    pub instance_id: String,
    pub idiom_id: String,
    pub text: String,
    pub pie_char_span: CharSpan,
    pub sense: Sense,
    pub confidence: f64,
    pub split: Split,
    /// Upstream genre label, carried through but not used.
    pub genre: Option<String>,
    /// Other figurative expressions annotated in the sentence (char spans).
    pub figurative_spans: Vec<CharSpan>,
}

impl PieInstance {
    /// The PIE surface string.
    pub fn pie_text(&self) -> String {
        self.text
            .chars()
            .skip(self.pie_char_span.start)
            .take(self.pie_char_span.len())
            .collect()
    }

    pub fn validate(&self) -> Result<(), String> {
        let n = self.text.chars().count();
        let CharSpan { start, end } = self.pie_char_span;
        if start >= end {
            return Err(format!("empty span [{start}, {end})"));
        }
        if end > n {
            return Err(format!("span end {end} exceeds text length {n}"));
        }
        if !(0.0..=1.0).contains(&self.confidence) || self.confidence.is_nan() {
            return Err(format!("confidence {} outside [0, 1]", self.confidence));
        }
        for span in &self.figurative_spans {
            if span.start >= span.end || span.end > n {
                return Err(format!(
                    "figurative span [{}, {}) outside text",
                    span.start, span.end
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct PieRecord {
    instance_id: String,
    idiom_id: String,
    text: String,
    start: usize,
    end: usize,
    sense: Sense,
    confidence: f64,
    split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    genre: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    figurative_spans: Vec<[usize; 2]>,
}

impl From<PieRecord> for PieInstance {
    fn from(r: PieRecord) -> Self {
        PieInstance {
            instance_id: r.instance_id,
            idiom_id: r.idiom_id,
            text: r.text,
            pie_char_span: CharSpan::new(r.start, r.end),
            sense: r.sense,
            confidence: r.confidence,
            split: r.split,
            genre: r.genre,
            figurative_spans: r
                .figurative_spans
                .into_iter()
                .map(|[s, e]| CharSpan::new(s, e))
                .collect(),
        }
    }
}

impl From<PieInstance> for PieRecord {
    fn from(p: PieInstance) -> Self {
        PieRecord {
            instance_id: p.instance_id,
            idiom_id: p.idiom_id,
            text: p.text,
            start: p.pie_char_span.start,
            end: p.pie_char_span.end,
            sense: p.sense,
            confidence: p.confidence,
            split: p.split,
            genre: p.genre,
            figurative_spans: p
                .figurative_spans
                .into_iter()
                .map(|s| [s.start, s.end])
                .collect(),
        }
    }
}
