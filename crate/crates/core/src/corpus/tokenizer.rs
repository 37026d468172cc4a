//! Tokenizers that report character offsets for every token.
//!
//! Two implementations ship: a whitespace tokenizer used in small tests and a
//! greedy longest-match word-piece tokenizer whose vocabulary is learned from
//! the corpus. Offsets are in characters (not bytes) so they line up with the
//! corpus spans.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use super::types::CharSpan;
use crate::error::{Error, Result};

pub const PAD_TOKEN: &str = "[PAD]";
pub const BOS_TOKEN: &str = "[BOS]";
pub const EOS_TOKEN: &str = "[EOS]";
pub const UNK_TOKEN: &str = "[UNK]";
pub const MASK_TOKEN: &str = "[MASK]";

const SPECIALS: [&str; 5] = [PAD_TOKEN, BOS_TOKEN, EOS_TOKEN, UNK_TOKEN, MASK_TOKEN];
const CONTINUATION: &str = "##";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SpecialIds {
    pub pad: u32,
    pub bos: u32,
    pub eos: u32,
    pub unk: u32,
    pub mask: u32,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Encoding {
    pub ids: Vec<u32>,
    pub offsets: Vec<CharSpan>,
}

impl Encoding {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

pub trait Tokenizer: Send + Sync {
    fn encode(&self, text: &str) -> Encoding;
    fn decode(&self, ids: &[u32]) -> String;
    fn vocab_size(&self) -> usize;
    fn special_ids(&self) -> SpecialIds;
    fn id_to_token(&self, id: u32) -> Option<&str>;
    fn name(&self) -> &str;
}

#[derive(Clone, Debug)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    fn with_specials() -> Self {
        let mut v = Vocab {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for s in SPECIALS {
            v.push(s);
        }
        v
    }

    fn push(&mut self, token: &str) -> u32 {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        let id = self.tokens.len() as u32;
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), id);
        id
    }

    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut v = Vocab::with_specials();
        for t in tokens {
            v.push(t.as_ref());
        }
        v
    }

    pub fn get(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    fn special_ids(&self) -> SpecialIds {
        SpecialIds {
            pad: self.index[PAD_TOKEN],
            bos: self.index[BOS_TOKEN],
            eos: self.index[EOS_TOKEN],
            unk: self.index[UNK_TOKEN],
            mask: self.index[MASK_TOKEN],
        }
    }
}

/// A pre-token: a whitespace-delimited word, a single punctuation mark, or
/// the literal mask sentinel.
#[derive(Debug)]
struct Word {
    text: Vec<char>,
    span: CharSpan,
}

fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation() || (!c.is_alphanumeric() && !c.is_whitespace())
}

fn pre_tokenize(text: &str, split_punct: bool) -> Vec<Word> {
    let chars: Vec<char> = text.chars().collect();
    let mask: Vec<char> = MASK_TOKEN.chars().collect();
    let mut words = Vec::new();
    let mut cur: Vec<char> = Vec::new();
    let mut cur_start = 0;
    let flush = |cur: &mut Vec<char>, start: usize, words: &mut Vec<Word>| {
        if !cur.is_empty() {
            let end = start + cur.len();
            words.push(Word {
                text: std::mem::take(cur),
                span: CharSpan::new(start, end),
            });
        }
    };
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if chars[i..].starts_with(&mask) {
            flush(&mut cur, cur_start, &mut words);
            words.push(Word {
                text: mask.clone(),
                span: CharSpan::new(i, i + mask.len()),
            });
            i += mask.len();
            continue;
        }
        if c.is_whitespace() {
            flush(&mut cur, cur_start, &mut words);
        } else if split_punct && is_punct(c) {
            flush(&mut cur, cur_start, &mut words);
            words.push(Word {
                text: vec![c],
                span: CharSpan::new(i, i + 1),
            });
        } else {
            if cur.is_empty() {
                cur_start = i;
            }
            cur.push(c);
        }
        i += 1;
    }
    flush(&mut cur, cur_start, &mut words);
    words
}

fn normalize_char(c: char, lowercase: bool) -> char {
    if lowercase {
        c.to_lowercase().next().unwrap_or(c)
    } else {
        c
    }
}

/// Splits on whitespace only; every word is looked up verbatim.
#[derive(Clone, Debug)]
pub struct WhitespaceTokenizer {
    vocab: Vocab,
}

impl WhitespaceTokenizer {
    pub fn new(vocab: Vocab) -> Self {
        Self { vocab }
    }

    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut words: Vec<String> = texts
            .into_iter()
            .flat_map(|t| t.split_whitespace().map(str::to_string).collect::<Vec<_>>())
            .collect();
        words.sort();
        words.dedup();
        Self::new(Vocab::from_tokens(words))
    }
}

impl Tokenizer for WhitespaceTokenizer {
    fn encode(&self, text: &str) -> Encoding {
        let unk = self.vocab.special_ids().unk;
        let mut enc = Encoding::default();
        for w in pre_tokenize(text, false) {
            let s: String = w.text.iter().collect();
            enc.ids.push(self.vocab.get(&s).unwrap_or(unk));
            enc.offsets.push(w.span);
        }
        enc
    }

    fn decode(&self, ids: &[u32]) -> String {
        decode_pieces(&self.vocab, ids)
    }

    fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    fn special_ids(&self) -> SpecialIds {
        self.vocab.special_ids()
    }

    fn id_to_token(&self, id: u32) -> Option<&str> {
        self.vocab.tokens.get(id as usize).map(String::as_str)
    }

    fn name(&self) -> &str {
        "whitespace"
    }
}

#[derive(Clone, Debug)]
pub struct VocabOptions {
    pub max_size: usize,
    pub min_count: usize,
    pub lowercase: bool,
}

impl Default for VocabOptions {
    fn default() -> Self {
        Self {
            max_size: 1000,
            min_count: 2,
            lowercase: true,
        }
    }
}

/// Greedy longest-match-first word-piece tokenizer.
///
/// Words missing from the vocabulary are spelled with the longest available
/// prefix followed by `##`-prefixed continuation pieces. A word that cannot be
/// spelled at all becomes `[UNK]`.
#[derive(Clone, Debug)]
pub struct WordPieceTokenizer {
    vocab: Vocab,
    lowercase: bool,
}

impl WordPieceTokenizer {
    pub fn new(vocab: Vocab, lowercase: bool) -> Self {
        Self { vocab, lowercase }
    }

    /// Learns a vocabulary: specials, every character seen (word-initial and
    /// continuation forms), then whole words by descending frequency.
    pub fn train<'a>(texts: impl IntoIterator<Item = &'a str>, opts: &VocabOptions) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut initial = std::collections::BTreeSet::new();
        let mut inner = std::collections::BTreeSet::new();
        for text in texts {
            for w in pre_tokenize(text, true) {
                let norm: Vec<char> = w
                    .text
                    .iter()
                    .map(|&c| normalize_char(c, opts.lowercase))
                    .collect();
                let s: String = norm.iter().collect();
                if s == MASK_TOKEN {
                    continue;
                }
                initial.insert(norm[0].to_string());
                for c in &norm[1..] {
                    inner.insert(format!("{CONTINUATION}{c}"));
                }
                *counts.entry(s).or_default() += 1;
            }
        }
        let mut vocab = Vocab::with_specials();
        for t in initial.iter().chain(inner.iter()) {
            vocab.push(t);
        }
        let mut words: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(w, c)| *c >= opts.min_count && w.chars().count() > 1)
            .collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        for (w, _) in words {
            if vocab.len() >= opts.max_size {
                break;
            }
            vocab.push(&w);
        }
        Self::new(vocab, opts.lowercase)
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        writeln!(out, "# wordpiece lowercase={}", self.lowercase as u8).unwrap();
        for t in &self.vocab.tokens {
            writeln!(out, "{t}").unwrap();
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        let lowercase = match header.strip_prefix("# wordpiece lowercase=") {
            Some("1") => true,
            Some("0") => false,
            _ => {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    line: 1,
                    message: "missing wordpiece vocab header".into(),
                })
            }
        };
        let tokens: Vec<&str> = lines.collect();
        for (i, s) in SPECIALS.iter().enumerate() {
            if tokens.get(i) != Some(s) {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    line: i + 2,
                    message: format!("expected special token {s}"),
                });
            }
        }
        Ok(Self::new(Vocab::from_tokens(&tokens[SPECIALS.len()..]), lowercase))
    }

    fn encode_word(&self, word: &Word, enc: &mut Encoding) {
        let special = self.vocab.special_ids();
        let raw: String = word.text.iter().collect();
        if raw == MASK_TOKEN {
            enc.ids.push(special.mask);
            enc.offsets.push(word.span);
            return;
        }
        let chars: Vec<char> = word
            .text
            .iter()
            .map(|&c| normalize_char(c, self.lowercase))
            .collect();
        let mut pieces = Vec::new();
        let mut start = 0;
        while start < chars.len() {
            let mut found = None;
            let mut end = chars.len();
            while end > start {
                let body: String = chars[start..end].iter().collect();
                let piece = if start == 0 {
                    body
                } else {
                    format!("{CONTINUATION}{body}")
                };
                if let Some(id) = self.vocab.get(&piece) {
                    found = Some((id, end));
                    break;
                }
                end -= 1;
            }
            match found {
                Some((id, end)) => {
                    let s = word.span.start;
                    pieces.push((id, CharSpan::new(s + start, s + end)));
                    start = end;
                }
                None => {
                    enc.ids.push(special.unk);
                    enc.offsets.push(word.span);
                    return;
                }
            }
        }
        for (id, span) in pieces {
            enc.ids.push(id);
            enc.offsets.push(span);
        }
    }
}

impl Tokenizer for WordPieceTokenizer {
    fn encode(&self, text: &str) -> Encoding {
        let mut enc = Encoding::default();
        for w in pre_tokenize(text, true) {
            self.encode_word(&w, &mut enc);
        }
        enc
    }

    fn decode(&self, ids: &[u32]) -> String {
        decode_pieces(&self.vocab, ids)
    }

    fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    fn special_ids(&self) -> SpecialIds {
        self.vocab.special_ids()
    }

    fn id_to_token(&self, id: u32) -> Option<&str> {
        self.vocab.tokens.get(id as usize).map(String::as_str)
    }

    fn name(&self) -> &str {
        "wordpiece"
    }
}

fn decode_pieces(vocab: &Vocab, ids: &[u32]) -> String {
    let special = vocab.special_ids();
    let mut out = String::new();
    for &id in ids {
        if id == special.pad || id == special.bos || id == special.eos {
            continue;
        }
        let tok = vocab
            .tokens
            .get(id as usize)
            .map(String::as_str)
            .unwrap_or(UNK_TOKEN);
        match tok.strip_prefix(CONTINUATION) {
            Some(rest) if !rest.is_empty() => out.push_str(rest),
            _ => {
                if !out.is_empty() {
                    out.push(' ');
                }
                out.push_str(tok);
            }
        }
    }
    out
}
