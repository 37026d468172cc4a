//! Corpus ingestion: the PIE sentence corpus, the idiom dictionary, meaning
//! groups, definition templates and char-to-token span alignment.

mod align;
mod groups;
pub mod magpie;
mod templates;
pub mod tokenizer;
mod types;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

pub use align::align_span;
pub use groups::{MeaningGroup, MeaningGroups};
pub use templates::{render_templates, TemplateSentence, TEMPLATES};
pub use tokenizer::{
    Encoding, SpecialIds, Tokenizer, Vocab, VocabOptions, WhitespaceTokenizer, WordPieceTokenizer,
};
pub use types::{CharSpan, IdiomEntry, PieInstance, Sense, Split, TokenSpan};

use crate::error::{Error, Result};

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push((i + 1, line));
    }
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dictionary {
    entries: Vec<IdiomEntry>,
    index: HashMap<String, usize>,
}

impl Dictionary {
    pub fn new(entries: Vec<IdiomEntry>) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, e) in entries.iter().enumerate() {
            if e.lemma.trim().is_empty() {
                return Err(Error::InvalidRecord {
                    id: e.idiom_id.clone(),
                    message: "empty lemma".into(),
                });
            }
            if index.insert(e.idiom_id.clone(), i).is_some() {
                return Err(Error::InvalidRecord {
                    id: e.idiom_id.clone(),
                    message: "duplicate idiom_id".into(),
                });
            }
        }
        Ok(Self { entries, index })
    }

    /// Reads the dictionary JSONL (`idiom_id`, `lemma`, `definition`, `monosemous`).
    pub fn load(path: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for (line_no, line) in read_lines(path)? {
            let e: IdiomEntry = serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                line: line_no,
                message: e.to_string(),
            })?;
            entries.push(e);
        }
        Self::new(entries)
    }

    pub fn get(&self, idiom_id: &str) -> Option<&IdiomEntry> {
        self.index.get(idiom_id).map(|&i| &self.entries[i])
    }

    pub fn entries(&self) -> &[IdiomEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Copies group membership onto the entries.
    pub fn assign_groups(&mut self, groups: &MeaningGroups) {
        for e in &mut self.entries {
            e.group_id = groups.group_id_of(&e.idiom_id).map(str::to_string);
        }
    }

    pub fn write_jsonl(&self, out: &mut impl Write) -> std::io::Result<()> {
        for e in &self.entries {
            serde_json::to_writer(&mut *out, e)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Loaded PIE sentences plus lookup indexes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    instances: Vec<PieInstance>,
    /// Instance ids whose idiom is missing from the dictionary.
    unknown_idiom: Vec<String>,
}

impl Corpus {
    pub fn new(instances: Vec<PieInstance>, dictionary: &Dictionary) -> Result<Self> {
        let mut ids = HashSet::new();
        let mut unknown_idiom = Vec::new();
        for inst in &instances {
            inst.validate().map_err(|message| Error::InvalidRecord {
                id: inst.instance_id.clone(),
                message,
            })?;
            if !ids.insert(inst.instance_id.as_str()) {
                return Err(Error::InvalidRecord {
                    id: inst.instance_id.clone(),
                    message: "duplicate instance_id".into(),
                });
            }
            if dictionary.get(&inst.idiom_id).is_none() {
                unknown_idiom.push(inst.instance_id.clone());
            }
        }
        Ok(Self {
            instances,
            unknown_idiom,
        })
    }

    pub fn instances(&self) -> &[PieInstance] {
        &self.instances
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn unknown_idiom_instances(&self) -> &[String] {
        &self.unknown_idiom
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &PieInstance> {
        self.instances.iter().filter(move |i| i.split == split)
    }

    /// Instances grouped by idiom, in corpus order within each idiom.
    pub fn by_idiom(&self) -> BTreeMap<&str, Vec<&PieInstance>> {
        let mut map: BTreeMap<&str, Vec<&PieInstance>> = BTreeMap::new();
        for inst in &self.instances {
            map.entry(inst.idiom_id.as_str()).or_default().push(inst);
        }
        map
    }

    pub fn idiom_count(&self) -> usize {
        self.instances
            .iter()
            .map(|i| i.idiom_id.as_str())
            .collect::<HashSet<_>>()
            .len()
    }

    /// Fraction of idiomatic instances (0 for an empty corpus).
    pub fn idiomatic_fraction(&self) -> f64 {
        if self.instances.is_empty() {
            return 0.0;
        }
        let n = self
            .instances
            .iter()
            .filter(|i| i.sense == Sense::Idiomatic)
            .count();
        n as f64 / self.instances.len() as f64
    }

    /// A new corpus holding the instances that satisfy `keep`.
    pub fn subset(&self, mut keep: impl FnMut(&PieInstance) -> bool) -> Corpus {
        let instances: Vec<PieInstance> =
            self.instances.iter().filter(|i| keep(i)).cloned().collect();
        let ids: HashSet<&str> = instances.iter().map(|i| i.instance_id.as_str()).collect();
        let unknown_idiom = self
            .unknown_idiom
            .iter()
            .filter(|id| ids.contains(id.as_str()))
            .cloned()
            .collect();
        Corpus {
            instances,
            unknown_idiom,
        }
    }

    pub fn write_jsonl(&self, out: &mut impl Write) -> std::io::Result<()> {
        for inst in &self.instances {
            serde_json::to_writer(&mut *out, inst)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("write to vec");
        String::from_utf8(buf).expect("utf-8 json")
    }
}

/// Parses corpus JSONL text. `source` names the input in error messages.
pub fn parse_corpus(text: &str, source: &str, dictionary: &Dictionary) -> Result<Corpus> {
    let mut instances = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let inst: PieInstance = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: source.to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        instances.push(inst);
    }
    let corpus = Corpus::new(instances, dictionary)?;
    if !corpus.unknown_idiom.is_empty() {
        log::warn!(
            "{source}: {} instances reference idioms missing from the dictionary",
            corpus.unknown_idiom.len()
        );
    }
    Ok(corpus)
}

/// Reads the corpus JSONL file.
pub fn load_corpus(path: &Path, dictionary: &Dictionary) -> Result<Corpus> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&text, &path.display().to_string(), dictionary)
}

/// Which training view to cut from the corpus.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum View {
    /// Monosemous idioms, confidence 1.0, idiomatic sense only.
    Embedding,
    /// Monosemous idioms, confidence 1.0, both senses.
    Probe,
}

/// Applies the monosemy, perfect-confidence and (for the embedding view)
/// idiomatic-sense filters. Idioms missing from the dictionary are dropped.
pub fn filter_view(corpus: &Corpus, dictionary: &Dictionary, view: View) -> Corpus {
    let out = corpus.subset(|inst| {
        let monosemous = dictionary
            .get(&inst.idiom_id)
            .is_some_and(|e| e.monosemous);
        let sense_ok = view == View::Probe || inst.sense == Sense::Idiomatic;
        monosemous && inst.confidence == 1.0 && sense_ok
    });
    if out.is_empty() {
        log::warn!("{view:?} view is empty after filtering");
    }
    out
}

pub fn filter_embedding_training_view(corpus: &Corpus, dictionary: &Dictionary) -> Corpus {
    filter_view(corpus, dictionary, View::Embedding)
}

/// A sentence tokenized once, with the expression located in token space.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenizedInstance {
    pub instance_id: String,
    pub idiom_id: String,
    pub sense: Sense,
    pub tokens: Vec<u32>,
    pub ie_span: TokenSpan,
}

pub fn tokenize_instance(inst: &PieInstance, tokenizer: &dyn Tokenizer) -> Result<TokenizedInstance> {
    let enc = tokenizer.encode(&inst.text);
    let ie_span = align_span(&enc, inst.pie_char_span).map_err(|e| Error::InvalidRecord {
        id: inst.instance_id.clone(),
        message: e.to_string(),
    })?;
    Ok(TokenizedInstance {
        instance_id: inst.instance_id.clone(),
        idiom_id: inst.idiom_id.clone(),
        sense: inst.sense,
        tokens: enc.ids,
        ie_span,
    })
}

pub fn tokenize_corpus(corpus: &Corpus, tokenizer: &dyn Tokenizer) -> Result<Vec<TokenizedInstance>> {
    corpus
        .instances()
        .iter()
        .map(|i| tokenize_instance(i, tokenizer))
        .collect()
}

/// Per-split summary used by the ingest report.
#[derive(Clone, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SplitStats {
    pub idioms: usize,
    pub instances: usize,
    pub idiomatic_fraction: f64,
}

pub fn split_stats(corpus: &Corpus, split: Split) -> SplitStats {
    let part = corpus.subset(|i| i.split == split);
    SplitStats {
        idioms: part.idiom_count(),
        instances: part.len(),
        idiomatic_fraction: part.idiomatic_fraction(),
    }
}
