use serde::{Deserialize, Serialize};

use super::tokenizer::MASK_TOKEN;
use super::types::{CharSpan, IdiomEntry};
use crate::error::{Error, Result};

/// The four definition templates. `{IE}` is the idiom slot and `[MASK]`
/// stands for the definition.
pub const TEMPLATES: [&str; 4] = [
    "The idiom {IE} means [MASK].",
    "When people say {IE} , they mean [MASK].",
    "{IE} is used to mean [MASK].",
    "If someone says {IE} , they mean that [MASK].",
];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateSentence {
    pub idiom_id: String,
    /// 1-based.
    pub template_index: usize,
    pub full_text: String,
    pub masked_text: String,
    /// Idiom location in `masked_text`.
    pub ie_span_masked: CharSpan,
    /// Idiom location in `full_text`.
    pub ie_span_full: CharSpan,
    /// Definition location in `full_text`.
    pub definition_span: CharSpan,
}

/// Renders the four template sentences for one idiom.
pub fn render_templates(entry: &IdiomEntry) -> Result<Vec<TemplateSentence>> {
    if !entry.has_definition() {
        return Err(Error::MissingDefinition(entry.idiom_id.clone()));
    }
    let definition = entry.definition.trim();
    let ends_with_stop = definition.ends_with(['.', '!', '?']);
    TEMPLATES
        .iter()
        .enumerate()
        .map(|(i, tpl)| {
            let masked_text = tpl.replace("{IE}", &entry.lemma);
            let ie_start = char_index(&masked_text, &entry.lemma);
            let ie_len = entry.lemma.chars().count();
            let mask_byte = masked_text.find(MASK_TOKEN).expect("template has a mask");
            let mut tail = &masked_text[mask_byte + MASK_TOKEN.len()..];
            if ends_with_stop {
                tail = tail.strip_prefix('.').unwrap_or(tail);
            }
            let head = &masked_text[..mask_byte];
            let full_text = format!("{head}{definition}{tail}");
            let def_start = head.chars().count();
            Ok(TemplateSentence {
                idiom_id: entry.idiom_id.clone(),
                template_index: i + 1,
                full_text,
                masked_text,
                ie_span_masked: CharSpan::new(ie_start, ie_start + ie_len),
                ie_span_full: CharSpan::new(ie_start, ie_start + ie_len),
                definition_span: CharSpan::new(def_start, def_start + definition.chars().count()),
            })
        })
        .collect()
}

fn char_index(haystack: &str, needle: &str) -> usize {
    let byte = haystack.find(needle).expect("lemma substituted");
    haystack[..byte].chars().count()
}
