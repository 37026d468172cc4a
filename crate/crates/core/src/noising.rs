//! Sentence corruption for adapter training.
//!
//! Three transforms produce (source, target) pairs from an idiomatic sentence:
//! idiom-aware infilling (the whole expression collapses to one mask), copy
//! (identity) and span infilling (a Poisson-length run of context tokens,
//! never touching the expression, collapses to one mask). Template sentences
//! supply a fourth kind where the mask covers the idiom's definition.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::corpus::{align_span, TemplateSentence, TokenSpan, TokenizedInstance, Tokenizer};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    Iti,
    Copy,
    SpanInfill,
    TemplateInfill,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompanionMode {
    Copy,
    SpanInfilling,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoisingPolicy {
    pub p_iti: f64,
    pub span_lambda: f64,
    pub companion_mode: CompanionMode,
    pub template_mix: f64,
    pub seed: u64,
}

impl Default for NoisingPolicy {
    fn default() -> Self {
        Self {
            p_iti: 0.5,
            span_lambda: 3.0,
            companion_mode: CompanionMode::SpanInfilling,
            template_mix: 0.2,
            seed: 0,
        }
    }
}

impl NoisingPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_iti) {
            return Err(Error::Config(format!("p_iti {} outside [0, 1]", self.p_iti)));
        }
        if !(self.span_lambda > 0.0) {
            return Err(Error::Config(format!("span_lambda {} must be > 0", self.span_lambda)));
        }
        if !(0.0..=1.0).contains(&self.template_mix) {
            return Err(Error::Config(format!(
                "template_mix {} outside [0, 1]",
                self.template_mix
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionExample {
    /// Sentence instance id, or `<idiom_id>#t<index>` for template examples.
    pub example_id: String,
    pub idiom_id: String,
    pub source_tokens: Vec<u32>,
    pub target_tokens: Vec<u32>,
    pub transform: Transform,
    pub ie_span_target: TokenSpan,
    pub ie_span_source: Option<TokenSpan>,
    pub masked_span_target: Option<TokenSpan>,
    /// Span infilling fell back to copy because no context token exists.
    #[serde(default)]
    pub fallback: bool,
}

impl CorruptionExample {
    /// Whether the expression is visible to the encoder.
    pub fn ie_in_source(&self) -> bool {
        self.ie_span_source.is_some()
    }

    /// Checks the structural invariants of a corruption pair.
    pub fn check_invariants(&self, mask: u32) -> std::result::Result<(), String> {
        let count = |v: &[u32]| v.iter().filter(|&&t| t == mask).count();
        let n_mask = count(&self.source_tokens).saturating_sub(count(&self.target_tokens));
        if n_mask > 1 {
            return Err(format!("{}: {n_mask} mask sentinels in source", self.example_id));
        }
        let ie = self.ie_span_target;
        if ie.end_token > self.target_tokens.len() || ie.start_token >= ie.end_token {
            return Err(format!("{}: ie span outside target", self.example_id));
        }
        let ie_tokens = &self.target_tokens[ie.range()];
        match self.transform {
            Transform::Iti => {
                if self.ie_span_source.is_some() || n_mask != 1 {
                    return Err(format!("{}: iti must hide the ie behind one mask", self.example_id));
                }
                let mut expect = self.target_tokens[..ie.start_token].to_vec();
                expect.push(mask);
                expect.extend_from_slice(&self.target_tokens[ie.end_token..]);
                if expect != self.source_tokens {
                    return Err(format!("{}: iti source is not a splice", self.example_id));
                }
            }
            Transform::Copy => {
                if self.source_tokens != self.target_tokens {
                    return Err(format!("{}: copy changed the sentence", self.example_id));
                }
            }
            Transform::SpanInfill => {
                let masked = self
                    .masked_span_target
                    .ok_or_else(|| format!("{}: span infill without masked span", self.example_id))?;
                if masked.overlaps(&ie) {
                    return Err(format!("{}: masked span touches the ie", self.example_id));
                }
                let src_ie = self
                    .ie_span_source
                    .ok_or_else(|| format!("{}: ie missing from source", self.example_id))?;
                if &self.source_tokens[src_ie.range()] != ie_tokens || n_mask != 1 {
                    return Err(format!("{}: ie not verbatim in source", self.example_id));
                }
            }
            Transform::TemplateInfill => {
                let src_ie = self
                    .ie_span_source
                    .ok_or_else(|| format!("{}: ie missing from source", self.example_id))?;
                if &self.source_tokens[src_ie.range()] != ie_tokens || n_mask != 1 {
                    return Err(format!("{}: template source malformed", self.example_id));
                }
            }
        }
        Ok(())
    }
}

fn splice_mask(tokens: &[u32], span: TokenSpan, mask: u32) -> Vec<u32> {
    let mut out = Vec::with_capacity(tokens.len() - span.width() + 1);
    out.extend_from_slice(&tokens[..span.start_token]);
    out.push(mask);
    out.extend_from_slice(&tokens[span.end_token..]);
    out
}

/// Replaces the whole expression with a single mask sentinel.
pub fn iti_transform(inst: &TokenizedInstance, mask: u32) -> CorruptionExample {
    CorruptionExample {
        example_id: inst.instance_id.clone(),
        idiom_id: inst.idiom_id.clone(),
        source_tokens: splice_mask(&inst.tokens, inst.ie_span, mask),
        target_tokens: inst.tokens.clone(),
        transform: Transform::Iti,
        ie_span_target: inst.ie_span,
        ie_span_source: None,
        masked_span_target: None,
        fallback: false,
    }
}

pub fn copy_transform(inst: &TokenizedInstance) -> CorruptionExample {
    CorruptionExample {
        example_id: inst.instance_id.clone(),
        idiom_id: inst.idiom_id.clone(),
        source_tokens: inst.tokens.clone(),
        target_tokens: inst.tokens.clone(),
        transform: Transform::Copy,
        ie_span_target: inst.ie_span,
        ie_span_source: Some(inst.ie_span),
        masked_span_target: None,
        fallback: false,
    }
}

/// Masks a chosen context span. `span` must not overlap the expression.
pub fn mask_context_span(inst: &TokenizedInstance, span: TokenSpan, mask: u32) -> CorruptionExample {
    assert!(!span.overlaps(&inst.ie_span), "masked span overlaps the expression");
    let ie = inst.ie_span;
    let ie_source = if span.end_token <= ie.start_token {
        let shift = span.width() - 1;
        TokenSpan::new(ie.start_token - shift, ie.end_token - shift)
    } else {
        ie
    };
    CorruptionExample {
        example_id: inst.instance_id.clone(),
        idiom_id: inst.idiom_id.clone(),
        source_tokens: splice_mask(&inst.tokens, span, mask),
        target_tokens: inst.tokens.clone(),
        transform: Transform::SpanInfill,
        ie_span_target: ie,
        ie_span_source: Some(ie_source),
        masked_span_target: Some(span),
        fallback: false,
    }
}

/// Draws one span length from Poisson(λ).
pub fn sample_span_length(lambda: f64, rng: &mut impl Rng) -> usize {
    let dist = Poisson::new(lambda).expect("lambda > 0");
    dist.sample(rng) as usize
}

/// Masks a Poisson-length run of context tokens.
///
/// A zero-length draw yields the copy transform. Draws longer than the
/// longest context run are truncated to it; the start is uniform over all
/// feasible placements on either side of the expression.
pub fn span_infilling_transform(
    inst: &TokenizedInstance,
    policy: &NoisingPolicy,
    mask: u32,
    rng: &mut impl Rng,
) -> CorruptionExample {
    let n = inst.tokens.len();
    let ie = inst.ie_span;
    let runs = [(0, ie.start_token), (ie.end_token, n)];
    let longest = runs.iter().map(|(s, e)| e - s).max().unwrap_or(0);
    if longest == 0 {
        let mut ex = copy_transform(inst);
        ex.fallback = true;
        return ex;
    }
    let drawn = sample_span_length(policy.span_lambda, rng);
    if drawn == 0 {
        return copy_transform(inst);
    }
    let len = drawn.min(longest);
    let placements: Vec<usize> = runs
        .iter()
        .filter(|(s, e)| e - s >= len)
        .flat_map(|&(s, e)| s..=(e - len))
        .collect();
    let start = placements[rng.random_range(0..placements.len())];
    mask_context_span(inst, TokenSpan::new(start, start + len), mask)
}

/// A template sentence pair located in token space.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenizedTemplate {
    pub idiom_id: String,
    pub template_index: usize,
    pub masked_tokens: Vec<u32>,
    pub full_tokens: Vec<u32>,
    pub ie_span_masked: TokenSpan,
    pub ie_span_full: TokenSpan,
    pub definition_span: TokenSpan,
}

pub fn tokenize_template(t: &TemplateSentence, tokenizer: &dyn Tokenizer) -> Result<TokenizedTemplate> {
    let masked = tokenizer.encode(&t.masked_text);
    let full = tokenizer.encode(&t.full_text);
    let definition_span = align_span(&full, t.definition_span)
        .map_err(|_| Error::MissingDefinition(t.idiom_id.clone()))?;
    Ok(TokenizedTemplate {
        idiom_id: t.idiom_id.clone(),
        template_index: t.template_index,
        ie_span_masked: align_span(&masked, t.ie_span_masked)?,
        ie_span_full: align_span(&full, t.ie_span_full)?,
        definition_span,
        masked_tokens: masked.ids,
        full_tokens: full.ids,
    })
}

/// Source is the masked template, target is the template with the
/// definition filled in.
pub fn template_infilling_transform(t: &TokenizedTemplate) -> CorruptionExample {
    CorruptionExample {
        example_id: format!("{}#t{}", t.idiom_id, t.template_index),
        idiom_id: t.idiom_id.clone(),
        source_tokens: t.masked_tokens.clone(),
        target_tokens: t.full_tokens.clone(),
        transform: Transform::TemplateInfill,
        ie_span_target: t.ie_span_full,
        ie_span_source: Some(t.ie_span_masked),
        masked_span_target: Some(t.definition_span),
        fallback: false,
    }
}

/// SplitMix64 finalizer; used to derive independent stream seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Builds one epoch of training pairs.
///
/// Each sentence independently receives idiom-aware infilling with
/// probability `p_iti`, otherwise the companion transform. Template examples
/// are then added so that they make up `template_mix` of the companion pool.
/// Every sentence draws from its own stream derived from (seed, epoch, index),
/// so the output depends only on those and the inputs.
pub fn schedule_epoch(
    instances: &[TokenizedInstance],
    templates: &[TokenizedTemplate],
    policy: &NoisingPolicy,
    mask: u32,
    epoch: u64,
) -> Vec<CorruptionExample> {
    let epoch_seed = mix_seed(policy.seed, epoch);
    let mut out = Vec::with_capacity(instances.len());
    let mut companions = 0usize;
    for (i, inst) in instances.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(epoch_seed, i as u64));
        if rng.random_bool(policy.p_iti) {
            out.push(iti_transform(inst, mask));
        } else {
            companions += 1;
            out.push(match policy.companion_mode {
                CompanionMode::Copy => copy_transform(inst),
                CompanionMode::SpanInfilling => span_infilling_transform(inst, policy, mask, &mut rng),
            });
        }
    }
    if !templates.is_empty() && policy.template_mix > 0.0 && companions > 0 {
        let wanted = if policy.template_mix >= 1.0 {
            templates.len()
        } else {
            let t = policy.template_mix * companions as f64 / (1.0 - policy.template_mix);
            (t.round() as usize).min(templates.len())
        };
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(epoch_seed, u64::MAX));
        let mut order: Vec<usize> = (0..templates.len()).collect();
        order.shuffle(&mut rng);
        let mut picked = order[..wanted].to_vec();
        picked.sort_unstable();
        out.extend(picked.into_iter().map(|i| template_infilling_transform(&templates[i])));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{IdiomEntry, render_templates, Vocab, WhitespaceTokenizer};

    const MASK: u32 = 4;

    /// Toy vocabulary: tokens are their own ids above the specials.
    fn sent(words: &[&str], ie: (usize, usize)) -> (TokenizedInstance, Vec<String>) {
        let vocab: Vec<String> = words.iter().map(|w| w.to_string()).collect();
        let ids = words
            .iter()
            .map(|w| 5 + vocab.iter().position(|v| v == w).unwrap() as u32)
            .collect();
        (
            TokenizedInstance {
                instance_id: "s".into(),
                idiom_id: "hit_the_sack".into(),
                sense: crate::corpus::Sense::Idiomatic,
                tokens: ids,
                ie_span: TokenSpan::new(ie.0, ie.1),
            },
            vocab,
        )
    }

    fn words(ids: &[u32], vocab: &[String]) -> Vec<String> {
        ids.iter()
            .map(|&i| if i == MASK { "MASK".to_string() } else { vocab[(i - 5) as usize].clone() })
            .collect()
    }

    #[test]
    fn iti_splices_one_mask() {
        let (inst, vocab) = sent(&["i", "will", "hit", "the", "sack", "now"], (2, 5));
        let ex = iti_transform(&inst, MASK);
        assert_eq!(words(&ex.source_tokens, &vocab), ["i", "will", "MASK", "now"]);
        assert_eq!(ex.target_tokens, inst.tokens);
        ex.check_invariants(MASK).unwrap();
    }

    #[test]
    fn iti_full_span_and_leading_span() {
        let (inst, _) = sent(&["hit", "the", "sack"], (0, 3));
        assert_eq!(iti_transform(&inst, MASK).source_tokens, vec![MASK]);
        let (inst, vocab) = sent(&["hit", "the", "sack", "now"], (0, 3));
        let ex = iti_transform(&inst, MASK);
        assert_eq!(words(&ex.source_tokens, &vocab), ["MASK", "now"]);
    }

    #[test]
    fn copy_is_identity() {
        let (inst, _) = sent(&["hit", "the", "sack"], (0, 3));
        let ex = copy_transform(&inst);
        assert_eq!(ex.source_tokens, ex.target_tokens);
        assert_eq!(ex.ie_span_source, Some(inst.ie_span));
        ex.check_invariants(MASK).unwrap();
    }

    #[test]
    fn figure_example_masks_so_tired() {
        let (inst, vocab) = sent(
            &["i", "am", "so", "tired", "i", "will", "hit", "the", "sack"],
            (6, 9),
        );
        let ex = mask_context_span(&inst, TokenSpan::new(2, 4), MASK);
        assert_eq!(
            words(&ex.source_tokens, &vocab),
            ["i", "am", "MASK", "i", "will", "hit", "the", "sack"]
        );
        assert_eq!(ex.ie_span_source, Some(TokenSpan::new(5, 8)));
        ex.check_invariants(MASK).unwrap();
    }

    #[test]
    fn zero_length_draw_is_copy() {
        let (inst, _) = sent(&["i", "will", "hit", "the", "sack", "now"], (2, 5));
        let policy = NoisingPolicy { span_lambda: 1e-9, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(span_infilling_transform(&inst, &policy, MASK, &mut rng), copy_transform(&inst));
    }

    #[test]
    fn no_context_falls_back_to_copy() {
        let (inst, _) = sent(&["hit", "the", "sack"], (0, 3));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ex = span_infilling_transform(&inst, &NoisingPolicy::default(), MASK, &mut rng);
        assert!(ex.fallback);
        assert_eq!(ex.source_tokens, ex.target_tokens);
    }

    #[test]
    fn long_draw_truncates_to_longest_run() {
        let (inst, _) = sent(&["a", "b", "hit", "the", "sack", "c"], (2, 5));
        let policy = NoisingPolicy { span_lambda: 50.0, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ex = span_infilling_transform(&inst, &policy, MASK, &mut rng);
        assert_eq!(ex.masked_span_target, Some(TokenSpan::new(0, 2)));
    }

    #[test]
    fn template_pair() {
        let entry = IdiomEntry {
            idiom_id: "hit_the_sack".into(),
            lemma: "hit the sack".into(),
            definition: "go to bed".into(),
            monosemous: true,
            group_id: None,
        };
        let tpls = render_templates(&entry).unwrap();
        let tok = WhitespaceTokenizer::new(Vocab::from_tokens(
            "The idiom hit the sack means go to bed. [MASK]. When people say , they mean is used If someone says that"
                .split(' '),
        ));
        let mask = tok.special_ids().mask;
        let exs: Vec<_> = tpls
            .iter()
            .map(|t| template_infilling_transform(&tokenize_template(t, &tok).unwrap()))
            .collect();
        assert_eq!(exs.len(), 4);
        for ex in &exs {
            ex.check_invariants(mask).unwrap();
        }
        let ex = &exs[0];
        assert_eq!(ex.source_tokens.iter().filter(|&&t| t == mask).count(), 1);
        assert_eq!(tok.decode(&ex.target_tokens), "The idiom hit the sack means go to bed.");
        let def = ex.masked_span_target.unwrap();
        assert_eq!(def.end_token, ex.target_tokens.len());
        assert_eq!(tok.decode(&ex.target_tokens[def.range()]), "go to bed.");
        let ids: std::collections::HashSet<_> = exs.iter().map(|e| e.example_id.clone()).collect();
        assert_eq!(ids.len(), 4);
    }

    #[test]
    fn schedule_is_deterministic_and_covers_every_sentence() {
        let insts: Vec<_> = (0..50)
            .map(|i| TokenizedInstance {
                instance_id: format!("s{i}"),
                idiom_id: "x".into(),
                sense: crate::corpus::Sense::Idiomatic,
                tokens: (10..20).collect(),
                ie_span: TokenSpan::new(3, 5),
            })
            .collect();
        let policy = NoisingPolicy { seed: 11, ..Default::default() };
        let a = schedule_epoch(&insts, &[], &policy, MASK, 2);
        let b = schedule_epoch(&insts, &[], &policy, MASK, 2);
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        let c = schedule_epoch(&insts, &[], &policy, MASK, 3);
        assert_ne!(a, c);
        let mut ids: Vec<_> = a.iter().map(|e| e.example_id.clone()).collect();
        ids.sort();
        let mut want: Vec<_> = insts.iter().map(|i| i.instance_id.clone()).collect();
        want.sort();
        assert_eq!(ids, want);
        let all_iti = schedule_epoch(&insts, &[], &NoisingPolicy { p_iti: 1.0, ..policy }, MASK, 0);
        assert!(all_iti.iter().all(|e| e.transform == Transform::Iti));
    }

    #[test]
    fn policy_validation() {
        assert!(NoisingPolicy { p_iti: 1.5, ..Default::default() }.validate().is_err());
        assert!(NoisingPolicy { span_lambda: 0.0, ..Default::default() }.validate().is_err());
        assert!(NoisingPolicy { template_mix: -0.1, ..Default::default() }.validate().is_err());
        NoisingPolicy::default().validate().unwrap();
    }
}
