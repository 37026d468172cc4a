use super::tokenizer::Encoding;
use super::types::{CharSpan, TokenSpan};
use crate::error::{Error, Result};

/// Maps a character span onto the smallest token span whose character
/// coverage contains it. Tokens that only partially overlap the span are
/// included, so subword pieces of an expression are never dropped.
pub fn align_span(encoding: &Encoding, span: CharSpan) -> Result<TokenSpan> {
    let err = || Error::Alignment {
        start: span.start,
        end: span.end,
    };
    if span.is_empty() {
        return Err(err());
    }
    let mut first = None;
    let mut last = None;
    for (i, off) in encoding.offsets.iter().enumerate() {
        if off.start < span.end && span.start < off.end {
            first.get_or_insert(i);
            last = Some(i);
        }
    }
    match (first, last) {
        (Some(s), Some(e)) => Ok(TokenSpan::new(s, e + 1)),
        _ => Err(err()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tokenizer::{Tokenizer, Vocab, WhitespaceTokenizer, WordPieceTokenizer};

    /// Exhaustive oracle: among all token spans whose joint coverage
    /// contains every overlapping character, pick the narrowest.
    fn brute_force(enc: &Encoding, span: CharSpan) -> Option<TokenSpan> {
        let n = enc.len();
        let mut best: Option<TokenSpan> = None;
        for i in 0..n {
            for j in (i + 1)..=n {
                let overlaps = |k: usize| {
                    let o = enc.offsets[k];
                    o.start < span.end && span.start < o.end
                };
                let touches_all = (0..n).all(|k| !overlaps(k) || (i..j).contains(&k));
                let covers = (i..j).any(overlaps);
                if touches_all && covers && best.is_none_or(|b| j - i < b.width()) {
                    best = Some(TokenSpan::new(i, j));
                }
            }
        }
        best
    }

    #[test]
    fn single_word_is_width_one() {
        let tok = WhitespaceTokenizer::from_texts(["i will sleep now"]);
        let text = "i will sleep now";
        let enc = tok.encode(text);
        let span = align_span(&enc, CharSpan::new(7, 12)).unwrap();
        assert_eq!(span, TokenSpan::new(2, 3));
    }

    #[test]
    fn whitespace_multiword_span() {
        let text = "so i will hit the sack now";
        let tok = WhitespaceTokenizer::from_texts([text]);
        let enc = tok.encode(text);
        // so(0) i(1) will(2) hit(3) the(4) sack(5) now(6)
        let start = text.find("hit").unwrap();
        let end = text.find(" now").unwrap();
        assert_eq!(align_span(&enc, CharSpan::new(start, end)).unwrap(), TokenSpan::new(3, 6));
    }

    #[test]
    fn subword_pieces_extend_the_span() {
        let vocab = Vocab::from_tokens(["i", "will", "hit", "the", "sa", "##ck", "now"]);
        let tok = WordPieceTokenizer::new(vocab, true);
        let text = "i will hit the sack now";
        let enc = tok.encode(text);
        let span = CharSpan::new(7, 19);
        let got = align_span(&enc, span).unwrap();
        assert_eq!(got, TokenSpan::new(2, 6));
        assert_eq!(Some(got), brute_force(&enc, span));
        // A span that ends inside "sack" still takes both pieces it touches.
        let partial = CharSpan::new(7, 17);
        assert_eq!(align_span(&enc, partial).unwrap(), TokenSpan::new(2, 5));
        assert_eq!(Some(TokenSpan::new(2, 5)), brute_force(&enc, partial));
    }

    #[test]
    fn whitespace_only_span_is_an_error() {
        let tok = WhitespaceTokenizer::from_texts(["a b"]);
        let enc = tok.encode("a   b");
        match align_span(&enc, CharSpan::new(1, 3)) {
            Err(Error::Alignment { start: 1, end: 3 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    proptest::proptest! {
        #[test]
        fn matches_exhaustive_scan(words in proptest::collection::vec("[a-z]{1,6}", 1..8),
                                   a in 0usize..60, len in 1usize..20) {
            let text = words.join(" ");
            let n = text.chars().count();
            let start = a % n;
            let end = (start + len).min(n);
            proptest::prop_assume!(start < end);
            let vocab = Vocab::from_tokens(["a", "b", "c", "d", "e", "##a", "##b", "##c", "##e", "ab", "cd"]);
            let tok = WordPieceTokenizer::new(vocab, true);
            let enc = tok.encode(&text);
            let span = CharSpan::new(start, end);
            let got = align_span(&enc, span).ok();
            proptest::prop_assert_eq!(got, brute_force(&enc, span));
        }
    }
}
