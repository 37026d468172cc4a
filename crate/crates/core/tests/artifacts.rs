use std::path::{Path, PathBuf};

use idiomkit_core::bank::build_ie_embeddings;
use idiomkit_core::corpus::{
    align_span, filter_embedding_training_view, load_corpus, tokenize_corpus, TokenizedInstance, VocabOptions,
    WordPieceTokenizer,
};
use idiomkit_core::model::{attach_adapter, load_checkpoint, save_checkpoint, Backbone, ExtractionSide};
use idiomkit_core::{AdapterSpec, BackboneConfig, Dictionary, EmbeddingBank, ErrorKind, Tokenizer};

fn data(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data").join(rel)
}

fn fixture() -> (Dictionary, WordPieceTokenizer, Vec<TokenizedInstance>) {
    let dict = Dictionary::load(&data("dictionary.jsonl")).unwrap();
    let corpus = load_corpus(&data("fixtures/train_64.jsonl"), &dict).unwrap();
    let texts: Vec<&str> = corpus.instances().iter().map(|i| i.text.as_str()).collect();
    let tok = WordPieceTokenizer::train(texts, &VocabOptions { max_size: 1500, min_count: 1, lowercase: true });
    let inst = tokenize_corpus(&filter_embedding_training_view(&corpus, &dict), &tok).unwrap();
    (dict, tok, inst)
}

#[test]
fn fixture_spans_survive_tokenization() {
    let dict = Dictionary::load(&data("dictionary.jsonl")).unwrap();
    let corpus = load_corpus(&data("fixtures/corpus_200.jsonl"), &dict).unwrap();
    let texts: Vec<&str> = corpus.instances().iter().map(|i| i.text.as_str()).collect();
    let tok = WordPieceTokenizer::train(texts, &VocabOptions { max_size: 4000, min_count: 1, lowercase: true });
    for inst in corpus.instances() {
        let enc = tok.encode(&inst.text);
        let span = align_span(&enc, inst.pie_char_span).unwrap();
        let decoded = tok.decode(&enc.ids[span.range()]);
        assert_eq!(decoded, inst.pie_text().to_lowercase(), "{}", inst.instance_id);
    }
}

#[test]
fn tokenizer_file_round_trip() {
    let (_, tok, inst) = fixture();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("wp.vocab");
    tok.save(&path).unwrap();
    let back = WordPieceTokenizer::load(&path).unwrap();
    assert_eq!(back.vocab_size(), tok.vocab_size());
    for i in &inst {
        assert_eq!(back.encode(&tok.decode(&i.tokens)).ids, i.tokens);
    }
}

#[test]
fn checkpoint_and_bank_round_trip() {
    let (_, tok, inst) = fixture();
    let cfg = BackboneConfig::tiny(tok.vocab_size());
    let spec = AdapterSpec { reduction_factor: 8, init_scale: 0.05, ..AdapterSpec::default() };
    let (model, _) = attach_adapter(Backbone::new(&cfg).unwrap(), &spec).unwrap();
    let origin = model.backbone().checksum().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let stem = dir.path().join("ckpt");
    let files = save_checkpoint(&model, &origin, 0, 0, &stem).unwrap();
    assert!(files.backbone.is_none(), "a frozen backbone is not duplicated");

    let loaded = load_checkpoint(&stem).unwrap();
    assert_eq!(loaded.adapter_store().checksum().unwrap(), model.adapter_store().checksum().unwrap());
    let a = build_ie_embeddings(&model, &inst, None, &tok, ExtractionSide::Decoder, 8).unwrap();
    let b = build_ie_embeddings(&loaded, &inst, None, &tok, ExtractionSide::Decoder, 8).unwrap();
    assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());

    let bank_path = dir.path().join("ie.bank");
    a.save(&bank_path).unwrap();
    let reread = EmbeddingBank::load(&bank_path).unwrap();
    assert_eq!(reread.to_bytes().unwrap(), a.to_bytes().unwrap());

    let bytes = std::fs::read(&bank_path).unwrap();
    std::fs::write(&bank_path, &bytes[..bytes.len() - 3]).unwrap();
    assert_eq!(EmbeddingBank::load(&bank_path).unwrap_err().kind(), ErrorKind::Integrity);
}

#[test]
fn batch_size_does_not_change_embeddings() {
    let (_, tok, inst) = fixture();
    let cfg = BackboneConfig::tiny(tok.vocab_size());
    let (model, _) = attach_adapter(Backbone::new(&cfg).unwrap(), &AdapterSpec::default()).unwrap();
    let one = build_ie_embeddings(&model, &inst, None, &tok, ExtractionSide::Encoder, 1).unwrap();
    let many = build_ie_embeddings(&model, &inst, None, &tok, ExtractionSide::Encoder, 32).unwrap();
    for id in one.ids() {
        let (x, y) = (one.vector(id).unwrap(), many.vector(id).unwrap());
        let diff = x.iter().zip(y).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert!(diff < 1e-4, "{id}: padding changed the embedding by {diff}");
    }
}
