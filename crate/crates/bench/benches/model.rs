use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use idiomkit_bench::sentences;
use idiomkit_core::corpus::SpecialIds;
use idiomkit_core::model::{attach_adapter, Backbone, ExtractionSide, Seq2SeqBatch};
use idiomkit_core::noising::schedule_epoch;
use idiomkit_core::training::{optimizer, train_step, DefinitionTargets, LossWeights};
use idiomkit_core::{AdapterSpec, BackboneConfig, BankKind, CorruptionExample, EmbeddingBank, NoisingPolicy};

const VOCAB: u32 = 1000;
const SPECIALS: SpecialIds = SpecialIds { pad: 0, bos: 1, eos: 2, unk: 3, mask: 4 };

fn noising(c: &mut Criterion) {
    let corpus = sentences(2000, 5, VOCAB, 7);
    let policy = NoisingPolicy::default();
    c.bench_function("schedule_epoch/2000", |b| {
        b.iter(|| schedule_epoch(black_box(&corpus), &[], &policy, SPECIALS.mask, 3))
    });
}

fn tiny_model(c: &mut Criterion) {
    let cfg = BackboneConfig::tiny(VOCAB as usize);
    let (model, _) = attach_adapter(Backbone::new(&cfg).unwrap(), &AdapterSpec::default()).unwrap();
    let corpus = sentences(16, 5, VOCAB, 8);
    let examples = schedule_epoch(&corpus, &[], &NoisingPolicy::default(), SPECIALS.mask, 0);
    let refs: Vec<&CorruptionExample> = examples.iter().collect();
    let batch = Seq2SeqBatch::from_examples(&refs, SPECIALS, cfg.max_positions, cfg.precision.dtype()).unwrap();
    c.bench_function("tiny_forward/16", |b| b.iter(|| model.forward_batch(black_box(&batch)).unwrap()));

    let mut bank = EmbeddingBank::new(BankKind::Definition, cfg.hidden_dim);
    for (i, v) in idiomkit_bench::random_vectors(50, cfg.hidden_dim, 9).into_iter().enumerate() {
        bank.insert(&format!("idiom{i:04}"), v, 1).unwrap();
    }
    let defs = DefinitionTargets::from_bank(&bank, cfg.precision.dtype()).unwrap();
    let weights = LossWeights { w_rec: 1.0, w_sf: 1.0, sf_on_iti: false, side: ExtractionSide::Decoder };
    let mut opt = optimizer(&model, 1e-4).unwrap();
    c.bench_function("tiny_train_step/16", |b| {
        b.iter(|| train_step(&model, &mut opt, black_box(&refs), SPECIALS, &defs, &weights).unwrap())
    });
}

criterion_group!(benches, noising, tiny_model);
criterion_main!(benches);
