//! Synthetic inputs shared by the benchmarks under `benches/`.

use idiomkit_core::corpus::{MeaningGroup, TokenizedInstance};
use idiomkit_core::{BankKind, EmbeddingBank, MeaningGroups, Sense, TokenSpan};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_vectors(n: usize, dim: usize, seed: u64) -> Vec<Vec<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect()).collect()
}

/// A bank of `n` idioms spread round-robin over `n_groups` meaning groups.
pub fn grouped_bank(n: usize, dim: usize, n_groups: usize, seed: u64) -> (EmbeddingBank, MeaningGroups) {
    let mut bank = EmbeddingBank::new(BankKind::Ie, dim);
    let mut members = vec![Vec::new(); n_groups];
    for (i, v) in random_vectors(n, dim, seed).into_iter().enumerate() {
        let id = format!("idiom{i:04}");
        bank.insert(&id, v, 1).expect("finite vector");
        members[i % n_groups].push(id);
    }
    let groups = members
        .into_iter()
        .enumerate()
        .map(|(g, idiom_ids)| MeaningGroup { group_id: format!("g{g}"), name: format!("group {g}"), idiom_ids })
        .collect();
    (bank, MeaningGroups::new(groups).expect("disjoint groups"))
}

/// Random sentences of 8 to 40 tokens with ids in `[first_id, vocab)`.
pub fn sentences(n: usize, first_id: u32, vocab: u32, seed: u64) -> Vec<TokenizedInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let len = rng.random_range(8..=40);
            let width = rng.random_range(1..=4);
            let start = rng.random_range(0..=len - width);
            TokenizedInstance {
                instance_id: format!("s{i:05}"),
                idiom_id: format!("idiom{:04}", i % 50),
                sense: Sense::Idiomatic,
                tokens: (0..len).map(|_| rng.random_range(first_id..vocab)).collect(),
                ie_span: TokenSpan::new(start, start + width),
            }
        })
        .collect()
}
