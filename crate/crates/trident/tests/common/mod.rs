#![allow(dead_code)]

use trident::config::RunConfig;
use trident::pipeline::{embed_words, gen_aux, init_state, vocabulary_for};
use trident::providers::{StubEmbeddingProvider, StubTextProvider};
use trident_core::aux::AuxCache;
use trident_core::data::{generate_synthetic, SyntheticDataset};
use trident_core::train::TrainState;

/// Synthetic data, stub auxiliary words and stub embeddings for `c`.
pub fn prepare(c: &RunConfig) -> (SyntheticDataset, TrainState) {
    let data = generate_synthetic(&c.synthetic).unwrap();
    let t = c.model.aux_count;
    let mut cache = AuxCache::new();
    gen_aux(&mut cache, data.split.seen_pairs(), Some(&StubTextProvider::new()), t, c.provider.max_retries, 4).unwrap();
    let vocab = vocabulary_for(&data.split, &cache, t).unwrap();
    let dim = c.model.word_embedding_dim;
    let table = embed_words(&vocab, &StubEmbeddingProvider { seed: c.seed, dim }, dim).unwrap();
    let state = init_state(&c.model, vocab, table, c.seed).unwrap();
    (data, state)
}
