#![allow(dead_code)]

use std::collections::BTreeMap;

use trident_core::config::{ModelConfig, TrainConfig};
use trident_core::data::{generate_synthetic, SyntheticDataset, SyntheticSpec};
use trident_core::model::TridentModel;
use trident_core::nn::stream_rng;
use trident_core::tensor::Matrix;
use trident_core::vocab::{build_vocabulary, EmbeddingTable};
use rand::Rng as _;

/// Two attributes, two objects, three seen pairs.
pub fn toy_spec() -> SyntheticSpec {
    SyntheticSpec {
        attributes: 2,
        objects: 2,
        seen_pairs: 3,
        unseen_pairs: 1,
        train_images_per_pair: 2,
        eval_images_per_pair: 1,
        num_patches: 4,
        cls_dim: 8,
        patch_dim: 6,
        seed: 3,
        ..SyntheticSpec::default()
    }
}

pub fn toy_config(spec: &SyntheticSpec) -> ModelConfig {
    ModelConfig {
        num_patches: spec.num_patches,
        feature_dim: spec.cls_dim,
        patch_dim: spec.patch_dim,
        word_embedding_dim: 5,
        word_dim: 8,
        comp_dim: 6,
        local_features: 2,
        global_features: 1,
        word_mlp_hidden: vec![7],
        disentangle_hidden: 5,
        aux_count: 2,
        init_std: 0.3,
        ..ModelConfig::default()
    }
}

pub fn small_train() -> TrainConfig {
    TrainConfig { batch_size: 4, epochs: 3, decay_epochs: vec![2], lr_main: 1e-3, ..TrainConfig::default() }
}

/// Synthetic data plus a freshly initialized model with made-up auxiliary
/// words and random word vectors.
pub fn build(spec: &SyntheticSpec, config: ModelConfig, seed: u64) -> (SyntheticDataset, TridentModel) {
    let data = generate_synthetic(spec).unwrap();
    let t = config.aux_count;
    let aux: BTreeMap<_, _> = data
        .split
        .seen_pairs()
        .iter()
        .enumerate()
        .map(|(i, c)| (c.clone(), (0..t).map(|k| format!("aux{}", (i + k) % (t + 2))).collect()))
        .collect();
    let vocab = build_vocabulary(&spec.attribute_names(), &spec.object_names(), &aux, t).unwrap();
    let mut rng = stream_rng(seed, 1000);
    let rows = Matrix::from_fn(vocab.len(), config.word_embedding_dim, |_, _| rng.random::<f64>() * 2.0 - 1.0);
    let table = EmbeddingTable::new(rows).unwrap();
    let model = TridentModel::new(config, vocab, table, &mut stream_rng(seed, 0)).unwrap();
    (data, model)
}
