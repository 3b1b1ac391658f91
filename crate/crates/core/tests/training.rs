mod common;

use common::*;
use trident_core::autograd::{numerical_gradient, relative_error, Graph};
use trident_core::config::TrainConfig;
use trident_core::data::{Split, TripletSampler};
use trident_core::error::Error;
use trident_core::features::Mode;
use trident_core::model::{SeenPairs, TridentModel, TripletInput};
use trident_core::nn::{stream_rng, Parameters};
use trident_core::train::{loss_and_gradients, parameter_names, train, TrainState};
use trident_core::vocab::Composition;

fn batch_loss(model: &TridentModel, batch: &[TripletInput<'_>], seen: &SeenPairs) -> f64 {
    let mut g = Graph::new();
    let out = model.forward_batch(&mut g, batch, seen, Mode::Train, None).unwrap();
    g.scalar(out.total)
}

#[test]
fn full_objective_gradients_match_finite_differences() {
    let spec = toy_spec();
    let mut config = toy_config(&spec);
    config.dropout = 0.0;
    let (data, model) = build(&spec, config, 11);
    let split = &data.split;
    let seen = SeenPairs::new(&model.vocab, split.seen_pairs()).unwrap();
    let sampler = TripletSampler::new(split);
    let mut rng = stream_rng(5, 1);
    let train_idx = split.indices(Split::Train);
    let triplets: Vec<_> = train_idx[..2].iter().map(|&i| sampler.sample(split, i, &mut rng)).collect();
    let labels: Vec<[Composition; 3]> = triplets
        .iter()
        .map(|t| [t.main, t.attr_companion, t.obj_companion].map(|i| split.record(i).composition()))
        .collect();
    let batch: Vec<TripletInput> = triplets
        .iter()
        .zip(&labels)
        .map(|(t, l)| TripletInput {
            images: [t.main, t.attr_companion, t.obj_companion]
                .map(|i| data.store.get(&split.record(i).image_id).unwrap()),
            labels: [&l[0], &l[1], &l[2]],
        })
        .collect();

    let ev = loss_and_gradients(&model, &batch, &seen, Mode::Train, None).unwrap();
    let names = parameter_names(&model);
    let mut values = Vec::new();
    model.params("", &mut values);
    let values: Vec<_> = values.into_iter().map(|p| p.value.clone()).collect();
    let mut worst = 0.0f64;
    for (i, name) in names.iter().enumerate() {
        let numeric = numerical_gradient(&values[i], 1e-5, |probe| {
            let mut m = model.clone();
            let mut list = Vec::new();
            m.params_mut("", &mut list);
            *list.into_iter().nth(i).unwrap().value = probe.clone();
            batch_loss(&m, &batch, &seen)
        });
        let analytic = ev.grads[i].clone().unwrap_or_else(|| panic!("{name} has no gradient"));
        let err = relative_error(&analytic, &numeric);
        assert!(err <= 1e-5, "{name}: relative error {err:e}");
        worst = worst.max(err);
    }
    assert!(worst.is_finite());
}

#[test]
fn zero_epochs_leave_the_model_unchanged() {
    let spec = toy_spec();
    let (data, model) = build(&spec, toy_config(&spec), 2);
    let mut state = TrainState::new(model.clone(), 2);
    let cfg = TrainConfig { epochs: 0, ..small_train() };
    let logs = train(&mut state, &data.split, &data.store, &cfg, 0, |_, _| {}).unwrap();
    assert!(logs.is_empty());
    assert_eq!(state.model, model);
    assert_eq!(state.optimizer.step, 0);
}

#[test]
fn schedule_is_reported_per_epoch() {
    let spec = toy_spec();
    let (data, model) = build(&spec, toy_config(&spec), 2);
    let mut state = TrainState::new(model, 2);
    let cfg = small_train();
    let mut seen_epochs = Vec::new();
    let logs = train(&mut state, &data.split, &data.store, &cfg, cfg.epochs, |l, s| seen_epochs.push((l.epoch, s.epoch))).unwrap();
    assert_eq!(seen_epochs, vec![(1, 1), (2, 2), (3, 3)]);
    assert_eq!(logs[1].lr_main, cfg.lr_main);
    assert!((logs[2].lr_main - cfg.lr_main * cfg.decay_factor).abs() < 1e-18);
    let per_epoch = data.split.indices(Split::Train).len().div_ceil(cfg.batch_size);
    assert!(logs.iter().all(|l| l.batches == per_epoch && l.loss.is_finite()));
}

#[test]
fn milestones_at_thirty_and_forty() {
    let c = TrainConfig::default();
    assert_eq!(c.lr_main * c.lr_factor(30), 2e-4);
    assert!((c.lr_main * c.lr_factor(31) - 2e-5).abs() < 1e-18);
    assert!((c.lr_main * c.lr_factor(41) - 2e-6).abs() < 1e-18);
    assert!((c.lr_embeddings * c.lr_factor(41) - 1.5e-8).abs() < 1e-20);
}

#[test]
fn same_seed_same_run() {
    let spec = toy_spec();
    let run = || {
        let (data, model) = build(&spec, toy_config(&spec), 9);
        let mut state = TrainState::new(model, 9);
        let logs = train(&mut state, &data.split, &data.store, &small_train(), 2, |_, _| {}).unwrap();
        (state, logs)
    };
    let (a, la) = run();
    let (b, lb) = run();
    assert_eq!(a, b);
    assert_eq!(la, lb);
}

#[test]
fn split_run_equals_straight_run() {
    let spec = toy_spec();
    let (data, model) = build(&spec, toy_config(&spec), 4);
    let cfg = small_train();
    let mut straight = TrainState::new(model.clone(), 4);
    train(&mut straight, &data.split, &data.store, &cfg, 3, |_, _| {}).unwrap();
    let mut resumed = TrainState::new(model, 4);
    train(&mut resumed, &data.split, &data.store, &cfg, 1, |_, _| {}).unwrap();
    let mut resumed = resumed.clone();
    train(&mut resumed, &data.split, &data.store, &cfg, 3, |_, _| {}).unwrap();
    assert_eq!(straight, resumed);
}

#[test]
fn missing_aux_words_fail_before_training() {
    let spec = toy_spec();
    let (data, mut model) = build(&spec, toy_config(&spec), 1);
    let spec_v = model.vocab.spec();
    let mut trimmed = spec_v.clone();
    trimmed.aux.pop();
    model.vocab = trident_core::vocab::Vocabulary::from_spec(&trimmed).unwrap();
    let mut state = TrainState::new(model, 1);
    let err = train(&mut state, &data.split, &data.store, &small_train(), 1, |_, _| {}).unwrap_err();
    assert!(matches!(err, Error::CacheMiss(_)), "{err:?}");
}
