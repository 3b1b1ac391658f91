//! Optimization loop: Adam with two parameter groups, a multi-step
//! schedule, per-epoch triplet resampling and resumable state.
//!
//! Parameters and optimizer moments are rounded to `f32` after every update
//! so that a checkpoint storing `f32` payloads restores the exact state.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::config::TrainConfig;
use crate::data::{shuffled, DatasetSplit, FeatureStore, Split, TripletSampler};
use crate::error::{Error, Result};
use crate::features::Mode;
use crate::losses::LossBreakdown;
use crate::model::{SeenPairs, TridentModel, TripletInput};
use crate::nn::{stream_rng, ParamGroup, Parameters, Rng};
use crate::tensor::{round_f32, Matrix};

/// Adam moments, aligned with the model's parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

impl AdamState {
    pub fn zeros_like(model: &TridentModel) -> Self {
        let mut list = Vec::new();
        model.params("", &mut list);
        let m: Vec<Matrix> = list.iter().map(|p| Matrix::zeros(p.value.rows(), p.value.cols())).collect();
        Self { step: 0, v: m.clone(), m }
    }
}

/// Everything needed to continue a run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: TridentModel,
    pub optimizer: AdamState,
    /// Completed epochs.
    pub epoch: usize,
    /// Root of every random stream; epoch `e` draws from stream `e`.
    pub seed: u64,
}

impl TrainState {
    pub fn new(model: TridentModel, seed: u64) -> Self {
        let optimizer = AdamState::zeros_like(&model);
        Self { model, optimizer, epoch: 0, seed }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr_main: f64,
    pub lr_embeddings: f64,
    pub batches: usize,
    /// Triplet-weighted mean of the batch losses.
    pub loss: LossBreakdown,
}

/// Loss values and per-parameter gradients (in parameter order; `None` for
/// parameters that do not influence the loss).
pub struct Evaluated {
    pub loss: LossBreakdown,
    pub grads: Vec<Option<Matrix>>,
    pub stats: Option<crate::autograd::BatchStats>,
}

/// Forward and backward pass over one batch.
pub fn loss_and_gradients(
    model: &TridentModel,
    batch: &[TripletInput<'_>],
    seen: &SeenPairs,
    mode: Mode,
    rng: Option<&mut Rng>,
) -> Result<Evaluated> {
    let mut g = Graph::new();
    let out = model.forward_batch(&mut g, batch, seen, mode, rng)?;
    let val = |v: Option<crate::autograd::Var>| v.map_or(0.0, |v| g.scalar(v));
    let loss = LossBreakdown {
        ortho: val(out.ortho),
        comp: val(out.comp),
        attr: val(out.attr),
        obj: val(out.obj),
        total: g.scalar(out.total),
    };
    if !loss.is_finite() {
        return Ok(Evaluated { loss, grads: Vec::new(), stats: out.stats });
    }
    let grads = g.backward(out.total);
    let mut list = Vec::new();
    model.params("", &mut list);
    let grads = list.iter().map(|p| grads.param(p.value).cloned()).collect();
    Ok(Evaluated { loss, grads, stats: out.stats })
}

/// One Adam update with L2 weight decay folded into the gradient.
pub fn adam_step(model: &mut TridentModel, opt: &mut AdamState, mut grads: Vec<Option<Matrix>>, cfg: &TrainConfig, factor: f64) {
    if let Some(clip) = cfg.grad_clip {
        let norm = libm::sqrt(grads.iter().flatten().map(|g| g.as_slice().iter().map(|x| x * x).sum::<f64>()).sum());
        if norm > clip {
            for g in grads.iter_mut().flatten() {
                g.scale_assign(clip / norm);
            }
        }
    }
    opt.step += 1;
    let t = opt.step as f64;
    let bc1 = 1.0 - libm::pow(cfg.adam_beta1, t);
    let bc2 = 1.0 - libm::pow(cfg.adam_beta2, t);
    let train_embeddings = cfg.train_embeddings && model.table.trainable;
    let mut list = Vec::new();
    model.params_mut("", &mut list);
    for (i, p) in list.into_iter().enumerate() {
        let Some(grad) = grads[i].as_ref() else { continue };
        let lr = match p.meta.group {
            ParamGroup::Main => cfg.lr_main,
            ParamGroup::Embedding if train_embeddings => cfg.lr_embeddings,
            ParamGroup::Embedding => continue,
        } * factor;
        let decay = if p.meta.decay || cfg.decay_batch_norm { cfg.weight_decay } else { 0.0 };
        let theta = p.value.as_mut_slice();
        let m = opt.m[i].as_mut_slice();
        let v = opt.v[i].as_mut_slice();
        for (((th, mm), vv), g) in theta.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(grad.as_slice()) {
            let g = g + decay * *th;
            *mm = round_f32(cfg.adam_beta1 * *mm + (1.0 - cfg.adam_beta1) * g);
            *vv = round_f32(cfg.adam_beta2 * *vv + (1.0 - cfg.adam_beta2) * g * g);
            let update = lr * (*mm / bc1) / (libm::sqrt(*vv / bc2) + cfg.adam_eps);
            *th = round_f32(*th - update);
        }
    }
}

/// Fails early when smoothing needs auxiliary words that are missing.
pub fn check_ready(model: &TridentModel, split: &DatasetSplit, store: &FeatureStore) -> Result<()> {
    store.check_covers(split)?;
    for c in split.seen_pairs() {
        model.vocab.pair_ids(c)?;
        if model.config.effective_smoothing() > 0.0 {
            model.vocab.aux_ids(c)?;
        }
    }
    Ok(())
}

/// Trains from `state.epoch` up to `until_epoch` (1-based, inclusive) and
/// returns one log entry per epoch run. `on_epoch` sees each entry as soon
/// as the epoch completes.
pub fn train(
    state: &mut TrainState,
    split: &DatasetSplit,
    store: &FeatureStore,
    cfg: &TrainConfig,
    until_epoch: usize,
    mut on_epoch: impl FnMut(&EpochLog, &TrainState),
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    check_ready(&state.model, split, store)?;
    state.model.table.trainable = cfg.train_embeddings;
    let seen = SeenPairs::new(&state.model.vocab, split.seen_pairs())?;
    let sampler = TripletSampler::new(split);
    let train_idx = split.indices(Split::Train);
    if train_idx.is_empty() && until_epoch > state.epoch {
        return Err(Error::Schema("no training records".into()));
    }
    let mut logs = Vec::new();
    while state.epoch < until_epoch {
        let epoch = state.epoch + 1;
        let factor = cfg.lr_factor(epoch);
        let mut rng = stream_rng(state.seed, epoch as u64);
        let order = shuffled(&train_idx, &mut rng);
        let mut sum = LossBreakdown::default();
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let triplets: Vec<_> = chunk.iter().map(|&i| sampler.sample(split, i, &mut rng)).collect();
            let mut labels = Vec::with_capacity(triplets.len());
            for t in &triplets {
                labels.push([
                    split.record(t.main).composition(),
                    split.record(t.attr_companion).composition(),
                    split.record(t.obj_companion).composition(),
                ]);
            }
            let mut inputs = Vec::with_capacity(triplets.len());
            for (t, l) in triplets.iter().zip(&labels) {
                let img = |i: usize| store.get(&split.record(i).image_id);
                inputs.push(TripletInput {
                    images: [img(t.main)?, img(t.attr_companion)?, img(t.obj_companion)?],
                    labels: [&l[0], &l[1], &l[2]],
                });
            }
            let ev = loss_and_gradients(&state.model, &inputs, &seen, Mode::Train, Some(&mut rng))?;
            if !ev.loss.is_finite() {
                let image_ids = chunk.iter().map(|&i| split.record(i).image_id.clone()).collect();
                return Err(Error::NonFiniteLoss { epoch, image_ids });
            }
            adam_step(&mut state.model, &mut state.optimizer, ev.grads, cfg, factor);
            if let Some(stats) = &ev.stats {
                state.model.extractor.norm.update_running(stats, state.model.config.batch_norm_momentum);
            }
            let w = chunk.len() as f64;
            sum.ortho += w * ev.loss.ortho;
            sum.comp += w * ev.loss.comp;
            sum.attr += w * ev.loss.attr;
            sum.obj += w * ev.loss.obj;
            sum.total += w * ev.loss.total;
            batches += 1;
        }
        let n = train_idx.len() as f64;
        let loss = LossBreakdown {
            ortho: sum.ortho / n,
            comp: sum.comp / n,
            attr: sum.attr / n,
            obj: sum.obj / n,
            total: sum.total / n,
        };
        state.epoch = epoch;
        let log = EpochLog {
            epoch,
            lr_main: cfg.lr_main * factor,
            lr_embeddings: if cfg.train_embeddings { cfg.lr_embeddings * factor } else { 0.0 },
            batches,
            loss,
        };
        on_epoch(&log, state);
        logs.push(log);
    }
    Ok(logs)
}

/// Names of the parameters, in optimizer order.
pub fn parameter_names(model: &TridentModel) -> Vec<String> {
    let mut list = Vec::new();
    model.params("", &mut list);
    list.into_iter().map(|p| p.name).collect()
}

/// Checks that two parameter layouts agree; used when restoring state.
pub fn check_layout(model: &TridentModel, names: &[String], shapes: &[(usize, usize)]) -> Result<()> {
    let mut list = Vec::new();
    model.params("", &mut list);
    if list.len() != names.len() {
        return Err(Error::Config(format!("checkpoint has {} parameters, model has {}", names.len(), list.len())));
    }
    for ((p, n), s) in list.iter().zip(names).zip(shapes) {
        if &p.name != n || p.value.shape() != *s {
            return Err(Error::Config(format!(
                "checkpoint parameter {n} {s:?} does not match model parameter {} {:?}",
                p.name,
                p.value.shape()
            )));
        }
    }
    Ok(())
}
