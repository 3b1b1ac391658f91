//! The end-to-end steps behind each subcommand.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;

use serde::{Deserialize, Serialize};
use trident_core::aux::{generate_aux, AuxCache, TextProvider};
use trident_core::config::{ModelConfig, TrainConfig};
use trident_core::data::{generate_synthetic, DatasetSplit, FeatureStore, Phase, SyntheticDataset, SyntheticSpec};
use trident_core::error::Error as CoreError;
use trident_core::eval::{bias_sweep, rank_by_cosine, score_phase, MetricsReport};
use trident_core::model::TridentModel;
use trident_core::nn::stream_rng;
use trident_core::train::{train, EpochLog, TrainState};
use trident_core::vocab::{build_vocabulary, import_embeddings, Composition, EmbeddingProvider, EmbeddingTable, Vocabulary};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::formats::{read_embeddings, write_store};
use crate::io::{append_jsonl, write_manifest};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthOutput {
    pub manifest: PathBuf,
    pub features: PathBuf,
    pub images: usize,
    pub seen_pairs: usize,
    pub unseen_pairs: usize,
}

/// Generates a synthetic dataset into `dir`.
pub fn synth(spec: &SyntheticSpec, dir: &Path) -> Result<(SynthOutput, SyntheticDataset)> {
    let data = generate_synthetic(spec)?;
    let manifest = write_manifest(dir, &data.split)?;
    let features = dir.join("features.trif");
    write_store(&features, &data.store)?;
    let out = SynthOutput {
        manifest,
        features,
        images: data.store.len(),
        seen_pairs: spec.seen_pairs,
        unseen_pairs: spec.unseen_pairs,
    };
    Ok((out, data))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenReport {
    pub cached: usize,
    pub generated: usize,
    pub failed: usize,
}

/// Fills `cache` for every seen composition, with up to `workers` provider
/// requests in flight. Results are inserted by the calling thread only.
/// Every success is kept even when some compositions fail; the first
/// failure is returned after all workers finish.
pub fn gen_aux(
    cache: &mut AuxCache,
    seen: &[Composition],
    provider: Option<&(dyn TextProvider + Sync)>,
    t: usize,
    max_retries: usize,
    workers: usize,
) -> Result<GenReport> {
    let todo: Vec<&Composition> = seen.iter().filter(|c| cache.get(c).is_none()).collect();
    let mut report = GenReport { cached: seen.len() - todo.len(), ..GenReport::default() };
    if todo.is_empty() {
        return Ok(report);
    }
    let Some(provider) = provider else {
        return Err(CoreError::CacheMiss(todo[0].key()).into());
    };
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel();
    let mut first_error = None;
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, todo.len()) {
            let tx = tx.clone();
            let (next, todo) = (&next, &todo);
            s.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&comp) = todo.get(i) else { break };
                if tx.send((comp, generate_aux(provider, comp, t, max_retries))).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        for (comp, result) in rx {
            let outcome = result.and_then(|g| {
                cache.insert(comp.clone(), g.words, t)?;
                cache.provenance.insert(comp.clone(), g.transcript);
                Ok(())
            });
            match outcome {
                Ok(()) => report.generated += 1,
                Err(e) => {
                    log::error!("{comp}: {e}");
                    report.failed += 1;
                    first_error.get_or_insert(e);
                }
            }
        }
    });
    match first_error {
        Some(e) => Err(e.into()),
        None => Ok(report),
    }
}

/// Attributes, objects and the cached auxiliary words of seen compositions.
pub fn vocabulary_for(split: &DatasetSplit, cache: &AuxCache, t: usize) -> Result<Vocabulary> {
    let aux = split
        .seen_pairs()
        .iter()
        .filter_map(|c| cache.get(c).map(|w| (c.clone(), w.to_vec())))
        .collect();
    Ok(build_vocabulary(&split.attributes(), &split.objects(), &aux, t)?)
}

pub fn embed_words(vocab: &Vocabulary, provider: &dyn EmbeddingProvider, dim: usize) -> Result<EmbeddingTable> {
    Ok(import_embeddings(provider, vocab, dim, 3)?)
}

/// Reads a `TRIE1` file and checks it was made for `vocab`.
pub fn load_table(path: &Path, vocab: &Vocabulary, dim: usize) -> Result<EmbeddingTable> {
    let (words, rows) = read_embeddings(path)?;
    if words != vocab.words() {
        let missing: Vec<&String> = vocab.words().iter().filter(|w| !words.contains(w)).take(5).collect();
        return Err(Error::format(
            path,
            format!("word list does not match the vocabulary ({} vs {} words; missing e.g. {missing:?}); rerun embed-words", words.len(), vocab.len()),
        ));
    }
    if rows.cols() != dim {
        return Err(Error::format(path, format!("vectors have {} dimensions, the model expects {dim}", rows.cols())));
    }
    Ok(EmbeddingTable::new(rows)?)
}

/// Checks the store against the model's input dimensions.
pub fn check_store(store: &FeatureStore, model: &ModelConfig) -> Result<()> {
    let h = store.header();
    if (h.num_patches, h.cls_dim, h.patch_dim) != (model.num_patches, model.feature_dim, model.patch_dim) {
        return Err(CoreError::Config(format!(
            "feature store has n={}, d_v={}, d_p={} but the model expects n={}, d_v={}, d_p={}",
            h.num_patches, h.cls_dim, h.patch_dim, model.num_patches, model.feature_dim, model.patch_dim
        ))
        .into());
    }
    Ok(())
}

pub fn init_state(config: &ModelConfig, vocab: Vocabulary, table: EmbeddingTable, seed: u64) -> Result<TrainState> {
    let model = TridentModel::new(config.clone(), vocab, table, &mut stream_rng(seed, 0))?;
    Ok(TrainState::new(model, seed))
}

/// Trains to `cfg.epochs`, appending to `out/log.jsonl` and rewriting
/// `out/checkpoint.tric` after every epoch.
pub fn train_run(state: &mut TrainState, split: &DatasetSplit, store: &FeatureStore, cfg: &TrainConfig, out: &Path) -> Result<Vec<EpochLog>> {
    std::fs::create_dir_all(out).map_err(|e| Error::write(out, e))?;
    let log_path = out.join("log.jsonl");
    let ckpt = out.join("checkpoint.tric");
    if state.epoch == 0 && log_path.exists() {
        std::fs::remove_file(&log_path).map_err(|e| Error::write(&log_path, e))?;
    }
    let mut io_error = None;
    let logs = train(state, split, store, cfg, cfg.epochs, |log, st| {
        log::info!(
            "epoch {:>3}  loss {:.4}  (ortho {:.4}  comp {:.4}  attr {:.4}  obj {:.4})",
            log.epoch, log.loss.total, log.loss.ortho, log.loss.comp, log.loss.attr, log.loss.obj
        );
        if io_error.is_none() {
            io_error = append_jsonl(&log_path, log).and_then(|_| checkpoint::save(&ckpt, st)).err();
        }
    })?;
    if let Some(e) = io_error {
        return Err(e);
    }
    if logs.is_empty() {
        checkpoint::save(&ckpt, state)?;
    }
    Ok(logs)
}

pub fn evaluate(model: &TridentModel, split: &DatasetSplit, store: &FeatureStore, phase: Phase, k: usize) -> Result<MetricsReport> {
    let scores = score_phase(model, split, store, phase)?;
    Ok(bias_sweep(&scores, k)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextHit {
    pub rank: usize,
    pub attribute: String,
    pub object: String,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageHit {
    pub rank: usize,
    pub image_id: String,
    pub score: f64,
}

/// Image to text: the phase's candidate compositions nearest one image.
pub fn retrieve_text(model: &TridentModel, split: &DatasetSplit, store: &FeatureStore, phase: Phase, image_id: &str, top_n: usize) -> Result<Vec<TextHit>> {
    let comps: Vec<Composition> = split.phase_pairs(phase).iter().map(|p| p.composition()).collect();
    let query = model.image_embeddings(&[store.get(image_id)?])?;
    let cands = model.pair_embeddings(&comps)?;
    Ok(rank_by_cosine(query.row(0), &cands, top_n)?
        .into_iter()
        .enumerate()
        .map(|(r, h)| TextHit {
            rank: r + 1,
            attribute: comps[h.index].attribute.clone(),
            object: comps[h.index].object.clone(),
            score: h.score,
        })
        .collect())
}

/// Text to image: the phase's images nearest one composition.
pub fn retrieve_image(model: &TridentModel, split: &DatasetSplit, store: &FeatureStore, phase: Phase, comp: &Composition, top_n: usize) -> Result<Vec<ImageHit>> {
    let ids: Vec<&str> = split.indices(phase.split()).iter().map(|&i| split.record(i).image_id.as_str()).collect();
    if ids.is_empty() {
        return Ok(Vec::new());
    }
    let images = ids.iter().map(|id| store.get(id)).collect::<std::result::Result<Vec<_>, _>>()?;
    let emb = model.image_embeddings(&images)?;
    let query = model.pair_embeddings(std::slice::from_ref(comp))?;
    Ok(rank_by_cosine(query.row(0), &emb, top_n)?
        .into_iter()
        .enumerate()
        .map(|(r, h)| ImageHit { rank: r + 1, image_id: ids[h.index].to_string(), score: h.score })
        .collect())
}
