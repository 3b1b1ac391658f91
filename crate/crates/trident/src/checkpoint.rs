//! Checkpoint container `TRIC1`: magic, `u32` header length, a JSON header,
//! then `f32` payloads for parameters, both Adam moments and buffers, each
//! in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use trident_core::config::ModelConfig;
use trident_core::model::TridentModel;
use trident_core::nn::{stream_rng, Parameters};
use trident_core::tensor::Matrix;
use trident_core::train::{check_layout, AdamState, TrainState};
use trident_core::vocab::{EmbeddingTable, Vocabulary, VocabularySpec};

use crate::error::{Error, Result};
use crate::formats::{put_f32s, put_u32, write_file, Reader};
use crate::providers::sha256_hex;

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"TRIC1\0";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

/// Where the next epoch's random stream starts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub epoch: usize,
    pub seed: u64,
    pub rng: RngState,
    pub config_hash: String,
    pub model: ModelConfig,
    pub vocabulary: VocabularySpec,
    pub embeddings_trainable: bool,
    pub adam_step: u64,
    pub params: Vec<TensorInfo>,
    pub buffers: Vec<TensorInfo>,
}

/// SHA-256 of the model configuration's JSON form.
pub fn config_hash(config: &ModelConfig) -> String {
    sha256_hex(serde_json::to_string(config).expect("config serializes").as_bytes())
}

pub fn encode(state: &TrainState) -> std::result::Result<Vec<u8>, String> {
    let model = &state.model;
    let mut params = Vec::new();
    model.params("", &mut params);
    let buffers = model.buffers();
    let info = |name: &str, m: &Matrix| TensorInfo { name: name.to_string(), rows: m.rows(), cols: m.cols() };
    let header = CheckpointHeader {
        epoch: state.epoch,
        seed: state.seed,
        rng: RngState { seed: state.seed, stream: state.epoch as u64 + 1 },
        config_hash: config_hash(&model.config),
        model: model.config.clone(),
        vocabulary: model.vocab.spec(),
        embeddings_trainable: model.table.trainable,
        adam_step: state.optimizer.step,
        params: params.iter().map(|p| info(&p.name, p.value)).collect(),
        buffers: buffers.iter().map(|(n, m)| info(n, m)).collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| e.to_string())?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, json.len(), "header length")?;
    out.extend_from_slice(&json);
    for p in &params {
        put_f32s(&mut out, p.value.as_slice());
    }
    for m in state.optimizer.m.iter().chain(&state.optimizer.v) {
        put_f32s(&mut out, m.as_slice());
    }
    for (_, b) in &buffers {
        put_f32s(&mut out, b.as_slice());
    }
    Ok(out)
}

pub fn save(path: &Path, state: &TrainState) -> Result<()> {
    let bytes = encode(state).map_err(|m| Error::format(path, m))?;
    write_file(path, &bytes)
}

/// Header only; cheap enough for inspection.
pub fn read_header(path: &Path) -> Result<CheckpointHeader> {
    let bytes = fs::read(path).map_err(|e| Error::read(path, e))?;
    let mut r = Reader::new(&bytes);
    let h = (|| {
        r.magic(CHECKPOINT_MAGIC)?;
        let n = r.u32("header length")?;
        serde_json::from_slice::<CheckpointHeader>(r.take(n, "header")?).map_err(|e| format!("bad header: {e}"))
    })();
    h.map_err(|m| Error::format(path, m))
}

/// Restores a training state. With `expected` set, a checkpoint whose model
/// configuration hashes differently is refused unless `force` is true.
pub fn load(path: &Path, expected: Option<&ModelConfig>, force: bool) -> Result<TrainState> {
    let bytes = fs::read(path).map_err(|e| Error::read(path, e))?;
    let fmt = |m: String| Error::format(path, m);
    let mut r = Reader::new(&bytes);
    r.magic(CHECKPOINT_MAGIC).map_err(fmt)?;
    let n = r.u32("header length").map_err(fmt)?;
    let header: CheckpointHeader =
        serde_json::from_slice(r.take(n, "header").map_err(fmt)?).map_err(|e| fmt(format!("bad header: {e}")))?;
    if header.config_hash != config_hash(&header.model) {
        return Err(fmt("header hash does not match its own model configuration".into()));
    }
    if let Some(exp) = expected {
        let want = config_hash(exp);
        if want != header.config_hash && !force {
            return Err(Error::ConfigHash { path: path.to_path_buf(), found: header.config_hash, expected: want });
        }
    }

    let vocab = Vocabulary::from_spec(&header.vocabulary)?;
    let table = EmbeddingTable::new(Matrix::zeros(vocab.len(), header.model.word_embedding_dim))?;
    let mut model = TridentModel::new(header.model.clone(), vocab, table, &mut stream_rng(header.seed, 0))?;
    model.table.trainable = header.embeddings_trainable;
    let names: Vec<String> = header.params.iter().map(|t| t.name.clone()).collect();
    let shapes: Vec<(usize, usize)> = header.params.iter().map(|t| (t.rows, t.cols)).collect();
    check_layout(&model, &names, &shapes).map_err(|e| fmt(e.to_string()))?;

    let mut read = |t: &TensorInfo, what: &str| -> Result<Matrix> {
        let v = r.f32s(t.rows * t.cols, &format!("{what} {}", t.name)).map_err(fmt)?;
        Ok(Matrix::from_vec(t.rows, t.cols, v))
    };
    {
        let mut list = Vec::new();
        model.params_mut("", &mut list);
        for (p, t) in list.into_iter().zip(&header.params) {
            *p.value = read(t, "parameter")?;
        }
    }
    let mut m = Vec::new();
    for t in &header.params {
        m.push(read(t, "first moment")?);
    }
    let mut v = Vec::new();
    for t in &header.params {
        v.push(read(t, "second moment")?);
    }
    let expected_buffers: Vec<(String, (usize, usize))> =
        model.buffers().into_iter().map(|(n, b)| (n, b.shape())).collect();
    if expected_buffers.len() != header.buffers.len()
        || expected_buffers.iter().zip(&header.buffers).any(|((n, s), t)| *n != t.name || *s != (t.rows, t.cols))
    {
        return Err(fmt("buffer layout does not match the model".into()));
    }
    let mut bufs = Vec::new();
    for t in &header.buffers {
        bufs.push(read(t, "buffer")?);
    }
    for ((_, dst), src) in model.buffers_mut().into_iter().zip(bufs) {
        *dst = src;
    }
    r.finish().map_err(fmt)?;
    Ok(TrainState {
        model,
        optimizer: AdamState { step: header.adam_step, m, v },
        epoch: header.epoch,
        seed: header.seed,
    })
}
