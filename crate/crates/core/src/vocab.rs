//! Word vocabulary (attributes ∪ objects ∪ auxiliary attributes), the word
//! embedding table, and the projections into the joint spaces.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{join, Linear, Mlp, ParamMeta, ParamMut, ParamRef, Parameters, Rng};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WordId(pub usize);

/// An attribute-object pair.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Composition {
    pub attribute: String,
    pub object: String,
}

impl Composition {
    pub fn new(attribute: impl Into<String>, object: impl Into<String>) -> Self {
        Self { attribute: attribute.into(), object: object.into() }
    }

    /// `"attribute object"`, the key used by the auxiliary cache file.
    pub fn key(&self) -> String {
        format!("{} {}", self.attribute, self.object)
    }
}

impl fmt::Display for Composition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.attribute, self.object)
    }
}

/// Case-folded lookup key.
pub fn fold(word: &str) -> String {
    word.trim().to_lowercase()
}

/// Multi-word adjectives become a single hyphen-joined vocabulary entry.
pub fn canonical_aux(word: &str) -> String {
    word.split_whitespace().collect::<Vec<_>>().join("-")
}

/// Serializable description from which a [`Vocabulary`] is rebuilt.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VocabularySpec {
    pub attributes: Vec<String>,
    pub objects: Vec<String>,
    pub aux_count: usize,
    pub aux: Vec<(Composition, Vec<String>)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    attributes: Vec<String>,
    objects: Vec<String>,
    auxiliary: Vec<String>,
    words: Vec<String>,
    index: BTreeMap<String, WordId>,
    aux_of: BTreeMap<Composition, Vec<String>>,
    aux_count: usize,
}

impl Vocabulary {
    fn insert(&mut self, word: &str) -> (WordId, bool) {
        let key = fold(word);
        if let Some(id) = self.index.get(&key) {
            return (*id, false);
        }
        let id = WordId(self.words.len());
        self.words.push(word.trim().to_string());
        self.index.insert(key, id);
        (id, true)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn attributes(&self) -> &[String] {
        &self.attributes
    }

    pub fn objects(&self) -> &[String] {
        &self.objects
    }

    /// Auxiliary words that did not already exist as attributes or objects.
    pub fn auxiliary(&self) -> &[String] {
        &self.auxiliary
    }

    pub fn aux_count(&self) -> usize {
        self.aux_count
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> Option<WordId> {
        self.index.get(&fold(word)).copied()
    }

    pub fn id_or_err(&self, word: &str) -> Result<WordId> {
        self.id(word).ok_or_else(|| Error::UnknownWord(word.to_string()))
    }

    pub fn word(&self, id: WordId) -> Option<&str> {
        self.words.get(id.0).map(String::as_str)
    }

    pub fn aux_of(&self, comp: &Composition) -> Option<&[String]> {
        self.aux_of.get(comp).map(Vec::as_slice)
    }

    pub fn aux_entries(&self) -> impl Iterator<Item = (&Composition, &[String])> {
        self.aux_of.iter().map(|(c, w)| (c, w.as_slice()))
    }

    /// Word ids of the auxiliary attributes of `comp`.
    pub fn aux_ids(&self, comp: &Composition) -> Result<Vec<WordId>> {
        let words = self.aux_of.get(comp).ok_or_else(|| Error::CacheMiss(comp.key()))?;
        words.iter().map(|w| self.id_or_err(w)).collect()
    }

    pub fn pair_ids(&self, comp: &Composition) -> Result<(WordId, WordId)> {
        Ok((self.id_or_err(&comp.attribute)?, self.id_or_err(&comp.object)?))
    }

    /// Candidate ids for attribute features when word expanding is off.
    pub fn attribute_domain(&self) -> Vec<WordId> {
        let mut ids: BTreeSet<WordId> = self.attributes.iter().filter_map(|w| self.id(w)).collect();
        for words in self.aux_of.values() {
            ids.extend(words.iter().filter_map(|w| self.id(w)));
        }
        ids.into_iter().collect()
    }

    /// Candidate ids for object features when word expanding is off.
    pub fn object_domain(&self) -> Vec<WordId> {
        let ids: BTreeSet<WordId> = self.objects.iter().filter_map(|w| self.id(w)).collect();
        ids.into_iter().collect()
    }

    pub fn spec(&self) -> VocabularySpec {
        VocabularySpec {
            attributes: self.attributes.clone(),
            objects: self.objects.clone(),
            aux_count: self.aux_count,
            aux: self.aux_of.iter().map(|(c, w)| (c.clone(), w.clone())).collect(),
        }
    }

    pub fn from_spec(spec: &VocabularySpec) -> Result<Self> {
        let map: BTreeMap<Composition, Vec<String>> = spec.aux.iter().cloned().collect();
        build_vocabulary(&spec.attributes, &spec.objects, &map, spec.aux_count)
    }
}

/// Builds `Y = A ∪ O ∪ A_a` with ids assigned in that order.
///
/// Words are deduplicated case-insensitively; an auxiliary word that already
/// names an attribute or object reuses its id.
pub fn build_vocabulary(
    attributes: &[String],
    objects: &[String],
    aux_map: &BTreeMap<Composition, Vec<String>>,
    aux_count: usize,
) -> Result<Vocabulary> {
    if attributes.is_empty() || objects.is_empty() {
        return Err(Error::Config("attribute and object lists must be non-empty".into()));
    }
    let mut v = Vocabulary {
        attributes: Vec::new(),
        objects: Vec::new(),
        auxiliary: Vec::new(),
        words: Vec::new(),
        index: BTreeMap::new(),
        aux_of: BTreeMap::new(),
        aux_count,
    };
    let mut seen_attr = BTreeSet::new();
    for a in attributes {
        if seen_attr.insert(fold(a)) {
            v.attributes.push(a.trim().to_string());
            v.insert(a);
        }
    }
    let mut seen_obj = BTreeSet::new();
    for o in objects {
        if seen_obj.insert(fold(o)) {
            v.objects.push(o.trim().to_string());
            v.insert(o);
        }
    }
    for (comp, words) in aux_map {
        if words.len() != aux_count {
            return Err(Error::Config(format!(
                "\"{comp}\" has {} auxiliary attributes, expected {aux_count}",
                words.len()
            )));
        }
        let mut entry = Vec::with_capacity(words.len());
        let mut keys = BTreeSet::new();
        for w in words {
            let canon = canonical_aux(w);
            if canon.is_empty() {
                return Err(Error::Config(format!("empty auxiliary attribute for \"{comp}\"")));
            }
            if fold(&canon) == fold(&comp.attribute) {
                return Err(Error::AuxRepeatsAttribute {
                    attribute: comp.attribute.clone(),
                    object: comp.object.clone(),
                    word: w.clone(),
                });
            }
            if !keys.insert(fold(&canon)) {
                return Err(Error::Config(format!("duplicate auxiliary attribute {w:?} for \"{comp}\"")));
            }
            entry.push(canon);
        }
        v.aux_of.insert(comp.clone(), entry);
    }
    let aux_words: Vec<String> = v.aux_of.values().flatten().cloned().collect();
    for w in aux_words {
        let (_, fresh) = v.insert(&w);
        if fresh {
            v.auxiliary.push(w);
        }
    }
    Ok(v)
}

/// One embedding row per vocabulary word.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub rows: Matrix,
    /// Rows are fine-tuned (at the embedding learning rate) when set.
    pub trainable: bool,
}

impl EmbeddingTable {
    pub fn new(rows: Matrix) -> Result<Self> {
        if !rows.is_finite() {
            return Err(Error::NumericalDomain("embedding table has non-finite values".into()));
        }
        Ok(Self { rows, trainable: true })
    }

    pub fn dim(&self) -> usize {
        self.rows.cols()
    }

    pub fn len(&self) -> usize {
        self.rows.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.rows() == 0
    }

    pub fn row(&self, id: WordId) -> Result<&[f64]> {
        if id.0 >= self.rows.rows() {
            return Err(Error::UnknownWordId(id.0));
        }
        Ok(self.rows.row(id.0))
    }
}

impl Parameters for EmbeddingTable {
    fn params<'p>(&'p self, prefix: &str, out: &mut Vec<ParamRef<'p>>) {
        out.push(ParamRef { name: join(prefix, "rows"), meta: ParamMeta::EMBEDDING, value: &self.rows });
    }

    fn params_mut<'p>(&'p mut self, prefix: &str, out: &mut Vec<ParamMut<'p>>) {
        out.push(ParamMut { name: join(prefix, "rows"), meta: ParamMeta::EMBEDDING, value: &mut self.rows });
    }
}

/// What an embedding provider returns for one word.
#[derive(Clone, Debug, PartialEq)]
pub enum HiddenStates {
    /// Token-wise last hidden states, `z × d_m`.
    Tokens(Matrix),
    /// Already pooled `d_m` vector.
    Pooled(Vec<f64>),
}

pub trait EmbeddingProvider {
    fn hidden_states(&self, word: &str) -> core::result::Result<HiddenStates, String>;
}

/// Average over tokens.
pub fn mean_pool_tokens(tokens: &Matrix) -> Result<Vec<f64>> {
    if tokens.rows() == 0 {
        return Err(Error::Shape("no token states to pool".into()));
    }
    Ok(tokens.mean_rows().into_vec())
}

/// Fills one row per vocabulary word from `provider`, retrying each word up
/// to `attempts` times. Words that never succeed are reported together.
pub fn import_embeddings(
    provider: &dyn EmbeddingProvider,
    vocab: &Vocabulary,
    dim: usize,
    attempts: usize,
) -> Result<EmbeddingTable> {
    let mut rows = Matrix::zeros(vocab.len(), dim);
    let mut missing = Vec::new();
    for (i, word) in vocab.words().iter().enumerate() {
        let mut row = None;
        for _ in 0..attempts.max(1) {
            match provider.hidden_states(word) {
                Ok(HiddenStates::Tokens(t)) if t.cols() == dim && t.rows() > 0 => {
                    row = Some(mean_pool_tokens(&t)?);
                    break;
                }
                Ok(HiddenStates::Pooled(p)) if p.len() == dim => {
                    row = Some(p);
                    break;
                }
                Ok(_) | Err(_) => continue,
            }
        }
        match row {
            Some(r) => rows.row_mut(i).copy_from_slice(&r),
            None => missing.push(word.clone()),
        }
    }
    if !missing.is_empty() {
        return Err(Error::Provider(format!("no embeddings for words: {}", missing.join(", "))));
    }
    EmbeddingTable::new(rows)
}

/// Word MLP into the joint word space and pair linear into the composition space.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionParams {
    pub word_mlp: Mlp,
    pub pair_linear: Linear,
}

impl ProjectionParams {
    pub fn init(config: &ModelConfig, rng: &mut Rng) -> Self {
        let dm = config.word_embedding_dim;
        Self {
            word_mlp: Mlp::init(dm, &config.word_mlp_hidden, config.word_dim, rng),
            pair_linear: Linear::init(2 * dm, config.comp_dim, rng),
        }
    }

    /// Projects every row of the table: `|Y| × D_w`.
    pub fn word_embeddings<'a>(&'a self, g: &mut Graph<'a>, table: Var) -> Var {
        self.word_mlp.forward(g, table)
    }

    /// Composition embeddings for `pairs`, one row each: `len × D_c`.
    pub fn pair_embeddings<'a>(&'a self, g: &mut Graph<'a>, table: Var, pairs: &[(WordId, WordId)]) -> Var {
        let attrs: Vec<usize> = pairs.iter().map(|p| p.0 .0).collect();
        let objs: Vec<usize> = pairs.iter().map(|p| p.1 .0).collect();
        let a = g.gather_rows(table, &attrs);
        let o = g.gather_rows(table, &objs);
        let cat = g.concat_cols(&[a, o]);
        self.pair_linear.forward(g, cat)
    }
}

impl Parameters for ProjectionParams {
    fn params<'p>(&'p self, prefix: &str, out: &mut Vec<ParamRef<'p>>) {
        self.word_mlp.params(&join(prefix, "word_mlp"), out);
        self.pair_linear.params(&join(prefix, "pair_linear"), out);
    }

    fn params_mut<'p>(&'p mut self, prefix: &str, out: &mut Vec<ParamMut<'p>>) {
        self.word_mlp.params_mut(&join(prefix, "word_mlp"), out);
        self.pair_linear.params_mut(&join(prefix, "pair_linear"), out);
    }
}

/// Joint-space embedding of a single word.
pub fn embed_word(table: &EmbeddingTable, proj: &ProjectionParams, id: WordId) -> Result<Vec<f64>> {
    let row = Matrix::row_vector(table.row(id)?.to_vec());
    check_width(proj.word_mlp.input_dim(), row.cols())?;
    Ok(proj.word_mlp.apply(&row).into_vec())
}

/// Composition embedding of `(attribute, object)`.
pub fn embed_pair(table: &EmbeddingTable, proj: &ProjectionParams, attribute: WordId, object: WordId) -> Result<Vec<f64>> {
    let mut cat = table.row(attribute)?.to_vec();
    cat.extend_from_slice(table.row(object)?);
    check_width(proj.pair_linear.input_dim(), cat.len())?;
    Ok(proj.pair_linear.apply(&Matrix::row_vector(cat)).into_vec())
}

fn check_width(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Shape(format!("projection expects width {expected}, got {got}")));
    }
    Ok(())
}
