//! The full model: word side, image side, both disentangling branches, and
//! the batched training objective over triplets.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::autograd::{BatchStats, Graph, Var};
use crate::config::ModelConfig;
use crate::data::RawImageFeatures;
use crate::disentangle::{DisentangleParams, SharedKind, Supervision};
use crate::error::{Error, Result};
use crate::features::{orthogonal_penalty_var, ExtractorParams, Mode};
use crate::losses::{
    attribute_loss, composition_loss, object_loss, weighted_total, AlignSpace, Candidates, PairTerms, NORM_EPS,
};
use crate::nn::{join, ParamMut, ParamRef, Parameters, Rng};
use crate::tensor::Matrix;
use crate::vocab::{Composition, EmbeddingTable, ProjectionParams, Vocabulary, WordId};

#[derive(Clone, Debug, PartialEq)]
pub struct TridentModel {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub table: EmbeddingTable,
    pub projection: ProjectionParams,
    pub extractor: ExtractorParams,
    /// Branch for attribute-sharing pairs (main, same-attribute companion).
    pub attr_branch: DisentangleParams,
    /// Branch for object-sharing pairs (main, same-object companion).
    pub obj_branch: DisentangleParams,
}

/// One triplet's images and labels, in the order main, same-attribute
/// companion, same-object companion.
#[derive(Clone, Copy, Debug)]
pub struct TripletInput<'d> {
    pub images: [&'d RawImageFeatures; 3],
    pub labels: [&'d Composition; 3],
}

/// Seen compositions as the composition loss's candidate axis.
#[derive(Clone, Debug)]
pub struct SeenPairs {
    pub pairs: Vec<Composition>,
    ids: Vec<(WordId, WordId)>,
    index: BTreeMap<Composition, usize>,
}

impl SeenPairs {
    pub fn new(vocab: &Vocabulary, pairs: &[Composition]) -> Result<Self> {
        let ids = pairs.iter().map(|c| vocab.pair_ids(c)).collect::<Result<Vec<_>>>()?;
        let index = pairs.iter().enumerate().map(|(i, c)| (c.clone(), i)).collect();
        Ok(Self { pairs: pairs.to_vec(), ids, index })
    }

    pub fn column(&self, c: &Composition) -> Result<usize> {
        self.index.get(c).copied().ok_or_else(|| Error::InvalidTargets(format!("\"{c}\" is not a seen composition")))
    }
}

/// Graph outputs of one batch. Component losses are means over triplets.
pub struct BatchOutput {
    pub total: Var,
    pub ortho: Option<Var>,
    pub comp: Option<Var>,
    pub attr: Option<Var>,
    pub obj: Option<Var>,
    pub stats: Option<BatchStats>,
}

impl TridentModel {
    pub fn new(config: ModelConfig, vocab: Vocabulary, table: EmbeddingTable, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        if table.len() != vocab.len() || table.dim() != config.word_embedding_dim {
            return Err(Error::Config(format!(
                "embedding table is {} x {}, expected {} x {}",
                table.len(),
                table.dim(),
                vocab.len(),
                config.word_embedding_dim
            )));
        }
        let projection = ProjectionParams::init(&config, rng);
        let extractor = ExtractorParams::init(&config, rng);
        let attr_branch = DisentangleParams::init(&config, rng);
        let obj_branch = DisentangleParams::init(&config, rng);
        Ok(Self { config, vocab, table, projection, extractor, attr_branch, obj_branch })
    }

    /// Non-trainable state saved alongside the parameters.
    pub fn buffers(&self) -> Vec<(String, &Matrix)> {
        let n = &self.extractor.norm;
        alloc::vec![
            (String::from("extractor.norm.running_mean"), &n.running_mean),
            (String::from("extractor.norm.running_var"), &n.running_var),
        ]
    }

    pub fn buffers_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let n = &mut self.extractor.norm;
        alloc::vec![
            (String::from("extractor.norm.running_mean"), &mut n.running_mean),
            (String::from("extractor.norm.running_var"), &mut n.running_var),
        ]
    }

    fn table_var<'a>(&'a self, g: &mut Graph<'a>) -> Var {
        if self.table.trainable {
            g.param(&self.table.rows)
        } else {
            g.constant_ref(&self.table.rows)
        }
    }

    /// Training objective over a batch of triplets.
    pub fn forward_batch<'a>(
        &'a self,
        g: &mut Graph<'a>,
        batch: &[TripletInput<'_>],
        seen: &SeenPairs,
        mode: Mode,
        rng: Option<&mut Rng>,
    ) -> Result<BatchOutput> {
        if batch.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        let c = &self.config;
        let scale = c.logit_scale();
        let inv_b = 1.0 / batch.len() as f64;
        let table = self.table_var(g);

        let images: Vec<&RawImageFeatures> = batch.iter().flat_map(|t| t.images).collect();
        let feats = self.extractor.forward_images(g, &images)?;
        let (comps, stats) = self.extractor.embed_images(g, &feats, mode, rng);

        let ortho = if c.ablations.ortho {
            let pens: Vec<Var> = feats.iter().map(|f| orthogonal_penalty_var(g, f.stacked)).collect();
            let all = g.concat_rows(&pens);
            let s = g.sum(all);
            Some(g.scale(s, inv_b))
        } else {
            None
        };

        let labels = batch.iter().flat_map(|t| t.labels).map(|l| seen.column(l)).collect::<Result<Vec<_>>>()?;
        let pair_emb = self.projection.pair_embeddings(g, table, &seen.ids);
        let pair_emb = g.row_normalize(pair_emb, NORM_EPS);
        let comp = composition_loss(g, comps, pair_emb, &labels, scale)?;
        let comp = Some(g.scale(comp, inv_b));

        let (attr, obj) = if c.ablations.disentangle_losses {
            let (a, o) = self.disentangle_losses(g, table, batch, &feats)?;
            (Some(g.scale(a, inv_b)), Some(g.scale(o, inv_b)))
        } else {
            (None, None)
        };
        let total = weighted_total(g, [ortho, comp, attr, obj], &c.loss_weights);
        Ok(BatchOutput { total, ortho, comp, attr, obj, stats })
    }

    fn disentangle_losses<'a>(
        &'a self,
        g: &mut Graph<'a>,
        table: Var,
        batch: &[TripletInput<'_>],
        feats: &[crate::features::ImageVars],
    ) -> Result<(Var, Var)> {
        let c = &self.config;
        let words = self.projection.word_embeddings(g, table);
        let (attr_candidates, obj_candidates, attr_words, obj_words) = if c.ablations.word_expanding {
            let all = Candidates::new((0..self.vocab.len()).map(WordId).collect());
            let w = g.row_normalize(words, NORM_EPS);
            (all.clone(), all, w, w)
        } else {
            let ad = self.vocab.attribute_domain();
            let od = self.vocab.object_domain();
            let aw = g.gather_rows(words, &ad.iter().map(|w| w.0).collect::<Vec<_>>());
            let ow = g.gather_rows(words, &od.iter().map(|w| w.0).collect::<Vec<_>>());
            let aw = g.row_normalize(aw, NORM_EPS);
            let ow = g.row_normalize(ow, NORM_EPS);
            (Candidates::new(ad), Candidates::new(od), aw, ow)
        };
        let space = AlignSpace {
            vocab: &self.vocab,
            attr_candidates,
            obj_candidates,
            attr_words,
            obj_words,
            smoothing: c.effective_smoothing(),
            scale: c.logit_scale(),
        };
        let stacked = |i: usize| feats[i].stacked;
        let attr_pairs: Vec<(Var, Var)> = (0..batch.len()).map(|b| (stacked(3 * b), stacked(3 * b + 1))).collect();
        let obj_pairs: Vec<(Var, Var)> = (0..batch.len()).map(|b| (stacked(3 * b), stacked(3 * b + 2))).collect();
        let attr_vars = self.attr_branch.forward(g, &attr_pairs);
        let obj_vars = self.obj_branch.forward(g, &obj_pairs);
        let mut attr_terms = Vec::with_capacity(batch.len());
        let mut obj_terms = Vec::with_capacity(batch.len());
        for (b, t) in batch.iter().enumerate() {
            let [m, a, o] = t.labels;
            let ap = PairTerms {
                vars: attr_vars[b],
                supervision: Supervision::new(&self.vocab, SharedKind::Attribute, m, a)?,
                x: m,
                y: a,
            };
            let op = PairTerms {
                vars: obj_vars[b],
                supervision: Supervision::new(&self.vocab, SharedKind::Object, m, o)?,
                x: m,
                y: o,
            };
            attr_terms.push(attribute_loss(g, &space, &ap, &op)?);
            obj_terms.push(object_loss(g, &space, &ap, &op)?);
        }
        let a = g.concat_rows(&attr_terms);
        let a = g.sum(a);
        let o = g.concat_rows(&obj_terms);
        let o = g.sum(o);
        Ok((a, o))
    }

    /// Evaluation-mode composition embeddings, one row per image.
    pub fn image_embeddings(&self, images: &[&RawImageFeatures]) -> Result<Matrix> {
        self.extractor.embed_batch(images)
    }

    /// Composition embeddings of `pairs`, one row each.
    pub fn pair_embeddings(&self, pairs: &[Composition]) -> Result<Matrix> {
        let mut out = Matrix::zeros(pairs.len(), self.config.comp_dim);
        for (i, c) in pairs.iter().enumerate() {
            let (a, o) = self.vocab.pair_ids(c)?;
            let e = crate::vocab::embed_pair(&self.table, &self.projection, a, o)?;
            out.row_mut(i).copy_from_slice(&e);
        }
        Ok(out)
    }
}

impl Parameters for TridentModel {
    fn params<'p>(&'p self, prefix: &str, out: &mut Vec<ParamRef<'p>>) {
        self.table.params(&join(prefix, "table"), out);
        self.projection.params(&join(prefix, "projection"), out);
        self.extractor.params(&join(prefix, "extractor"), out);
        self.attr_branch.params(&join(prefix, "attr_branch"), out);
        self.obj_branch.params(&join(prefix, "obj_branch"), out);
    }

    fn params_mut<'p>(&'p mut self, prefix: &str, out: &mut Vec<ParamMut<'p>>) {
        self.table.params_mut(&join(prefix, "table"), out);
        self.projection.params_mut(&join(prefix, "projection"), out);
        self.extractor.params_mut(&join(prefix, "extractor"), out);
        self.attr_branch.params_mut(&join(prefix, "attr_branch"), out);
        self.obj_branch.params_mut(&join(prefix, "obj_branch"), out);
    }
}
