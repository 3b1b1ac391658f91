//! Cosine-softmax classification against word and composition embeddings,
//! smoothed targets, and the four training losses.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autograd::{log_sum_exp, Graph, Var};
use crate::config::LossWeights;
use crate::disentangle::{PairVars, Supervision};
use crate::error::{Error, Result};
use crate::tensor::{l2_norm, Matrix};
use crate::vocab::{Composition, Vocabulary, WordId};

/// Norm floor used when normalizing rows inside the graph.
pub const NORM_EPS: f64 = 1e-12;

fn cosine_logits_plain(f: &[f64], candidates: &Matrix, scale: f64) -> Result<Vec<f64>> {
    if candidates.rows() == 0 {
        return Err(Error::EmptyCandidates);
    }
    let nf = l2_norm(f);
    if nf == 0.0 {
        return Err(Error::NumericalDomain("feature vector has zero norm".into()));
    }
    (0..candidates.rows())
        .map(|j| {
            let row = candidates.row(j);
            let nc = l2_norm(row);
            if nc == 0.0 {
                return Err(Error::NumericalDomain(format!("candidate {j} has zero norm")));
            }
            Ok(scale * crate::tensor::dot(f, row) / (nf * nc))
        })
        .collect()
}

/// Softmax over `scale · cos(f, e_j)`.
pub fn classifier_distribution(f: &[f64], candidates: &Matrix, scale: f64) -> Result<Vec<f64>> {
    let logits = cosine_logits_plain(f, candidates, scale)?;
    let lse = log_sum_exp(&logits);
    Ok(logits.iter().map(|l| libm::exp(l - lse)).collect())
}

/// `1 − α` on the ground truth and `α / t` on each auxiliary index.
pub fn smoothed_targets(size: usize, gt: usize, aux: &[usize], alpha: f64) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::InvalidTargets(format!("smoothing {alpha} outside [0, 1)")));
    }
    if gt >= size || aux.iter().any(|&a| a >= size) {
        return Err(Error::InvalidTargets(format!("target index out of range for {size} candidates")));
    }
    if aux.contains(&gt) {
        return Err(Error::InvalidTargets("ground truth appears among its auxiliary words".into()));
    }
    let mut z = vec![0.0; size];
    z[gt] = 1.0;
    if alpha == 0.0 {
        return Ok(z);
    }
    if aux.is_empty() {
        return Err(Error::InvalidTargets("smoothing needs at least one auxiliary word".into()));
    }
    let share = alpha / aux.len() as f64;
    for &a in aux {
        if z[a] != 0.0 {
            return Err(Error::InvalidTargets("auxiliary words must be distinct".into()));
        }
        z[a] = share;
    }
    z[gt] = 1.0 - alpha;
    Ok(z)
}

/// `−Σ z_j log p_j` with `p` from [`classifier_distribution`].
pub fn cross_entropy(f: &[f64], targets: &[f64], candidates: &Matrix, scale: f64) -> Result<f64> {
    if targets.len() != candidates.rows() {
        return Err(Error::InvalidTargets(format!("{} targets for {} candidates", targets.len(), candidates.rows())));
    }
    let logits = cosine_logits_plain(f, candidates, scale)?;
    let lse = log_sum_exp(&logits);
    Ok(targets.iter().zip(&logits).filter(|(z, _)| **z != 0.0).map(|(z, l)| -z * (l - lse)).sum())
}

/// `scale · normalize(feats) · candidatesᵀ`, with candidates already normalized.
pub fn cosine_logits(g: &mut Graph<'_>, feats: Var, normalized_candidates: Var, scale: f64) -> Var {
    let f = g.row_normalize(feats, NORM_EPS);
    let cos = g.matmul_nt(f, normalized_candidates);
    g.scale(cos, scale)
}

/// Sum of cross-entropies of each feature row against its target row.
pub fn aligned_cross_entropy(
    g: &mut Graph<'_>,
    feats: &[Var],
    targets: Vec<Vec<f64>>,
    normalized_candidates: Var,
    scale: f64,
) -> Var {
    let x = g.concat_rows(feats);
    let logits = cosine_logits(g, x, normalized_candidates, scale);
    let cols = g.value(normalized_candidates).rows();
    let rows = targets.len();
    let data: Vec<f64> = targets.into_iter().flatten().collect();
    g.softmax_cross_entropy(logits, Matrix::from_vec(rows, cols, data))
}

/// A candidate axis over vocabulary words.
#[derive(Clone, Debug)]
pub struct Candidates {
    pub ids: Vec<WordId>,
    column: BTreeMap<WordId, usize>,
}

impl Candidates {
    pub fn new(ids: Vec<WordId>) -> Self {
        let column = ids.iter().enumerate().map(|(i, &w)| (w, i)).collect();
        Self { ids, column }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn column(&self, id: WordId) -> Result<usize> {
        self.column.get(&id).copied().ok_or(Error::UnknownWordId(id.0))
    }
}

/// Word-side context shared by the attribute and object losses.
pub struct AlignSpace<'v> {
    pub vocab: &'v Vocabulary,
    pub attr_candidates: Candidates,
    pub obj_candidates: Candidates,
    /// Normalized projected embeddings of `attr_candidates`.
    pub attr_words: Var,
    /// Normalized projected embeddings of `obj_candidates`.
    pub obj_words: Var,
    pub smoothing: f64,
    pub scale: f64,
}

impl AlignSpace<'_> {
    fn attr_target(&self, gt: WordId, source: &Composition) -> Result<Vec<f64>> {
        let size = self.attr_candidates.len();
        let gt = self.attr_candidates.column(gt)?;
        if self.smoothing == 0.0 {
            return smoothed_targets(size, gt, &[], 0.0);
        }
        let aux = self
            .vocab
            .aux_ids(source)?
            .into_iter()
            .map(|id| self.attr_candidates.column(id))
            .collect::<Result<Vec<_>>>()?;
        smoothed_targets(size, gt, &aux, self.smoothing)
    }

    fn obj_target(&self, gt: WordId) -> Result<Vec<f64>> {
        smoothed_targets(self.obj_candidates.len(), self.obj_candidates.column(gt)?, &[], 0.0)
    }
}

/// Features and labels of one disentangled pair inside the graph.
#[derive(Clone, Copy, Debug)]
pub struct PairTerms<'c> {
    pub vars: PairVars,
    pub supervision: Supervision,
    pub x: &'c Composition,
    pub y: &'c Composition,
}

/// Smoothed cross-entropies of the four relative attribute features plus a
/// one-hot term on the fused shared attribute. Smoothing mass goes to the
/// auxiliary words of the composition each feature was pooled from.
pub fn attribute_loss(g: &mut Graph<'_>, space: &AlignSpace<'_>, attr_pair: &PairTerms<'_>, obj_pair: &PairTerms<'_>) -> Result<Var> {
    let feats = [
        attr_pair.vars.shared_x2y,
        attr_pair.vars.shared_y2x,
        obj_pair.vars.excl_x2y,
        obj_pair.vars.excl_y2x,
        attr_pair.vars.fused,
    ];
    let fused = smoothed_targets(space.attr_candidates.len(), space.attr_candidates.column(attr_pair.supervision.shared)?, &[], 0.0)?;
    let targets = vec![
        space.attr_target(attr_pair.supervision.shared, attr_pair.y)?,
        space.attr_target(attr_pair.supervision.shared, attr_pair.x)?,
        space.attr_target(obj_pair.supervision.excl_x2y, obj_pair.y)?,
        space.attr_target(obj_pair.supervision.excl_y2x, obj_pair.x)?,
        fused,
    ];
    Ok(aligned_cross_entropy(g, &feats, targets, space.attr_words, space.scale))
}

/// One-hot cross-entropies of the four relative object features plus the
/// fused shared object.
pub fn object_loss(g: &mut Graph<'_>, space: &AlignSpace<'_>, attr_pair: &PairTerms<'_>, obj_pair: &PairTerms<'_>) -> Result<Var> {
    let feats = [
        obj_pair.vars.shared_x2y,
        obj_pair.vars.shared_y2x,
        attr_pair.vars.excl_x2y,
        attr_pair.vars.excl_y2x,
        obj_pair.vars.fused,
    ];
    let targets = vec![
        space.obj_target(obj_pair.supervision.shared)?,
        space.obj_target(obj_pair.supervision.shared)?,
        space.obj_target(attr_pair.supervision.excl_x2y)?,
        space.obj_target(attr_pair.supervision.excl_y2x)?,
        space.obj_target(obj_pair.supervision.shared)?,
    ];
    Ok(aligned_cross_entropy(g, &feats, targets, space.obj_words, space.scale))
}

/// One-hot cross-entropy of each composition embedding row against the
/// seen-pair embeddings; `labels[i]` is the column of row `i`.
pub fn composition_loss(g: &mut Graph<'_>, comps: Var, normalized_pairs: Var, labels: &[usize], scale: f64) -> Result<Var> {
    let cols = g.value(normalized_pairs).rows();
    if cols == 0 {
        return Err(Error::EmptyCandidates);
    }
    if labels.len() != g.value(comps).rows() {
        return Err(Error::Shape(format!("{} labels for {} embeddings", labels.len(), g.value(comps).rows())));
    }
    let mut z = Matrix::zeros(labels.len(), cols);
    for (i, &l) in labels.iter().enumerate() {
        if l >= cols {
            return Err(Error::InvalidTargets(format!("label {l} is not a seen composition")));
        }
        z.set(i, l, 1.0);
    }
    let logits = cosine_logits(g, comps, normalized_pairs, scale);
    Ok(g.softmax_cross_entropy(logits, z))
}

/// Per-component losses and their weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ortho: f64,
    pub comp: f64,
    pub attr: f64,
    pub obj: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.ortho, self.comp, self.attr, self.obj, self.total].iter().all(|x| x.is_finite())
    }
}

/// `γ_ortho·ortho + γ_comp·comp + γ_attr·attr + γ_obj·obj`.
pub fn total_loss(ortho: f64, comp: f64, attr: f64, obj: f64, w: &LossWeights) -> Result<LossBreakdown> {
    let b = LossBreakdown {
        ortho,
        comp,
        attr,
        obj,
        total: w.ortho * ortho + w.comp * comp + w.attr * attr + w.obj * obj,
    };
    if !b.is_finite() {
        return Err(Error::NumericalDomain(format!("non-finite loss component: {b:?}")));
    }
    Ok(b)
}

/// Graph form of [`total_loss`].
pub fn weighted_total(g: &mut Graph<'_>, parts: [Option<Var>; 4], w: &LossWeights) -> Var {
    let weights = [w.ortho, w.comp, w.attr, w.obj];
    let mut total: Option<Var> = None;
    for (p, &wt) in parts.iter().zip(&weights) {
        let Some(p) = *p else { continue };
        let term = g.scale(p, wt);
        total = Some(match total {
            Some(t) => g.add(t, term),
            None => term,
        });
    }
    total.unwrap_or_else(|| g.constant(Matrix::zeros(1, 1)))
}
