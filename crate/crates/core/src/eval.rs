//! Generalized evaluation: cosine scores against the phase's candidate
//! compositions, the calibration-bias sweep, and retrieval.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::{DatasetSplit, FeatureStore, Phase, Tag};
use crate::error::{Error, Result};
use crate::model::TridentModel;
use crate::tensor::{cosine, Matrix};
use crate::vocab::Composition;

/// Cosine scores of evaluation images (rows) against candidates (columns).
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix {
    pub scores: Matrix,
    /// Ground-truth column of each row.
    pub gt: Vec<usize>,
    /// Whether each column is an unseen composition.
    pub unseen: Vec<bool>,
}

impl ScoreMatrix {
    pub fn new(scores: Matrix, gt: Vec<usize>, unseen: Vec<bool>) -> Result<Self> {
        if scores.cols() == 0 {
            return Err(Error::EmptyCandidates);
        }
        if gt.len() != scores.rows() || unseen.len() != scores.cols() {
            return Err(Error::Shape(format!(
                "score matrix {:?} with {} labels and {} column tags",
                scores.shape(),
                gt.len(),
                unseen.len()
            )));
        }
        if let Some(&g) = gt.iter().find(|&&g| g >= scores.cols()) {
            return Err(Error::Shape(format!("ground-truth column {g} out of range")));
        }
        Ok(Self { scores, gt, unseen })
    }

    pub fn row_is_unseen(&self, row: usize) -> bool {
        self.unseen[self.gt[row]]
    }
}

/// Cosine similarity of every embedding row with every candidate row.
pub fn score_candidates(embeddings: &Matrix, candidates: &Matrix, gt: Vec<usize>, tags: &[Tag]) -> Result<ScoreMatrix> {
    if candidates.rows() == 0 {
        return Err(Error::EmptyCandidates);
    }
    let mut scores = Matrix::zeros(embeddings.rows(), candidates.rows());
    for i in 0..embeddings.rows() {
        for j in 0..candidates.rows() {
            let c = cosine(embeddings.row(i), candidates.row(j))
                .ok_or_else(|| Error::NumericalDomain(format!("zero-norm vector scoring image {i} against candidate {j}")))?;
            scores.set(i, j, c);
        }
    }
    ScoreMatrix::new(scores, gt, tags.iter().map(|t| t.is_unseen()).collect())
}

/// Top-k correctness of a row as a function of the bias `b` added to every
/// unseen column.
#[derive(Clone, Copy, Debug, PartialEq)]
enum RowRule {
    Always,
    Never,
    /// Seen ground truth: correct while `b < t`.
    Below(f64),
    /// Unseen ground truth: correct once `b > t`.
    Above(f64),
}

impl RowRule {
    fn correct(self, b: f64) -> bool {
        match self {
            RowRule::Always => true,
            RowRule::Never => false,
            RowRule::Below(t) => b < t,
            RowRule::Above(t) => b > t,
        }
    }
}

/// Whether column `j` outranks the ground truth `g` at equal biased score.
fn beats(sj: f64, sg: f64, j: usize, g: usize) -> bool {
    sj > sg || (sj == sg && j < g)
}

fn row_rule(s: &ScoreMatrix, row: usize, k: usize) -> RowRule {
    let g = s.gt[row];
    let scores = s.scores.row(row);
    let sg = scores[g];
    let gt_unseen = s.unseen[g];
    // Competitors that move with the ground truth under the bias keep their
    // relative order; the others cross it at one threshold each.
    let mut fixed_rank = 0;
    let mut movers = Vec::new();
    for (j, &sj) in scores.iter().enumerate() {
        if j == g {
            continue;
        }
        if s.unseen[j] == gt_unseen {
            if beats(sj, sg, j, g) {
                fixed_rank += 1;
            }
        } else {
            movers.push(sj);
        }
    }
    if fixed_rank >= k {
        return RowRule::Never;
    }
    let m = k - fixed_rank;
    if movers.len() < m {
        return RowRule::Always;
    }
    movers.sort_by(|a, b| b.total_cmp(a));
    let mth = movers[m - 1];
    if gt_unseen {
        RowRule::Above(mth - sg)
    } else {
        RowRule::Below(sg - mth)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub bias: f64,
    /// Percent.
    pub seen: f64,
    /// Percent.
    pub unseen: f64,
}

/// Sweep results; every accuracy is in percent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub auc: f64,
    #[serde(rename = "hm")]
    pub best_hm: f64,
    #[serde(rename = "seen")]
    pub best_seen: f64,
    #[serde(rename = "unseen")]
    pub best_unseen: f64,
    pub k: usize,
    pub curve: Vec<CurvePoint>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

pub fn harmonic_mean(s: f64, u: f64) -> f64 {
    if s + u == 0.0 {
        0.0
    } else {
        2.0 * s * u / (s + u)
    }
}

/// Trapezoidal area under `(unseen, seen)` points, sorted by unseen
/// accuracy (ties by seen, descending); percent axes, reported in percent.
pub fn curve_auc(points: &[CurvePoint]) -> f64 {
    let mut pts: Vec<(f64, f64)> = points.iter().map(|p| (p.unseen, p.seen)).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
    pts.windows(2).map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0).sum::<f64>() / 100.0
}

/// Calibration-bias sweep. Each row's correctness changes at a single bias
/// value, so the accuracies are step functions; one bias inside every step
/// (plus one beyond each end) visits every attainable operating point.
pub fn bias_sweep(s: &ScoreMatrix, k: usize) -> Result<MetricsReport> {
    if k == 0 {
        return Err(Error::Config("top-k needs k >= 1".into()));
    }
    let rows = s.scores.rows();
    let rules: Vec<RowRule> = (0..rows).map(|r| row_rule(s, r, k)).collect();
    let seen_rows: Vec<usize> = (0..rows).filter(|&r| !s.row_is_unseen(r)).collect();
    let unseen_rows: Vec<usize> = (0..rows).filter(|&r| s.row_is_unseen(r)).collect();
    let mut warnings = Vec::new();
    if unseen_rows.is_empty() {
        warnings.push(String::from("no rows with an unseen ground truth; unseen metrics are 0"));
    }
    if seen_rows.is_empty() {
        warnings.push(String::from("no rows with a seen ground truth; seen metrics are 0"));
    }

    let mut breaks: Vec<f64> = rules
        .iter()
        .filter_map(|r| match r {
            RowRule::Below(t) | RowRule::Above(t) => Some(*t),
            _ => None,
        })
        .collect();
    breaks.sort_by(f64::total_cmp);
    breaks.dedup();
    let biases: Vec<f64> = if breaks.is_empty() {
        vec![0.0]
    } else {
        let mut b = Vec::with_capacity(breaks.len() + 1);
        b.push(breaks[0] - 1.0);
        b.extend(breaks.windows(2).map(|w| w[0] + (w[1] - w[0]) / 2.0));
        b.push(breaks[breaks.len() - 1] + 1.0);
        b
    };

    let acc = |set: &[usize], b: f64| -> f64 {
        if set.is_empty() {
            0.0
        } else {
            100.0 * set.iter().filter(|&&r| rules[r].correct(b)).count() as f64 / set.len() as f64
        }
    };
    let curve: Vec<CurvePoint> =
        biases.iter().map(|&b| CurvePoint { bias: b, seen: acc(&seen_rows, b), unseen: acc(&unseen_rows, b) }).collect();
    let best_seen = curve.iter().map(|p| p.seen).fold(0.0, f64::max);
    let best_unseen = curve.iter().map(|p| p.unseen).fold(0.0, f64::max);
    let best_hm = curve.iter().map(|p| harmonic_mean(p.seen, p.unseen)).fold(0.0, f64::max);
    Ok(MetricsReport { auc: curve_auc(&curve), best_hm, best_seen, best_unseen, k, curve, warnings })
}

/// Top-k accuracy (percent) of `rows` at a fixed bias, by direct ranking.
pub fn accuracy_at_bias(s: &ScoreMatrix, rows: &[usize], bias: f64, k: usize) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    let correct = rows
        .iter()
        .filter(|&&r| {
            let g = s.gt[r];
            let row = s.scores.row(r);
            let biased = |j: usize| row[j] + if s.unseen[j] { bias } else { 0.0 };
            let sg = biased(g);
            let rank = (0..row.len()).filter(|&j| j != g && beats(biased(j), sg, j, g)).count();
            rank < k
        })
        .count();
    100.0 * correct as f64 / rows.len() as f64
}

/// One ranked retrieval hit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ranked {
    pub index: usize,
    pub score: f64,
}

/// Rows of `items` by descending cosine with `query`; ties keep index order.
pub fn rank_by_cosine(query: &[f64], items: &Matrix, top_n: usize) -> Result<Vec<Ranked>> {
    let mut scored = Vec::with_capacity(items.rows());
    for i in 0..items.rows() {
        let score = cosine(query, items.row(i)).ok_or_else(|| Error::NumericalDomain(format!("zero-norm vector at row {i}")))?;
        scored.push(Ranked { index: i, score });
    }
    scored.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.index.cmp(&b.index)));
    scored.truncate(top_n);
    Ok(scored)
}

/// Image → compositions.
pub fn retrieve_text(f_comp: &[f64], candidates: &Matrix, top_n: usize) -> Result<Vec<Ranked>> {
    rank_by_cosine(f_comp, candidates, top_n)
}

/// Composition → images.
pub fn retrieve_image(pair_embedding: &[f64], images: &Matrix, top_n: usize) -> Result<Vec<Ranked>> {
    rank_by_cosine(pair_embedding, images, top_n)
}

/// Scores every image of `phase` against that phase's candidate pairs.
pub fn score_phase(model: &TridentModel, split: &DatasetSplit, store: &FeatureStore, phase: Phase) -> Result<ScoreMatrix> {
    let pairs = split.phase_pairs(phase);
    if pairs.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    let comps: Vec<Composition> = pairs.iter().map(|p| p.composition()).collect();
    let column = |c: &Composition| comps.iter().position(|x| x == c);
    let idx = split.indices(phase.split());
    let mut gt = Vec::with_capacity(idx.len());
    let mut images = Vec::with_capacity(idx.len());
    for &i in &idx {
        let r = split.record(i);
        gt.push(column(&r.composition()).ok_or_else(|| Error::Schema(format!("{:?} has no candidate column", r.image_id)))?);
        images.push(store.get(&r.image_id)?);
    }
    let emb = if images.is_empty() { Matrix::zeros(0, model.config.comp_dim) } else { model.image_embeddings(&images)? };
    let cand = model.pair_embeddings(&comps)?;
    let tags: Vec<Tag> = pairs.iter().map(|p| p.tag).collect();
    score_candidates(&emb, &cand, gt, &tags)
}

/// Top-1 accuracy (percent) of `split` images over the seen pairs only.
pub fn seen_accuracy(model: &TridentModel, split: &DatasetSplit, store: &FeatureStore, which: crate::data::Split) -> Result<f64> {
    let seen = split.seen_pairs();
    let idx = split.indices(which);
    let mut images = Vec::new();
    let mut gt = Vec::new();
    for &i in &idx {
        let r = split.record(i);
        if let Some(col) = seen.iter().position(|c| *c == r.composition()) {
            images.push(store.get(&r.image_id)?);
            gt.push(col);
        }
    }
    if images.is_empty() {
        return Ok(0.0);
    }
    let emb = model.image_embeddings(&images)?;
    let s = score_candidates(&emb, &model.pair_embeddings(seen)?, gt, &vec![Tag::Seen; seen.len()])?;
    let rows: Vec<usize> = (0..s.scores.rows()).collect();
    Ok(accuracy_at_bias(&s, &rows, 0.0, 1))
}
