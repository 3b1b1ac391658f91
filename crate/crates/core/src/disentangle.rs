//! Shared/exclusive weighting of an image pair's stacked features and the
//! pooled primitive features derived from it.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::autograd::{Graph, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{join, Linear, Mlp, ParamMut, ParamRef, Parameters, Rng};
use crate::tensor::{sigmoid, Matrix};
use crate::vocab::{Composition, Vocabulary, WordId};

/// Which primitive the two images of a pair have in common.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SharedKind {
    Attribute,
    Object,
}

/// Weight perceptrons for both directions plus the fusion layer.
#[derive(Clone, Debug, PartialEq)]
pub struct DisentangleParams {
    pub x2y: Mlp,
    pub y2x: Mlp,
    pub fuse: Linear,
}

impl DisentangleParams {
    pub fn init(config: &ModelConfig, rng: &mut Rng) -> Self {
        let h = config.stacked_features();
        let d = config.feature_dim;
        let hidden = [config.disentangle_hidden];
        Self {
            x2y: Mlp::init(2 * h * d, &hidden, h, rng),
            y2x: Mlp::init(2 * h * d, &hidden, h, rng),
            fuse: Linear::init(2 * d, d, rng),
        }
    }

    /// Stacked-feature count `h` these parameters were built for.
    pub fn stacked_features(&self) -> usize {
        self.x2y.output_dim()
    }

    fn check(&self, fx: &Matrix, fy: &Matrix) -> Result<()> {
        let h = self.stacked_features();
        let d = self.fuse.output_dim();
        if fx.shape() != (h, d) || fy.shape() != (h, d) {
            return Err(Error::Shape(format!(
                "pair features are {:?} and {:?}, expected ({h}, {d}) each",
                fx.shape(),
                fy.shape()
            )));
        }
        Ok(())
    }

    /// Pair features for a batch of `(F_x, F_y)` nodes.
    pub fn forward<'a>(&'a self, g: &mut Graph<'a>, pairs: &[(Var, Var)]) -> Vec<PairVars> {
        if pairs.is_empty() {
            return Vec::new();
        }
        let h = g.value(pairs[0].0).rows();
        let d = g.value(pairs[0].0).cols();
        let flat: Vec<Var> = pairs
            .iter()
            .map(|&(fx, fy)| {
                let both = g.concat_rows(&[fx, fy]);
                g.reshape(both, 1, 2 * h * d)
            })
            .collect();
        let input = g.concat_rows(&flat);
        let sx = self.x2y.forward(g, input);
        let w_x2y = g.sigmoid(sx);
        let sy = self.y2x.forward(g, input);
        let w_y2x = g.sigmoid(sy);
        let e_x2y = g.one_minus(w_x2y);
        let e_y2x = g.one_minus(w_y2x);
        let inv_h = 1.0 / h as f64;
        let pool = |g: &mut Graph<'a>, w: Var, b: usize, f: Var| {
            let row = g.slice_rows(w, b, 1);
            let p = g.matmul(row, f);
            g.scale(p, inv_h)
        };
        let mut out = Vec::with_capacity(pairs.len());
        for (b, &(fx, fy)) in pairs.iter().enumerate() {
            let shared_x2y = pool(g, w_x2y, b, fy);
            let shared_y2x = pool(g, w_y2x, b, fx);
            let excl_x2y = pool(g, e_x2y, b, fy);
            let excl_y2x = pool(g, e_y2x, b, fx);
            let cat = g.concat_cols(&[shared_x2y, shared_y2x]);
            let fused = self.fuse.forward(g, cat);
            out.push(PairVars { shared_x2y, shared_y2x, excl_x2y, excl_y2x, fused });
        }
        out
    }
}

impl Parameters for DisentangleParams {
    fn params<'p>(&'p self, prefix: &str, out: &mut Vec<ParamRef<'p>>) {
        self.x2y.params(&join(prefix, "x2y"), out);
        self.y2x.params(&join(prefix, "y2x"), out);
        self.fuse.params(&join(prefix, "fuse"), out);
    }

    fn params_mut<'p>(&'p mut self, prefix: &str, out: &mut Vec<ParamMut<'p>>) {
        self.x2y.params_mut(&join(prefix, "x2y"), out);
        self.y2x.params_mut(&join(prefix, "y2x"), out);
        self.fuse.params_mut(&join(prefix, "fuse"), out);
    }
}

/// The five `1 × d` features of one pair, as graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct PairVars {
    /// Pooled from `F_y` with the x→y shared weights.
    pub shared_x2y: Var,
    /// Pooled from `F_x` with the y→x shared weights.
    pub shared_y2x: Var,
    pub excl_x2y: Var,
    pub excl_y2x: Var,
    pub fused: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShareWeights {
    pub shared_x2y: Vec<f64>,
    pub shared_y2x: Vec<f64>,
    pub excl_x2y: Vec<f64>,
    pub excl_y2x: Vec<f64>,
}

/// Word ids supervising each feature of a pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Supervision {
    /// The common primitive; labels both shared features and the fused one.
    pub shared: WordId,
    /// The exclusive primitive of image `y`.
    pub excl_x2y: WordId,
    /// The exclusive primitive of image `x`.
    pub excl_y2x: WordId,
}

impl Supervision {
    pub fn new(vocab: &Vocabulary, kind: SharedKind, x: &Composition, y: &Composition) -> Result<Self> {
        let id = |w: &str| vocab.id_or_err(w);
        Ok(match kind {
            SharedKind::Attribute => {
                Supervision { shared: id(&x.attribute)?, excl_x2y: id(&y.object)?, excl_y2x: id(&x.object)? }
            }
            SharedKind::Object => {
                Supervision { shared: id(&x.object)?, excl_x2y: id(&y.attribute)?, excl_y2x: id(&x.attribute)? }
            }
        })
    }
}

/// Plain values of one disentangled pair.
#[derive(Clone, Debug, PartialEq)]
pub struct DisentangledPair {
    pub shared_kind: SharedKind,
    pub shared_x2y: Vec<f64>,
    pub shared_y2x: Vec<f64>,
    pub excl_x2y: Vec<f64>,
    pub excl_y2x: Vec<f64>,
    pub fused: Vec<f64>,
    pub supervision: Supervision,
}

fn flatten_pair(fx: &Matrix, fy: &Matrix) -> Matrix {
    let mut data = fx.as_slice().to_vec();
    data.extend_from_slice(fy.as_slice());
    Matrix::row_vector(data)
}

/// Sigmoid heads over the flattened `[F_x; F_y]`; exclusive weights are the complements.
pub fn compute_share_weights(params: &DisentangleParams, fx: &Matrix, fy: &Matrix) -> Result<ShareWeights> {
    params.check(fx, fy)?;
    let input = flatten_pair(fx, fy);
    let shared_x2y: Vec<f64> = params.x2y.apply(&input).as_slice().iter().map(|&s| sigmoid(s)).collect();
    let shared_y2x: Vec<f64> = params.y2x.apply(&input).as_slice().iter().map(|&s| sigmoid(s)).collect();
    let excl_x2y = shared_x2y.iter().map(|w| 1.0 - w).collect();
    let excl_y2x = shared_y2x.iter().map(|w| 1.0 - w).collect();
    Ok(ShareWeights { shared_x2y, shared_y2x, excl_x2y, excl_y2x })
}

/// `(1/h) Σ_i w_i · F_i`.
pub fn weighted_pool(w: &[f64], f: &Matrix) -> Vec<f64> {
    assert_eq!(w.len(), f.rows(), "one weight per feature row");
    let mut out = vec![0.0; f.cols()];
    for (i, wi) in w.iter().enumerate() {
        for (o, x) in out.iter_mut().zip(f.row(i)) {
            *o += wi * x;
        }
    }
    let h = w.len() as f64;
    out.iter_mut().for_each(|x| *x /= h);
    out
}

/// Fusion layer over `[f_xy | f_yx]`.
pub fn fuse_relative(params: &DisentangleParams, f_xy: &[f64], f_yx: &[f64]) -> Vec<f64> {
    let mut cat = f_xy.to_vec();
    cat.extend_from_slice(f_yx);
    params.fuse.apply(&Matrix::row_vector(cat)).into_vec()
}

pub fn disentangle_pair(
    params: &DisentangleParams,
    fx: &Matrix,
    fy: &Matrix,
    shared_kind: SharedKind,
    supervision: Supervision,
) -> Result<DisentangledPair> {
    let w = compute_share_weights(params, fx, fy)?;
    let shared_x2y = weighted_pool(&w.shared_x2y, fy);
    let shared_y2x = weighted_pool(&w.shared_y2x, fx);
    let fused = fuse_relative(params, &shared_x2y, &shared_y2x);
    Ok(DisentangledPair {
        shared_kind,
        excl_x2y: weighted_pool(&w.excl_x2y, fy),
        excl_y2x: weighted_pool(&w.excl_y2x, fx),
        shared_x2y,
        shared_y2x,
        fused,
        supervision,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{numerical_gradient, relative_error};
    use crate::nn::normal_matrix;
    use alloc::collections::BTreeMap;
    use alloc::string::String;
    use rand::SeedableRng;

    fn config() -> ModelConfig {
        ModelConfig {
            feature_dim: 3,
            word_dim: 3,
            local_features: 2,
            global_features: 1,
            disentangle_hidden: 4,
            ..ModelConfig::default()
        }
    }

    fn zeroed(mut p: DisentangleParams) -> DisentangleParams {
        for l in p.x2y.layers.iter_mut().chain(p.y2x.layers.iter_mut()) {
            *l = Linear::zeros(l.input_dim(), l.output_dim());
        }
        p
    }

    fn rand(r: usize, c: usize, seed: u64) -> Matrix {
        normal_matrix(r, c, 0.0, 1.0, &mut Rng::seed_from_u64(seed))
    }

    #[test]
    fn zero_perceptrons_give_half_weights() {
        let p = zeroed(DisentangleParams::init(&config(), &mut Rng::seed_from_u64(0)));
        let (fx, fy) = (rand(3, 3, 1), rand(3, 3, 2));
        let w = compute_share_weights(&p, &fx, &fy).unwrap();
        assert!(w.shared_x2y.iter().chain(&w.excl_y2x).all(|&x| x == 0.5));
        let sup = Supervision { shared: WordId(0), excl_x2y: WordId(1), excl_y2x: WordId(2) };
        let out = disentangle_pair(&p, &fx, &fy, SharedKind::Attribute, sup).unwrap();
        let half_mean = |f: &Matrix| f.mean_rows().map(|x| 0.5 * x).into_vec();
        let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12);
        assert!(close(&out.shared_x2y, &half_mean(&fy)));
        assert!(close(&out.excl_x2y, &half_mean(&fy)));
        assert!(close(&out.shared_y2x, &half_mean(&fx)));
        assert!(close(&out.excl_y2x, &half_mean(&fx)));
    }

    #[test]
    fn weights_match_flatten_affine_sigmoid_oracle() {
        let c = ModelConfig { disentangle_hidden: 0, ..config() };
        let mut p = DisentangleParams::init(&c, &mut Rng::seed_from_u64(3));
        // A single affine layer makes the oracle a plain matrix-vector product.
        p.x2y.layers = alloc::vec![Linear::init(18, 3, &mut Rng::seed_from_u64(4))];
        let (fx, fy) = (rand(3, 3, 5), rand(3, 3, 6));
        let w = compute_share_weights(&p, &fx, &fy).unwrap();
        let l = &p.x2y.layers[0];
        let flat: Vec<f64> = fx.as_slice().iter().chain(fy.as_slice()).copied().collect();
        for k in 0..3 {
            let s: f64 = (0..18).map(|i| flat[i] * l.weight.get(i, k)).sum::<f64>() + l.bias.get(0, k);
            let oracle = 1.0 / (1.0 + libm::exp(-s));
            assert!((w.shared_x2y[k] - oracle).abs() < 1e-12);
            assert_eq!(w.shared_x2y[k] + w.excl_x2y[k], 1.0);
        }
    }

    #[test]
    fn pooling_cases() {
        let f = Matrix::from_rows(&[alloc::vec![4.0, 0.0], alloc::vec![0.0, 4.0]]);
        assert_eq!(weighted_pool(&[0.25, 0.75], &f), alloc::vec![0.5, 1.5]);
        assert_eq!(weighted_pool(&[1.0, 1.0], &f), f.mean_rows().into_vec());
        assert_eq!(weighted_pool(&[0.0, 0.0], &f), alloc::vec![0.0, 0.0]);
    }

    #[test]
    fn fusion_cases() {
        let mut p = DisentangleParams::init(&config(), &mut Rng::seed_from_u64(7));
        let (a, b) = ([1.0, -2.0, 0.5], [3.0, 0.0, -1.0]);
        let random = fuse_relative(&p, &a, &b);
        for k in 0..3 {
            let mut s = p.fuse.bias.get(0, k);
            for i in 0..3 {
                s += a[i] * p.fuse.weight.get(i, k) + b[i] * p.fuse.weight.get(i + 3, k);
            }
            assert!((random[k] - s).abs() < 1e-12);
        }
        p.fuse = Linear::zeros(6, 3);
        assert_eq!(fuse_relative(&p, &a, &b), alloc::vec![0.0; 3]);
        p.fuse.weight = Matrix::from_fn(6, 3, |i, j| if i == j { 1.0 } else { 0.0 });
        assert_eq!(fuse_relative(&p, &a, &b), a.to_vec());
    }

    #[test]
    fn symmetric_parameters_on_equal_inputs_give_equal_shared_features() {
        let mut p = DisentangleParams::init(&config(), &mut Rng::seed_from_u64(8));
        p.y2x = p.x2y.clone();
        let f = rand(3, 3, 9);
        let sup = Supervision { shared: WordId(0), excl_x2y: WordId(1), excl_y2x: WordId(2) };
        let out = disentangle_pair(&p, &f, &f, SharedKind::Object, sup).unwrap();
        assert_eq!(out.shared_x2y, out.shared_y2x);
    }

    #[test]
    fn supervision_follows_the_source_image() {
        let s = |v: &[&str]| v.iter().map(|x| String::from(*x)).collect::<Vec<_>>();
        let vocab =
            crate::vocab::build_vocabulary(&s(&["ripe", "peeled"]), &s(&["apple", "orange"]), &BTreeMap::new(), 0).unwrap();
        let x = Composition::new("ripe", "apple");
        let y = Composition::new("ripe", "orange");
        let sup = Supervision::new(&vocab, SharedKind::Attribute, &x, &y).unwrap();
        assert_eq!(vocab.word(sup.shared), Some("ripe"));
        assert_eq!(vocab.word(sup.excl_x2y), Some("orange"));
        assert_eq!(vocab.word(sup.excl_y2x), Some("apple"));
    }

    #[test]
    fn graph_matches_plain_and_gradients_check() {
        let c = config();
        let p = DisentangleParams::init(&c, &mut Rng::seed_from_u64(10));
        let (fx, fy) = (rand(3, 3, 11), rand(3, 3, 12));
        let sup = Supervision { shared: WordId(0), excl_x2y: WordId(1), excl_y2x: WordId(2) };
        let plain = disentangle_pair(&p, &fx, &fy, SharedKind::Attribute, sup).unwrap();
        let probe = rand(5, 3, 13);
        let run = |p: &DisentangleParams, fx: &Matrix, fy: &Matrix, grads: bool| {
            let mut g = Graph::new();
            let vx = g.leaf(fx.clone());
            let vy = g.leaf(fy.clone());
            let pv = p.forward(&mut g, &[(vx, vy)])[0];
            let all = g.concat_rows(&[pv.shared_x2y, pv.shared_y2x, pv.excl_x2y, pv.excl_y2x, pv.fused]);
            let values = g.value(all).clone();
            let pr = g.constant(probe.clone());
            let m = g.mul(all, pr);
            let m = g.mul(m, m);
            let out = g.sum(m);
            let mut named = Vec::new();
            if grads {
                let gr = g.backward(out);
                named.push(gr.get(vx).unwrap().clone());
                named.push(gr.get(vy).unwrap().clone());
                let mut list = Vec::new();
                p.params("", &mut list);
                for r in list {
                    named.push(gr.param(r.value).cloned().unwrap());
                }
            }
            (g.scalar(out), values, named)
        };
        let (_, values, analytic) = run(&p, &fx, &fy, true);
        let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12);
        assert!(close(values.row(0), &plain.shared_x2y));
        assert!(close(values.row(3), &plain.excl_y2x));
        assert!(close(values.row(4), &plain.fused));

        let nx = numerical_gradient(&fx, 1e-5, |m| run(&p, m, &fy, false).0);
        assert!(relative_error(&analytic[0], &nx) < 1e-5);
        let ny = numerical_gradient(&fy, 1e-5, |m| run(&p, &fx, m, false).0);
        assert!(relative_error(&analytic[1], &ny) < 1e-5);
        let mut list = Vec::new();
        p.params("", &mut list);
        let bases: Vec<Matrix> = list.iter().map(|r| r.value.clone()).collect();
        for (idx, base) in bases.iter().enumerate() {
            let mut q = p.clone();
            let numeric = numerical_gradient(base, 1e-5, |m| {
                let mut l = Vec::new();
                q.params_mut("", &mut l);
                *l[idx].value = m.clone();
                drop(l);
                run(&q, &fx, &fy, false).0
            });
            let err = relative_error(&analytic[idx + 2], &numeric);
            assert!(err < 1e-5, "param {idx}: {err}");
        }
    }

    #[test]
    fn wrong_shapes_are_rejected() {
        let p = DisentangleParams::init(&config(), &mut Rng::seed_from_u64(0));
        assert!(compute_share_weights(&p, &rand(2, 3, 1), &rand(3, 3, 2)).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn complement_and_norm_bound(seed in 0u64..200, scale in 0.1f64..5.0) {
                let p = DisentangleParams::init(&config(), &mut crate::nn::Rng::seed_from_u64(seed));
                let fx = rand(3, 3, seed + 1).map(|x| x * scale);
                let fy = rand(3, 3, seed + 2).map(|x| x * scale);
                let w = compute_share_weights(&p, &fx, &fy).unwrap();
                for (s, e) in w.shared_x2y.iter().zip(&w.excl_x2y).chain(w.shared_y2x.iter().zip(&w.excl_y2x)) {
                    prop_assert!(*s > 0.0 && *s < 1.0);
                    prop_assert_eq!(s + e, 1.0);
                }
                let max_row = (0..3).map(|i| crate::tensor::l2_norm(fy.row(i))).fold(0.0, f64::max);
                let pooled = weighted_pool(&w.shared_x2y, &fy);
                prop_assert!(crate::tensor::l2_norm(&pooled) <= max_row + 1e-12);
            }
        }
    }
}
